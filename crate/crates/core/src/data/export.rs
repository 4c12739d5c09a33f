use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Central axial slice as 8-bit grayscale, `[-1, 1]` mapped onto `0..=255`.
pub fn mid_slice_image(volume: &Volume) -> GrayImage {
    let (h, w, values) = volume.mid_axial_slice();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        Luma([((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8])
    })
}

/// Writes the mid slice; the format (PNG or PGM) follows the extension.
pub fn write_mid_slice(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = mid_slice_image(volume);
    let pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let result = if pgm {
        // The generic writer picks PAM for `.pnm`-family paths; ask for P5.
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
    } else {
        img.save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("{}: {other}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_levels() {
        let mut v = Volume::zeros([3, 1, 3]);
        let mid = v.index(1, 0, 0);
        v.voxels_mut()[mid..mid + 3].copy_from_slice(&[-1.0, 0.0, 1.0]);
        let img = mid_slice_image(&v);
        assert_eq!(img.as_raw(), &[0, 128, 255]);
    }

    #[test]
    fn writes_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled([4, 5, 6], 0.5);
        for name in ["a.png", "a.pgm"] {
            let path = dir.path().join(name);
            write_mid_slice(&v, &path).unwrap();
            let back = image::open(&path).unwrap().to_luma8();
            assert_eq!(back.dimensions(), (6, 5));
            assert!(back.pixels().all(|p| p.0[0] == 191));
        }
        assert!(std::fs::read(dir.path().join("a.pgm"))
            .unwrap()
            .starts_with(b"P5"));
    }
}
