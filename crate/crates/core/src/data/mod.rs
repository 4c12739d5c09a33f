//! Longitudinal datasets: synthetic phantoms, pairing, normalization and
//! volume files.

pub mod dataset;
pub mod export;
pub mod io;
pub mod normalize;
pub mod phantom;

pub use dataset::{
    build_pairs, generate_subjects, load_dataset, split_by_hash, write_dataset, LongitudinalPair, PairRecord,
    Split, Subject, Visit, VolumeRecord,
};
pub use export::write_mid_slice;
pub use io::{read_volume, write_volume};
pub use normalize::{normalize, Normalization};
pub use phantom::{generate_phantom, tissue_voxel_count, PhantomSpec};
