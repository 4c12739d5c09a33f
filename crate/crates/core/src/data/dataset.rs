//! Subjects, longitudinal pairs, the subject split and on-disk datasets.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{read_volume, write_volume};
use super::phantom::{generate_phantom, PhantomSpec};
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DATASET_MANIFEST: &str = "dataset.jsonl";
pub const PAIRS_LISTING: &str = "pairs.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    /// Years since the first scan schedule slot; consecutive visits are one
    /// year apart.
    pub index: u32,
    pub volume: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl Subject {
    pub fn new(id: impl Into<String>, visits: Vec<Visit>) -> Result<Self> {
        let subject = Self {
            id: id.into(),
            visits,
        };
        subject.validate()?;
        Ok(subject)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visits.len() < 2 {
            return Err(Error::TooFewVisits(self.id.clone()));
        }
        if self.visits.windows(2).any(|w| w[1].index <= w[0].index) {
            return Err(Error::InvalidArgument(format!(
                "subject `{}` has visit indices that are not strictly increasing",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalPair {
    pub source: Volume,
    pub target: Volume,
    /// Elapsed years between source and target.
    pub delta: f64,
    pub subject_id: String,
}

/// One pair per follow-up visit, each sourced from the subject's first visit.
pub fn build_pairs(subjects: &[Subject]) -> Result<Vec<LongitudinalPair>> {
    let mut pairs = Vec::new();
    for subject in subjects {
        subject.validate()?;
        let first = &subject.visits[0];
        for follow_up in &subject.visits[1..] {
            pairs.push(LongitudinalPair {
                source: first.volume.clone(),
                target: follow_up.volume.clone(),
                delta: f64::from(follow_up.index - first.index),
                subject_id: subject.id.clone(),
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

fn id_digest(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// Orders subjects by the SHA-256 of their id and holds out the last
/// `eval_count`. Stable under reordering of `ids`.
pub fn split_by_hash(ids: &[String], eval_count: usize) -> Result<Split> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate subject ids".into()));
    }
    if eval_count > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {eval_count} of {} subjects",
            ids.len()
        )));
    }
    let mut keyed: Vec<([u8; 32], &String)> = ids.iter().map(|id| (id_digest(id), id)).collect();
    keyed.sort();
    let cut = ids.len() - eval_count;
    let split = Split {
        train: keyed[..cut].iter().map(|(_, id)| (*id).clone()).collect(),
        eval: keyed[cut..].iter().map(|(_, id)| (*id).clone()).collect(),
    };
    let train: BTreeSet<&String> = split.train.iter().collect();
    if split.eval.iter().any(|id| train.contains(id)) {
        return Err(Error::InvalidArgument("subject appears in both splits".into()));
    }
    Ok(split)
}

pub fn subject_id(index: usize) -> String {
    format!("subject-{index:04}")
}

/// Phantom subjects whose visits `0..visits` are the same jittered spec at
/// ages `0, 1, ..`. Subject `i` draws its jitter from stream `i` of `seed`.
pub fn generate_subjects(
    spec: &PhantomSpec,
    n_subjects: usize,
    visits: usize,
    seed: u64,
) -> Result<Vec<Subject>> {
    spec.validate()?;
    if visits < 2 {
        return Err(Error::Config(format!(
            "each subject needs at least two visits, got {visits}"
        )));
    }
    if (visits - 1) as f64 > spec.horizon_years {
        return Err(Error::Config(format!(
            "{visits} yearly visits exceed the phantom horizon of {} years",
            spec.horizon_years
        )));
    }
    (0..n_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let subject_spec = spec.jittered(&mut rng);
            let visits = (0..visits as u32)
                .map(|index| {
                    Ok(Visit {
                        index,
                        volume: generate_phantom(&subject_spec, f64::from(index))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Subject::new(subject_id(i), visits)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject: String,
    pub visit: u32,
    /// Relative to the dataset directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub subject: String,
    pub source: String,
    pub target: String,
    pub delta: f64,
}

pub fn volume_file_name(subject: &str, visit: u32) -> String {
    format!("{subject}/visit-{visit:02}.lvol")
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::CorruptHeader(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(records)
}

/// Writes every visit as LVOL plus the volume manifest and pair listing.
pub fn write_dataset(dir: &Path, subjects: &[Subject]) -> Result<Vec<VolumeRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for subject in subjects {
        subject.validate()?;
        fs::create_dir_all(dir.join(&subject.id))?;
        for visit in &subject.visits {
            let path = volume_file_name(&subject.id, visit.index);
            write_volume(dir.join(&path), &visit.volume)?;
            records.push(VolumeRecord {
                subject: subject.id.clone(),
                visit: visit.index,
                path,
            });
        }
        let first = &subject.visits[0];
        for follow_up in &subject.visits[1..] {
            pairs.push(PairRecord {
                subject: subject.id.clone(),
                source: volume_file_name(&subject.id, first.index),
                target: volume_file_name(&subject.id, follow_up.index),
                delta: f64::from(follow_up.index - first.index),
            });
        }
    }
    write_jsonl(&dir.join(DATASET_MANIFEST), &records)?;
    write_jsonl(&dir.join(PAIRS_LISTING), &pairs)?;
    Ok(records)
}

/// Reads a dataset written by [`write_dataset`], grouping visits by subject
/// in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>> {
    let records: Vec<VolumeRecord> = read_jsonl(&dir.join(DATASET_MANIFEST))?;
    let mut subjects: Vec<Subject> = Vec::new();
    for r in records {
        let volume = read_volume(resolve(dir, &r.path))?;
        let visit = Visit {
            index: r.visit,
            volume,
        };
        match subjects.last_mut() {
            Some(s) if s.id == r.subject => s.visits.push(visit),
            _ => subjects.push(Subject {
                id: r.subject,
                visits: vec![visit],
            }),
        }
    }
    let mut seen = BTreeSet::new();
    for s in &mut subjects {
        if !seen.insert(s.id.clone()) {
            return Err(Error::CorruptHeader(format!(
                "subject `{}` is not contiguous in the manifest",
                s.id
            )));
        }
        s.visits.sort_by_key(|v| v.index);
        s.validate()?;
    }
    Ok(subjects)
}

fn resolve(dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}
