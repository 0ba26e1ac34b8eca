//! Training pair sampling and eval pair listing.
//!
//! Training draws are class-balanced: a fair coin picks real or fake, then a
//! target uniformly within that class, then a reference uniformly among the
//! claimed speaker's real TRAIN clips excluding the target recording. Window
//! offsets into target and reference are drawn independently. Evaluation
//! pairs come straight from the manifest in id order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::dataset::{Dataset, Split};
use super::{id_match_label, Manipulation};

#[derive(Clone, Copy, Debug)]
pub struct TrainExample {
    pub target: u32,
    pub reference: u32,
    /// Segment offset of the target window within its clip.
    pub target_window: usize,
    pub reference_window: usize,
    pub y_fake: u8,
    pub y_id_match: u8,
}

pub struct TrainSampler {
    real: Vec<u32>,
    fake: Vec<u32>,
    /// Real TRAIN clip ids per speaker, indexed by speaker id.
    refs: Vec<Vec<u32>>,
    /// Inclusive upper bound of the window offset per clip.
    max_offset: Vec<usize>,
    claimed: Vec<u16>,
    n_window_segments: usize,
}

impl TrainSampler {
    pub fn new(ds: &Dataset, n_window_segments: usize) -> Result<TrainSampler> {
        let mut real = Vec::new();
        let mut fake = Vec::new();
        let n_speakers = ds
            .records
            .iter()
            .map(|r| r.spec.claimed.max(r.spec.speaker_v).max(r.spec.speaker_a))
            .max()
            .map(|m| m as usize + 1)
            .unwrap_or(0);
        let mut refs: Vec<Vec<u32>> = vec![Vec::new(); n_speakers];
        let mut max_offset = Vec::with_capacity(ds.records.len());
        let mut claimed = Vec::with_capacity(ds.records.len());
        for r in &ds.records {
            let segs = r.spec.duration_segments as usize;
            if segs < n_window_segments {
                return Err(Error::Data {
                    reason: format!(
                        "clip {} has {segs} segments, window needs {n_window_segments}",
                        r.spec.id
                    ),
                });
            }
            max_offset.push(segs - n_window_segments);
            claimed.push(r.spec.claimed);
            if r.split != Split::Train {
                continue;
            }
            if r.spec.manipulation == Manipulation::Real {
                real.push(r.spec.id);
                refs[r.spec.claimed as usize].push(r.spec.id);
            } else {
                fake.push(r.spec.id);
            }
        }
        if real.is_empty() || fake.is_empty() {
            return Err(Error::Data {
                reason: format!(
                    "training needs both classes, got {} real / {} fake clips",
                    real.len(),
                    fake.len()
                ),
            });
        }
        for r in &ds.records {
            if r.split == Split::Train && refs[r.spec.claimed as usize].len() < 2 {
                return Err(Error::Data {
                    reason: format!(
                        "speaker {} has under 2 real training clips",
                        r.spec.claimed
                    ),
                });
            }
        }
        Ok(TrainSampler {
            real,
            fake,
            refs,
            max_offset,
            claimed,
            n_window_segments,
        })
    }

    pub fn n_window_segments(&self) -> usize {
        self.n_window_segments
    }

    pub fn next(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> TrainExample {
        let pool = if rng.gen_bool(0.5) { &self.real } else { &self.fake };
        let target = pool[rng.gen_range(0..pool.len())];
        let candidates = &self.refs[self.claimed[target as usize] as usize];
        let reference = loop {
            let cand = candidates[rng.gen_range(0..candidates.len())];
            if cand != target {
                break cand;
            }
        };
        let rec = &ds.records[target as usize];
        TrainExample {
            target,
            reference,
            target_window: rng.gen_range(0..=self.max_offset[target as usize]),
            reference_window: rng.gen_range(0..=self.max_offset[reference as usize]),
            y_fake: rec.y_fake,
            y_id_match: id_match_label(&rec.spec, &ds.records[reference as usize].spec),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalPair {
    pub target: u32,
    pub reference: u32,
    pub y_fake: u8,
    pub y_id_match: u8,
    pub manipulation: Manipulation,
}

/// Predefined pairs of an eval split, in manifest order.
pub fn eval_pairs(ds: &Dataset, split: Split) -> Result<Vec<EvalPair>> {
    if split == Split::Train {
        return Err(Error::Config {
            reason: "the training split has no predefined pairs".into(),
        });
    }
    let mut out = Vec::new();
    for r in &ds.records {
        if r.split != split {
            continue;
        }
        let reference = r.reference.ok_or_else(|| Error::Data {
            reason: format!("clip {} lacks a predefined reference", r.spec.id),
        })?;
        out.push(EvalPair {
            target: r.spec.id,
            reference,
            y_fake: r.y_fake,
            y_id_match: r.y_id_match.unwrap_or(0),
            manipulation: r.spec.manipulation,
        });
    }
    if out.is_empty() {
        return Err(Error::Data {
            reason: format!("split {split} has no clips"),
        });
    }
    Ok(out)
}
