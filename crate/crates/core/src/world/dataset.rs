//! Dataset generation, manifest, and loading.
//!
//! A dataset directory holds three files:
//!   manifest.jsonl  meta line, then one clip record per line in id order
//!   dataset.bin     token tensors, entries `clip_{id:06}_v` / `clip_{id:06}_a`
//!   world.bin       frozen world parameters
//!
//! Speakers are split into a seen pool and a held-out pool. Seen speakers'
//! clips land in TRAIN / VAL / TEST_IN; held-out speakers' clips, which may
//! also use held-out manipulation types, all land in TEST_UNSEEN. Every
//! content seed is unique to its clip, so no content leaks across splits.
//! Eval-split records carry a predefined reference clip id; training pairs
//! are drawn at run time by the sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::scalar::derive_seed;

use super::{id_match_label, render_clip, ClipSpec, Manipulation, World, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    TestIn,
    TestUnseen,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "testin" => Ok(Split::TestIn),
            "testunseen" => Ok(Split::TestUnseen),
            _ => Err(Error::Config {
                reason: format!("unknown split {s:?}"),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIn => "test_in",
            Split::TestUnseen => "test_unseen",
        };
        f.write_str(s)
    }
}

/// Fraction of clips per manipulation type. Must sum to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mix {
    #[serde(default)]
    pub real: f64,
    #[serde(default)]
    pub visual_swap: f64,
    #[serde(default)]
    pub audio_swap: f64,
    #[serde(default)]
    pub both_swap: f64,
    #[serde(default)]
    pub desync: f64,
    #[serde(default)]
    pub artifact: f64,
}

impl Mix {
    pub fn fractions(&self) -> [(Manipulation, f64); 6] {
        [
            (Manipulation::Real, self.real),
            (Manipulation::VisualSwap, self.visual_swap),
            (Manipulation::AudioSwap, self.audio_swap),
            (Manipulation::BothSwap, self.both_swap),
            (Manipulation::Desync, self.desync),
            (Manipulation::Artifact, self.artifact),
        ]
    }

    fn validate(&self, name: &str) -> Result<()> {
        let sum: f64 = self.fractions().iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config {
                reason: format!("{name} manipulation mix sums to {sum}, expected 1"),
            });
        }
        if self.fractions().iter().any(|(_, f)| *f < 0.0) {
            return Err(Error::Config {
                reason: format!("{name} manipulation mix has a negative fraction"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    /// Speaker ids excluded from training; their clips form TEST_UNSEEN.
    pub held_out_speakers: Vec<u16>,
    /// Manipulation types absent from seen-speaker clips.
    pub held_out_manipulations: Vec<Manipulation>,
    pub duration_segments: u16,
    /// Mix for seen speakers (no held-out manipulations allowed).
    pub train_mix: Mix,
    /// Mix for held-out speakers.
    pub unseen_mix: Mix,
    /// TRAIN / VAL / TEST_IN shares of each seen speaker's clips.
    pub split_fractions: [f64; 3],
    pub world: WorldConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_speakers: 20,
            clips_per_speaker: 40,
            held_out_speakers: vec![16, 17, 18, 19],
            held_out_manipulations: vec![Manipulation::Desync, Manipulation::Artifact],
            duration_segments: 18,
            train_mix: Mix {
                real: 0.5,
                visual_swap: 0.175,
                audio_swap: 0.175,
                both_swap: 0.15,
                desync: 0.0,
                artifact: 0.0,
            },
            unseen_mix: Mix {
                real: 0.3,
                visual_swap: 0.2,
                audio_swap: 0.2,
                both_swap: 0.175,
                desync: 0.075,
                artifact: 0.05,
            },
            split_fractions: [0.7, 0.1, 0.2],
            world: WorldConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.train_mix.validate("train")?;
        self.unseen_mix.validate("unseen")?;
        let split_sum: f64 = self.split_fractions.iter().sum();
        if (split_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config {
                reason: format!("split fractions sum to {split_sum}, expected 1"),
            });
        }
        for (m, f) in self.train_mix.fractions() {
            if f > 0.0 && self.held_out_manipulations.contains(&m) {
                return Err(Error::Config {
                    reason: format!("held-out manipulation {m:?} appears in the train mix"),
                });
            }
        }
        for &sp in &self.held_out_speakers {
            if sp as usize >= self.n_speakers {
                return Err(Error::Config {
                    reason: format!("held-out speaker {sp} out of range"),
                });
            }
        }
        let n_seen = self.n_speakers - self.held_out_speakers.len();
        let needs_donor = |mix: &Mix| {
            mix.visual_swap > 0.0 || mix.audio_swap > 0.0 || mix.both_swap > 0.0
        };
        if needs_donor(&self.train_mix) && n_seen < 2 {
            return Err(Error::Config {
                reason: "swaps need at least 2 seen speakers".into(),
            });
        }
        if !self.held_out_speakers.is_empty()
            && needs_donor(&self.unseen_mix)
            && self.held_out_speakers.len() < 2
        {
            return Err(Error::Config {
                reason: "held-out swaps need at least 2 held-out speakers".into(),
            });
        }
        if self.duration_segments < 8 {
            return Err(Error::Config {
                reason: format!(
                    "clips need at least 8 segments, got {}",
                    self.duration_segments
                ),
            });
        }
        Ok(())
    }
}

/// One manifest line: the clip spec plus labels, split, the noise seed that
/// reproduces its render, and (for eval splits) the predefined reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    #[serde(flatten)]
    pub spec: ClipSpec,
    pub noise_seed: u64,
    pub split: Split,
    pub y_fake: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_id_match: Option<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub format: u32,
    /// Training pair policy: real and fake targets drawn with equal
    /// probability regardless of raw class counts.
    pub sampling: String,
    pub seed: u64,
    pub n_clips: u32,
}

/// Largest-remainder apportionment of `total` into integer counts.
fn apportion(total: usize, fracs: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = fracs.iter().map(|f| (f * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = fracs[a] * total as f64 - (fracs[a] * total as f64).floor();
        let rb = fracs[b] * total as f64 - (fracs[b] * total as f64).floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

fn pick_donor(rng: &mut ChaCha8Rng, pool: &[u16], not: u16) -> u16 {
    loop {
        let d = pool[rng.gen_range(0..pool.len())];
        if d != not {
            return d;
        }
    }
}

fn make_spec(
    id: u32,
    claimed: u16,
    manip: Manipulation,
    donor_pool: &[u16],
    duration_segments: u16,
    content_seed: u64,
    rng: &mut ChaCha8Rng,
) -> ClipSpec {
    let (speaker_v, speaker_a, shift) = match manip {
        Manipulation::Real | Manipulation::Artifact => (claimed, claimed, 0i8),
        Manipulation::Desync => {
            let mag = if rng.gen_bool(0.5) { 1i8 } else { 2 };
            let sign = if rng.gen_bool(0.5) { 1i8 } else { -1 };
            (claimed, claimed, mag * sign)
        }
        Manipulation::VisualSwap => (pick_donor(rng, donor_pool, claimed), claimed, 0),
        Manipulation::AudioSwap => (claimed, pick_donor(rng, donor_pool, claimed), 0),
        Manipulation::BothSwap => {
            let d = pick_donor(rng, donor_pool, claimed);
            (d, d, 0)
        }
    };
    ClipSpec {
        id,
        claimed,
        speaker_v,
        speaker_a,
        content_seed,
        desync_shift: shift,
        manipulation: manip,
        duration_segments,
    }
}

/// Generate a dataset into `dir`. Deterministic under `cfg.seed`: the same
/// config produces byte-identical files.
pub fn generate(cfg: &DataConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let world = World::generate(derive_seed(cfg.seed, "world", 0), cfg.n_speakers, cfg.world.clone());

    let seen: Vec<u16> = (0..cfg.n_speakers as u16)
        .filter(|s| !cfg.held_out_speakers.contains(s))
        .collect();

    let mut spec_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "specs", 0));
    let mut records: Vec<ClipRecord> = Vec::new();
    let mut next_id = 0u32;

    let mut emit = |claimed: u16,
                    manip: Manipulation,
                    split: Split,
                    pool: &[u16],
                    records: &mut Vec<ClipRecord>,
                    rng: &mut ChaCha8Rng| {
        let id = next_id;
        next_id += 1;
        let spec = make_spec(
            id,
            claimed,
            manip,
            pool,
            cfg.duration_segments,
            derive_seed(cfg.seed, "content", id as u64),
            rng,
        );
        records.push(ClipRecord {
            y_fake: spec.y_fake(),
            spec,
            noise_seed: derive_seed(cfg.seed, "noise", id as u64),
            split,
            reference: None,
            y_id_match: None,
        });
    };

    // Seen speakers: apportion the mix per speaker, then split each
    // manipulation's clips across TRAIN / VAL / TEST_IN.
    for &sp in &seen {
        let fracs: Vec<f64> = cfg.train_mix.fractions().iter().map(|(_, f)| *f).collect();
        let counts = apportion(cfg.clips_per_speaker, &fracs);
        for (mi, (manip, _)) in cfg.train_mix.fractions().iter().enumerate() {
            let by_split = apportion(counts[mi], &cfg.split_fractions);
            let splits = [Split::Train, Split::Val, Split::TestIn];
            for (si, &n) in by_split.iter().enumerate() {
                for _ in 0..n {
                    emit(sp, *manip, splits[si], &seen, &mut records, &mut spec_rng);
                }
            }
        }
    }

    // Held-out speakers: everything is TEST_UNSEEN; donors come from the
    // held-out pool so swap donors are unseen too.
    for &sp in &cfg.held_out_speakers {
        let fracs: Vec<f64> = cfg.unseen_mix.fractions().iter().map(|(_, f)| *f).collect();
        let counts = apportion(cfg.clips_per_speaker, &fracs);
        for (mi, (manip, _)) in cfg.unseen_mix.fractions().iter().enumerate() {
            for _ in 0..counts[mi] {
                emit(
                    sp,
                    *manip,
                    Split::TestUnseen,
                    &cfg.held_out_speakers,
                    &mut records,
                    &mut spec_rng,
                );
            }
        }
    }

    // Reference availability: any split that contains a speaker's clips must
    // offer that speaker at least two real recordings to pair against.
    let mut real_count: BTreeMap<(u16, Split), usize> = BTreeMap::new();
    let mut populated: BTreeMap<(u16, Split), ()> = BTreeMap::new();
    for r in &records {
        populated.insert((r.spec.claimed, r.split), ());
        if r.spec.manipulation == Manipulation::Real {
            *real_count.entry((r.spec.claimed, r.split)).or_insert(0) += 1;
        }
    }
    for ((sp, split), _) in &populated {
        let n = real_count.get(&(*sp, *split)).copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::Data {
                reason: format!(
                    "speaker {sp} has {n} real clips in split {split}, need at least 2"
                ),
            });
        }
    }

    // Predefined eval pairs: reference is a real clip of the claimed speaker
    // from the same split, never the target recording itself.
    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pairs", 0));
    let mut real_ids: BTreeMap<(u16, Split), Vec<u32>> = BTreeMap::new();
    for r in &records {
        if r.spec.manipulation == Manipulation::Real {
            real_ids
                .entry((r.spec.claimed, r.split))
                .or_default()
                .push(r.spec.id);
        }
    }
    let specs: Vec<ClipSpec> = records.iter().map(|r| r.spec.clone()).collect();
    for r in records.iter_mut() {
        if r.split == Split::Train {
            continue;
        }
        let pool = &real_ids[&(r.spec.claimed, r.split)];
        let ref_id = loop {
            let cand = pool[pair_rng.gen_range(0..pool.len())];
            if cand != r.spec.id {
                break cand;
            }
        };
        r.reference = Some(ref_id);
        r.y_id_match = Some(id_match_label(&r.spec, &specs[ref_id as usize]));
    }

    // Render and write.
    world.save(&dir.join("world.bin"))?;
    let mut entries: Vec<Entry> = Vec::with_capacity(records.len() * 2);
    for r in &records {
        let rendered = render_clip(&world, &r.spec, r.noise_seed)?;
        let n = r.spec.duration_segments as usize;
        entries.push(Entry::new(
            format!("clip_{:06}_v", r.spec.id),
            vec![n * world.cfg.t_v, world.cfg.d_raw],
            rendered.visual,
        ));
        entries.push(Entry::new(
            format!("clip_{:06}_a", r.spec.id),
            vec![n * world.cfg.t_a, world.cfg.d_raw],
            rendered.audio,
        ));
    }
    container::write(&dir.join("dataset.bin"), &entries)?;

    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    let meta = ManifestMeta {
        format: 1,
        sampling: "balanced-50-50".into(),
        seed: cfg.seed,
        n_clips: records.len() as u32,
    };
    writeln!(manifest, "{}", serde_json::to_string(&meta)?)?;
    for r in &records {
        writeln!(manifest, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Token tensors of one clip, `[duration_segments * tokens_per_seg, d_raw]`.
pub struct ClipTokens {
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

pub struct Dataset {
    pub meta: ManifestMeta,
    pub records: Vec<ClipRecord>,
    pub clips: Vec<ClipTokens>,
    pub world_cfg: WorldConfig,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = std::fs::File::open(dir.join("manifest.jsonl"))?;
        let mut lines = BufReader::new(manifest).lines();
        let meta_line = lines.next().ok_or_else(|| Error::Data {
            reason: "manifest is empty".into(),
        })??;
        let meta: ManifestMeta = serde_json::from_str(&meta_line)?;
        let mut records: Vec<ClipRecord> = Vec::with_capacity(meta.n_clips as usize);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        if records.len() != meta.n_clips as usize {
            return Err(Error::Data {
                reason: format!(
                    "manifest lists {} clips, meta says {}",
                    records.len(),
                    meta.n_clips
                ),
            });
        }
        for (i, r) in records.iter().enumerate() {
            if r.spec.id as usize != i {
                return Err(Error::Data {
                    reason: format!("manifest ids not dense at position {i}"),
                });
            }
            r.spec.validate()?;
        }

        let world_cfg = World::load(&dir.join("world.bin"))?.cfg;
        let bin = container::read(&dir.join("dataset.bin"))?;
        let mut by_name: BTreeMap<&str, &Entry> = BTreeMap::new();
        for e in &bin {
            by_name.insert(e.name.as_str(), e);
        }
        let mut clips = Vec::with_capacity(records.len());
        for r in &records {
            let fetch = |suffix: &str, rows: usize| -> Result<Vec<f32>> {
                let name = format!("clip_{:06}_{suffix}", r.spec.id);
                let e = by_name.get(name.as_str()).ok_or_else(|| Error::Data {
                    reason: format!("dataset.bin lacks {name}"),
                })?;
                if e.shape != [rows, world_cfg.d_raw] {
                    return Err(Error::Data {
                        reason: format!("{name} has shape {:?}", e.shape),
                    });
                }
                Ok(e.data.clone())
            };
            let n = r.spec.duration_segments as usize;
            clips.push(ClipTokens {
                visual: fetch("v", n * world_cfg.t_v)?,
                audio: fetch("a", n * world_cfg.t_a)?,
            });
        }
        Ok(Dataset {
            meta,
            records,
            clips,
            world_cfg,
        })
    }

    pub fn split_ids(&self, split: Split) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.spec.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DataConfig {
        DataConfig {
            seed: 11,
            n_speakers: 5,
            clips_per_speaker: 20,
            held_out_speakers: vec![3, 4],
            duration_segments: 10,
            split_fractions: [0.6, 0.2, 0.2],
            ..DataConfig::default()
        }
    }

    #[test]
    fn apportion_is_exact_and_deterministic() {
        assert_eq!(apportion(40, &[0.5, 0.175, 0.175, 0.15, 0.0, 0.0]), vec![20, 7, 7, 6, 0, 0]);
        assert_eq!(apportion(40, &[0.3, 0.2, 0.2, 0.175, 0.075, 0.05]), vec![12, 8, 8, 7, 3, 2]);
        assert_eq!(apportion(7, &[0.7, 0.1, 0.2]), vec![5, 1, 1]);
        assert_eq!(apportion(20, &[0.7, 0.1, 0.2]), vec![14, 2, 4]);
    }

    #[test]
    fn generated_dataset_respects_split_discipline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 100);

        let mut content_seeds = std::collections::HashSet::new();
        for r in &ds.records {
            assert!(content_seeds.insert(r.spec.content_seed), "content seed reused");
            let held_speaker = cfg.held_out_speakers.contains(&r.spec.claimed);
            match r.split {
                Split::TestUnseen => assert!(held_speaker),
                _ => {
                    assert!(!held_speaker);
                    assert!(!cfg.held_out_manipulations.contains(&r.spec.manipulation));
                    // donors for seen-speaker fakes stay in the seen pool
                    for sp in [r.spec.speaker_v, r.spec.speaker_a] {
                        assert!(!cfg.held_out_speakers.contains(&sp));
                    }
                }
            }
            if r.split == Split::Train {
                assert!(r.reference.is_none());
            } else {
                let ref_id = r.reference.expect("eval clip must carry a reference") as usize;
                let ref_rec = &ds.records[ref_id];
                assert_eq!(ref_rec.spec.manipulation, Manipulation::Real);
                assert_eq!(ref_rec.split, r.split);
                assert_eq!(ref_rec.spec.claimed, r.spec.claimed);
                assert_ne!(ref_rec.spec.id, r.spec.id);
                let want = id_match_label(&r.spec, &ref_rec.spec);
                assert_eq!(r.y_id_match, Some(want));
            }
        }
        // both classes present in every eval split
        for split in [Split::Val, Split::TestIn, Split::TestUnseen] {
            let ids = ds.split_ids(split);
            assert!(ids.iter().any(|&i| ds.records[i as usize].y_fake == 1));
            assert!(ids.iter().any(|&i| ds.records[i as usize].y_fake == 0));
        }
    }

    #[test]
    fn generation_is_byte_identical_under_a_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        generate(&cfg, d1.path()).unwrap();
        generate(&cfg, d2.path()).unwrap();
        for name in ["manifest.jsonl", "dataset.bin", "world.bin"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn tensors_match_rerender_from_world_file() {
        let dir = tempfile::tempdir().unwrap();
        generate(&tiny_config(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let world = World::load(&dir.path().join("world.bin")).unwrap();
        for r in ds.records.iter().step_by(17) {
            let again = render_clip(&world, &r.spec, r.noise_seed).unwrap();
            let got = &ds.clips[r.spec.id as usize];
            assert_eq!(got.visual, again.visual);
            assert_eq!(got.audio, again.audio);
        }
    }

    #[test]
    fn bad_mix_is_rejected() {
        let mut cfg = tiny_config();
        cfg.train_mix.real = 0.6;
        assert!(matches!(generate(&cfg, Path::new("/nonexistent")), Err(Error::Config { .. })));

        let mut cfg2 = tiny_config();
        cfg2.train_mix = Mix {
            real: 0.5,
            visual_swap: 0.2,
            audio_swap: 0.1,
            both_swap: 0.1,
            desync: 0.1,
            artifact: 0.0,
        };
        // desync is held out by default
        assert!(generate(&cfg2, Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn too_few_real_clips_fails_at_build_time() {
        let mut cfg = tiny_config();
        // VAL gets ~5% of a speaker's clips; with real=0.2 of 20 clips the
        // VAL split ends up with real < 2 for some speaker.
        cfg.train_mix = Mix {
            real: 0.2,
            visual_swap: 0.3,
            audio_swap: 0.3,
            both_swap: 0.2,
            desync: 0.0,
            artifact: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = generate(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "got {err:?}");
    }
}
