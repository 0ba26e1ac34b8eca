//! Synthetic identity world.
//!
//! Each speaker is a fixed unit latent `z`. A clip renders `z` through frozen
//! per-modality projections, adds a smooth content process shared by both
//! modalities, and corrupts with Gaussian noise. Manipulations re-render one
//! or both streams from a donor identity, shift the audio content in time,
//! or stamp a periodic pattern onto the visual tokens. Since identity,
//! content, and noise have comparable per-coordinate scale, none of these is
//! separable without learning.
//!
//! All world parameters are rounded through f32 at generation time, so the
//! f32 world file reproduces renders bit-exactly.

pub mod dataset;
pub mod sampler;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, Entry};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Manipulation {
    Real,
    VisualSwap,
    AudioSwap,
    BothSwap,
    Desync,
    Artifact,
}

impl Manipulation {
    pub const ALL: [Manipulation; 6] = [
        Manipulation::Real,
        Manipulation::VisualSwap,
        Manipulation::AudioSwap,
        Manipulation::BothSwap,
        Manipulation::Desync,
        Manipulation::Artifact,
    ];

    pub fn is_fake(self) -> bool {
        self != Manipulation::Real
    }

    pub fn name(self) -> &'static str {
        match self {
            Manipulation::Real => "Real",
            Manipulation::VisualSwap => "VisualSwap",
            Manipulation::AudioSwap => "AudioSwap",
            Manipulation::BothSwap => "BothSwap",
            Manipulation::Desync => "Desync",
            Manipulation::Artifact => "Artifact",
        }
    }
}

/// One recording. `claimed` is the identity the clip purports to show; the
/// `speaker_v`/`speaker_a` fields are the identities actually rendered into
/// each stream. For swaps the rendered identity differs from the claimed one
/// in the swapped stream(s); a both-stream swap uses a single donor, so the
/// clip is internally consistent and only comparison against reference
/// material of the claimed speaker can expose it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipSpec {
    pub id: u32,
    pub claimed: u16,
    pub speaker_v: u16,
    pub speaker_a: u16,
    pub content_seed: u64,
    pub desync_shift: i8,
    pub manipulation: Manipulation,
    pub duration_segments: u16,
}

impl ClipSpec {
    /// Check that the spec exhibits exactly its manipulation's defining
    /// inconsistency and nothing else.
    pub fn validate(&self) -> Result<()> {
        use Manipulation::*;
        let same = |a: u16, b: u16| a == b;
        let ok = match self.manipulation {
            Real | Artifact => {
                same(self.speaker_v, self.claimed)
                    && same(self.speaker_a, self.claimed)
                    && self.desync_shift == 0
            }
            Desync => {
                same(self.speaker_v, self.claimed)
                    && same(self.speaker_a, self.claimed)
                    && matches!(self.desync_shift, -2 | -1 | 1 | 2)
            }
            VisualSwap => {
                !same(self.speaker_v, self.claimed)
                    && same(self.speaker_a, self.claimed)
                    && self.desync_shift == 0
            }
            AudioSwap => {
                same(self.speaker_v, self.claimed)
                    && !same(self.speaker_a, self.claimed)
                    && self.desync_shift == 0
            }
            BothSwap => {
                same(self.speaker_v, self.speaker_a)
                    && !same(self.speaker_v, self.claimed)
                    && self.desync_shift == 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data {
                reason: format!(
                    "clip {}: fields inconsistent with manipulation {:?}",
                    self.id, self.manipulation
                ),
            })
        }
    }

    pub fn y_fake(&self) -> u8 {
        self.manipulation.is_fake() as u8
    }
}

/// Identity-match label for a (target, reference) pair: positive only for a
/// genuine target of the same claimed identity on a distinct recording.
pub fn id_match_label(target: &ClipSpec, reference: &ClipSpec) -> u8 {
    (target.manipulation == Manipulation::Real
        && target.claimed == reference.claimed
        && target.id != reference.id) as u8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d_id: usize,
    pub d_raw: usize,
    pub t_v: usize,
    pub t_a: usize,
    pub sigma: f64,
    pub content_amp: f64,
    pub n_waves: usize,
    pub artifact_amp: f64,
    pub artifact_every: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            d_id: 16,
            d_raw: 32,
            t_v: 4,
            t_a: 6,
            sigma: 0.1,
            content_amp: 1.0,
            n_waves: 4,
            artifact_amp: 0.3,
            artifact_every: 4,
        }
    }
}

/// Frozen world parameters. Rows of the projections, wave directions, and
/// speaker latents are unit vectors; every stored float is exactly
/// representable in f32.
pub struct World {
    pub cfg: WorldConfig,
    pub proj_v: Vec<f64>,
    pub proj_a: Vec<f64>,
    pub wave_dir_v: Vec<f64>,
    pub wave_dir_a: Vec<f64>,
    pub artifact: Vec<f64>,
    pub speakers: Vec<Vec<f64>>,
}

fn round_f32(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
        out.extend(row);
    }
    out
}

impl World {
    pub fn generate(seed: u64, n_speakers: usize, cfg: WorldConfig) -> Self {
        let mut cfg = cfg;
        cfg.sigma = cfg.sigma as f32 as f64;
        cfg.content_amp = cfg.content_amp as f32 as f64;
        cfg.artifact_amp = cfg.artifact_amp as f32 as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj_v = unit_rows(&mut rng, cfg.d_raw, cfg.d_id);
        let mut proj_a = unit_rows(&mut rng, cfg.d_raw, cfg.d_id);
        let mut wave_dir_v = unit_rows(&mut rng, cfg.n_waves, cfg.d_raw);
        let mut wave_dir_a = unit_rows(&mut rng, cfg.n_waves, cfg.d_raw);
        let mut artifact: Vec<f64> = (0..cfg.d_raw)
            .map(|_| if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let mut speakers: Vec<Vec<f64>> = (0..n_speakers)
            .map(|_| unit_rows(&mut rng, 1, cfg.d_id))
            .collect();
        round_f32(&mut proj_v);
        round_f32(&mut proj_a);
        round_f32(&mut wave_dir_v);
        round_f32(&mut wave_dir_a);
        round_f32(&mut artifact);
        for s in speakers.iter_mut() {
            round_f32(s);
        }
        World {
            cfg,
            proj_v,
            proj_a,
            wave_dir_v,
            wave_dir_a,
            artifact,
            speakers,
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Identity component of one modality: `P · z`, a `d_raw` vector.
    pub fn identity_profile(&self, proj: &[f64], speaker: u16) -> Vec<f64> {
        let z = &self.speakers[speaker as usize];
        let (rows, cols) = (self.cfg.d_raw, self.cfg.d_id);
        (0..rows)
            .map(|r| (0..cols).map(|c| proj[r * cols + c] * z[c]).sum())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.cfg;
        let meta = vec![
            c.d_id as f32,
            c.d_raw as f32,
            c.t_v as f32,
            c.t_a as f32,
            c.sigma as f32,
            c.content_amp as f32,
            c.n_waves as f32,
            c.artifact_amp as f32,
            c.artifact_every as f32,
        ];
        let f32s = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        let mut speakers_flat = Vec::with_capacity(self.speakers.len() * c.d_id);
        for s in &self.speakers {
            speakers_flat.extend(s.iter().map(|x| *x as f32));
        }
        container::write(
            path,
            &[
                Entry::new("meta", vec![meta.len()], meta),
                Entry::new("proj_v", vec![c.d_raw, c.d_id], f32s(&self.proj_v)),
                Entry::new("proj_a", vec![c.d_raw, c.d_id], f32s(&self.proj_a)),
                Entry::new("wave_dir_v", vec![c.n_waves, c.d_raw], f32s(&self.wave_dir_v)),
                Entry::new("wave_dir_a", vec![c.n_waves, c.d_raw], f32s(&self.wave_dir_a)),
                Entry::new("artifact", vec![c.d_raw], f32s(&self.artifact)),
                Entry::new(
                    "speakers",
                    vec![self.speakers.len(), c.d_id],
                    speakers_flat,
                ),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = container::read(path)?;
        let find = |name: &str| -> Result<&Entry> {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Container {
                    reason: format!("world file lacks entry {name}"),
                })
        };
        let meta = &find("meta")?.data;
        if meta.len() != 9 {
            return Err(Error::Container {
                reason: format!("world meta has {} fields, expected 9", meta.len()),
            });
        }
        let cfg = WorldConfig {
            d_id: meta[0] as usize,
            d_raw: meta[1] as usize,
            t_v: meta[2] as usize,
            t_a: meta[3] as usize,
            sigma: meta[4] as f64,
            content_amp: meta[5] as f64,
            n_waves: meta[6] as usize,
            artifact_amp: meta[7] as f64,
            artifact_every: meta[8] as usize,
        };
        let f64s = |e: &Entry| e.data.iter().map(|x| *x as f64).collect::<Vec<f64>>();
        let speakers_e = find("speakers")?;
        let n = speakers_e.shape[0];
        let speakers = (0..n)
            .map(|i| {
                speakers_e.data[i * cfg.d_id..(i + 1) * cfg.d_id]
                    .iter()
                    .map(|x| *x as f64)
                    .collect()
            })
            .collect();
        Ok(World {
            proj_v: f64s(find("proj_v")?),
            proj_a: f64s(find("proj_a")?),
            wave_dir_v: f64s(find("wave_dir_v")?),
            wave_dir_a: f64s(find("wave_dir_a")?),
            artifact: f64s(find("artifact")?),
            speakers,
            cfg,
        })
    }
}

/// Token tensors of one rendered clip, row-major `[tokens, d_raw]`.
pub struct RenderedClip {
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

/// Wave parameters drawn from a content seed: shared across modalities,
/// rendered along per-modality directions.
struct ContentWaves {
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl ContentWaves {
    fn from_seed(seed: u64, n_waves: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = (0..n_waves)
            .map(|_| rng.gen_range(std::f64::consts::FRAC_PI_2..std::f64::consts::TAU))
            .collect();
        let phase = (0..n_waves)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        ContentWaves { omega, phase }
    }

    /// Content vector at continuous segment position `pos`, projected onto
    /// modality wave directions `dirs` (`n_waves x d_raw`).
    fn value_into(&self, dirs: &[f64], d_raw: usize, amp: f64, pos: f64, out: &mut [f64]) {
        for (i, (&w, &ph)) in self.omega.iter().zip(&self.phase).enumerate() {
            let s = amp * (w * pos + ph).sin();
            for c in 0..d_raw {
                out[c] += s * dirs[i * d_raw + c];
            }
        }
    }
}

/// Render a clip. Time is measured in stored segments: consecutive segments
/// overlap by half a duration, so segment `s` starts at position `s * 0.5`
/// duration units; a desync of `k` shifts the audio content by `k` stored
/// segments while identity and noise stay put.
pub fn render_clip(world: &World, spec: &ClipSpec, noise_seed: u64) -> Result<RenderedClip> {
    spec.validate()?;
    let c = &world.cfg;
    for sp in [spec.claimed, spec.speaker_v, spec.speaker_a] {
        if sp as usize >= world.n_speakers() {
            return Err(Error::Data {
                reason: format!("clip {}: unknown speaker {sp}", spec.id),
            });
        }
    }
    let n_seg = spec.duration_segments as usize;
    let waves = ContentWaves::from_seed(spec.content_seed, c.n_waves);
    let id_v = world.identity_profile(&world.proj_v, spec.speaker_v);
    let id_a = world.identity_profile(&world.proj_a, spec.speaker_a);
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);

    let render = |tokens_per_seg: usize,
                      id: &[f64],
                      dirs: &[f64],
                      shift: f64,
                      noise: &mut ChaCha8Rng|
     -> Vec<f32> {
        let mut out = Vec::with_capacity(n_seg * tokens_per_seg * c.d_raw);
        let mut tok = vec![0.0f64; c.d_raw];
        for s in 0..n_seg {
            for j in 0..tokens_per_seg {
                let pos = s as f64 + (j as f64 + 0.5) / tokens_per_seg as f64 + shift;
                tok.copy_from_slice(id);
                waves.value_into(dirs, c.d_raw, c.content_amp, pos, &mut tok);
                for v in tok.iter_mut() {
                    let e: f64 = noise.sample(StandardNormal);
                    *v += c.sigma * e;
                }
                out.extend(tok.iter().map(|v| *v as f32));
            }
        }
        out
    };

    let mut visual = render(c.t_v, &id_v, &world.wave_dir_v, 0.0, &mut noise);
    let audio = render(
        c.t_a,
        &id_a,
        &world.wave_dir_a,
        spec.desync_shift as f64,
        &mut noise,
    );

    if spec.manipulation == Manipulation::Artifact {
        let n_tokens = n_seg * c.t_v;
        for t in (0..n_tokens).step_by(c.artifact_every) {
            for ch in 0..c.d_raw {
                let idx = t * c.d_raw + ch;
                visual[idx] =
                    (visual[idx] as f64 + c.artifact_amp * world.artifact[ch]) as f32;
            }
        }
    }

    Ok(RenderedClip { visual, audio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::generate(77, 6, WorldConfig::default())
    }

    fn spec(manip: Manipulation, claimed: u16, v: u16, a: u16, shift: i8) -> ClipSpec {
        ClipSpec {
            id: 0,
            claimed,
            speaker_v: v,
            speaker_a: a,
            content_seed: 1234,
            desync_shift: shift,
            manipulation: manip,
            duration_segments: 18,
        }
    }

    fn time_avg(tokens: &[f32], d_raw: usize) -> Vec<f64> {
        let n = tokens.len() / d_raw;
        let mut avg = vec![0.0f64; d_raw];
        for t in 0..n {
            for c in 0..d_raw {
                avg[c] += tokens[t * d_raw + c] as f64;
            }
        }
        for v in avg.iter_mut() {
            *v /= n as f64;
        }
        avg
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn identity_persists_across_noise_draws() {
        let w = world();
        let s = spec(Manipulation::Real, 2, 2, 2, 0);
        let r1 = render_clip(&w, &s, 100).unwrap();
        let r2 = render_clip(&w, &s, 200).unwrap();
        let c = cosine(&time_avg(&r1.visual, 32), &time_avg(&r2.visual, 32));
        assert!(c > 0.8, "cosine {c}");
    }

    #[test]
    fn visual_swap_carries_donor_identity() {
        let w = world();
        let s = spec(Manipulation::VisualSwap, 1, 3, 1, 0);
        let r = render_clip(&w, &s, 5).unwrap();
        let avg = time_avg(&r.visual, 32);
        let donor = w.identity_profile(&w.proj_v, 3);
        let claimed = w.identity_profile(&w.proj_v, 1);
        let (cd, cc) = (cosine(&avg, &donor), cosine(&avg, &claimed));
        assert!(
            cd > cc + 0.2,
            "donor cosine {cd} should dominate claimed {cc}"
        );
    }

    #[test]
    fn sterile_world_renders_pure_projection() {
        let cfg = WorldConfig {
            sigma: 0.0,
            content_amp: 0.0,
            ..WorldConfig::default()
        };
        let w = World::generate(3, 2, cfg);
        let s = spec(Manipulation::Real, 1, 1, 1, 0);
        let r = render_clip(&w, &s, 9).unwrap();
        let id_v = w.identity_profile(&w.proj_v, 1);
        for t in 0..(18 * 4) {
            for c in 0..32 {
                assert_eq!(r.visual[t * 32 + c], id_v[c] as f32);
            }
        }
    }

    #[test]
    fn desync_moves_audio_content_only() {
        let w = world();
        let real = spec(Manipulation::Real, 0, 0, 0, 0);
        let shifted = spec(Manipulation::Desync, 0, 0, 0, 2);
        let a = render_clip(&w, &real, 7).unwrap();
        let b = render_clip(&w, &shifted, 7).unwrap();
        assert_eq!(a.visual, b.visual, "visual stream must be untouched");
        assert_ne!(a.audio, b.audio, "audio content must move");
    }

    #[test]
    fn artifact_stamps_every_fourth_visual_token() {
        let w = world();
        let clean = spec(Manipulation::Real, 4, 4, 4, 0);
        let marked = spec(Manipulation::Artifact, 4, 4, 4, 0);
        let a = render_clip(&w, &clean, 11).unwrap();
        let b = render_clip(&w, &marked, 11).unwrap();
        assert_eq!(a.audio, b.audio);
        for t in 0..(18 * 4) {
            for c in 0..32 {
                let (x, y) = (a.visual[t * 32 + c], b.visual[t * 32 + c]);
                if t % 4 == 0 {
                    let want = (x as f64 + w.cfg.artifact_amp * w.artifact[c]) as f32;
                    assert_eq!(y, want);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn spec_validation_enforces_defining_inconsistency() {
        assert!(spec(Manipulation::Real, 1, 1, 1, 0).validate().is_ok());
        assert!(spec(Manipulation::Real, 1, 2, 1, 0).validate().is_err());
        assert!(spec(Manipulation::Real, 1, 1, 1, 1).validate().is_err());
        assert!(spec(Manipulation::VisualSwap, 1, 2, 1, 0).validate().is_ok());
        assert!(spec(Manipulation::VisualSwap, 1, 1, 1, 0).validate().is_err());
        assert!(spec(Manipulation::BothSwap, 1, 2, 2, 0).validate().is_ok());
        assert!(spec(Manipulation::BothSwap, 1, 2, 3, 0).validate().is_err());
        assert!(spec(Manipulation::BothSwap, 1, 1, 1, 0).validate().is_err());
        assert!(spec(Manipulation::Desync, 1, 1, 1, 2).validate().is_ok());
        assert!(spec(Manipulation::Desync, 1, 1, 1, 3).validate().is_err());
        assert!(spec(Manipulation::Desync, 1, 1, 1, 0).validate().is_err());
    }

    #[test]
    fn id_match_label_rule() {
        let t_real = spec(Manipulation::Real, 1, 1, 1, 0);
        let mut r = spec(Manipulation::Real, 1, 1, 1, 0);
        r.id = 9;
        assert_eq!(id_match_label(&t_real, &r), 1);
        // same recording
        assert_eq!(id_match_label(&t_real, &t_real), 0);
        // other speaker's reference
        let mut other = r.clone();
        other.claimed = 2;
        other.speaker_v = 2;
        other.speaker_a = 2;
        assert_eq!(id_match_label(&t_real, &other), 0);
        // fake target never matches
        let fake = spec(Manipulation::BothSwap, 1, 3, 3, 0);
        assert_eq!(id_match_label(&fake, &r), 0);
    }

    #[test]
    fn world_file_roundtrip_reproduces_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.bin");
        let w = world();
        w.save(&path).unwrap();
        let w2 = World::load(&path).unwrap();
        assert_eq!(w.proj_v, w2.proj_v);
        assert_eq!(w.speakers, w2.speakers);
        assert_eq!(w.cfg.sigma, w2.cfg.sigma);
        let s = spec(Manipulation::Desync, 5, 5, 5, -1);
        let a = render_clip(&w, &s, 31).unwrap();
        let b = render_clip(&w2, &s, 31).unwrap();
        assert_eq!(a.visual, b.visual);
        assert_eq!(a.audio, b.audio);
    }

    #[test]
    fn unit_norm_invariants() {
        let w = world();
        for z in &w.speakers {
            let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for r in 0..w.cfg.d_raw {
            let row = &w.proj_v[r * w.cfg.d_id..(r + 1) * w.cfg.d_id];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
