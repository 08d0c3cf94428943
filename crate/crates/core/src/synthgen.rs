//! Procedural social scenes: moving actors, rendered cue maps and simulated
//! per-observer scanpaths.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    split_by_video, Dataset, DatasetManifest, FixationPoint, Modality, ObserverId, VideoData, VideoEntry,
    ViewingGeometry, TARGET_FPS,
};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAX_STEP_PX: f64 = 2.0;
const MIN_DWELL: usize = 10;
const MAX_DWELL: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ActorTrack {
    /// `(x, y)` per frame in pixel coordinates.
    pub positions: Vec<(f64, f64)>,
    pub blob_std: f64,
    pub expressiveness: f64,
    pub gaze_target: Option<usize>,
    pub speaking: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverProfile {
    pub id: ObserverId,
    pub preferences: Vec<f64>,
    pub center_bias: f64,
    pub inertia: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Weight on the gaze cue value at an actor.
    #[serde(default)]
    pub gaze_affinity: f64,
    /// Weight on the expression cue value at an actor.
    #[serde(default)]
    pub expression_affinity: f64,
}

impl ObserverProfile {
    pub fn validate(&self) -> Result<()> {
        if self.preferences.iter().any(|&w| !(w >= 0.0)) || self.preferences.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(format!("{}: preferences must be >= 0 and not all zero", self.id)));
        }
        if !(0.0..1.0).contains(&self.inertia) {
            return Err(Error::InvalidArgument(format!("{}: inertia must lie in [0, 1)", self.id)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!("{}: temperature must be >= 0", self.id)));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, n_actors: usize, n_frames: usize, height: usize, width: usize) -> Result<Vec<ActorTrack>> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!("scene must be at least 8x8, got {height}x{width}")));
    }
    if n_actors == 0 {
        return Err(Error::InvalidArgument("scene needs at least one actor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let margin = 2.0;
    let mut tracks: Vec<ActorTrack> = (0..n_actors)
        .map(|a| {
            // spread initial positions over vertical bands so actors start apart
            let band = wf / n_actors as f64;
            let x0 = (band * (a as f64 + rng.gen_range(0.3..0.7))).clamp(margin, wf - 1.0 - margin);
            let y0 = rng.gen_range(margin..hf - 1.0 - margin);
            ActorTrack {
                positions: vec![(x0, y0)],
                blob_std: rng.gen_range(0.06..0.1) * wf.min(hf),
                expressiveness: rng.gen_range(0.0..1.0),
                gaze_target: None,
                speaking: Vec::with_capacity(n_frames),
            }
        })
        .collect();
    if n_actors > 1 {
        for a in 0..n_actors {
            if rng.gen_bool(0.5) {
                let other = (a + rng.gen_range(1..n_actors)) % n_actors;
                tracks[a].gaze_target = Some(other);
            }
        }
    }
    let mut velocity = vec![(0.0f64, 0.0f64); n_actors];
    for _ in 1..n_frames {
        for (a, t) in tracks.iter_mut().enumerate() {
            let (vx, vy) = &mut velocity[a];
            *vx = 0.8 * *vx + rng.gen_range(-0.5..0.5);
            *vy = 0.8 * *vy + rng.gen_range(-0.5..0.5);
            let norm = vx.hypot(*vy);
            if norm > MAX_STEP_PX {
                *vx *= MAX_STEP_PX / norm;
                *vy *= MAX_STEP_PX / norm;
            }
            let &(x, y) = t.positions.last().unwrap();
            let nx = (x + *vx).clamp(margin, wf - 1.0 - margin);
            let ny = (y + *vy).clamp(margin, hf - 1.0 - margin);
            if nx != x + *vx {
                *vx = -*vx;
            }
            if ny != y + *vy {
                *vy = -*vy;
            }
            t.positions.push((nx, ny));
        }
    }
    let mut speaker = rng.gen_range(0..n_actors);
    let mut frame = 0;
    while frame < n_frames {
        let dwell = rng.gen_range(MIN_DWELL..=MAX_DWELL);
        for f in frame..(frame + dwell).min(n_frames) {
            for (a, t) in tracks.iter_mut().enumerate() {
                debug_assert_eq!(t.speaking.len(), f);
                t.speaking.push(a == speaker);
            }
        }
        frame += dwell;
        if n_actors > 1 {
            speaker = (speaker + rng.gen_range(1..n_actors)) % n_actors;
        }
    }
    Ok(tracks)
}

/// Per-frame cue maps, each `[F, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CueMaps {
    pub saliency: Tensor,
    pub gaze: Tensor,
    pub expression: Tensor,
}

impl CueMaps {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Saliency => &self.saliency,
            Modality::Gaze => &self.gaze,
            Modality::Expression => &self.expression,
        }
    }

    /// Value of the `m` cue at the pixel nearest to `(x, y)` in `frame`.
    pub fn value_at(&self, m: Modality, frame: usize, x: f64, y: f64) -> f64 {
        let t = self.get(m);
        let (h, w) = (t.shape()[2], t.shape()[3]);
        let xi = (x.round() as usize).min(w - 1);
        let yi = (y.round() as usize).min(h - 1);
        t.data()[frame * h * w + yi * w + xi]
    }
}

fn blob(out: &mut [f64], width: usize, cx: f64, cy: f64, std: f64, weight: f64) {
    let inv = 1.0 / (2.0 * std * std);
    for (i, v) in out.iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        *v += weight * (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp();
    }
}

fn normalize(plane: &mut [f64], by_peak: bool) {
    let s = if by_peak {
        plane.iter().cloned().fold(0.0, f64::max)
    } else {
        plane.iter().sum()
    };
    if s > 0.0 {
        plane.iter_mut().for_each(|v| *v /= s);
    }
}

pub fn render_cues(tracks: &[ActorTrack], height: usize, width: usize) -> CueMaps {
    let n_frames = tracks.first().map_or(0, |t| t.positions.len());
    let plane = height * width;
    let mut sal = vec![0.0; n_frames * plane];
    let mut gaze = vec![0.0; n_frames * plane];
    let mut expr = vec![0.0; n_frames * plane];
    for f in 0..n_frames {
        let range = f * plane..(f + 1) * plane;
        for t in tracks {
            let (x, y) = t.positions[f];
            let w = if t.speaking[f] { 2.0 } else { 1.0 };
            blob(&mut sal[range.clone()], width, x, y, t.blob_std, w);
            blob(&mut expr[range.clone()], width, x, y, t.blob_std, t.expressiveness);
            if let Some(target) = t.gaze_target {
                let (gx, gy) = tracks[target].positions[f];
                blob(&mut gaze[range.clone()], width, gx, gy, tracks[target].blob_std, 1.0);
            }
        }
        normalize(&mut sal[range.clone()], false);
        normalize(&mut gaze[range.clone()], true);
        normalize(&mut expr[range], true);
    }
    let shape = [n_frames, 1, height, width];
    let snap = |v: Vec<f64>| Tensor::new(&shape, v).expect("cue shape").to_storage_precision();
    CueMaps {
        saliency: snap(sal),
        gaze: snap(gaze),
        expression: snap(expr),
    }
}

/// Target-actor selection probabilities for one frame.
pub fn target_distribution(profile: &ObserverProfile, tracks: &[ActorTrack], cues: &CueMaps, frame: usize) -> Vec<f64> {
    let (h, w) = (cues.saliency.shape()[2] as f64, cues.saliency.shape()[3] as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let scores: Vec<f64> = tracks
        .iter()
        .enumerate()
        .map(|(a, t)| {
            let (x, y) = t.positions[frame];
            let pref = profile.preferences.get(a).copied().unwrap_or(0.0);
            let center = ((x - cx).powi(2) + (y - cy).powi(2)) / (cx * cx + cy * cy);
            (cues.value_at(Modality::Saliency, frame, x, y) + 1e-12).ln() + (pref + 1e-12).ln()
                - profile.center_bias * center
                + profile.gaze_affinity * cues.value_at(Modality::Gaze, frame, x, y)
                + profile.expression_affinity * cues.value_at(Modality::Expression, frame, x, y)
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if profile.temperature <= 1e-9 {
        let winners = scores.iter().filter(|&&s| s == max).count() as f64;
        return scores.iter().map(|&s| if s == max { 1.0 / winners } else { 0.0 }).collect();
    }
    let e: Vec<f64> = scores.iter().map(|&s| ((s - max) / profile.temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Scanpath plus the actor chosen at each frame.
pub fn simulate_targets(profile: &ObserverProfile, tracks: &[ActorTrack], cues: &CueMaps, stream: u64) -> (Vec<FixationPoint>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, stream));
    let (h, w) = (cues.saliency.shape()[2], cues.saliency.shape()[3]);
    let n_frames = tracks.first().map_or(0, |t| t.positions.len());
    let mut points = Vec::with_capacity(n_frames);
    let mut targets = Vec::with_capacity(n_frames);
    let mut prev: Option<usize> = None;
    for f in 0..n_frames {
        let keep: bool = rng.gen_bool(profile.inertia);
        let target = match prev {
            Some(p) if keep => p,
            _ => draw(&target_distribution(profile, tracks, cues, f), &mut rng),
        };
        let (x, y) = tracks[target].positions[f];
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        points.push(FixationPoint {
            x: (x + jx).round().clamp(0.0, (w - 1) as f64) as usize,
            y: (y + jy).round().clamp(0.0, (h - 1) as f64) as usize,
            observer: profile.id,
            frame: f,
        });
        targets.push(target);
        prev = Some(target);
    }
    (points, targets)
}

pub fn simulate_scanpath(profile: &ObserverProfile, tracks: &[ActorTrack], cues: &CueMaps, stream: u64) -> Vec<FixationPoint> {
    simulate_targets(profile, tracks, cues, stream).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    pub actors: usize,
    pub observers: usize,
    pub height: usize,
    pub width: usize,
    pub geometry: ViewingGeometry,
    pub temperature: f64,
    pub inertia: f64,
    pub center_bias: f64,
    pub gaze_affinity: f64,
    pub expression_affinity: f64,
    /// Explicit profiles; generated from the fields above when empty.
    pub profiles: Vec<ObserverProfile>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            videos: 20,
            frames: 40,
            actors: 3,
            observers: 6,
            height: 24,
            width: 24,
            geometry: ViewingGeometry::mvva(),
            temperature: 0.5,
            inertia: 0.6,
            center_bias: 0.5,
            gaze_affinity: 0.0,
            expression_affinity: 0.0,
            profiles: Vec::new(),
        }
    }
}

impl SynthConfig {
    /// One profile per observer with a distinct primary and secondary actor.
    pub fn observer_profiles(&self) -> Vec<ObserverProfile> {
        if !self.profiles.is_empty() {
            return self.profiles.clone();
        }
        let n = self.actors;
        (0..self.observers)
            .map(|i| {
                let primary = i % n;
                let secondary = (primary + 1 + i / n) % n;
                let preferences = (0..n)
                    .map(|a| {
                        if a == primary {
                            1.0
                        } else if a == secondary && n > 1 {
                            0.2
                        } else {
                            0.02
                        }
                    })
                    .collect();
                ObserverProfile {
                    id: ObserverId(i as u32),
                    preferences,
                    center_bias: self.center_bias,
                    inertia: self.inertia,
                    temperature: self.temperature,
                    seed: derive_seed(self.seed, 1_000 + i as u64),
                    gaze_affinity: self.gaze_affinity,
                    expression_affinity: self.expression_affinity,
                }
            })
            .collect()
    }
}

pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let profiles = config.observer_profiles();
    for p in &profiles {
        p.validate()?;
    }
    let ids: Vec<String> = (0..config.videos).map(|i| format!("vid{i:03}")).collect();
    let mut entries = Vec::new();
    let mut videos = Vec::new();
    for (vi, id) in ids.iter().enumerate() {
        let tracks = generate_scene(derive_seed(config.seed, vi as u64), config.actors, config.frames, config.height, config.width)?;
        let cues = render_cues(&tracks, config.height, config.width);
        let fixations = profiles.iter().map(|p| simulate_scanpath(p, &tracks, &cues, vi as u64)).collect();
        entries.push(VideoEntry {
            id: id.clone(),
            frame_count: config.frames,
            fps: TARGET_FPS,
            cues: Modality::ALL.iter().map(|m| (*m, format!("cues/{id}_{m}.spcm"))).collect(),
            fixations: format!("fixations/{id}.csv"),
        });
        videos.push(VideoData {
            id: id.clone(),
            frame_count: config.frames,
            cues: Modality::ALL.iter().map(|m| cues.get(*m).clone()).collect(),
            fixations,
        });
    }
    let manifest = DatasetManifest {
        modalities: Modality::ALL.to_vec(),
        height: config.height,
        width: config.width,
        geometry: config.geometry,
        observers: profiles.iter().map(|p| p.id).collect(),
        videos: entries,
        splits: split_by_video(&ids),
    };
    Dataset::new(manifest, videos)
}

/// Generates the dataset and writes it under `dir`; returns the manifest path.
pub fn emit_dataset(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    generate_dataset(config)?.save(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(prefs: Vec<f64>, inertia: f64, temperature: f64) -> ObserverProfile {
        ObserverProfile {
            id: ObserverId(0),
            preferences: prefs,
            center_bias: 0.0,
            inertia,
            temperature,
            seed: 7,
            gaze_affinity: 0.0,
            expression_affinity: 0.0,
        }
    }

    #[test]
    fn scenes_are_seeded() {
        let a = generate_scene(3, 3, 50, 16, 16).unwrap();
        assert_eq!(a, generate_scene(3, 3, 50, 16, 16).unwrap());
        assert_ne!(a, generate_scene(4, 3, 50, 16, 16).unwrap());
        assert!(generate_scene(3, 3, 50, 7, 16).is_err());
    }

    #[test]
    fn displacement_and_speakers() {
        let tracks = generate_scene(11, 3, 200, 24, 24).unwrap();
        let mut max_step: f64 = 0.0;
        for t in &tracks {
            for w in t.positions.windows(2) {
                max_step = max_step.max((w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
            }
        }
        assert!(max_step <= 2.0 + 1e-12, "{max_step}");
        let mut run = 0;
        let mut prev = None;
        let mut runs = Vec::new();
        for f in 0..200 {
            let speakers: Vec<_> = (0..3).filter(|&a| tracks[a].speaking[f]).collect();
            assert_eq!(speakers.len(), 1);
            if prev.is_some() && prev != Some(speakers[0]) {
                runs.push(run);
                run = 0;
            }
            run += 1;
            prev = Some(speakers[0]);
        }
        assert!(runs.iter().all(|&r| r >= MIN_DWELL), "{runs:?}");
        let solo = generate_scene(1, 1, 40, 12, 12).unwrap();
        assert!(solo[0].speaking.iter().all(|&s| s));
    }

    fn static_actor(x: f64, y: f64, speaking: bool) -> ActorTrack {
        ActorTrack {
            positions: vec![(x, y)],
            blob_std: 1.0,
            expressiveness: 0.5,
            gaze_target: None,
            speaking: vec![speaking],
        }
    }

    #[test]
    fn single_silent_actor_saliency() {
        let cues = render_cues(&[static_actor(5.0, 6.0, false)], 12, 12);
        let mut expected = vec![0.0; 144];
        blob(&mut expected, 12, 5.0, 6.0, 1.0, 1.0);
        normalize(&mut expected, false);
        for (a, b) in cues.saliency.data().iter().zip(&expected) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(cues.gaze.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn speaker_peak_is_twice_listener_peak() {
        let cues = render_cues(&[static_actor(4.0, 8.0, true), static_actor(27.0, 8.0, false)], 16, 32);
        let s = cues.value_at(Modality::Saliency, 0, 4.0, 8.0);
        let l = cues.value_at(Modality::Saliency, 0, 27.0, 8.0);
        assert!((s / l - 2.0).abs() < 1e-6, "{}", s / l);
    }

    #[test]
    fn inertia_keeps_target() {
        let tracks = generate_scene(5, 3, 1000, 24, 24).unwrap();
        let cues = render_cues(&tracks, 24, 24);
        let (_, targets) = simulate_targets(&profile(vec![1.0; 3], 0.999, 1.0), &tracks, &cues, 0);
        let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
        assert!(repeats as f64 / 999.0 >= 0.99, "{repeats}");
    }

    #[test]
    fn zero_temperature_follows_speaker() {
        let tracks = generate_scene(9, 3, 100, 24, 24).unwrap();
        let cues = render_cues(&tracks, 24, 24);
        let p = profile(vec![1.0; 3], 0.0, 0.0);
        let (_, targets) = simulate_targets(&p, &tracks, &cues, 0);
        for (f, &t) in targets.iter().enumerate() {
            let (x, y) = tracks[t].positions[f];
            let best = (0..3)
                .map(|a| {
                    let (ax, ay) = tracks[a].positions[f];
                    cues.value_at(Modality::Saliency, f, ax, ay)
                })
                .fold(0.0, f64::max);
            assert_eq!(cues.value_at(Modality::Saliency, f, x, y), best);
        }
    }

    #[test]
    fn opposite_preferences_pick_disjoint_actors() {
        let tracks = generate_scene(2, 2, 100, 24, 24).unwrap();
        let cues = render_cues(&tracks, 24, 24);
        let (_, a) = simulate_targets(&profile(vec![1.0, 0.0], 0.0, 0.0), &tracks, &cues, 0);
        let (_, b) = simulate_targets(&profile(vec![0.0, 1.0], 0.0, 0.0), &tracks, &cues, 0);
        assert!(a.iter().all(|&t| t == 0));
        assert!(b.iter().all(|&t| t == 1));
    }

    #[test]
    fn dataset_is_complete_and_split() {
        let cfg = SynthConfig {
            videos: 10,
            frames: 12,
            height: 12,
            width: 12,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        let s = &d.manifest().splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        for v in d.videos() {
            assert_eq!(v.fixations.len(), 6);
            assert!(v.fixations.iter().all(|t| t.len() == 12));
        }
    }
}
