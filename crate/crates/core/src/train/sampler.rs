//! Training windows and the individual/unified observer samplers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dam::downscale_density;
use crate::datamodel::{blur_fixation, density_from_group, CueWindow, Dataset, FixationPoint, Modality, ObserverId, Split};
use crate::error::{Error, Result};
use crate::fixhist::{init_teacher_forced, FixationHistory};
use crate::integrator::ModelInput;
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "observer")]
pub enum Sampling {
    /// Every sample uses this observer.
    Individual(ObserverId),
    /// A uniformly random observer per sample.
    Unified,
}

/// Spacing between consecutive window ends for a fractional overlap.
pub fn window_stride(context: usize, overlap: f64) -> usize {
    (((1.0 - overlap) * context as f64).round() as usize).max(1)
}

/// A `(video, t_end)` pair whose cue window and history both fit the video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub video: usize,
    pub t_end: usize,
}

/// All windows of `split`, `stride` frames apart, starting from the first
/// `t_end` with a full history behind it.
pub fn enumerate_windows(dataset: &Dataset, split: Split, context: usize, stride: usize) -> Result<Vec<WindowRef>> {
    if stride == 0 || context == 0 {
        return Err(Error::InvalidArgument("stride and context must be >= 1".into()));
    }
    let mut out = Vec::new();
    for video in dataset.split_indices(split)? {
        let mut t_end = context;
        while t_end < dataset.frame_count(video) {
            out.push(WindowRef { video, t_end });
            t_end += stride;
        }
    }
    Ok(out)
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub window: WindowRef,
    pub observer: ObserverId,
    pub cues: CueWindow,
    pub history: FixationHistory,
    /// The observer's fixation at `t_end`.
    pub target: FixationPoint,
    /// Mass-normalized blur of `target`, `[1, H, W]`.
    pub density: Tensor,
    /// Half-resolution group densities of the cue frames, `[T′, 1, H/2, W/2]`.
    pub dam_targets: Tensor,
}

impl Sample {
    pub fn input(&self) -> ModelInput {
        ModelInput {
            cues: self.cues.maps.clone(),
            history: self.history.as_modality(),
        }
    }
}

/// Builds the example for `observer` at `window`.
pub fn build_sample(dataset: &Dataset, window: WindowRef, observer: ObserverId, context: usize, cues: &[Modality]) -> Result<Sample> {
    let WindowRef { video, t_end } = window;
    let cue_window = dataset.cue_window(video, t_end, context, cues)?;
    let history = init_teacher_forced(dataset, observer, video, t_end, context)?;
    let target = dataset.fixation(video, observer, t_end)?;
    let (h, w, sigma) = (dataset.height(), dataset.width(), dataset.sigma_px());
    let density = blur_fixation(&target, h, w, sigma)?.to_density()?.into_grid();
    let dam_targets = (0..context)
        .map(|tau| {
            let frame = cue_window.frame_of(tau);
            let group = density_from_group(&dataset.group_points(video, frame, None), h, w, sigma)?;
            downscale_density(group.grid())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        window,
        observer,
        cues: cue_window,
        history,
        target,
        density,
        dam_targets: Tensor::stack(&dam_targets)?,
    })
}

/// Draws training examples from a fixed window list.
pub struct Sampler<'a> {
    dataset: &'a Dataset,
    windows: Vec<WindowRef>,
    sampling: Sampling,
    context: usize,
    cues: Vec<Modality>,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &'a Dataset, split: Split, sampling: Sampling, context: usize, overlap: f64, cues: &[Modality]) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
        }
        if let Sampling::Individual(o) = sampling {
            dataset.manifest().observer_index(o)?;
        }
        let windows = enumerate_windows(dataset, split, context, window_stride(context, overlap))?;
        if windows.is_empty() {
            return Err(Error::Config(format!("{split:?} split has no window of {context} frames")));
        }
        Ok(Self {
            dataset,
            windows,
            sampling,
            context,
            cues: cues.to_vec(),
        })
    }

    pub fn windows(&self) -> &[WindowRef] {
        &self.windows
    }

    fn observer(&self, rng: &mut ChaCha8Rng) -> ObserverId {
        match self.sampling {
            Sampling::Individual(o) => o,
            Sampling::Unified => *self.dataset.observers().choose(rng).expect("manifest has observers"),
        }
    }

    /// A uniformly random window with its observer.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let w = self.windows[rng.gen_range(0..self.windows.len())];
        let o = self.observer(rng);
        build_sample(self.dataset, w, o, self.context, &self.cues)
    }

    /// One pass over the shuffled windows, truncated to `limit` samples.
    pub fn epoch(&self, rng: &mut ChaCha8Rng, limit: Option<usize>) -> Vec<(WindowRef, ObserverId)> {
        let mut order = self.windows.clone();
        order.shuffle(rng);
        order.truncate(limit.unwrap_or(usize::MAX));
        order.into_iter().map(|w| (w, self.observer(rng))).collect()
    }

    /// Fixed evaluation set: at most `limit` evenly spaced windows, observers
    /// assigned round-robin under unified sampling.
    pub fn fixed(&self, limit: Option<usize>) -> Vec<(WindowRef, ObserverId)> {
        let n = self.windows.len();
        let k = limit.unwrap_or(n).clamp(1, n);
        let observers = self.dataset.observers();
        (0..k)
            .map(|i| {
                let w = self.windows[i * n / k];
                let o = match self.sampling {
                    Sampling::Individual(o) => o,
                    Sampling::Unified => observers[i % observers.len()],
                };
                (w, o)
            })
            .collect()
    }

    pub fn build(&self, window: WindowRef, observer: ObserverId) -> Result<Sample> {
        build_sample(self.dataset, window, observer, self.context, &self.cues)
    }
}

/// A random train-split example for the fixed `observer`.
pub fn sample_individual(dataset: &Dataset, observer: ObserverId, context: usize, overlap: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    Sampler::new(dataset, Split::Train, Sampling::Individual(observer), context, overlap, &dataset.manifest().modalities)?.draw(rng)
}

/// A random train-split example for a uniformly drawn observer.
pub fn sample_unified(dataset: &Dataset, context: usize, overlap: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    Sampler::new(dataset, Split::Train, Sampling::Unified, context, overlap, &dataset.manifest().modalities)?.draw(rng)
}
