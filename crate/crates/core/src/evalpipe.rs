//! Multi-step-ahead rollouts: teacher-forced start, then the model's own
//! predictions are fed back into the fixation history.

use serde::{Deserialize, Serialize};

use crate::datamodel::{blur_fixation, Dataset, MapKind, Modality, ObserverId, PriorityMap, Split};
use crate::error::{Error, Result};
use crate::fixhist::{init_teacher_forced, reblur_at_argmax};
use crate::integrator::{ModelInput, Predictor, Query};
use crate::metrics::{model_input, per_observer, protocol_points, score, EvalRecord, Metric, Protocol};

/// Frames consumed before the first context window.
pub const WARMUP_FRAMES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryFeed {
    /// Push the raw prediction.
    Raw,
    /// Push a one-fixation blur at the prediction's maximum.
    Reblur,
    /// Re-initialize from ground truth at every step. Test harness only.
    TeacherForced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Number of scored steps `N`: `t′ … t′ + N − 1`.
    pub steps: usize,
    pub feed: HistoryFeed,
    /// Distance between consecutive rollout starts; `T′` when absent.
    pub start_stride: Option<usize>,
    /// All dataset observers when absent.
    pub observers: Option<Vec<ObserverId>>,
    /// Test-split videos when absent.
    pub videos: Option<Vec<String>>,
    pub protocols: Vec<Protocol>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            feed: HistoryFeed::Raw,
            start_stride: None,
            observers: None,
            videos: None,
            protocols: vec![Protocol::OneVsOne],
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("rollout needs at least one step".into()));
        }
        if self.start_stride == Some(0) {
            return Err(Error::Config("start stride must be >= 1".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::Config("rollout needs at least one protocol".into()));
        }
        Ok(())
    }
}

/// First target frame of a rollout started at `start`.
pub fn first_target(start: usize, context: usize) -> usize {
    start + WARMUP_FRAMES + context
}

pub fn min_frames(context: usize, steps: usize) -> usize {
    first_target(0, context) + steps
}

pub struct RolloutStep {
    pub step: usize,
    pub frame: usize,
    pub prediction: PriorityMap,
    /// Prediction-kind maps in the history that produced this step.
    pub predicted_in_history: usize,
    pub records: Vec<EvalRecord>,
}

pub fn run_rollout<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    observer: ObserverId,
    video: usize,
    start: usize,
    config: &RolloutConfig,
) -> Result<Vec<RolloutStep>> {
    config.validate()?;
    let t = model.context();
    let t0 = first_target(start, t);
    let frames = dataset.frame_count(video);
    if t0 + config.steps > frames {
        return Err(Error::InvalidArgument(format!(
            "rollout of {} steps from start {start} needs {} frames, video '{}' has {frames}",
            config.steps,
            start + min_frames(t, config.steps),
            dataset.videos()[video].id
        )));
    }
    let id = dataset.videos()[video].id.clone();
    let mut history = init_teacher_forced(dataset, observer, video, t0, t)?;
    let mut out = Vec::with_capacity(config.steps);
    for n in 0..config.steps {
        let frame = t0 + n;
        if n > 0 && config.feed == HistoryFeed::TeacherForced {
            history = init_teacher_forced(dataset, observer, video, frame, t)?;
        }
        let input = model_input(model, dataset, video, frame, &history)?;
        let pred = model.predict(&input, &Query { video, frame, observer })?;
        let mut records = Vec::new();
        for &protocol in &config.protocols {
            let points = protocol_points(dataset, protocol, video, frame, observer)?;
            let base = EvalRecord {
                observer,
                video: id.clone(),
                frame,
                step: n,
                protocol,
                metric: Metric::Aucj,
                value: None,
            };
            records.extend(score(&pred, &points, &base)?);
        }
        let predicted_in_history = history.count_kind(MapKind::Prediction);
        let fed = match config.feed {
            HistoryFeed::Raw => pred.clone(),
            HistoryFeed::Reblur => reblur_at_argmax(&pred, observer, dataset.sigma_px())?,
            HistoryFeed::TeacherForced => PriorityMap::new(pred.grid().clone(), MapKind::Prediction)?,
        };
        out.push(RolloutStep {
            step: n,
            frame,
            prediction: pred,
            predicted_in_history,
            records,
        });
        if config.feed != HistoryFeed::TeacherForced {
            history.push(fed)?;
        }
    }
    Ok(out)
}

/// Valid rollout starts in a video of `frames` frames.
pub fn rollout_starts(frames: usize, context: usize, steps: usize, stride: usize) -> Vec<usize> {
    let need = min_frames(context, steps);
    if frames < need {
        return Vec::new();
    }
    (0..=frames - need).step_by(stride.max(1)).collect()
}

/// Rollouts for every configured observer, video and start.
pub fn run_rollouts<P: Predictor + Sync + ?Sized>(model: &P, dataset: &Dataset, config: &RolloutConfig, workers: usize) -> Result<Vec<EvalRecord>> {
    config.validate()?;
    let videos: Vec<usize> = match &config.videos {
        Some(ids) => ids.iter().map(|id| dataset.video_index(id)).collect::<Result<_>>()?,
        None => dataset.split_indices(Split::Test)?,
    };
    let observers = config.observers.clone().unwrap_or_else(|| dataset.observers().to_vec());
    let t = model.context();
    let stride = config.start_stride.unwrap_or(t);
    let starts: Vec<(usize, usize)> = videos
        .iter()
        .flat_map(|&v| rollout_starts(dataset.frame_count(v), t, config.steps, stride).into_iter().map(move |s| (v, s)))
        .collect();
    if starts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no video is long enough for a {}-step rollout ({} frames needed)",
            config.steps,
            min_frames(t, config.steps)
        )));
    }
    let parts = per_observer(&observers, workers, |o| {
        let mut recs = Vec::new();
        for &(v, s) in &starts {
            for step in run_rollout(model, dataset, o, v, s, config)? {
                recs.extend(step.records);
            }
        }
        Ok(recs)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub aucj: f64,
    pub nss: f64,
    /// Percent change relative to step 0.
    pub aucj_change: f64,
    pub nss_change: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub steps: Vec<StepSummary>,
}

fn pct(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (v - base) / base.abs()
    }
}

/// Per-step means of the 1v1 scores and their change from step 0.
pub fn degradation_report(records: &[EvalRecord]) -> Result<DegradationReport> {
    let max_step = records
        .iter()
        .map(|r| r.step)
        .max()
        .ok_or_else(|| Error::InvalidArgument("degradation report of zero records".into()))?;
    let mean = |step: usize, metric: Metric| -> (f64, usize) {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.step == step && r.metric == metric && r.protocol == Protocol::OneVsOne)
            .filter_map(|r| r.value)
            .collect();
        (v.iter().sum::<f64>() / v.len() as f64, v.len())
    };
    let (a0, _) = mean(0, Metric::Aucj);
    let (n0, _) = mean(0, Metric::Nss);
    let steps = (0..=max_step)
        .map(|s| {
            let (a, n) = mean(s, Metric::Aucj);
            let (z, _) = mean(s, Metric::Nss);
            StepSummary {
                step: s,
                aucj: a,
                nss: z,
                aucj_change: pct(a, a0),
                nss_change: pct(z, n0),
                n,
            }
        })
        .collect();
    Ok(DegradationReport { steps })
}

impl DegradationReport {
    /// One row per metric with a column per step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for st in &self.steps {
            if st.step == 0 {
                s.push_str(",t'");
            } else {
                s.push_str(&format!(",t'+{}", st.step));
            }
        }
        s.push('\n');
        for (name, value, change) in [
            ("aucj", (|x: &StepSummary| x.aucj) as fn(&StepSummary) -> f64, (|x: &StepSummary| x.aucj_change) as fn(&StepSummary) -> f64),
            ("nss", |x| x.nss, |x| x.nss_change),
        ] {
            s.push_str(name);
            for st in &self.steps {
                s.push_str(&format!(",{:.4}", value(st)));
            }
            s.push('\n');
            s.push_str(&format!("{name}_change_pct"));
            for st in &self.steps {
                s.push_str(&format!(",{:.2}", change(st)));
            }
            s.push('\n');
        }
        s
    }
}

/// Emits the blurred ground-truth fixation of the queried observer.
pub struct OracleStub<'a> {
    pub dataset: &'a Dataset,
    pub context: usize,
    pub cues: Vec<Modality>,
}

impl<'a> OracleStub<'a> {
    pub fn new(dataset: &'a Dataset, context: usize) -> Self {
        Self {
            dataset,
            context,
            cues: dataset.manifest().modalities.clone(),
        }
    }
}

impl Predictor for OracleStub<'_> {
    fn context(&self) -> usize {
        self.context
    }

    fn cues(&self) -> &[Modality] {
        &self.cues
    }

    fn predict(&self, _input: &ModelInput, q: &Query) -> Result<PriorityMap> {
        let d = self.dataset;
        let fix = d.fixation(q.video, q.observer, q.frame)?;
        let blurred = blur_fixation(&fix, d.height(), d.width(), d.sigma_px())?;
        PriorityMap::new(blurred.into_grid(), MapKind::Prediction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{Model, ModelConfig, Variant};
    use crate::metrics::{evaluate, evaluate_1v1, evaluate_1vinf};
    use crate::synthgen::{generate_dataset, SynthConfig};

    fn data(observers: usize) -> Dataset {
        generate_dataset(&SynthConfig {
            videos: 10,
            frames: 32,
            observers,
            height: 8,
            width: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_model() -> Model {
        Model::new(
            &ModelConfig {
                variant: Variant::Largmu,
                context: Some(3),
                height: 8,
                width: 8,
                encoder_channels: (2, 2),
                hidden: 4,
                dam_head_channels: 2,
                ..ModelConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn oracle_scores_perfectly_and_never_degrades() {
        let d = data(3);
        let oracle = OracleStub::new(&d, 4);
        let recs = evaluate_1v1(&oracle, &d, d.observers()[0]).unwrap();
        let test_videos = d.split_indices(Split::Test).unwrap();
        let frames: usize = test_videos.iter().map(|&v| crate::metrics::eval_frames(d.frame_count(v), 4).len()).sum();
        assert_eq!(recs.len(), 2 * frames);
        assert!(recs.iter().filter(|r| r.metric == Metric::Aucj).all(|r| r.value == Some(1.0)));
        let rolled = run_rollouts(&oracle, &d, &RolloutConfig::default(), 1).unwrap();
        let report = degradation_report(&rolled).unwrap();
        assert_eq!(report.steps.len(), 5);
        for s in &report.steps {
            assert_eq!(s.aucj, 1.0);
            assert_eq!(s.aucj_change, 0.0);
            assert_eq!(s.nss_change, 0.0);
        }
    }

    #[test]
    fn history_fills_with_predictions() {
        let d = data(2);
        let m = tiny_model();
        let steps = run_rollout(&m, &d, d.observers()[1], 0, 2, &RolloutConfig::default()).unwrap();
        let counts: Vec<usize> = steps.iter().map(|s| s.predicted_in_history).collect();
        assert_eq!(counts, [0, 1, 2, 3, 3]);
        assert_eq!(steps[0].frame, 2 + 16 + 3);
        let cheat = RolloutConfig {
            feed: HistoryFeed::TeacherForced,
            ..RolloutConfig::default()
        };
        let steps = run_rollout(&m, &d, d.observers()[1], 0, 2, &cheat).unwrap();
        assert!(steps.iter().all(|s| s.predicted_in_history == 0));
        let err = run_rollout(&m, &d, d.observers()[1], 0, 10, &RolloutConfig::default()).err().unwrap();
        assert!(err.to_string().contains("needs 34 frames"), "{err}");
    }

    #[test]
    fn single_step_matches_one_step_evaluation() {
        let d = data(3);
        let m = tiny_model();
        let o = d.observers()[2];
        let one = evaluate(&m, &d, o, Split::Test, &[Protocol::OneVsOne]).unwrap();
        let cfg = RolloutConfig {
            steps: 1,
            ..RolloutConfig::default()
        };
        let mut matched = 0;
        for r in one.iter().filter(|r| r.frame >= first_target(0, 3)) {
            let v = d.video_index(&r.video).unwrap();
            let step = run_rollout(&m, &d, o, v, r.frame - first_target(0, 3), &cfg).unwrap();
            let same = step[0].records.iter().find(|x| x.metric == r.metric).unwrap();
            assert_eq!(same.value, r.value);
            matched += 1;
        }
        assert!(matched > 0);
    }

    #[test]
    fn leave_one_out_uses_the_other_observer() {
        let d = data(2);
        let oracle = OracleStub::new(&d, 4);
        let (a, b) = (d.observers()[0], d.observers()[1]);
        let recs = evaluate_1vinf(&oracle, &d, a).unwrap();
        let v = d.split_indices(Split::Test).unwrap()[0];
        let pts = protocol_points(&d, Protocol::OneVsInf, v, 4, a).unwrap();
        assert_eq!(pts, vec![d.fixation(v, b, 4).unwrap()]);
        assert!(recs.iter().all(|r| r.protocol == Protocol::OneVsInf));
        assert!(evaluate_1vinf(&oracle, &data(1), ObserverId(0)).is_err());
    }

    #[test]
    fn report_percentages() {
        let mk = |step, v| EvalRecord {
            observer: ObserverId(0),
            video: "v".into(),
            frame: step,
            step,
            protocol: Protocol::OneVsOne,
            metric: Metric::Aucj,
            value: Some(v),
        };
        let r = degradation_report(&[mk(0, 1.0), mk(1, 0.9)]).unwrap();
        assert!((r.steps[1].aucj_change + 10.0).abs() < 1e-9);
        assert!(r.to_csv().starts_with("metric,t',t'+1\naucj,1.0000,0.9000\naucj_change_pct,0.00,-10.00\n"));
    }
}
