//! One-step-ahead evaluation against the observer's own fixation or the
//! leave-one-out group.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scores::{aucj, nss_mean};
use crate::datamodel::{Dataset, FixationPoint, ObserverId, PriorityMap, Split};
use crate::error::{Error, Result};
use crate::fixhist::{init_teacher_forced, FixationHistory};
use crate::integrator::{ModelInput, Predictor, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Aucj,
    Nss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Aucj => "aucj",
            Metric::Nss => "nss",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "1v1")]
    OneVsOne,
    #[serde(rename = "1vinf")]
    OneVsInf,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OneVsOne => "1v1",
            Protocol::OneVsInf => "1vinf",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1v1" => Ok(Protocol::OneVsOne),
            "1vinf" => Ok(Protocol::OneVsInf),
            _ => Err(Error::Config(format!("unknown protocol '{s}', expected 1v1 or 1vinf"))),
        }
    }
}

/// One score of one prediction. `value` is `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub observer: ObserverId,
    pub video: String,
    /// Frame the prediction targets.
    pub frame: usize,
    /// Steps ahead of the teacher-forced start.
    pub step: usize,
    pub protocol: Protocol,
    pub metric: Metric,
    pub value: Option<f64>,
}

/// Positive fixations of `protocol` for `observer` at `frame`.
pub fn protocol_points(dataset: &Dataset, protocol: Protocol, video: usize, frame: usize, observer: ObserverId) -> Result<Vec<FixationPoint>> {
    match protocol {
        Protocol::OneVsOne => Ok(vec![dataset.fixation(video, observer, frame)?]),
        Protocol::OneVsInf => {
            if dataset.observers().len() < 2 {
                return Err(Error::InvalidArgument("1vinf needs at least two observers".into()));
            }
            dataset.manifest().observer_index(observer)?;
            Ok(dataset.group_points(video, frame, Some(observer)))
        }
    }
}

/// NSS and AUCJ records of `pred` against `points`.
pub fn score(pred: &PriorityMap, points: &[FixationPoint], base: &EvalRecord) -> Result<[EvalRecord; 2]> {
    Ok([
        EvalRecord {
            metric: Metric::Aucj,
            value: Some(aucj(pred, points)?),
            ..base.clone()
        },
        EvalRecord {
            metric: Metric::Nss,
            value: nss_mean(pred, points)?,
            ..base.clone()
        },
    ])
}

/// Window ends of non-overlapping evaluation windows: `T′, 2T′, …`.
pub fn eval_frames(frame_count: usize, context: usize) -> Vec<usize> {
    (1..).map(|k| k * context).take_while(|&t| t < frame_count).collect()
}

pub fn model_input<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, video: usize, t_end: usize, history: &FixationHistory) -> Result<ModelInput> {
    let cues = dataset.cue_window(video, t_end, model.context(), model.cues())?;
    Ok(ModelInput {
        cues: cues.maps,
        history: history.as_modality(),
    })
}

/// Teacher-forced one-step-ahead records of `observer` over `split`.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, observer: ObserverId, split: Split, protocols: &[Protocol]) -> Result<Vec<EvalRecord>> {
    let t = model.context();
    let mut out = Vec::new();
    for video in dataset.split_indices(split)? {
        for t_end in eval_frames(dataset.frame_count(video), t) {
            let history = init_teacher_forced(dataset, observer, video, t_end, t)?;
            let input = model_input(model, dataset, video, t_end, &history)?;
            let pred = model.predict(
                &input,
                &Query {
                    video,
                    frame: t_end,
                    observer,
                },
            )?;
            for &protocol in protocols {
                let points = protocol_points(dataset, protocol, video, t_end, observer)?;
                let base = EvalRecord {
                    observer,
                    video: dataset.videos()[video].id.clone(),
                    frame: t_end,
                    step: 0,
                    protocol,
                    metric: Metric::Aucj,
                    value: None,
                };
                out.extend(score(&pred, &points, &base)?);
            }
        }
    }
    Ok(out)
}

pub fn evaluate_1v1<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, observer: ObserverId) -> Result<Vec<EvalRecord>> {
    evaluate(model, dataset, observer, Split::Test, &[Protocol::OneVsOne])
}

pub fn evaluate_1vinf<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, observer: ObserverId) -> Result<Vec<EvalRecord>> {
    evaluate(model, dataset, observer, Split::Test, &[Protocol::OneVsInf])
}

/// Runs `job` for each observer on up to `workers` threads; results keep
/// observer order.
pub fn per_observer<T, F>(observers: &[ObserverId], workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(ObserverId) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, observers.len().max(1));
    if workers == 1 {
        return observers.iter().map(|&o| job(o)).collect();
    }
    let chunk = observers.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = observers
            .chunks(chunk)
            .map(|part| {
                let job = &job;
                s.spawn(move || part.iter().map(|&o| job(o)).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(observers.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Both protocols for every observer.
pub fn evaluate_all<P: Predictor + Sync + ?Sized>(model: &P, dataset: &Dataset, protocols: &[Protocol], workers: usize) -> Result<Vec<EvalRecord>> {
    let parts = per_observer(dataset.observers(), workers, |o| evaluate(model, dataset, o, Split::Test, protocols))?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|source| Error::Json {
            context: "serializing evaluation records".into(),
            source,
        })?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("parsing {}", path.display()),
                source,
            })
        })
        .collect()
}

/// Mean of the defined values of `metric` per observer, in observer order.
pub fn observer_means(records: &[EvalRecord], observers: &[ObserverId], protocol: Protocol, metric: Metric) -> Vec<f64> {
    observers
        .iter()
        .map(|&o| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.observer == o && r.protocol == protocol && r.metric == metric)
                .filter_map(|r| r.value)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}
