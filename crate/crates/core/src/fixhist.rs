//! Fixation-history queue: the observer-specific input modality.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::datamodel::{blur_fixation, Dataset, FixationPoint, MapKind, ObserverId, PriorityMap};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    TeacherForced,
    Autoregressive,
}

/// Exactly `T′` priority maps, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FixationHistory {
    queue: VecDeque<PriorityMap>,
    observer: ObserverId,
    mode: HistoryMode,
}

impl FixationHistory {
    pub fn from_maps(maps: Vec<PriorityMap>, observer: ObserverId, mode: HistoryMode) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("history needs at least one map".into()))?;
        let shape = first.grid().shape().to_vec();
        for m in &maps {
            if m.grid().shape() != shape {
                return Err(Error::shape("fixation_history", "map shape", format!("{shape:?}"), format!("{:?}", m.grid().shape())));
            }
            if mode == HistoryMode::TeacherForced && m.kind() != MapKind::GroundTruthBlur {
                return Err(Error::InvalidArgument("teacher-forced history holds blurred ground truth only".into()));
            }
        }
        Ok(Self {
            queue: maps.into(),
            observer,
            mode,
        })
    }

    /// All-zero history of `context` maps.
    pub fn zeros(observer: ObserverId, context: usize, height: usize, width: usize) -> Result<Self> {
        let blank = PriorityMap::new(Tensor::zeros(&[1, height, width]), MapKind::GroundTruthBlur)?;
        Self::from_maps(vec![blank; context], observer, HistoryMode::TeacherForced)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn observer(&self) -> ObserverId {
        self.observer
    }

    pub fn mode(&self) -> HistoryMode {
        self.mode
    }

    pub fn maps(&self) -> impl Iterator<Item = &PriorityMap> {
        self.queue.iter()
    }

    pub fn count_kind(&self, kind: MapKind) -> usize {
        self.queue.iter().filter(|m| m.kind() == kind).count()
    }

    /// Drops the oldest map and appends `map`.
    pub fn push(&mut self, map: PriorityMap) -> Result<()> {
        let shape = self.queue[0].grid().shape();
        if map.grid().shape() != shape {
            return Err(Error::shape("history_push", "map shape", format!("{shape:?}"), format!("{:?}", map.grid().shape())));
        }
        if map.kind() == MapKind::Prediction {
            self.mode = HistoryMode::Autoregressive;
        }
        self.queue.pop_front();
        self.queue.push_back(map);
        Ok(())
    }

    /// `[T′, 1, H, W]`, oldest first.
    pub fn as_modality(&self) -> Tensor {
        Tensor::stack(&self.queue.iter().map(|m| m.grid().clone()).collect::<Vec<_>>()).expect("uniform history shapes")
    }
}

/// Blurred ground truth of `observer` for frames `t_end − T′ .. t_end − 1`.
pub fn init_teacher_forced(dataset: &Dataset, observer: ObserverId, video: usize, t_end: usize, context: usize) -> Result<FixationHistory> {
    if t_end < context {
        return Err(Error::InvalidArgument(format!(
            "history of {context} frames needs t_end >= {context}, got {t_end}"
        )));
    }
    if t_end > dataset.frame_count(video) {
        return Err(Error::InvalidArgument(format!("t_end {t_end} beyond video length {}", dataset.frame_count(video))));
    }
    let (h, w, sigma) = (dataset.height(), dataset.width(), dataset.sigma_px());
    let maps = (t_end - context..t_end)
        .map(|f| blur_fixation(&dataset.fixation(video, observer, f)?, h, w, sigma))
        .collect::<Result<_>>()?;
    FixationHistory::from_maps(maps, observer, HistoryMode::TeacherForced)
}

/// Blur of `sigma` around the map's maximum, for the re-blurring ablation.
pub fn reblur_at_argmax(map: &PriorityMap, observer: ObserverId, sigma: f64) -> Result<PriorityMap> {
    let (x, y) = map.argmax();
    let p = FixationPoint {
        x,
        y,
        observer,
        frame: 0,
    };
    let blurred = blur_fixation(&p, map.height(), map.width(), sigma)?;
    PriorityMap::new(blurred.into_grid(), MapKind::Prediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64, kind: MapKind) -> PriorityMap {
        PriorityMap::new(Tensor::full(&[1, 2, 2], v), kind).unwrap()
    }

    #[test]
    fn push_is_fifo_and_tracks_predictions() {
        let maps = (0..3).map(|i| map(i as f64, MapKind::GroundTruthBlur)).collect();
        let mut h = FixationHistory::from_maps(maps, ObserverId(0), HistoryMode::TeacherForced).unwrap();
        for n in 1..=4 {
            h.push(map(10.0 + n as f64, MapKind::Prediction)).unwrap();
            assert_eq!(h.len(), 3);
            assert_eq!(h.count_kind(MapKind::GroundTruthBlur), 3usize.saturating_sub(n));
            assert_eq!(h.mode(), HistoryMode::Autoregressive);
        }
        let t = h.as_modality();
        assert_eq!(t.shape(), &[3, 1, 2, 2]);
        assert_eq!(t.data()[0], 12.0);
        assert_eq!(t.data()[8], 14.0);
        assert!(h.push(PriorityMap::new(Tensor::zeros(&[1, 3, 2]), MapKind::Prediction).unwrap()).is_err());
    }

    #[test]
    fn zero_history_is_zero_tensor() {
        let h = FixationHistory::zeros(ObserverId(1), 4, 3, 5).unwrap();
        assert_eq!(h.as_modality(), Tensor::zeros(&[4, 1, 3, 5]));
    }

    #[test]
    fn teacher_forced_rejects_predictions() {
        let maps = vec![map(1.0, MapKind::Prediction)];
        assert!(FixationHistory::from_maps(maps, ObserverId(0), HistoryMode::TeacherForced).is_err());
    }
}
