//! JSON dataset manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::ViewingGeometry;
use super::maps::ObserverId;
use crate::error::{Error, Result};

/// Social-cue modality. The declaration order is the canonical channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Saliency,
    Gaze,
    Expression,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Saliency, Modality::Gaze, Modality::Expression];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Saliency => "saliency",
            Modality::Gaze => "gaze",
            Modality::Expression => "expression",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub frame_count: usize,
    pub fps: f64,
    /// Container path per modality, relative to the manifest directory.
    pub cues: BTreeMap<Modality, String>,
    /// CSV with columns `observer,frame,x,y`, relative to the manifest directory.
    pub fixations: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub modalities: Vec<Modality>,
    /// Map grid of the stored cue containers.
    pub height: usize,
    pub width: usize,
    pub geometry: ViewingGeometry,
    pub observers: Vec<ObserverId>,
    pub videos: Vec<VideoEntry>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::Manifest("map grid must be nonempty".into()));
        }
        let mut seen = BTreeSet::new();
        if self.modalities.is_empty() || !self.modalities.iter().all(|m| seen.insert(*m)) {
            return Err(Error::Manifest("modalities must be nonempty and distinct".into()));
        }
        if !self.modalities.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Manifest("modalities must follow saliency, gaze, expression order".into()));
        }
        let mut obs = BTreeSet::new();
        if self.observers.is_empty() || !self.observers.iter().all(|o| obs.insert(*o)) {
            return Err(Error::Manifest("observers must be nonempty and distinct".into()));
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video id '{}'", v.id)));
            }
            if v.frame_count == 0 || !(v.fps > 0.0) {
                return Err(Error::Manifest(format!("video '{}' needs frames and a positive fps", v.id)));
            }
            for m in &self.modalities {
                if !v.cues.contains_key(m) {
                    return Err(Error::Manifest(format!("video '{}' lacks a {m} cue file", v.id)));
                }
            }
        }
        let mut assigned = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.splits.get(split) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Manifest(format!("split {split:?} names unknown video '{id}'")));
                }
                if !assigned.insert(id.as_str()) {
                    return Err(Error::Manifest(format!("video '{id}' appears in more than one split")));
                }
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Result<&VideoEntry> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown video '{id}'")))
    }

    pub fn observer_index(&self, observer: ObserverId) -> Result<usize> {
        self.observers
            .iter()
            .position(|&o| o == observer)
            .ok_or_else(|| Error::InvalidArgument(format!("observer {observer} not in dataset")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serializing manifest".into(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "parsing manifest".into(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Indices of native frames kept when resampling `frame_count` frames from
/// `native_fps` down to `target_fps`.
pub fn subsample_indices(frame_count: usize, native_fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(native_fps > 0.0 && target_fps > 0.0) || target_fps > native_fps {
        return Err(Error::InvalidArgument(format!(
            "cannot resample {native_fps} fps to {target_fps} fps"
        )));
    }
    let step = native_fps / target_fps;
    let n = ((frame_count as f64) / step).floor() as usize;
    Ok((0..n).map(|i| ((i as f64 * step).round() as usize).min(frame_count - 1)).collect())
}

/// 70/10/20 split of `ids` in their given order.
pub fn split_by_video(ids: &[String]) -> Splits {
    let n = ids.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i:02}")).collect();
        DatasetManifest {
            modalities: Modality::ALL.to_vec(),
            height: 8,
            width: 8,
            geometry: ViewingGeometry::mvva(),
            observers: vec![ObserverId(0), ObserverId(1)],
            videos: ids
                .iter()
                .map(|id| VideoEntry {
                    id: id.clone(),
                    frame_count: 20,
                    fps: 10.0,
                    cues: Modality::ALL.iter().map(|m| (*m, format!("{id}_{m}.spcm"))).collect(),
                    fixations: format!("{id}.csv"),
                })
                .collect(),
            splits: split_by_video(&ids),
        }
    }

    #[test]
    fn json_round_trip() {
        let m = manifest();
        assert_eq!(DatasetManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut m = manifest();
        m.splits.val.push(m.splits.train[0].clone());
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&manifest().to_json().unwrap()).unwrap();
        v["extra"] = 1.into();
        assert!(DatasetManifest::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn split_proportions() {
        let ids: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let s = split_by_video(&ids);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 2, 4));
    }

    #[test]
    fn subsampling() {
        assert_eq!(subsample_indices(10, 30.0, 10.0).unwrap(), vec![0, 3, 6]);
        assert_eq!(subsample_indices(4, 10.0, 10.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(subsample_indices(4, 10.0, 30.0).is_err());
    }
}
