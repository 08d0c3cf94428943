//! In-memory dataset: cue maps and per-observer fixations of every video.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{load_container, save_container};
use super::manifest::{subsample_indices, DatasetManifest, Modality, Split};
use super::maps::{FixationPoint, ObserverId};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Working frame rate all videos are resampled to.
pub const TARGET_FPS: f64 = 10.0;

/// `T′` consecutive frames of the selected cue modalities ending at `t_end`.
#[derive(Clone, Debug, PartialEq)]
pub struct CueWindow {
    /// `[T′, K, 1, H, W]`.
    pub maps: Tensor,
    pub modalities: Vec<Modality>,
    pub t_end: usize,
}

impl CueWindow {
    pub fn context(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Frame index of window entry `tau`.
    pub fn frame_of(&self, tau: usize) -> usize {
        self.t_end + 1 + tau - self.context()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FixationRow {
    observer: u32,
    frame: usize,
    x: usize,
    y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub id: String,
    pub frame_count: usize,
    /// One `[F, 1, H, W]` tensor per manifest modality.
    pub cues: Vec<Tensor>,
    /// `fixations[observer_index][frame]`.
    pub fixations: Vec<Vec<FixationPoint>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    videos: Vec<VideoData>,
    sigma_px: f64,
}

impl Dataset {
    /// Assembles a dataset from already resampled videos and checks that every
    /// observer has exactly one in-bounds fixation per frame.
    pub fn new(manifest: DatasetManifest, videos: Vec<VideoData>) -> Result<Self> {
        manifest.validate()?;
        if videos.len() != manifest.videos.len() {
            return Err(Error::Manifest(format!(
                "{} videos listed, {} provided",
                manifest.videos.len(),
                videos.len()
            )));
        }
        let (h, w) = (manifest.height, manifest.width);
        for (entry, v) in manifest.videos.iter().zip(&videos) {
            if entry.id != v.id {
                return Err(Error::Manifest(format!("video order mismatch at '{}'", v.id)));
            }
            if v.cues.len() != manifest.modalities.len() {
                return Err(Error::Manifest(format!("video '{}' has {} cue tensors", v.id, v.cues.len())));
            }
            for c in &v.cues {
                if c.shape() != [v.frame_count, 1, h, w] {
                    return Err(Error::shape("dataset", format!("cues of '{}'", v.id), format!("[{}, 1, {h}, {w}]", v.frame_count), format!("{:?}", c.shape())));
                }
            }
            if v.fixations.len() != manifest.observers.len() {
                return Err(Error::Manifest(format!("video '{}' lacks fixations for some observers", v.id)));
            }
            for (oi, track) in v.fixations.iter().enumerate() {
                if track.len() != v.frame_count {
                    return Err(Error::Manifest(format!(
                        "observer {} has {} fixations on '{}' ({} frames)",
                        manifest.observers[oi],
                        track.len(),
                        v.id,
                        v.frame_count
                    )));
                }
                for (f, p) in track.iter().enumerate() {
                    if p.frame != f || p.observer != manifest.observers[oi] {
                        return Err(Error::Manifest(format!("fixation table of '{}' is not frame-ordered", v.id)));
                    }
                    p.check_bounds(h, w).map_err(|e| Error::Manifest(e.to_string()))?;
                }
            }
        }
        let sigma_px = manifest.geometry.sigma_for_map(w)?;
        Ok(Self {
            manifest,
            videos,
            sigma_px,
        })
    }

    /// Reads the manifest and every referenced file, resampling to 10 fps.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let mut manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &mut manifest.videos {
            let keep = subsample_indices(entry.frame_count, entry.fps, TARGET_FPS)?;
            let mut cues = Vec::new();
            for m in &manifest.modalities {
                let path = root.join(&entry.cues[m]);
                let mut tensors = load_container(&path)?;
                let pos = tensors.iter().position(|(n, _)| n == m.name()).ok_or_else(|| {
                    Error::Manifest(format!("{} has no '{}' entry", path.display(), m.name()))
                })?;
                let t = tensors.swap_remove(pos).1;
                if t.rank() != 4 || t.shape()[0] != entry.frame_count {
                    return Err(Error::shape("dataset", format!("{}", path.display()), format!("[{}, 1, H, W]", entry.frame_count), format!("{:?}", t.shape())));
                }
                let frames: Vec<Tensor> = keep.iter().map(|&i| t.index_first(i)).collect::<Result<_>>()?;
                cues.push(Tensor::stack(&frames)?);
            }
            let fix_path = root.join(&entry.fixations);
            let mut fixations = read_fixations(&fix_path, &manifest.observers, entry.frame_count)?;
            for track in &mut fixations {
                *track = keep
                    .iter()
                    .enumerate()
                    .map(|(f, &i)| FixationPoint { frame: f, ..track[i] })
                    .collect();
            }
            entry.frame_count = keep.len();
            entry.fps = TARGET_FPS;
            videos.push(VideoData {
                id: entry.id.clone(),
                frame_count: keep.len(),
                cues,
                fixations,
            });
        }
        Self::new(manifest, videos)
    }

    /// Writes `manifest.json`, cue containers and fixation tables under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, v) in self.manifest.videos.iter().zip(&self.videos) {
            for (m, t) in self.manifest.modalities.iter().zip(&v.cues) {
                let path = dir.join(&entry.cues[m]);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                save_container(&path, &[(m.name().to_owned(), t.clone())])?;
            }
            let path = dir.join(&entry.fixations);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_fixations(&path, &v.fixations)?;
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn videos(&self) -> &[VideoData] {
        &self.videos
    }

    pub fn observers(&self) -> &[ObserverId] {
        &self.manifest.observers
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }

    pub fn width(&self) -> usize {
        self.manifest.width
    }

    /// Blur standard deviation of one degree of visual angle on the map grid.
    pub fn sigma_px(&self) -> f64 {
        self.sigma_px
    }

    pub fn video_index(&self, id: &str) -> Result<usize> {
        self.videos
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown video '{id}'")))
    }

    pub fn split_indices(&self, split: Split) -> Result<Vec<usize>> {
        self.manifest.splits.get(split).iter().map(|id| self.video_index(id)).collect()
    }

    pub fn frame_count(&self, video: usize) -> usize {
        self.videos[video].frame_count
    }

    pub fn fixation(&self, video: usize, observer: ObserverId, frame: usize) -> Result<FixationPoint> {
        let oi = self.manifest.observer_index(observer)?;
        self.videos[video].fixations[oi]
            .get(frame)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} beyond video '{}'", self.videos[video].id)))
    }

    /// Fixations of all observers at `frame`, optionally leaving one out.
    pub fn group_points(&self, video: usize, frame: usize, exclude: Option<ObserverId>) -> Vec<FixationPoint> {
        self.manifest
            .observers
            .iter()
            .zip(&self.videos[video].fixations)
            .filter(|(o, _)| Some(**o) != exclude)
            .map(|(_, track)| track[frame])
            .collect()
    }

    /// Cue maps of `modalities` for frames `t_end − T′ + 1 ..= t_end`.
    pub fn cue_window(&self, video: usize, t_end: usize, context: usize, modalities: &[Modality]) -> Result<CueWindow> {
        let v = &self.videos[video];
        if context == 0 || t_end + 1 < context || t_end >= v.frame_count {
            return Err(Error::InvalidArgument(format!(
                "cue window of {context} frames ending at {t_end} does not fit video '{}' ({} frames)",
                v.id, v.frame_count
            )));
        }
        let channels: Vec<usize> = modalities
            .iter()
            .map(|m| {
                self.manifest
                    .modalities
                    .iter()
                    .position(|x| x == m)
                    .ok_or_else(|| Error::InvalidArgument(format!("modality {m} not in dataset")))
            })
            .collect::<Result<_>>()?;
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let mut data = Vec::with_capacity(context * channels.len() * plane);
        for f in t_end + 1 - context..=t_end {
            for &c in &channels {
                data.extend_from_slice(&v.cues[c].data()[f * plane..(f + 1) * plane]);
            }
        }
        Ok(CueWindow {
            maps: Tensor::new(&[context, channels.len(), 1, h, w], data)?,
            modalities: modalities.to_vec(),
            t_end,
        })
    }
}

fn read_fixations(path: &Path, observers: &[ObserverId], frames: usize) -> Result<Vec<Vec<FixationPoint>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut slots: Vec<Vec<Option<FixationPoint>>> = vec![vec![None; frames]; observers.len()];
    for row in reader.deserialize::<FixationRow>() {
        let row = row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let observer = ObserverId(row.observer);
        let oi = observers
            .iter()
            .position(|&o| o == observer)
            .ok_or_else(|| Error::Manifest(format!("{}: unknown observer {observer}", path.display())))?;
        let slot = slots[oi]
            .get_mut(row.frame)
            .ok_or_else(|| Error::Manifest(format!("{}: frame {} out of range", path.display(), row.frame)))?;
        if slot.is_some() {
            return Err(Error::Manifest(format!(
                "{}: duplicate fixation for {observer} at frame {}",
                path.display(),
                row.frame
            )));
        }
        *slot = Some(FixationPoint {
            x: row.x,
            y: row.y,
            observer,
            frame: row.frame,
        });
    }
    slots
        .into_iter()
        .zip(observers)
        .map(|(track, o)| {
            track
                .into_iter()
                .enumerate()
                .map(|(f, p)| p.ok_or_else(|| Error::Manifest(format!("{}: {o} has no fixation at frame {f}", path.display()))))
                .collect()
        })
        .collect()
}

fn write_fixations(path: &Path, fixations: &[Vec<FixationPoint>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    for track in fixations {
        for p in track {
            w.serialize(FixationRow {
                observer: p.observer.0,
                frame: p.frame,
                x: p.x,
                y: p.y,
            })
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
