//! Video samples, the synthetic co-scene generator, temporal resampling and
//! the on-disk dataset format.

mod io;
mod resample;
mod synthetic;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use resample::resample_time;
pub use synthetic::{generate_synthetic, signatures_for, ClassSignatures};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::error::{Error, Result};

/// A labelled temporal interval `[start, end)` in segment units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GtSegment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl GtSegment {
    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One untrimmed video: a T×F feature sequence whose first F/2 columns are
/// the "rgb" stream and last F/2 the "flow" stream, plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub features: Tensor2,
    /// Video-level multi-hot label over the C action classes.
    pub label: Vec<bool>,
    /// Positive action intervals; evaluation only, never seen by training.
    pub gt_segments: Vec<GtSegment>,
    /// Co-scene context intervals (class = the scene's class). Generator
    /// bookkeeping used for false-positive analysis.
    pub co_scene_segments: Vec<GtSegment>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.label.iter().enumerate().filter(|(_, &on)| on).map(|(c, _)| c)
    }

    /// Per-segment foreground indicator derived from `gt_segments`.
    pub fn foreground_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for seg in &self.gt_segments {
            for m in &mut mask[seg.start..seg.end] {
                *m = true;
            }
        }
        mask
    }

    pub fn co_scene_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for seg in &self.co_scene_segments {
            for m in &mut mask[seg.start..seg.end] {
                *m = true;
            }
        }
        mask
    }

    pub fn validate(&self, num_classes: usize, require_label: bool) -> Result<()> {
        if self.label.len() != num_classes {
            return Err(Error::invalid(format!(
                "video {}: label has {} entries, expected {num_classes}",
                self.id,
                self.label.len()
            )));
        }
        if require_label && !self.label.iter().any(|&b| b) {
            return Err(Error::invalid(format!("video {}: empty label", self.id)));
        }
        let t_len = self.len();
        for seg in self.gt_segments.iter().chain(&self.co_scene_segments) {
            if seg.start >= seg.end || seg.end > t_len || seg.class >= num_classes {
                return Err(Error::invalid(format!(
                    "video {}: bad interval {seg:?} for T={t_len}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic co-scene-confound generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub segments_per_video: usize,
    pub feature_dim: usize,
    /// Inclusive range of action instances per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive range of instance lengths in segments.
    pub action_length: (usize, usize),
    /// ρ: weight of the scene signature inside positive action segments.
    pub scene_correlation: f64,
    /// Fraction of context segments that carry the scene signature alone.
    pub co_scene_fraction: f64,
    pub noise_sigma: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            segments_per_video: 64,
            feature_dim: 32,
            actions_per_video: (1, 3),
            action_length: (4, 10),
            scene_correlation: 0.8,
            co_scene_fraction: 0.3,
            noise_sigma: 0.1,
            num_train: 200,
            num_test: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=1.0).contains(&self.scene_correlation) {
            return bad(format!("scene_correlation {} outside [0,1]", self.scene_correlation));
        }
        if !(0.0..=1.0).contains(&self.co_scene_fraction) {
            return bad(format!("co_scene_fraction {} outside [0,1]", self.co_scene_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return bad(format!("feature_dim {} must be even and positive", self.feature_dim));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes {} out of range", self.num_classes));
        }
        if 2 * self.num_classes > self.feature_dim / 2 {
            return bad(format!(
                "{} classes need {} orthonormal directions per stream but a stream has {} dims",
                self.num_classes,
                2 * self.num_classes,
                self.feature_dim / 2
            ));
        }
        let (amin, amax) = self.actions_per_video;
        let (lmin, lmax) = self.action_length;
        if amin == 0 || amin > amax {
            return bad(format!("actions_per_video range {amin}..={amax} invalid"));
        }
        if lmin == 0 || lmin > lmax {
            return bad(format!("action_length range {lmin}..={lmax} invalid"));
        }
        let worst = amax * lmax + (amax - 1);
        if worst > self.segments_per_video {
            return bad(format!(
                "{amax} actions of length up to {lmax} do not fit in T={}",
                self.segments_per_video
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn segments(&self) -> usize {
        self.spec.segments_per_video
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for (split, require_label) in [(&self.train, true), (&self.test, false)] {
            for v in split {
                if v.features.shape() != (self.segments(), self.feature_dim()) {
                    return Err(Error::invalid(format!(
                        "video {} has features {:?}, expected {}x{}",
                        v.id,
                        v.features.shape(),
                        self.segments(),
                        self.feature_dim()
                    )));
                }
                v.validate(self.num_classes(), require_label)?;
                if !ids.insert(v.id.as_str()) {
                    return Err(Error::invalid(format!("duplicate video id {}", v.id)));
                }
            }
        }
        Ok(())
    }
}
