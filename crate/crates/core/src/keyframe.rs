//! Keyframe gating.
//!
//! [`KeyframeSelector`] runs the distribution-aware gate: every frame is
//! transformed into the map frame and merged into a voxel GMM map, and the
//! frame becomes a keyframe when the average per-voxel Wasserstein distance
//! between the map before and after the update exceeds `tau`. The map keeps
//! every frame, keyframe or not, and is pruned to `map_radius` around the
//! current position after each update.
//!
//! The radius gate ([`decide_radius`]) is the motion-threshold baseline.

use std::fmt;

use nalgebra::Vector3;

use crate::gmm::{map_w2, Averaging, GmmError, VoxelMap, W2Options};
use crate::se3::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyframeMode {
    #[default]
    Wasserstein,
    Radius,
}

impl fmt::Display for KeyframeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyframeMode::Wasserstein => "wasserstein",
            KeyframeMode::Radius => "radius",
        })
    }
}

impl std::str::FromStr for KeyframeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "wasserstein" | "ws" => Ok(KeyframeMode::Wasserstein),
            "radius" | "rs" => Ok(KeyframeMode::Radius),
            other => Err(format!("unknown keyframe mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KeyframeError {
    #[error("tau must be positive, got {0}")]
    Tau(f64),
    #[error("map radius {radius} must exceed voxel size {voxel}")]
    Radius { radius: f64, voxel: f64 },
    #[error(transparent)]
    Map(#[from] GmmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeConfig {
    /// Wasserstein threshold, meters.
    pub tau: f64,
    pub voxel_size: f64,
    pub map_radius: f64,
    pub mode: KeyframeMode,
    /// Radius-gate translation threshold, meters.
    pub d_t: f64,
    /// Radius-gate rotation threshold, radians.
    pub d_r: f64,
    pub min_count: usize,
    pub averaging: Averaging,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        let voxel_size = 2.0;
        Self {
            tau: 0.3 * voxel_size,
            voxel_size,
            map_radius: 100.0,
            mode: KeyframeMode::Wasserstein,
            d_t: 0.1,
            d_r: 0.1,
            min_count: 6,
            averaging: Averaging::Unweighted,
        }
    }
}

impl KeyframeConfig {
    /// Config with `tau = 0.3 · voxel_size`.
    pub fn with_voxel_size(voxel_size: f64, map_radius: f64) -> Self {
        Self { tau: 0.3 * voxel_size, voxel_size, map_radius, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), KeyframeError> {
        if !(self.tau > 0.0) {
            return Err(KeyframeError::Tau(self.tau));
        }
        if !(self.voxel_size > 0.0) {
            return Err(GmmError::VoxelSize(self.voxel_size).into());
        }
        if !(self.map_radius > self.voxel_size) {
            return Err(KeyframeError::Radius { radius: self.map_radius, voxel: self.voxel_size });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub is_keyframe: bool,
    /// Average Wasserstein distance (0 in radius mode).
    pub distance: f64,
    pub touched: usize,
    /// Voxel pairs that entered the average.
    pub eligible: usize,
    /// Voxels in the map after the update and pruning.
    pub voxel_count: usize,
}

impl KeyframeDecision {
    fn skip() -> Self {
        Self { is_keyframe: false, distance: 0.0, touched: 0, eligible: 0, voxel_count: 0 }
    }
}

/// One line of the per-frame decision log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub frame: usize,
    pub decision: KeyframeDecision,
}

impl DecisionRecord {
    /// `frame_id d_w b touched eligible voxel_count`
    pub fn to_line(&self) -> String {
        let d = &self.decision;
        format!("{} {:.17e} {} {} {} {}", self.frame, d.distance, u8::from(d.is_keyframe), d.touched, d.eligible, d.voxel_count)
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return None;
        }
        let is_keyframe = match f[2] {
            "0" => false,
            "1" => true,
            _ => return None,
        };
        Some(Self {
            frame: f[0].parse().ok()?,
            decision: KeyframeDecision {
                is_keyframe,
                distance: f[1].parse().ok()?,
                touched: f[3].parse().ok()?,
                eligible: f[4].parse().ok()?,
                voxel_count: f[5].parse().ok()?,
            },
        })
    }
}

/// Motion-threshold gate: keyframe iff the translation or rotation change
/// since `last_keyframe` exceeds `d_t` / `d_r`.
pub fn decide_radius(pose: &Pose, last_keyframe: &Pose, cfg: &KeyframeConfig) -> KeyframeDecision {
    let (dt, dr) = Pose::distance(last_keyframe, pose);
    KeyframeDecision { is_keyframe: dt > cfg.d_t || dr > cfg.d_r, ..KeyframeDecision::skip() }
}

/// Sequential keyframe gate owning its voxel map.
#[derive(Debug, Clone)]
pub struct KeyframeSelector {
    cfg: KeyframeConfig,
    map: VoxelMap,
    last_keyframe: Option<Pose>,
    frames: usize,
    history: Vec<DecisionRecord>,
}

impl KeyframeSelector {
    pub fn new(cfg: KeyframeConfig) -> Result<Self, KeyframeError> {
        cfg.validate()?;
        Ok(Self { map: VoxelMap::new(cfg.voxel_size, cfg.map_radius)?, cfg, last_keyframe: None, frames: 0, history: Vec::new() })
    }

    pub fn config(&self) -> &KeyframeConfig {
        &self.cfg
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn history(&self) -> &[DecisionRecord] {
        &self.history
    }

    /// Decides whether `frame` (body-frame points observed at `pose`) is a
    /// keyframe. The first non-empty frame always is.
    pub fn decide(&mut self, frame: &[Vector3<f64>], pose: &Pose) -> KeyframeDecision {
        let decision = match self.cfg.mode {
            KeyframeMode::Wasserstein => self.decide_wasserstein(frame, pose),
            KeyframeMode::Radius => match (&self.last_keyframe, frame.is_empty()) {
                (_, true) => KeyframeDecision::skip(),
                (None, false) => KeyframeDecision { is_keyframe: true, ..KeyframeDecision::skip() },
                (Some(last), false) => decide_radius(pose, last, &self.cfg),
            },
        };
        if decision.is_keyframe {
            self.last_keyframe = Some(*pose);
        }
        self.history.push(DecisionRecord { frame: self.frames, decision });
        self.frames += 1;
        decision
    }

    fn decide_wasserstein(&mut self, frame: &[Vector3<f64>], pose: &Pose) -> KeyframeDecision {
        if frame.is_empty() {
            return KeyframeDecision { voxel_count: self.map.len(), ..KeyframeDecision::skip() };
        }
        let bootstrap = self.last_keyframe.is_none();
        let world: Vec<Vector3<f64>> = frame.iter().map(|p| pose.transform_point(p)).collect();
        let (touched, before) = self.map.insert_with_snapshot(&world);
        let opts = W2Options { min_count: self.cfg.min_count, averaging: self.cfg.averaging };
        let d = map_w2(&before, &self.map, &touched, &opts);
        self.map.prune(&pose.translation);
        KeyframeDecision {
            is_keyframe: bootstrap || d.mean > self.cfg.tau,
            distance: d.mean,
            touched: touched.len(),
            eligible: d.eligible,
            voxel_count: self.map.len(),
        }
    }
}
