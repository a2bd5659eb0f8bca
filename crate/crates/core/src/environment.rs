//! The search MDP: episode state, action semantics, transitions, and rewards.
//!
//! An episode starts on the whole image. Movement actions descend to one of
//! the five child regions; the trigger action declares the current region a
//! detection and ends the search. Movement reward is the sign of the IoU
//! change toward the best-overlapping object; the trigger earns +eta when the
//! region's IoU with that object reaches tau and -eta otherwise.

use std::io::Write;

use crate::error::{Error, Result};
use crate::features::{
    extract_crop, extract_zoom, precompute_maps, Descriptor, FeatureMapSet, ImageRaster,
};
use crate::geometry::{children, iou, BBox, HierarchyScheme};

/// Number of distinct actions: five movements plus the trigger.
pub const ACTION_COUNT: usize = 6;
/// One-hot action slots kept in the memory vector.
pub const MEMORY_SLOTS: usize = 4;
/// Total memory vector length.
pub const MEMORY_LEN: usize = MEMORY_SLOTS * ACTION_COUNT;

/// Agent actions. Movement indices 0..=4 are bound to the child order of
/// [`children`]; index 5 is the trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    TopLeft = 0,
    TopRight = 1,
    BottomLeft = 2,
    BottomRight = 3,
    Center = 4,
    Trigger = 5,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::TopLeft,
        Action::TopRight,
        Action::BottomLeft,
        Action::BottomRight,
        Action::Center,
        Action::Trigger,
    ];

    pub fn from_index(index: usize) -> Result<Action> {
        Action::ALL
            .get(index)
            .copied()
            .ok_or(Error::InvalidAction(index))
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn is_trigger(&self) -> bool {
        matches!(self, Action::Trigger)
    }
}

/// One-hot encoding of the last four actions, most recent in slot 0.
/// Slots for steps not yet taken stay all-zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryVector([f32; MEMORY_LEN]);

impl MemoryVector {
    pub fn zeros() -> Self {
        MemoryVector([0.0; MEMORY_LEN])
    }

    /// Shifts history one slot back and records `action` in slot 0.
    pub fn record(&self, action: Action) -> Self {
        let mut next = [0.0; MEMORY_LEN];
        next[ACTION_COUNT..].copy_from_slice(&self.0[..MEMORY_LEN - ACTION_COUNT]);
        next[action.index()] = 1.0;
        MemoryVector(next)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Q-network input: region descriptor plus action memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub descriptor: Descriptor,
    pub memory: MemoryVector,
}

impl AgentState {
    pub fn input_len(&self) -> usize {
        self.descriptor.len() + MEMORY_LEN
    }

    /// Flattens descriptor then memory into one network input vector.
    pub fn to_input(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.input_len());
        v.extend_from_slice(self.descriptor.values());
        v.extend_from_slice(self.memory.as_slice());
        v
    }
}

/// A ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub label: String,
}

/// An image with its annotated objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRaster,
    pub objects: Vec<GroundTruth>,
}

impl Scene {
    pub fn new(image: ImageRaster, objects: Vec<GroundTruth>) -> Result<Self> {
        let bounds = image.bounds();
        for obj in &objects {
            if obj.bbox.intersection_area(&bounds) <= 0.0 {
                return Err(Error::InvalidBox {
                    x0: obj.bbox.x0,
                    y0: obj.bbox.y0,
                    x1: obj.bbox.x1,
                    y1: obj.bbox.y1,
                });
            }
        }
        Ok(Scene { image, objects })
    }

    pub fn full_box(&self) -> BBox {
        self.image.bounds()
    }
}

/// Which descriptor strategy the environment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Re-pool full-resolution pixels for every region.
    Zoom,
    /// Crop and resample per-image feature maps.
    Crop,
}

impl ExtractorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zoom" => Ok(ExtractorKind::Zoom),
            "crop" => Ok(ExtractorKind::Crop),
            other => Err(Error::Config(format!(
                "unknown extractor '{other}' (expected 'zoom' or 'crop')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExtractorKind::Zoom => "zoom",
            ExtractorKind::Crop => "crop",
        }
    }
}

/// Environment knobs shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EnvConfig {
    pub scheme: HierarchyScheme,
    pub extractor: ExtractorKind,
    pub grid: usize,
    pub stride_shallow: usize,
    pub stride_deep: usize,
    /// Detection threshold tau for the trigger reward.
    pub tau: f64,
    /// Trigger reward magnitude eta.
    pub eta: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            scheme: HierarchyScheme::Overlapped,
            extractor: ExtractorKind::Zoom,
            grid: 7,
            stride_shallow: 8,
            stride_deep: 16,
            tau: 0.5,
            eta: 3.0,
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub region: BBox,
    pub state: AgentState,
    pub reward: f64,
    pub done: bool,
}

/// One scene bound to an extractor; episodes over it are pure given the
/// action sequence.
pub struct Env<'a> {
    scene: &'a Scene,
    cfg: EnvConfig,
    maps: Option<FeatureMapSet>,
}

impl<'a> Env<'a> {
    pub fn new(scene: &'a Scene, cfg: EnvConfig) -> Result<Self> {
        let maps = match cfg.extractor {
            ExtractorKind::Zoom => None,
            ExtractorKind::Crop => Some(precompute_maps(
                &scene.image,
                cfg.stride_shallow,
                cfg.stride_deep,
            )?),
        };
        Ok(Env { scene, cfg, maps })
    }

    pub fn scene(&self) -> &Scene {
        self.scene
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn describe(&self, region: &BBox) -> Result<Descriptor> {
        match self.cfg.extractor {
            ExtractorKind::Zoom => extract_zoom(&self.scene.image, region, self.cfg.grid),
            ExtractorKind::Crop => {
                extract_crop(self.maps.as_ref().expect("maps precomputed"), region, self.cfg.grid)
            }
        }
    }

    /// Whole-image region, zeroed memory, fresh descriptor.
    pub fn reset(&self) -> Result<(AgentState, BBox)> {
        let region = self.scene.full_box();
        let descriptor = self.describe(&region)?;
        Ok((
            AgentState { descriptor, memory: MemoryVector::zeros() },
            region,
        ))
    }

    /// The ground-truth object with the highest IoU against `region`;
    /// ties break to the lowest index. The target may change as the agent
    /// descends.
    pub fn select_target(&self, region: &BBox) -> Result<&GroundTruth> {
        let mut best: Option<(&GroundTruth, f64)> = None;
        for obj in &self.scene.objects {
            let overlap = iou(region, &obj.bbox);
            match best {
                Some((_, b)) if overlap <= b => {}
                _ => best = Some((obj, overlap)),
            }
        }
        best.map(|(obj, _)| obj).ok_or(Error::NoGroundTruth)
    }

    /// IoU between `region` and its selected target.
    pub fn target_iou(&self, region: &BBox) -> Result<f64> {
        let target = self.select_target(region)?;
        Ok(iou(region, &target.bbox))
    }

    /// Applies `action` from `region`. The reward target is chosen in the
    /// pre-move region — the one the agent deliberated in.
    pub fn step(
        &self,
        region: &BBox,
        state: &AgentState,
        action: Action,
    ) -> Result<Transition> {
        let target = self.select_target(region)?.bbox;
        let memory = state.memory.record(action);
        if action.is_trigger() {
            let hit = iou(region, &target) >= self.cfg.tau;
            let reward = if hit { self.cfg.eta } else { -self.cfg.eta };
            return Ok(Transition {
                region: *region,
                state: AgentState { descriptor: state.descriptor.clone(), memory },
                reward,
                done: true,
            });
        }
        let next_region = children(region, self.cfg.scheme)[action.index()];
        let delta = iou(&next_region, &target) - iou(region, &target);
        let reward = if delta > 0.0 {
            1.0
        } else if delta < 0.0 {
            -1.0
        } else {
            0.0
        };
        let descriptor = self.describe(&next_region)?;
        Ok(Transition {
            region: next_region,
            state: AgentState { descriptor, memory },
            reward,
            done: false,
        })
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Triggered,
    StepLimit,
}

/// One decision the agent made.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    /// Region the agent deliberated in.
    pub region: BBox,
    pub q_values: [f64; ACTION_COUNT],
    pub action: Action,
    pub reward: f64,
}

/// Ordered record of one search.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub steps: Vec<EpisodeStep>,
    pub status: EpisodeStatus,
}

impl EpisodeTrace {
    /// Movement actions taken before the episode ended.
    pub fn movement_steps(&self) -> usize {
        self.steps.iter().filter(|s| !s.action.is_trigger()).count()
    }

    /// Triggered on a region whose IoU reached tau (reward sign says so).
    pub fn detected(&self) -> bool {
        self.status == EpisodeStatus::Triggered
            && self.steps.last().map(|s| s.reward > 0.0).unwrap_or(false)
    }

    /// One line per step: region corners, action index, six Q-values, reward.
    pub fn write_records<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            write!(
                w,
                "{},{},{},{},{}",
                s.region.x0, s.region.y0, s.region.x1, s.region.y1,
                s.action.index()
            )?;
            for q in &s.q_values {
                write!(w, ",{q}")?;
            }
            writeln!(w, ",{}", s.reward)?;
        }
        Ok(())
    }
}
