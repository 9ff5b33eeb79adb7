//! Interaction features for human/environment box pairs, and object boxes.
//!
//! Pretrained detectors are replaced by deterministic providers: a synthetic
//! one that encodes pair geometry (and optionally scene interaction labels),
//! and a file-backed one that replays exported feature dumps.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyParams;
use crate::camera::{CameraParams, NormBox};
use crate::metrics::{giou, iou};
use crate::{Error, Result};

/// Every provider feature component lies in `[-FEATURE_BOUND, FEATURE_BOUND]`.
pub const FEATURE_BOUND: f64 = 1.0;

/// Minimum IoU for a provider box to be associated with a scene entity.
pub const LABEL_IOU_FLOOR: f64 = 0.3;

/// Number of raw geometry components fed to the sinusoidal lifting.
pub const GEOMETRY_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityRef {
    Person(usize),
    Object(usize),
}

/// Directed interaction `subject → target` with a category id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLabel {
    pub subject: usize,
    pub target: EntityRef,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub params: BodyParams,
    pub camera: CameraParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: NormBox,
    pub category: u32,
}

/// Ground-truth scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub persons: Vec<PersonSpec>,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub interactions: Vec<InteractionLabel>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return Err(Error::Config(format!("objects[{i}]: invalid box {:?}", o.bbox)));
            }
        }
        for (i, l) in self.interactions.iter().enumerate() {
            let ok = l.subject < self.persons.len()
                && match l.target {
                    EntityRef::Person(p) => p < self.persons.len() && p != l.subject,
                    EntityRef::Object(o) => o < self.objects.len(),
                };
            if !ok {
                return Err(Error::Config(format!("interactions[{i}]: invalid reference {l:?}")));
            }
        }
        Ok(())
    }

    pub fn label_for(&self, subject: usize, target: EntityRef) -> Option<u32> {
        self.interactions
            .iter()
            .find(|l| l.subject == subject && l.target == target)
            .map(|l| l.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// Relative box geometry only.
    Geometric,
    /// Geometry mixed with a hash embedding of the scene's interaction label.
    Labeled,
    /// All-zero features.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub feature_dim: usize,
    pub mode: ProviderMode,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 768,
            mode: ProviderMode::Labeled,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("provider feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Source of interaction features for a (human box, environment box) pair.
pub trait InteractionProvider: Sync {
    fn feature_dim(&self) -> usize;
    fn extract(&self, human: &NormBox, env: &NormBox) -> Vec<f64>;
}

/// Raw pair geometry: center offset, log size ratios, IoU and GIoU.
pub fn geometry_code(human: &NormBox, env: &NormBox) -> [f64; GEOMETRY_DIM] {
    [
        env.cx - human.cx,
        env.cy - human.cy,
        (env.w / human.w).ln(),
        (env.h / human.h).ln(),
        iou(human, env),
        giou(human, env),
    ]
}

/// Fixed sinusoidal lifting to `dim` components.
///
/// Component `c` uses geometry entry `(c / 2) % 6`, frequency band
/// `c / 12` (angular frequency `π/2 · 2^(band mod 8)`), and `sin` for even
/// `c`, `cos` for odd `c`.
pub fn lift(code: &[f64; GEOMETRY_DIM], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let entry = (c / 2) % GEOMETRY_DIM;
            let band = (c / (2 * GEOMETRY_DIM)) % 8;
            let omega = PI / 2.0 * (1u32 << band) as f64;
            let x = omega * code[entry];
            if c % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed pseudo-random embedding of an interaction label; components in `[-1, 1]`.
pub fn label_embedding(label: u32, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let h = splitmix64(((label as u64) << 32) ^ c as u64);
            let phase = (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI;
            phase.sin()
        })
        .collect()
}

/// Synthetic stand-in for a pretrained interaction detector.
#[derive(Debug, Clone)]
pub struct SyntheticProvider<'a> {
    scene: &'a SceneSpec,
    person_boxes: Vec<NormBox>,
    cfg: ProviderConfig,
}

impl<'a> SyntheticProvider<'a> {
    /// `person_boxes[i]` is the ground-truth box of `scene.persons[i]`.
    pub fn new(scene: &'a SceneSpec, person_boxes: Vec<NormBox>, cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        if person_boxes.len() != scene.persons.len() {
            return Err(Error::shape("one ground-truth box per scene person required"));
        }
        Ok(Self {
            scene,
            person_boxes,
            cfg,
        })
    }

    fn best_entity(&self, b: &NormBox, exclude: Option<EntityRef>, persons_only: bool) -> Option<EntityRef> {
        let people = self
            .person_boxes
            .iter()
            .enumerate()
            .map(|(i, pb)| (EntityRef::Person(i), iou(b, pb)));
        let objects = self
            .scene
            .objects
            .iter()
            .enumerate()
            .filter(|_| !persons_only)
            .map(|(i, o)| (EntityRef::Object(i), iou(b, &o.bbox)));
        let mut best: Option<(EntityRef, f64)> = None;
        for (e, score) in people.chain(objects) {
            if Some(e) == exclude || score < LABEL_IOU_FLOOR {
                continue;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((e, score));
            }
        }
        best.map(|(e, _)| e)
    }

    /// Label of the scene pair the two boxes most plausibly depict, if any.
    pub fn matched_label(&self, human: &NormBox, env: &NormBox) -> Option<u32> {
        let subject = match self.best_entity(human, None, true)? {
            EntityRef::Person(i) => i,
            EntityRef::Object(_) => return None,
        };
        let target = self.best_entity(env, Some(EntityRef::Person(subject)), false)?;
        self.scene.label_for(subject, target)
    }
}

impl InteractionProvider for SyntheticProvider<'_> {
    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn extract(&self, human: &NormBox, env: &NormBox) -> Vec<f64> {
        let dim = self.cfg.feature_dim;
        match self.cfg.mode {
            ProviderMode::Zero => vec![0.0; dim],
            ProviderMode::Geometric => lift(&geometry_code(human, env), dim),
            ProviderMode::Labeled => {
                let geo = lift(&geometry_code(human, env), dim);
                match self.matched_label(human, env) {
                    Some(label) => geo
                        .iter()
                        .zip(label_embedding(label, dim))
                        .map(|(g, e)| 0.5 * g + 0.5 * e)
                        .collect(),
                    None => geo,
                }
            }
        }
    }
}

/// Provider that always returns zeros.
#[derive(Debug, Clone, Copy)]
pub struct ZeroProvider {
    pub feature_dim: usize,
}

impl InteractionProvider for ZeroProvider {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, _human: &NormBox, _env: &NormBox) -> Vec<f64> {
        vec![0.0; self.feature_dim]
    }
}

/// One exported `(human box, environment box, feature)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub human_box: [f64; 4],
    pub env_box: [f64; 4],
    pub feature: Vec<f64>,
}

/// Per-image feature dump written by an external interaction detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub pairs: Vec<FeatureRecord>,
}

/// Replays a [`FeatureDump`]: each query pair takes the feature of the record
/// with the smallest summed L1 box distance, or zeros when none is within
/// `tolerance`.
#[derive(Debug, Clone)]
pub struct FeatureDumpProvider {
    dump: FeatureDump,
    feature_dim: usize,
    tolerance: f64,
}

impl FeatureDumpProvider {
    pub fn new(dump: FeatureDump, feature_dim: usize, tolerance: f64) -> Result<Self> {
        for (i, r) in dump.pairs.iter().enumerate() {
            if r.feature.len() != feature_dim {
                return Err(Error::shape(format!(
                    "pairs[{i}].feature has {} entries, expected {feature_dim}",
                    r.feature.len()
                )));
            }
            if r.feature.iter().chain(&r.human_box).chain(&r.env_box).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("pairs[{i}]: non-finite value")));
            }
        }
        Ok(Self {
            dump,
            feature_dim,
            tolerance,
        })
    }

    pub fn load(path: impl AsRef<Path>, feature_dim: usize, tolerance: f64) -> Result<Self> {
        let dump: FeatureDump = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(dump, feature_dim, tolerance)
    }
}

impl InteractionProvider for FeatureDumpProvider {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, human: &NormBox, env: &NormBox) -> Vec<f64> {
        let h = human.to_array();
        let e = env.to_array();
        let dist = |r: &FeatureRecord| -> f64 {
            (0..4).map(|i| (r.human_box[i] - h[i]).abs() + (r.env_box[i] - e[i]).abs()).sum()
        };
        self.dump
            .pairs
            .iter()
            .map(|r| (dist(r), r))
            .filter(|(d, _)| *d <= self.tolerance)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, r)| r.feature.clone())
            .unwrap_or_else(|| vec![0.0; self.feature_dim])
    }
}

/// Ground-truth object boxes jittered by seeded uniform noise of magnitude
/// `noise`, clamped valid and truncated to `max_out`.
pub fn detect_objects(scene: &SceneSpec, noise: f64, max_out: usize) -> Result<Vec<NormBox>> {
    if !(noise >= 0.0) {
        return Err(Error::Domain(format!("detector noise must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x0B1E_C7DE_7EC7_0000);
    Ok(scene
        .objects
        .iter()
        .take(max_out)
        .map(|o| {
            let mut j = |v: f64| if noise > 0.0 { v + rng.gen_range(-noise..=noise) } else { v };
            let b = o.bbox;
            NormBox::clamped(j(b.cx), j(b.cy), j(b.w), j(b.h))
        })
        .collect())
}
