//! End-to-end orchestration: synthetic scenes, image tokens, decoder
//! forward, evaluation reports, mesh export and the self-test suites.
//!
//! Scenes are processed independently (in parallel when rayon has threads)
//! and always reassembled in scene order, so output bytes never depend on the
//! thread count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{
    forward, forward_rigid, make_toy_model, rodrigues, BodyModelSpec, BodyParams, RigidTransform, Vec3,
};
use crate::camera::{CameraParams, DepthConvention, NormBox};
use crate::decoder::{
    box_position_encoding, contextual_interaction_encoder, contextual_interaction_encoder_with_mask, decode,
    init_weights, interaction_guided_refiner, DecoderConfig, DecoderWeights, EncoderBlock, InteractionTokenSet,
    RefinerBlock,
};
use crate::interaction::{
    detect_objects, splitmix64, EntityRef, InteractionLabel, PersonSpec, ProviderConfig, ProviderMode, SceneObject,
    SceneSpec, SyntheticProvider,
};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::matching::{brute_force_assign, hungarian, CostMatrix, CostWeights};
use crate::metrics::{iou, mpjpe, pa_mpjpe, pck3d_count, pve, DEFAULT_PCK_THRESHOLD_MM};
use crate::numerics::{AttnMask, Matrix};
use crate::person::PersonRecord;
use crate::{Error, Result};

/// IoU needed for a matched prediction to count as a true positive.
pub const DETECTION_IOU: f64 = 0.5;

/// Body model source: a JSON file, or a generated toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub path: Option<PathBuf>,
    pub toy_seed: u64,
    pub toy_vertices: usize,
    pub toy_joints: usize,
    pub toy_shapes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: None,
            toy_seed: 7,
            toy_vertices: 240,
            toy_joints: 24,
            toy_shapes: 10,
        }
    }
}

impl ModelConfig {
    pub fn load(&self) -> Result<BodyModelSpec> {
        match &self.path {
            Some(p) => BodyModelSpec::load(p),
            None => make_toy_model(self.toy_seed, self.toy_vertices, self.toy_joints, self.toy_shapes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene_count: usize,
    /// Inclusive person-count range per scene.
    pub persons: [usize; 2],
    /// Inclusive object-count range per scene.
    pub objects: [usize; 2],
    /// 0 spreads people across the frame, 1 packs them together.
    pub crowding: f64,
    /// Bound on each axis-angle component of sampled poses.
    pub pose_bound: f64,
    pub shape_bound: f64,
    /// Range of sampled weak-perspective scales.
    pub scale_range: [f64; 2],
    /// Probability that a person-object or person-person pair carries a label.
    pub label_rate: f64,
    pub decoder: DecoderConfig,
    pub provider: ProviderConfig,
    pub model: ModelConfig,
    pub cost: CostWeights,
    pub loss: LossWeights,
    pub conf_threshold: f64,
    pub pck_threshold_mm: f64,
    pub depth: DepthConvention,
    pub object_noise: f64,
    pub max_objects: usize,
    /// Background image tokens added to the per-person tokens.
    pub background_tokens: usize,
    pub token_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let decoder = DecoderConfig::desk();
        Self {
            seed: 0,
            scene_count: 8,
            persons: [1, 4],
            objects: [0, 3],
            crowding: 0.5,
            pose_bound: 0.3,
            shape_bound: 1.0,
            scale_range: [0.18, 0.32],
            label_rate: 0.6,
            decoder,
            provider: ProviderConfig {
                feature_dim: decoder.interaction_dim,
                mode: ProviderMode::Labeled,
            },
            model: ModelConfig::default(),
            cost: CostWeights::default(),
            loss: LossWeights::default(),
            conf_threshold: 0.3,
            pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM,
            depth: DepthConvention::default(),
            object_noise: 0.01,
            max_objects: 16,
            background_tokens: 12,
            token_noise: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.decoder.validate()?;
        self.provider.validate()?;
        self.cost.validate()?;
        self.loss.validate()?;
        if self.persons[0] < 1 || self.persons[0] > self.persons[1] {
            return fail(format!("person range {:?} must satisfy 1 <= min <= max", self.persons));
        }
        if self.objects[0] > self.objects[1] {
            return fail(format!("object range {:?} has min > max", self.objects));
        }
        if self.persons[1] > self.decoder.n_queries {
            return fail(format!(
                "up to {} persons but only {} queries",
                self.persons[1], self.decoder.n_queries
            ));
        }
        if !(0.0..=1.0).contains(&self.crowding) || !(0.0..=1.0).contains(&self.label_rate) {
            return fail("crowding and label_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return fail(format!("conf_threshold {} outside [0, 1]", self.conf_threshold));
        }
        if !(self.pck_threshold_mm > 0.0) {
            return fail(format!("pck_threshold_mm must be positive, got {}", self.pck_threshold_mm));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return fail(format!("scale_range {:?} must be positive and ordered", self.scale_range));
        }
        if !(self.pose_bound >= 0.0 && self.shape_bound >= 0.0 && self.object_noise >= 0.0 && self.token_noise >= 0.0) {
            return fail("bounds and noise levels must be nonnegative".into());
        }
        if !(self.depth.focal > 0.0 && self.depth.img_extent > 0.0) {
            return fail("depth convention needs positive focal and extent".into());
        }
        if self.provider.feature_dim != self.decoder.interaction_dim {
            return fail(format!(
                "provider feature_dim {} differs from decoder interaction_dim {}",
                self.provider.feature_dim, self.decoder.interaction_dim
            ));
        }
        if self.scene_count == 0 {
            return fail("scene_count must be at least 1".into());
        }
        Ok(())
    }

    /// Loads the body model and checks it against the decoder heads.
    pub fn body_model(&self) -> Result<BodyModelSpec> {
        let m = self.model.load()?;
        if m.joint_count() != self.decoder.joint_count || m.shape_count() != self.decoder.shape_count {
            return Err(Error::Config(format!(
                "body model has {} joints / {} shape coefficients, decoder expects {} / {}",
                m.joint_count(),
                m.shape_count(),
                self.decoder.joint_count,
                self.decoder.shape_count
            )));
        }
        Ok(m)
    }

    pub fn init_weights(&self) -> Result<DecoderWeights> {
        init_weights(&self.decoder, splitmix64(self.seed ^ 0x5745_4947_4854))
    }
}

fn scene_seed(base: u64, index: usize) -> u64 {
    splitmix64(base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Generates `count` scenes deterministically from `config.seed`.
pub fn gen_scenes(config: &RunConfig, count: usize) -> Result<Vec<SceneSpec>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    let model = config.body_model()?;
    (0..count).map(|i| gen_scene(config, &model, scene_seed(config.seed, i))).collect()
}

fn gen_scene(config: &RunConfig, model: &BodyModelSpec, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.persons[0]..=config.persons[1]);
    let r = rng.gen_range(config.objects[0]..=config.objects[1]);
    let spread = 0.32 * (1.0 - config.crowding) + 0.04;
    let center = (rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6));
    let [s0, s1] = config.scale_range;

    let mut persons = Vec::with_capacity(n);
    for _ in 0..n {
        let mut sym = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
        let pose = (0..model.joint_count())
            .map(|_| [sym(config.pose_bound), sym(config.pose_bound), sym(config.pose_bound)])
            .collect();
        let shape = (0..model.shape_count()).map(|_| sym(config.shape_bound)).collect();
        let tx = (center.0 + sym(spread)).clamp(0.1, 0.9);
        let ty = (center.1 + sym(spread * 0.5)).clamp(0.2, 0.8);
        let s = if s1 > s0 { rng.gen_range(s0..=s1) } else { s0 };
        persons.push(PersonSpec {
            params: BodyParams::new(pose, shape)?,
            camera: CameraParams::new(s, tx, ty)?,
        });
    }

    let mut objects = Vec::with_capacity(r);
    let mut interactions = Vec::new();
    for o in 0..r {
        let owner = rng.gen_range(0..n);
        let cam = persons[owner].camera;
        let bbox = NormBox::clamped(
            cam.tx + rng.gen_range(-0.15..0.15),
            cam.ty + rng.gen_range(-0.1..0.2),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.05..0.25),
        );
        objects.push(SceneObject {
            bbox,
            category: rng.gen_range(0..12),
        });
        if rng.gen_bool(config.label_rate) {
            interactions.push(InteractionLabel {
                subject: owner,
                target: EntityRef::Object(o),
                label: rng.gen_range(0..24),
            });
        }
    }
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(config.label_rate * 0.5) {
                interactions.push(InteractionLabel {
                    subject: a,
                    target: EntityRef::Person(b),
                    label: rng.gen_range(0..24),
                });
            }
        }
    }
    let scene = SceneSpec {
        seed,
        persons,
        objects,
        interactions,
    };
    scene.validate()?;
    Ok(scene)
}

/// Ground-truth records of every person in the scene.
pub fn ground_truth(scene: &SceneSpec, model: &BodyModelSpec, conv: &DepthConvention) -> Result<Vec<PersonRecord>> {
    scene
        .persons
        .iter()
        .map(|p| PersonRecord::derive(model, p.params.clone(), p.camera, 1.0, conv))
        .collect()
}

/// Synthetic image tokens: the sinusoidal encoding of each ground-truth box
/// center with seeded noise, followed by pure-noise background tokens.
pub fn image_tokens(scene: &SceneSpec, gt: &[PersonRecord], config: &RunConfig) -> Result<Matrix> {
    let d = config.decoder.d_model;
    let boxes: Vec<NormBox> = gt.iter().map(|p| p.bbox).collect();
    let mut tokens = box_position_encoding(&boxes, d);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x1A6E_70CE_0000_0001);
    for v in tokens.data_mut() {
        if config.token_noise > 0.0 {
            *v += rng.gen_range(-config.token_noise..=config.token_noise);
        }
    }
    let background = Matrix::uniform(config.background_tokens, d, 1.0, &mut rng);
    Matrix::vstack(&[tokens, background], d)
}

/// Decoder output for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_index: usize,
    pub scene_seed: u64,
    /// One record per decoder query.
    pub queries: Vec<PersonRecord>,
    /// Indices of queries at or above the confidence threshold.
    pub kept: Vec<usize>,
    /// Reference boxes after every layer.
    pub layer_boxes: Vec<Vec<NormBox>>,
    /// Interaction tokens processed in every layer.
    pub token_counts: Vec<usize>,
}

impl ScenePrediction {
    pub fn detections(&self) -> Vec<&PersonRecord> {
        self.kept.iter().map(|&i| &self.queries[i]).collect()
    }
}

/// Full decoder forward for one scene, with confidence filtering.
pub fn run_forward(
    scene: &SceneSpec,
    scene_index: usize,
    weights: &DecoderWeights,
    model: &BodyModelSpec,
    config: &RunConfig,
) -> Result<ScenePrediction> {
    if weights.config != config.decoder {
        return Err(Error::Config("checkpoint configuration differs from the run configuration".into()));
    }
    let gt = ground_truth(scene, model, &config.depth)?;
    let tokens = image_tokens(scene, &gt, config)?;
    let provider = SyntheticProvider::new(scene, gt.iter().map(|p| p.bbox).collect(), config.provider)?;
    let objects = detect_objects(scene, config.object_noise, config.max_objects)?;
    let out = decode(weights, &tokens, &objects, &provider, model, &config.depth, false)?;
    let kept = out
        .predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.conf >= config.conf_threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(ScenePrediction {
        scene_index,
        scene_seed: scene.seed,
        queries: out.predictions,
        kept,
        layer_boxes: out.traces.iter().map(|t| t.boxes.clone()).collect(),
        token_counts: out.traces.iter().map(|t| t.token_count).collect(),
    })
}

/// Runs every scene, in parallel, results in scene order.
pub fn run_forward_all(
    scenes: &[SceneSpec],
    weights: &DecoderWeights,
    model: &BodyModelSpec,
    config: &RunConfig,
) -> Result<Vec<ScenePrediction>> {
    weights.validate()?;
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_forward(s, i, weights, model, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_index: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub n_matched: usize,
    pub true_positives: usize,
    /// Sums over matched persons, in millimeters.
    pub mpjpe_sum: f64,
    pub pa_mpjpe_sum: f64,
    pub pve_sum: f64,
    /// Means over matched persons; absent without matches.
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub pve: Option<f64>,
    /// Joints within the PCK threshold, over matched persons.
    pub pck_hits: usize,
    pub joints_matched: usize,
    pub joints_gt: usize,
    pub pck_match: Option<f64>,
    pub pck_all: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEval {
    pub scenes: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub n_matched: usize,
    pub true_positives: usize,
    /// Person-weighted means over all matches.
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub pve: Option<f64>,
    pub pck_match: Option<f64>,
    pub pck_all: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Mean over scenes of the total training loss.
    pub loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub conf_threshold: f64,
    pub pck_threshold_mm: f64,
    pub scenes: Vec<SceneEval>,
    pub aggregate: AggregateEval,
}

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn ratio(num: f64, den: usize) -> Option<f64> {
    (den > 0).then(|| num / den as f64)
}

/// Evaluates one scene's detections against its ground truth.
pub fn evaluate_scene(
    scene_index: usize,
    gt: &[PersonRecord],
    pred: &ScenePrediction,
    config: &RunConfig,
) -> Result<SceneEval> {
    let dets = pred.detections();
    let roots_p: Vec<Vec3> = dets.iter().map(|p| p.root_cam()).collect();
    let roots_g: Vec<Vec3> = gt.iter().map(|g| g.root_cam()).collect();
    let dist = roots_p
        .iter()
        .flat_map(|p| roots_g.iter().map(move |g| (p - g).norm()))
        .collect();
    let assignment = hungarian(&CostMatrix::from_vec(dets.len(), gt.len(), dist)?);

    let mut e = SceneEval {
        scene_index,
        n_gt: gt.len(),
        n_pred: dets.len(),
        n_matched: assignment.pairs.len(),
        true_positives: 0,
        mpjpe_sum: 0.0,
        pa_mpjpe_sum: 0.0,
        pve_sum: 0.0,
        mpjpe: None,
        pa_mpjpe: None,
        pve: None,
        pck_hits: 0,
        joints_matched: 0,
        joints_gt: gt.iter().map(|g| g.joints.len()).sum(),
        pck_match: None,
        pck_all: None,
        precision: None,
        recall: None,
        loss: total_loss(&pred.queries, gt, &config.loss, &config.cost)?,
    };
    for &(p, g) in &assignment.pairs {
        let (pj, gj) = (dets[p].joints_cam(), gt[g].joints_cam());
        e.mpjpe_sum += mpjpe(&pj, &gj)?;
        e.pa_mpjpe_sum += pa_mpjpe(&pj, &gj)?;
        e.pve_sum += pve(&dets[p].vertices_cam(), &gt[g].vertices_cam())?;
        e.pck_hits += pck3d_count(&pj, &gj, config.pck_threshold_mm)?;
        e.joints_matched += gj.len();
        if iou(&dets[p].bbox, &gt[g].bbox) >= DETECTION_IOU {
            e.true_positives += 1;
        }
    }
    e.mpjpe = ratio(e.mpjpe_sum, e.n_matched);
    e.pa_mpjpe = ratio(e.pa_mpjpe_sum, e.n_matched);
    e.pve = ratio(e.pve_sum, e.n_matched);
    e.pck_match = ratio(e.pck_hits as f64, e.joints_matched);
    e.pck_all = ratio(e.pck_hits as f64, e.joints_gt);
    e.precision = ratio(e.true_positives as f64, e.n_pred);
    e.recall = ratio(e.true_positives as f64, e.n_gt);
    Ok(e)
}

/// Aggregates per-scene entries; every aggregate recomputes from the stored
/// per-scene sums and counts.
pub fn aggregate(scenes: &[SceneEval]) -> AggregateEval {
    let sum_u = |f: fn(&SceneEval) -> usize| scenes.iter().map(f).sum::<usize>();
    let sum_f = |f: fn(&SceneEval) -> f64| scenes.iter().map(f).sum::<f64>();
    let n_matched = sum_u(|s| s.n_matched);
    let hits = sum_u(|s| s.pck_hits) as f64;
    let tp = sum_u(|s| s.true_positives) as f64;
    AggregateEval {
        scenes: scenes.len(),
        n_gt: sum_u(|s| s.n_gt),
        n_pred: sum_u(|s| s.n_pred),
        n_matched,
        true_positives: tp as usize,
        mpjpe: ratio(sum_f(|s| s.mpjpe_sum), n_matched),
        pa_mpjpe: ratio(sum_f(|s| s.pa_mpjpe_sum), n_matched),
        pve: ratio(sum_f(|s| s.pve_sum), n_matched),
        pck_match: ratio(hits, sum_u(|s| s.joints_matched)),
        pck_all: ratio(hits, sum_u(|s| s.joints_gt)),
        precision: ratio(tp, sum_u(|s| s.n_pred)),
        recall: ratio(tp, sum_u(|s| s.n_gt)),
        loss_mean: if scenes.is_empty() {
            0.0
        } else {
            sum_f(|s| s.loss.total) / scenes.len() as f64
        },
    }
}

pub fn evaluate(
    scenes: &[SceneSpec],
    predictions: &[ScenePrediction],
    model: &BodyModelSpec,
    config: &RunConfig,
) -> Result<EvalReport> {
    if scenes.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} scenes but {} prediction sets",
            scenes.len(),
            predictions.len()
        )));
    }
    for (i, (s, p)) in scenes.iter().zip(predictions).enumerate() {
        if p.scene_index != i || p.scene_seed != s.seed {
            return Err(Error::shape(format!("prediction set {i} does not belong to scene {i}")));
        }
    }
    let per_scene = scenes
        .par_iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (s, p))| evaluate_scene(i, &ground_truth(s, model, &config.depth)?, p, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        seed: config.seed,
        conf_threshold: config.conf_threshold,
        pck_threshold_mm: config.pck_threshold_mm,
        aggregate: aggregate(&per_scene),
        scenes: per_scene,
    })
}

/// Writes an OBJ mesh with camera-space vertices in meters.
pub fn write_obj(out: &mut impl std::io::Write, person: &PersonRecord, faces: &[[usize; 3]]) -> Result<()> {
    for v in person.vertices_cam() {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Writes one OBJ per detected person per scene; returns the written paths.
pub fn export_obj(dir: &Path, predictions: &[ScenePrediction], model: &BodyModelSpec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for sp in predictions {
        for (j, person) in sp.detections().into_iter().enumerate() {
            let path = dir.join(format!("scene{:04}_person{:02}.obj", sp.scene_index, j));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            write_obj(&mut f, person, model.faces())?;
            f.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub interaction_start_layer: usize,
    pub use_cie: bool,
    pub aggregate: AggregateEval,
    /// Mean absolute difference of final query joints from the no-interaction run.
    pub joint_shift_from_baseline: f64,
}

/// Runs the interaction ablations: no interaction, refiner only, encoder plus
/// refiner, and every interaction start layer. All variants share weights.
pub fn ablation(config: &RunConfig, scenes: &[SceneSpec]) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let model = config.body_model()?;
    let n_layers = config.decoder.n_layers;
    let mut variants = vec![
        ("no_interaction".to_string(), n_layers, true),
        ("igr_only".to_string(), 0, false),
        ("cie_igr".to_string(), 0, true),
    ];
    variants.extend((1..n_layers).map(|l| (format!("start_layer_{l}"), l, true)));

    let base_weights = config.init_weights()?;
    let mut baseline: Option<Vec<ScenePrediction>> = None;
    let mut rows = Vec::new();
    for (name, start, use_cie) in variants {
        let mut cfg = config.clone();
        cfg.decoder.interaction_start_layer = start;
        cfg.decoder.use_cie = use_cie;
        let mut weights = base_weights.clone();
        weights.config = cfg.decoder;
        let preds = run_forward_all(scenes, &weights, &model, &cfg)?;
        let report = evaluate(scenes, &preds, &model, &cfg)?;
        let shift = match &baseline {
            None => 0.0,
            Some(base) => mean_joint_shift(base, &preds),
        };
        if baseline.is_none() {
            baseline = Some(preds);
        }
        rows.push(AblationRow {
            name,
            interaction_start_layer: start,
            use_cie,
            aggregate: report.aggregate,
            joint_shift_from_baseline: shift,
        });
    }
    Ok(rows)
}

fn mean_joint_shift(a: &[ScenePrediction], b: &[ScenePrediction]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.iter().zip(b) {
        for (pa, pb) in sa.queries.iter().zip(&sb.queries) {
            for (ja, jb) in pa.joints_cam().iter().zip(pb.joints_cam()) {
                total += (ja - jb).abs().sum();
                count += 3;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Deliberate defects for checking that the self-test catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Opens one cross-group entry of the encoder mask.
    MaskBit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
    pub millis: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>7} {:>9}  detail\n", "suite", "result", "cases", "ms");
        for s in &self.suites {
            out.push_str(&format!(
                "{:<20} {:>6} {:>7} {:>9}  {}\n",
                s.name,
                if s.passed { "PASS" } else { "FAIL" },
                s.cases,
                s.millis,
                s.detail
            ));
        }
        out
    }
}

fn timed(name: &str, f: impl FnOnce() -> (usize, usize, String)) -> SuiteResult {
    let start = Instant::now();
    let (cases, failures, detail) = f();
    SuiteResult {
        name: name.into(),
        passed: failures == 0,
        cases,
        failures,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

/// Outcome counts of a suite: cases run, failures, first failure message.
pub type SuiteCounts = (usize, usize, String);

fn summarize(cases: usize, failures: Vec<String>) -> SuiteCounts {
    let detail = failures.first().cloned().unwrap_or_default();
    (cases, failures.len(), detail)
}

/// Hungarian against brute force on seeded random matrices up to 7×7. A
/// third of the matrices use small integer costs to exercise ties.
pub fn hungarian_suite(seed: u64, cases: usize) -> SuiteCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let (n, m) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let ties = case % 3 == 0;
        let data = (0..n * m)
            .map(|_| if ties { rng.gen_range(0..4) as f64 } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let cost = match CostMatrix::from_vec(n, m, data) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let fast = hungarian(&cost);
        match brute_force_assign(&cost) {
            Ok(slow) => {
                if (fast.total_cost - slow.total_cost).abs() > 1e-9 || fast.pairs != slow.pairs {
                    failures.push(format!(
                        "case {case} ({n}x{m}): hungarian {} {:?} vs brute force {} {:?}",
                        fast.total_cost, fast.pairs, slow.total_cost, slow.pairs
                    ));
                }
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    summarize(cases, failures)
}

/// A ragged batch: per-sample `(n, r)`, with one token group of size
/// `n + r − 1` per human.
#[derive(Debug, Clone)]
pub struct RaggedBatch {
    pub samples: Vec<(usize, usize)>,
    pub tokens: InteractionTokenSet,
    pub queries: Matrix,
}

impl RaggedBatch {
    pub fn new(samples: Vec<(usize, usize)>, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let sizes: Vec<usize> = samples
            .iter()
            .flat_map(|&(n, r)| std::iter::repeat_n(n + r - 1, n))
            .collect();
        let total = sizes.iter().sum();
        let tokens = InteractionTokenSet::new(Matrix::uniform(total, d, 1.0, rng), sizes)?;
        let queries = Matrix::uniform(tokens.group_count(), d, 1.0, rng);
        Ok(Self { samples, tokens, queries })
    }

    pub fn random(d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = rng.gen_range(1..=4);
        let samples = (0..b).map(|_| (rng.gen_range(1..=6), rng.gen_range(0..=5))).collect();
        Self::new(samples, d, rng)
    }

    /// The batch layout of the worked example: two humans per sample, three
    /// samples with 2, 1 and 3 objects.
    pub fn worked_example(d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(vec![(2, 2), (2, 1), (2, 3)], d, rng)
    }

    fn owner_of(&self, token: usize) -> usize {
        let t = &self.tokens;
        (0..t.group_count())
            .find(|&g| token >= t.group_offsets[g] && token < t.group_offsets[g] + t.group_sizes[g])
            .expect("token inside the sequence")
    }
}

/// Seeded encoder and refiner blocks at self-test scale.
pub fn selftest_blocks(seed: u64) -> (DecoderConfig, EncoderBlock, RefinerBlock) {
    let cfg = DecoderConfig {
        d_model: 16,
        n_heads: 4,
        ffn_dim: 32,
        ..DecoderConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderBlock::init(&cfg, &mut rng);
    let refi = RefinerBlock::init(&cfg, &mut rng);
    (cfg, enc, refi)
}

/// Seeded ragged batches, the worked example first.
pub fn ragged_batches(seed: u64, count: usize, d: usize) -> Result<Vec<RaggedBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![RaggedBatch::worked_example(d, &mut rng)?];
    while out.len() < count {
        out.push(RaggedBatch::random(d, &mut rng)?);
    }
    Ok(out)
}

/// Perturbs one token per batch and checks that only its owning group and
/// owning query change, bit for bit.
pub fn mask_isolation_suite(seed: u64, batches: usize, fault: Option<Fault>) -> SuiteCounts {
    let (cfg, enc, refi) = selftest_blocks(seed);
    let list = match ragged_batches(seed ^ 0xA11C_E5ED, batches, cfg.d_model) {
        Ok(l) => l,
        Err(e) => return (0, 1, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E27);
    let mut failures = Vec::new();
    for (bi, batch) in list.iter().enumerate() {
        let total = batch.tokens.tokens.rows();
        if total == 0 {
            continue;
        }
        let t = rng.gen_range(0..total);
        let owner = batch.owner_of(t);
        let mut mask = AttnMask::block_diagonal(&batch.tokens.group_sizes);
        if fault == Some(Fault::MaskBit) {
            if let Some(h) = (0..batch.tokens.group_count()).find(|&h| h != owner && batch.tokens.group_sizes[h] > 0) {
                mask.set(batch.tokens.group_offsets[h], t, true);
            }
        }
        let mut perturbed = batch.tokens.clone();
        let col = rng.gen_range(0..cfg.d_model);
        perturbed.tokens.row_mut(t)[col] += rng.gen_range(0.25..1.0);

        let run = |tokens: &InteractionTokenSet| -> Result<(InteractionTokenSet, Matrix)> {
            let ctx = contextual_interaction_encoder_with_mask(tokens, &enc, &mask)?;
            let q = interaction_guided_refiner(&batch.queries, &ctx, &refi)?;
            Ok((ctx, q))
        };
        let (a, b) = match (run(&batch.tokens), run(&perturbed)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                failures.push(format!("batch {bi}: {e}"));
                continue;
            }
        };
        for g in 0..batch.tokens.group_count() {
            if g == owner {
                continue;
            }
            if a.0.group(g) != b.0.group(g) {
                failures.push(format!("batch {bi}: token {t} (group {owner}) leaked into encoder group {g}"));
                break;
            }
            if a.1.row(g) != b.1.row(g) {
                failures.push(format!("batch {bi}: token {t} (group {owner}) leaked into query {g}"));
                break;
            }
        }
    }
    summarize(list.len(), failures)
}

/// Flattened masked encoder/refiner against per-group unmasked loops.
pub fn batch_equivalence_suite(seed: u64, batches: usize) -> SuiteCounts {
    let (cfg, enc, refi) = selftest_blocks(seed);
    let list = match ragged_batches(seed ^ 0xA11C_E5ED, batches, cfg.d_model) {
        Ok(l) => l,
        Err(e) => return (0, 1, e.to_string()),
    };
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (bi, batch) in list.iter().enumerate() {
        let check = || -> Result<f64> {
            let ctx = contextual_interaction_encoder(&batch.tokens, &enc)?;
            let refined = interaction_guided_refiner(&batch.queries, &ctx, &refi)?;
            let mut diff = 0.0f64;
            for g in 0..batch.tokens.group_count() {
                let size = batch.tokens.group_sizes[g];
                if size == 0 {
                    diff = diff.max(max_abs_diff(batch.queries.row(g), refined.row(g)));
                    continue;
                }
                let alone = enc.forward(&batch.tokens.group(g), &AttnMask::full(size, size))?;
                diff = diff.max(max_abs_diff(alone.data(), ctx.group(g).data()));
                let q = refi.forward(&batch.queries.slice_rows(g, g + 1), &alone, &AttnMask::full(1, size))?;
                diff = diff.max(max_abs_diff(q.data(), refined.row(g)));
            }
            Ok(diff)
        };
        match check() {
            Ok(d) => {
                worst = worst.max(d);
                if d > 1e-9 {
                    failures.push(format!("batch {bi}: max deviation {d:e}"));
                }
            }
            Err(e) => failures.push(format!("batch {bi}: {e}")),
        }
    }
    let (cases, n, detail) = summarize(list.len(), failures);
    (cases, n, if detail.is_empty() { format!("max deviation {worst:e}") } else { detail })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> crate::body_model::Mat3 {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::x() } else { axis.normalize() };
    let angle = rng.gen_range(-3.0..3.0);
    rodrigues([axis.x * angle, axis.y * angle, axis.z * angle])
}

/// PA-MPJPE vanishes for similarity-transformed copies.
pub fn procrustes_suite(seed: u64, cases: usize) -> SuiteCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let pts: Vec<Vec3> = (0..24)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let rot = random_rotation(&mut rng);
        let scale = rng.gen_range(0.5..2.0);
        let shift = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let moved: Vec<Vec3> = pts.iter().map(|p| rot * p * scale + shift).collect();
        match pa_mpjpe(&moved, &pts) {
            Ok(e) if e <= 1e-6 => {}
            Ok(e) => failures.push(format!("case {case}: PA-MPJPE {e:e} mm")),
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    summarize(cases, failures)
}

/// Rest pose reproduces the template and posed output is equivariant under
/// rigid motions of the root.
pub fn lbs_rigid_suite(seed: u64, cases: usize) -> SuiteCounts {
    let mut failures = Vec::new();
    let model = match make_toy_model(seed, 120, 24, 10) {
        Ok(m) => m,
        Err(e) => return (0, 1, e.to_string()),
    };
    match forward(&model, &BodyParams::zeros(24, 10)) {
        Ok(rest) if rest.vertices == model.template() => {}
        Ok(_) => failures.push("rest pose differs from the template".into()),
        Err(e) => failures.push(e.to_string()),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1B5);
    for case in 0..cases {
        let pose = (0..24)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
            .collect();
        let shape = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = match BodyParams::new(pose, shape) {
            Ok(p) => p,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        let t = RigidTransform::new(
            random_rotation(&mut rng),
            Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        );
        match (forward(&model, &params), forward_rigid(&model, &params, &t)) {
            (Ok(base), Ok(moved)) => {
                let dev = base
                    .vertices
                    .iter()
                    .zip(&moved.vertices)
                    .chain(base.joints.iter().zip(&moved.joints))
                    .map(|(b, m)| (t.apply(b) - m).norm())
                    .fold(0.0, f64::max);
                if dev > 1e-9 {
                    failures.push(format!("case {case}: deviation {dev:e} m"));
                }
            }
            (Err(e), _) | (_, Err(e)) => failures.push(format!("case {case}: {e}")),
        }
    }
    summarize(cases + 1, failures)
}

/// Runs every oracle suite.
pub fn selftest(seed: u64, fault: Option<Fault>) -> SelftestReport {
    SelftestReport {
        suites: vec![
            timed("hungarian", || hungarian_suite(seed, 1000)),
            timed("mask_isolation", || mask_isolation_suite(seed, 200, fault)),
            timed("batch_equivalence", || batch_equivalence_suite(seed, 200)),
            timed("procrustes", || procrustes_suite(seed, 100)),
            timed("lbs_rigid", || lbs_rigid_suite(seed, 100)),
        ],
    }
}
