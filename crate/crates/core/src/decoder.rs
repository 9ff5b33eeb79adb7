//! Interaction-aware decoder.
//!
//! One layer runs, in order:
//!
//! 1. self-attention among human queries,
//! 2. cross-attention from queries to image tokens, then a feed-forward block,
//! 3. the bbox head and the sigmoid-space reference-box update,
//! 4. pairing of each human box with every other human box and every object
//!    box, feature extraction through an [`InteractionProvider`] and a linear
//!    projection to `d_model`,
//! 5. the contextual interaction encoder: self-attention restricted to each
//!    query's own token group,
//! 6. the interaction-guided refiner: cross-attention from each query to its
//!    own contextualized group.
//!
//! Steps 4–6 only run from `interaction_start_layer` on. Every attention and
//! feed-forward sub-layer is wrapped as `x = LayerNorm(x + f(x))`.
//!
//! Token groups of all queries (and of all samples in a batch) are flattened
//! into one sequence. Groups are kept apart with a block-diagonal mask for the
//! encoder and a query-to-group mask for the refiner.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModelSpec, BodyParams};
use crate::camera::{CameraParams, DepthConvention, NormBox};
use crate::interaction::InteractionProvider;
use crate::numerics::{
    inv_sigmoid, masked_scores, masked_softmax, masked_weighted_sum, relu, sigmoid, AttnMask,
    LayerNorm, Linear, Matrix, INV_SIGMOID_EPS,
};
use crate::person::PersonRecord;
use crate::{Error, Result};

/// Weak-perspective scale produced by a zero camera head.
pub const CAM_SCALE_PRIOR: f64 = 0.3;

/// Confidence logits are clamped so confidences stay strictly inside (0, 1).
pub const CONF_LOGIT_BOUND: f64 = 30.0;

/// Checkpoint format tag and version.
pub const CHECKPOINT_FORMAT: &str = "crowdmesh-decoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    /// First layer running interaction encoding and refinement; `n_layers` disables it.
    pub interaction_start_layer: usize,
    /// When false, projected interaction tokens go straight to the refiner.
    pub use_cie: bool,
    /// Dimension of provider features before projection.
    pub interaction_dim: usize,
    pub joint_count: usize,
    pub shape_count: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_queries: 50,
            d_model: 768,
            n_heads: 8,
            ffn_dim: 2048,
            n_layers: 6,
            interaction_start_layer: 0,
            use_cie: true,
            interaction_dim: 768,
            joint_count: 24,
            shape_count: 10,
        }
    }
}

impl DecoderConfig {
    /// Small configuration for fast experiments and tests.
    pub fn desk() -> Self {
        Self {
            n_queries: 8,
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            n_layers: 3,
            interaction_start_layer: 0,
            use_cie: true,
            interaction_dim: 32,
            joint_count: 24,
            shape_count: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_queries == 0 || self.n_layers == 0 || self.ffn_dim == 0 || self.interaction_dim == 0 {
            return fail("n_queries, n_layers, ffn_dim and interaction_dim must be positive".into());
        }
        if self.interaction_start_layer > self.n_layers {
            return fail(format!(
                "interaction_start_layer {} exceeds n_layers {}",
                self.interaction_start_layer, self.n_layers
            ));
        }
        if self.joint_count == 0 {
            return fail("joint_count must be positive".into());
        }
        Ok(())
    }

    pub fn interaction_enabled(&self, layer: usize) -> bool {
        layer >= self.interaction_start_layer
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

fn columns(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * len);
    for r in 0..m.rows() {
        data.extend_from_slice(&m.row(r)[start..start + len]);
    }
    Matrix::from_vec(m.rows(), len, data).expect("column slice of a finite matrix")
}

impl MultiHeadAttention {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            n_heads,
            q: Linear::init(d_model, d_model, rng),
            k: Linear::init(d_model, d_model, rng),
            v: Linear::init(d_model, d_model, rng),
            o: Linear::init(d_model, d_model, rng),
        }
    }

    /// Attention of `query_in` rows over `key_in`/`value_in` rows. Every mask
    /// row must allow at least one key.
    pub fn forward(&self, query_in: &Matrix, key_in: &Matrix, value_in: &Matrix, mask: &AttnMask) -> Result<Matrix> {
        let q = self.q.forward(query_in)?;
        let k = self.k.forward(key_in)?;
        let v = self.v.forward(value_in)?;
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Matrix::zeros(q.rows(), d);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = (columns(&q, h * dh, dh), columns(&k, h * dh, dh), columns(&v, h * dh, dh));
            let scores = masked_scores(&qh, &kh, mask, scale)?;
            let weights = masked_softmax(&scores, mask)?;
            let out = masked_weighted_sum(&weights, mask, &vh)?;
            for r in 0..out.rows() {
                concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
            }
        }
        self.o.forward(&concat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn init(d_model: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::init(d_model, ffn_dim, rng),
            l2: Linear::init(ffn_dim, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.l2.forward(&self.l1.forward(x)?.map(relu))
    }
}

/// `LayerNorm(x + f)`
fn add_norm(x: &Matrix, f: &Matrix, norm: &LayerNorm) -> Result<Matrix> {
    norm.forward(&x.add(f)?)
}

/// Self-attention block over interaction tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl EncoderBlock {
    pub fn init(cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: MultiHeadAttention::init(cfg.d_model, cfg.n_heads, rng),
            norm_attn: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::init(cfg.d_model, cfg.ffn_dim, rng),
            norm_ffn: LayerNorm::new(cfg.d_model),
        }
    }

    pub fn forward(&self, x: &Matrix, mask: &AttnMask) -> Result<Matrix> {
        let a = self.attn.forward(x, x, x, mask)?;
        let x = add_norm(x, &a, &self.norm_attn)?;
        add_norm(&x, &self.ffn.forward(&x)?, &self.norm_ffn)
    }
}

/// Cross-attention block from queries to interaction tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl RefinerBlock {
    pub fn init(cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: MultiHeadAttention::init(cfg.d_model, cfg.n_heads, rng),
            norm_attn: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::init(cfg.d_model, cfg.ffn_dim, rng),
            norm_ffn: LayerNorm::new(cfg.d_model),
        }
    }

    pub fn forward(&self, queries: &Matrix, tokens: &Matrix, mask: &AttnMask) -> Result<Matrix> {
        let a = self.attn.forward(queries, tokens, tokens, mask)?;
        let x = add_norm(queries, &a, &self.norm_attn)?;
        add_norm(&x, &self.ffn.forward(&x)?, &self.norm_ffn)
    }
}

/// Two-layer box head; the last layer starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl BoxHead {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.out.forward(&self.hidden.forward(x)?.map(relu))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub conf: Linear,
    pub shape: Linear,
    pub pose: Linear,
    pub cam: Linear,
    pub bbox: BoxHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
    /// Provider features to `d_model`.
    pub projection: Linear,
    pub cie: EncoderBlock,
    pub igr: RefinerBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    /// Learned initial human queries, `n_queries × d_model`.
    pub query_embed: Matrix,
    /// Learned initial reference boxes.
    pub ref_boxes: Vec<NormBox>,
    pub layers: Vec<LayerWeights>,
    pub heads: HeadWeights,
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`, layer
/// norms at identity, and the last bbox-head layer at zero so the first
/// reference-box update is the identity.
pub fn init_weights(config: &DecoderConfig, seed: u64) -> Result<DecoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let query_embed = Matrix::uniform(config.n_queries, d, 1.0, &mut rng);
    let side = (config.n_queries as f64).sqrt().ceil() as usize;
    let ref_boxes = (0..config.n_queries)
        .map(|i| {
            let (gx, gy) = ((i % side) as f64, (i / side) as f64);
            NormBox::clamped((gx + 0.5) / side as f64, (gy + 0.5) / side as f64, 0.2, 0.4)
        })
        .collect();
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            self_attn: MultiHeadAttention::init(d, config.n_heads, &mut rng),
            norm_self: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::init(d, config.n_heads, &mut rng),
            norm_cross: LayerNorm::new(d),
            ffn: FeedForward::init(d, config.ffn_dim, &mut rng),
            norm_ffn: LayerNorm::new(d),
            projection: Linear::init(config.interaction_dim, d, &mut rng),
            cie: EncoderBlock::init(config, &mut rng),
            igr: RefinerBlock::init(config, &mut rng),
        })
        .collect();
    let heads = HeadWeights {
        conf: Linear::init(d, 1, &mut rng),
        shape: Linear::init(d, config.shape_count, &mut rng),
        pose: Linear::init(d, config.joint_count * 3, &mut rng),
        cam: Linear::init(d, 3, &mut rng),
        bbox: BoxHead {
            hidden: Linear::init(d, d, &mut rng),
            out: Linear::zeros(d, 4),
        },
    };
    Ok(DecoderWeights {
        config: *config,
        query_embed,
        ref_boxes,
        layers,
        heads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DecoderConfig,
    weights: DecoderWeights,
}

impl DecoderWeights {
    /// Checks every array against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: &str| Err(Error::Config(format!("checkpoint/config mismatch: {what}")));
        let lin = |l: &Linear, i: usize, o: usize| l.in_dim() == i && l.out_dim() == o && l.bias.len() == o;
        let mha = |m: &MultiHeadAttention| {
            m.n_heads == c.n_heads && [&m.q, &m.k, &m.v, &m.o].iter().all(|l| lin(l, c.d_model, c.d_model))
        };
        let ffn = |f: &FeedForward| lin(&f.l1, c.d_model, c.ffn_dim) && lin(&f.l2, c.ffn_dim, c.d_model);
        let ln = |n: &LayerNorm| n.gain.len() == c.d_model && n.bias.len() == c.d_model;
        if self.query_embed.rows() != c.n_queries || self.query_embed.cols() != c.d_model {
            return bad("query_embed");
        }
        if self.ref_boxes.len() != c.n_queries || self.ref_boxes.iter().any(|b| !b.is_valid()) {
            return bad("ref_boxes");
        }
        if self.layers.len() != c.n_layers {
            return bad("layer count");
        }
        for l in &self.layers {
            let ok = mha(&l.self_attn)
                && mha(&l.cross_attn)
                && mha(&l.cie.attn)
                && mha(&l.igr.attn)
                && ffn(&l.ffn)
                && ffn(&l.cie.ffn)
                && ffn(&l.igr.ffn)
                && [&l.norm_self, &l.norm_cross, &l.norm_ffn, &l.cie.norm_attn, &l.cie.norm_ffn, &l.igr.norm_attn, &l.igr.norm_ffn]
                    .iter()
                    .all(|n| ln(n))
                && lin(&l.projection, c.interaction_dim, c.d_model);
            if !ok {
                return bad("layer weights");
            }
        }
        let h = &self.heads;
        if !(lin(&h.conf, c.d_model, 1)
            && lin(&h.shape, c.d_model, c.shape_count)
            && lin(&h.pose, c.d_model, c.joint_count * 3)
            && lin(&h.cam, c.d_model, 3)
            && lin(&h.bbox.hidden, c.d_model, c.d_model)
            && lin(&h.bbox.out, c.d_model, 4))
        {
            return bad("heads");
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            weights: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.config != ck.weights.config {
            return Err(Error::Config("checkpoint header disagrees with stored weights".into()));
        }
        ck.weights.validate()?;
        Ok(ck.weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Human queries and their reference boxes entering layer `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanQueryState {
    pub queries: Matrix,
    pub ref_boxes: Vec<NormBox>,
    pub layer: usize,
}

/// Flattened, grouped interaction tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTokenSet {
    pub tokens: Matrix,
    pub group_offsets: Vec<usize>,
    pub group_sizes: Vec<usize>,
}

impl InteractionTokenSet {
    pub fn new(tokens: Matrix, group_sizes: Vec<usize>) -> Result<Self> {
        let total: usize = group_sizes.iter().sum();
        if total != tokens.rows() {
            return Err(Error::Internal(format!(
                "group sizes cover {total} tokens but {} are present",
                tokens.rows()
            )));
        }
        let group_offsets = group_sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        Ok(Self {
            tokens,
            group_offsets,
            group_sizes,
        })
    }

    /// Concatenates several sets into one flat sequence, groups in order.
    pub fn concat(sets: &[InteractionTokenSet]) -> Result<Self> {
        let cols = sets.first().map_or(0, |s| s.tokens.cols());
        let tokens = Matrix::vstack(&sets.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>(), cols)?;
        let sizes = sets.iter().flat_map(|s| s.group_sizes.iter().copied()).collect();
        Self::new(tokens, sizes)
    }

    pub fn group_count(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group(&self, g: usize) -> Matrix {
        let start = self.group_offsets[g];
        self.tokens.slice_rows(start, start + self.group_sizes[g])
    }

    pub fn validate(&self) -> Result<()> {
        let mut expect = 0;
        for (o, s) in self.group_offsets.iter().zip(&self.group_sizes) {
            if *o != expect {
                return Err(Error::Internal("group offsets inconsistent with sizes".into()));
            }
            expect += s;
        }
        if expect != self.tokens.rows() || self.group_offsets.len() != self.group_sizes.len() {
            return Err(Error::Internal("grouping does not cover the token sequence".into()));
        }
        Ok(())
    }
}

/// Sigmoid-space box update `sigmoid(inv_sigmoid(p) + delta)`.
pub fn update_ref_box(p: &NormBox, delta: [f64; 4]) -> NormBox {
    let a = p.to_array();
    let f = |i: usize| sigmoid(inv_sigmoid(a[i], INV_SIGMOID_EPS) + delta[i]);
    NormBox::clamped(f(0), f(1), f(2), f(3))
}

/// Pairs each human box with all other human boxes, then all object boxes.
/// Yields `n·(n + r − 1)` pairs for `n` humans and `r` objects (none when `n = 0`).
pub fn enumerate_pairs(human_boxes: &[NormBox], object_boxes: &[NormBox]) -> Vec<(usize, NormBox)> {
    let mut pairs = Vec::new();
    for i in 0..human_boxes.len() {
        for (j, b) in human_boxes.iter().enumerate() {
            if j != i {
                pairs.push((i, *b));
            }
        }
        for b in object_boxes {
            pairs.push((i, *b));
        }
    }
    pairs
}

/// Extracts and projects interaction features for every pair; one group per human.
pub fn interaction_tokens(
    human_boxes: &[NormBox],
    object_boxes: &[NormBox],
    provider: &dyn InteractionProvider,
    projection: &Linear,
) -> Result<InteractionTokenSet> {
    let dim = provider.feature_dim();
    if dim != projection.in_dim() {
        return Err(Error::Config(format!(
            "provider feature_dim {dim} does not match projection input {}",
            projection.in_dim()
        )));
    }
    let pairs = enumerate_pairs(human_boxes, object_boxes);
    let mut sizes = vec![0usize; human_boxes.len()];
    let mut raw = Vec::with_capacity(pairs.len() * dim);
    for (i, env) in &pairs {
        sizes[*i] += 1;
        let f = provider.extract(&human_boxes[*i], env);
        if f.len() != dim {
            return Err(Error::Internal(format!("provider returned {} features, expected {dim}", f.len())));
        }
        raw.extend(f);
    }
    let features = Matrix::from_vec(pairs.len(), dim, raw)?;
    InteractionTokenSet::new(projection.forward(&features)?, sizes)
}

/// Self-attention within each token group (block-diagonal mask).
pub fn contextual_interaction_encoder(tokens: &InteractionTokenSet, block: &EncoderBlock) -> Result<InteractionTokenSet> {
    let mask = AttnMask::block_diagonal(&tokens.group_sizes);
    contextual_interaction_encoder_with_mask(tokens, block, &mask)
}

/// Encoder with an explicit mask; the mask must be square over the token sequence.
pub fn contextual_interaction_encoder_with_mask(
    tokens: &InteractionTokenSet,
    block: &EncoderBlock,
    mask: &AttnMask,
) -> Result<InteractionTokenSet> {
    tokens.validate()?;
    let n = tokens.tokens.rows();
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::Internal(format!("mask {}x{} for {n} tokens", mask.rows(), mask.cols())));
    }
    if n == 0 {
        return Ok(tokens.clone());
    }
    let out = block.forward(&tokens.tokens, mask)?;
    InteractionTokenSet::new(out, tokens.group_sizes.clone())
}

/// Cross-attention from each query to its own token group. Queries with an
/// empty group are returned unchanged.
pub fn interaction_guided_refiner(queries: &Matrix, tokens: &InteractionTokenSet, block: &RefinerBlock) -> Result<Matrix> {
    tokens.validate()?;
    if tokens.group_count() != queries.rows() {
        return Err(Error::Internal(format!(
            "{} token groups for {} queries",
            tokens.group_count(),
            queries.rows()
        )));
    }
    let active: Vec<usize> = (0..queries.rows()).filter(|&i| tokens.group_sizes[i] > 0).collect();
    if active.is_empty() {
        return Ok(queries.clone());
    }
    let mask = AttnMask::group_rows(&tokens.group_sizes).select_rows(&active);
    let refined = block.forward(&queries.select_rows(&active), &tokens.tokens, &mask)?;
    let mut out = queries.clone();
    for (r, &i) in active.iter().enumerate() {
        out.row_mut(i).copy_from_slice(refined.row(r));
    }
    Ok(out)
}

/// Sinusoidal encoding of box centers: the first half of the channels
/// encodes `cx`, the second half `cy`.
pub fn box_position_encoding(boxes: &[NormBox], d_model: usize) -> Matrix {
    let half = (d_model / 2).max(1);
    let mut m = Matrix::zeros(boxes.len(), d_model);
    for (r, b) in boxes.iter().enumerate() {
        for c in 0..d_model {
            let (coord, j) = if c < half { (b.cx, c) } else { (b.cy, c - half) };
            let k = (j / 2) as f64;
            let angle = 2.0 * PI * coord / 10000f64.powf(2.0 * k / half as f64);
            m.set(r, c, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Diagnostics of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Reference boxes after the sigmoid-space update.
    pub boxes: Vec<NormBox>,
    /// Number of interaction tokens processed (0 when interaction is off).
    pub token_count: usize,
    /// Queries after self/cross-attention, before interaction refinement.
    pub intermediate: Matrix,
}

/// Runs one decoder layer.
pub fn decoder_layer(
    state: &HumanQueryState,
    image_tokens: &Matrix,
    object_boxes: &[NormBox],
    provider: &dyn InteractionProvider,
    weights: &DecoderWeights,
) -> Result<(HumanQueryState, LayerTrace)> {
    let cfg = &weights.config;
    let lw = weights
        .layers
        .get(state.layer)
        .ok_or_else(|| Error::Config(format!("no weights for layer {}", state.layer)))?;
    let n = state.queries.rows();
    if state.ref_boxes.len() != n || state.queries.cols() != cfg.d_model || image_tokens.cols() != cfg.d_model {
        return Err(Error::shape("decoder layer inputs disagree with d_model or query count"));
    }
    if image_tokens.rows() == 0 {
        return Err(Error::shape("at least one image token is required"));
    }

    let pos = box_position_encoding(&state.ref_boxes, cfg.d_model);
    let q = &state.queries;
    let with_pos = q.add(&pos)?;
    let sa = lw.self_attn.forward(&with_pos, &with_pos, q, &AttnMask::full(n, n))?;
    let q = add_norm(q, &sa, &lw.norm_self)?;
    let ca = lw.cross_attn.forward(
        &q.add(&pos)?,
        image_tokens,
        image_tokens,
        &AttnMask::full(n, image_tokens.rows()),
    )?;
    let q = add_norm(&q, &ca, &lw.norm_cross)?;
    let q_tilde = add_norm(&q, &lw.ffn.forward(&q)?, &lw.norm_ffn)?;

    let deltas = weights.heads.bbox.forward(&q_tilde)?;
    let boxes: Vec<NormBox> = state
        .ref_boxes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = deltas.row(i);
            update_ref_box(p, [d[0], d[1], d[2], d[3]])
        })
        .collect();

    let (next, token_count) = if cfg.interaction_enabled(state.layer) {
        let tokens = interaction_tokens(&boxes, object_boxes, provider, &lw.projection)?;
        let count = tokens.tokens.rows();
        let tokens = if cfg.use_cie {
            contextual_interaction_encoder(&tokens, &lw.cie)?
        } else {
            tokens
        };
        (interaction_guided_refiner(&q_tilde, &tokens, &lw.igr)?, count)
    } else {
        (q_tilde.clone(), 0)
    };

    let trace = LayerTrace {
        layer: state.layer,
        boxes: boxes.clone(),
        token_count,
        intermediate: q_tilde,
    };
    Ok((
        HumanQueryState {
            queries: next,
            ref_boxes: boxes,
            layer: state.layer + 1,
        },
        trace,
    ))
}

/// Regression heads applied to final queries: confidence, shape, pose and
/// camera, with joints, vertices, keypoints and boxes derived from the body
/// model and camera. The camera translation is anchored at the query's
/// reference-box center.
pub fn regress(
    queries: &Matrix,
    ref_boxes: &[NormBox],
    heads: &HeadWeights,
    model: &BodyModelSpec,
    conv: &DepthConvention,
) -> Result<Vec<PersonRecord>> {
    if ref_boxes.len() != queries.rows() {
        return Err(Error::shape("one reference box per query required"));
    }
    if heads.pose.out_dim() != model.joint_count() * 3 || heads.shape.out_dim() != model.shape_count() {
        return Err(Error::Config(format!(
            "heads regress {} pose / {} shape values, body model needs {} / {}",
            heads.pose.out_dim(),
            heads.shape.out_dim(),
            model.joint_count() * 3,
            model.shape_count()
        )));
    }
    let conf = heads.conf.forward(queries)?;
    let shape = heads.shape.forward(queries)?;
    let pose = heads.pose.forward(queries)?;
    let cam = heads.cam.forward(queries)?;
    (0..queries.rows())
        .map(|i| {
            let pose_aa = pose.row(i).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let params = BodyParams::new(pose_aa, shape.row(i).to_vec())?;
            let c = cam.row(i);
            let camera = CameraParams::new(
                CAM_SCALE_PRIOR * c[0].clamp(-5.0, 5.0).exp(),
                ref_boxes[i].cx + c[1],
                ref_boxes[i].cy + c[2],
            )?;
            PersonRecord::derive(model, params, camera, sigmoid(conf.get(i, 0).clamp(-CONF_LOGIT_BOUND, CONF_LOGIT_BOUND)), conv)
        })
        .collect()
}

/// Output of a full decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub final_state: HumanQueryState,
    pub traces: Vec<LayerTrace>,
    /// Final-layer predictions, one per query.
    pub predictions: Vec<PersonRecord>,
    /// Predictions regressed from every layer's output, when requested.
    pub per_layer: Vec<Vec<PersonRecord>>,
}

/// Runs all layers from the learned queries and reference boxes.
pub fn decode(
    weights: &DecoderWeights,
    image_tokens: &Matrix,
    object_boxes: &[NormBox],
    provider: &dyn InteractionProvider,
    model: &BodyModelSpec,
    conv: &DepthConvention,
    keep_per_layer: bool,
) -> Result<DecoderOutput> {
    let mut state = HumanQueryState {
        queries: weights.query_embed.clone(),
        ref_boxes: weights.ref_boxes.clone(),
        layer: 0,
    };
    let mut traces = Vec::with_capacity(weights.config.n_layers);
    let mut per_layer = Vec::new();
    for _ in 0..weights.config.n_layers {
        let (next, trace) = decoder_layer(&state, image_tokens, object_boxes, provider, weights)?;
        if keep_per_layer {
            per_layer.push(regress(&next.queries, &next.ref_boxes, &weights.heads, model, conv)?);
        }
        traces.push(trace);
        state = next;
    }
    let predictions = match per_layer.last() {
        Some(last) if keep_per_layer => last.clone(),
        _ => regress(&state.queries, &state.ref_boxes, &weights.heads, model, conv)?,
    };
    Ok(DecoderOutput {
        final_state: state,
        traces,
        predictions,
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::ZeroProvider;
    use rand::Rng;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            n_queries: 3,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            n_layers: 2,
            interaction_start_layer: 0,
            use_cie: true,
            interaction_dim: 6,
            joint_count: 4,
            shape_count: 2,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, sizes: &[usize], d: usize) -> InteractionTokenSet {
        let total = sizes.iter().sum();
        InteractionTokenSet::new(Matrix::uniform(total, d, 1.0, rng), sizes.to_vec()).unwrap()
    }

    #[test]
    fn config_validation() {
        DecoderConfig::default().validate().unwrap();
        DecoderConfig::desk().validate().unwrap();
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.interaction_start_layer = 2;
        c.validate().unwrap();
        c.interaction_start_layer = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ref_box_update_examples() {
        let p = NormBox { cx: 0.5, cy: 0.5, w: 0.5, h: 0.5 };
        let same = update_ref_box(&p, [0.0; 4]);
        for (a, b) in same.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        let moved = update_ref_box(&p, [inv_sigmoid(0.9, INV_SIGMOID_EPS), 0.0, 0.0, 0.0]);
        assert!((moved.cx - 0.9).abs() < 1e-9);
        let mut prev = 0.0;
        for step in 0..40 {
            let b = update_ref_box(&p, [step as f64, step as f64, step as f64, step as f64]);
            assert!(b.is_valid());
            assert!(b.cx >= prev);
            prev = b.cx;
        }
        assert!(prev > 1.0 - 1e-9);
    }

    #[test]
    fn pair_enumeration_examples() {
        let b = |x: f64| NormBox { cx: x, cy: 0.5, w: 0.1, h: 0.1 };
        let humans = [b(0.1), b(0.2)];
        let pairs = enumerate_pairs(&humans, &[]);
        assert_eq!(pairs, vec![(0, humans[1]), (1, humans[0])]);
        let objects = [b(0.6), b(0.7), b(0.8)];
        assert_eq!(enumerate_pairs(&humans, &objects).len(), 8);
        assert!(enumerate_pairs(&humans[..1], &[]).is_empty());
    }

    #[test]
    fn encoder_single_token_ignores_other_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny();
        let block = EncoderBlock::init(&cfg, &mut rng);
        let a = random_tokens(&mut rng, &[1, 3], 8);
        let mut b = a.clone();
        for r in 1..4 {
            for v in b.tokens.row_mut(r) {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        let oa = contextual_interaction_encoder(&a, &block).unwrap();
        let ob = contextual_interaction_encoder(&b, &block).unwrap();
        assert_eq!(oa.tokens.row(0), ob.tokens.row(0));
        assert_eq!(oa.group_sizes, a.group_sizes);
    }

    #[test]
    fn encoder_group_isolation_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny();
        let block = EncoderBlock::init(&cfg, &mut rng);
        let a = random_tokens(&mut rng, &[3, 0, 2], 8);
        let mut b = a.clone();
        b.tokens.row_mut(1)[4] += 0.5;
        let oa = contextual_interaction_encoder(&a, &block).unwrap();
        let ob = contextual_interaction_encoder(&b, &block).unwrap();
        assert_eq!(oa.group(2), ob.group(2));
        assert_ne!(oa.group(0), ob.group(0));
    }

    #[test]
    fn encoder_rejects_inconsistent_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = EncoderBlock::init(&tiny(), &mut rng);
        let t = random_tokens(&mut rng, &[2, 2], 8);
        assert!(contextual_interaction_encoder_with_mask(&t, &block, &AttnMask::full(3, 3)).is_err());
    }

    #[test]
    fn refiner_empty_group_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = RefinerBlock::init(&tiny(), &mut rng);
        let q = Matrix::uniform(3, 8, 1.0, &mut rng);
        let t = random_tokens(&mut rng, &[2, 0, 1], 8);
        let out = interaction_guided_refiner(&q, &t, &block).unwrap();
        assert_eq!(out.row(1), q.row(1));
        assert_ne!(out.row(0), q.row(0));
        let none = random_tokens(&mut rng, &[0, 0, 0], 8);
        assert_eq!(interaction_guided_refiner(&q, &none, &block).unwrap(), q);
        assert!(interaction_guided_refiner(&q, &random_tokens(&mut rng, &[1, 1], 8), &block).is_err());
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = MultiHeadAttention::init(8, 2, &mut rng);
        let q = Matrix::uniform(1, 8, 1.0, &mut rng);
        let kv = Matrix::uniform(1, 8, 1.0, &mut rng);
        let out = attn.forward(&q, &kv, &kv, &AttnMask::full(1, 1)).unwrap();
        let want = attn.o.forward(&attn.v.forward(&kv).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let q2 = Matrix::uniform(1, 8, 5.0, &mut rng);
        assert_eq!(attn.forward(&q2, &kv, &kv, &AttnMask::full(1, 1)).unwrap(), out);
    }

    #[test]
    fn weights_init_properties() {
        let cfg = tiny();
        let a = init_weights(&cfg, 9).unwrap();
        assert_eq!(a, init_weights(&cfg, 9).unwrap());
        assert_ne!(a.layers[0].self_attn.q.weight, init_weights(&cfg, 10).unwrap().layers[0].self_attn.q.weight);
        assert!(a.heads.bbox.out.weight.data().iter().all(|&w| w == 0.0));
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        assert!(a.layers[0].cie.attn.k.weight.data().iter().all(|w| w.abs() <= bound));
        a.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let w = init_weights(&tiny(), 11).unwrap();
        let text = w.to_json_string().unwrap();
        let back = DecoderWeights::from_json_str(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_json_string().unwrap(), text);

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config"]["d_model"] = serde_json::json!(16);
        assert!(DecoderWeights::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn zero_heads_give_half_confidence() {
        let cfg = tiny();
        let model = crate::body_model::make_toy_model(1, 20, cfg.joint_count, cfg.shape_count).unwrap();
        let heads = HeadWeights {
            conf: Linear::zeros(8, 1),
            shape: Linear::zeros(8, 2),
            pose: Linear::zeros(8, 12),
            cam: Linear::zeros(8, 3),
            bbox: BoxHead { hidden: Linear::zeros(8, 8), out: Linear::zeros(8, 4) },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Matrix::uniform(3, 8, 1.0, &mut rng);
        let boxes = vec![NormBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }; 3];
        let preds = regress(&q, &boxes, &heads, &model, &DepthConvention::default()).unwrap();
        assert!(preds.iter().all(|p| p.conf == 0.5));
    }

    #[test]
    fn duplicate_queries_give_identical_predictions() {
        let cfg = tiny();
        let w = init_weights(&cfg, 3).unwrap();
        let model = crate::body_model::make_toy_model(1, 20, cfg.joint_count, cfg.shape_count).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = Matrix::uniform(1, 8, 1.0, &mut rng);
        let q = Matrix::vstack(&[row.clone(), row], 8).unwrap();
        let boxes = vec![NormBox { cx: 0.4, cy: 0.6, w: 0.2, h: 0.3 }; 2];
        let preds = regress(&q, &boxes, &w.heads, &model, &DepthConvention::default()).unwrap();
        assert_eq!(preds[0], preds[1]);
    }

    #[test]
    fn zero_init_bbox_head_keeps_reference_boxes() {
        let cfg = tiny();
        let w = init_weights(&cfg, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = Matrix::uniform(5, 8, 1.0, &mut rng);
        let state = HumanQueryState { queries: w.query_embed.clone(), ref_boxes: w.ref_boxes.clone(), layer: 0 };
        let (next, trace) = decoder_layer(&state, &image, &[], &ZeroProvider { feature_dim: 6 }, &w).unwrap();
        for (a, b) in next.ref_boxes.iter().zip(&w.ref_boxes) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(trace.token_count, 3 * 2);
    }

    #[test]
    fn disabled_interaction_skips_refinement() {
        let mut cfg = tiny();
        cfg.interaction_start_layer = cfg.n_layers;
        let w = init_weights(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = Matrix::uniform(4, 8, 1.0, &mut rng);
        let state = HumanQueryState { queries: w.query_embed.clone(), ref_boxes: w.ref_boxes.clone(), layer: 0 };
        let (next, trace) = decoder_layer(&state, &image, &[], &ZeroProvider { feature_dim: 6 }, &w).unwrap();
        assert_eq!(trace.token_count, 0);
        assert_eq!(next.queries, trace.intermediate);

        // perturbing interaction weights changes nothing when interaction is off
        let mut w2 = w.clone();
        w2.layers[0].igr.ffn.l2.bias[0] += 1.0;
        w2.layers[0].cie.ffn.l2.bias[0] += 1.0;
        let (next2, _) = decoder_layer(&state, &image, &[], &ZeroProvider { feature_dim: 6 }, &w2).unwrap();
        assert_eq!(next.queries, next2.queries);
    }

    #[test]
    fn query_permutation_is_equivariant() {
        let cfg = tiny();
        let w = init_weights(&cfg, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let image = Matrix::uniform(4, 8, 1.0, &mut rng);
        let objects = [NormBox { cx: 0.3, cy: 0.4, w: 0.2, h: 0.2 }];
        let scene = crate::interaction::SceneSpec { seed: 0, persons: vec![], objects: vec![], interactions: vec![] };
        let provider = crate::interaction::SyntheticProvider::new(
            &scene,
            vec![],
            crate::interaction::ProviderConfig { feature_dim: 6, mode: crate::interaction::ProviderMode::Geometric },
        )
        .unwrap();
        let state = HumanQueryState { queries: w.query_embed.clone(), ref_boxes: w.ref_boxes.clone(), layer: 0 };
        let perm = [2, 0, 1];
        let permuted = HumanQueryState {
            queries: w.query_embed.select_rows(&perm),
            ref_boxes: perm.iter().map(|&i| w.ref_boxes[i]).collect(),
            layer: 0,
        };
        let (a, _) = decoder_layer(&state, &image, &objects, &provider, &w).unwrap();
        let (b, _) = decoder_layer(&permuted, &image, &objects, &provider, &w).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (x, y) in b.queries.row(r).iter().zip(a.queries.row(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn position_encoding_is_bounded() {
        let boxes = [NormBox { cx: 0.3, cy: 0.9, w: 0.1, h: 0.1 }];
        let pe = box_position_encoding(&boxes, 16);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(0)[..8], pe.row(0)[8..]);
    }
}
