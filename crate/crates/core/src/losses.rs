//! Training-loss terms over matched prediction/ground-truth pairs.
//!
//! Every L1 term is a mean over its elements, and the pair terms are then
//! averaged over matched pairs. The 3D joint term is root-relative; absolute
//! placement is supervised by the root-depth term.

use serde::{Deserialize, Serialize};

use crate::matching::{hungarian, Assignment, CostMatrix, CostWeights, CONF_CLAMP};
use crate::metrics::giou;
use crate::person::PersonRecord;
use crate::{Error, Result};

/// Focal-loss class balance for positives.
pub const FOCAL_ALPHA: f64 = 0.25;

/// Loss weights. `map` belongs to a scale-map loss that is not computed here
/// and must stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub map: f64,
    pub depth: f64,
    pub pose: f64,
    pub shape: f64,
    pub j3ds: f64,
    pub j2ds: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub det: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            map: 0.0,
            depth: 0.5,
            pose: 5.0,
            shape: 3.0,
            j3ds: 8.0,
            j2ds: 40.0,
            bbox: 2.0,
            det: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.map != 0.0 {
            return Err(Error::Config(format!(
                "loss weight map = {} requires the scale-map encoder, which is not part of this decoder; set it to 0",
                self.map
            )));
        }
        let all = [self.depth, self.pose, self.shape, self.j3ds, self.j2ds, self.bbox, self.det];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// The seven active weights in serialization order.
    pub fn active(&self) -> [f64; 7] {
        [self.depth, self.pose, self.shape, self.j3ds, self.j2ds, self.bbox, self.det]
    }
}

/// Per-pair loss terms (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermLosses {
    pub depth: f64,
    pub pose: f64,
    pub shape: f64,
    pub j3ds: f64,
    pub j2ds: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
}

impl TermLosses {
    fn weighted(&self, w: &LossWeights) -> f64 {
        w.depth * self.depth
            + w.pose * self.pose
            + w.shape * self.shape
            + w.j3ds * self.j3ds
            + w.j2ds * self.j2ds
            + w.bbox * self.bbox
    }
}

fn mean_abs<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    a.zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: prediction has {a}, ground truth {b}")));
    }
    Ok(())
}

pub fn term_losses(pred: &PersonRecord, gt: &PersonRecord) -> Result<TermLosses> {
    check_len("pose joints", pred.params.pose.len(), gt.params.pose.len())?;
    check_len("shape coefficients", pred.params.shape.len(), gt.params.shape.len())?;
    check_len("joints", pred.joints.len(), gt.joints.len())?;
    check_len("keypoints", pred.kpts.len(), gt.kpts.len())?;

    let pose = mean_abs(
        pred.params.pose.iter().flatten(),
        gt.params.pose.iter().flatten(),
        pred.params.pose.len() * 3,
    );
    let shape = mean_abs(pred.params.shape.iter(), gt.params.shape.iter(), pred.params.shape.len());
    let (pr, gr) = (pred.joints_root_relative(), gt.joints_root_relative());
    let j3ds = mean_abs(
        pr.iter().flat_map(|v| v.as_slice()),
        gr.iter().flat_map(|v| v.as_slice()),
        pr.len() * 3,
    );
    let j2ds = mean_abs(
        pred.kpts.iter().flatten(),
        gt.kpts.iter().flatten(),
        pred.kpts.len() * 2,
    );
    let bbox = pred.bbox.l1(&gt.bbox) + (1.0 - giou(&pred.bbox, &gt.bbox));
    Ok(TermLosses {
        depth: (pred.depth - gt.depth).abs(),
        pose,
        shape,
        j3ds,
        j2ds,
        bbox,
    })
}

/// Focal detection loss, averaged over all queries. Matched queries are
/// positives, the rest negatives.
pub fn detection_loss(confs: &[f64], assignment: &Assignment, gamma: f64) -> f64 {
    if confs.is_empty() {
        return 0.0;
    }
    let matched = assignment.gt_for_pred(confs.len());
    let total: f64 = confs
        .iter()
        .zip(&matched)
        .map(|(&c, m)| {
            let p = c.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
            if m.is_some() {
                -FOCAL_ALPHA * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - FOCAL_ALPHA) * p.powf(gamma) * (1.0 - p).ln()
            }
        })
        .sum();
    total / confs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub pred: usize,
    pub gt: usize,
    pub terms: TermLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Pair terms averaged over matched pairs (all zero without pairs).
    pub terms: TermLosses,
    pub detection: f64,
    pub total: f64,
    pub pairs: Vec<PairLoss>,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the stored terms.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.terms.weighted(w) + w.det * self.detection
    }
}

/// Matches predictions to ground truth with the training cost and combines
/// all terms.
pub fn total_loss(
    preds: &[PersonRecord],
    gts: &[PersonRecord],
    weights: &LossWeights,
    cost_weights: &CostWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    cost_weights.validate()?;
    let pv: Vec<_> = preds.iter().map(|p| p.pred_view()).collect();
    let gv: Vec<_> = gts.iter().map(|g| g.target_view()).collect();
    let assignment = hungarian(&CostMatrix::build(&pv, &gv, cost_weights)?);

    let pairs = assignment
        .pairs
        .iter()
        .map(|&(p, g)| {
            Ok(PairLoss {
                pred: p,
                gt: g,
                terms: term_losses(&preds[p], &gts[g])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut terms = TermLosses::default();
    if !pairs.is_empty() {
        let n = pairs.len() as f64;
        let avg = |f: fn(&TermLosses) -> f64| pairs.iter().map(|p| f(&p.terms)).sum::<f64>() / n;
        terms = TermLosses {
            depth: avg(|t| t.depth),
            pose: avg(|t| t.pose),
            shape: avg(|t| t.shape),
            j3ds: avg(|t| t.j3ds),
            j2ds: avg(|t| t.j2ds),
            bbox: avg(|t| t.bbox),
        };
    }
    let confs: Vec<f64> = preds.iter().map(|p| p.conf).collect();
    let detection = detection_loss(&confs, &assignment, cost_weights.gamma);
    let mut out = LossBreakdown {
        terms,
        detection,
        total: 0.0,
        pairs,
    };
    out.total = out.recompute_total(weights);
    Ok(out)
}
