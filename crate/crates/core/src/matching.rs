//! Set-prediction matching: per-pair costs and optimal one-to-one assignment.

use serde::{Deserialize, Serialize};

use crate::camera::NormBox;
use crate::metrics::giou;
use crate::{Error, Result};

/// Confidence clamp applied before taking logarithms.
pub const CONF_CLAMP: f64 = 1e-7;

/// Largest side accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_LIMIT: usize = 9;

/// Weights of the four matching-cost terms and the focal exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub conf: f64,
    pub bbox: f64,
    pub giou: f64,
    pub kpts: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            conf: 0.25,
            bbox: 1.0,
            giou: 1.0,
            kpts: 20.0,
            gamma: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.conf, self.bbox, self.giou, self.kpts, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("cost weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// The prediction side of a matching pair.
#[derive(Debug, Clone, Copy)]
pub struct PredView<'a> {
    pub conf: f64,
    pub bbox: NormBox,
    pub kpts: &'a [[f64; 2]],
}

/// The ground-truth side of a matching pair.
///
/// With `visible` set, the keypoint cost only averages over visible keypoints.
#[derive(Debug, Clone, Copy)]
pub struct TargetView<'a> {
    pub bbox: NormBox,
    pub kpts: &'a [[f64; 2]],
    pub visible: Option<&'a [bool]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub conf: f64,
    pub bbox: f64,
    pub giou: f64,
    pub kpts: f64,
    pub total: f64,
    /// The confidence was outside `(0, 1)` and had to be clamped.
    pub clamped: bool,
}

/// Focal-style confidence cost `-(1 - p)^γ · ln p`.
pub fn confidence_cost(p: f64, gamma: f64) -> (f64, bool) {
    let clamped = !(p > 0.0 && p < 1.0);
    let p = p.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
    (-(1.0 - p).powf(gamma) * p.ln(), clamped)
}

/// Mean absolute difference over keypoint coordinates, optionally restricted to
/// visible keypoints. Returns 0 when nothing is visible.
pub fn keypoint_l1(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted keypoints vs {} ground truth", pred.len(), gt.len())));
    }
    if let Some(v) = visible {
        if v.len() != gt.len() {
            return Err(Error::shape("visibility flags do not match keypoints"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if visible.is_some_and(|v| !v[i]) {
            continue;
        }
        total += (p[0] - g[0]).abs() + (p[1] - g[1]).abs();
        count += 2;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn cost_terms(pred: &PredView<'_>, gt: &TargetView<'_>, w: &CostWeights) -> Result<CostTerms> {
    let (conf, clamped) = confidence_cost(pred.conf, w.gamma);
    let bbox = pred.bbox.l1(&gt.bbox);
    let giou_cost = -giou(&pred.bbox, &gt.bbox);
    let kpts = keypoint_l1(pred.kpts, gt.kpts, gt.visible)?;
    let total = w.conf * conf + w.bbox * bbox + w.giou * giou_cost + w.kpts * kpts;
    Ok(CostTerms {
        conf,
        bbox,
        giou: giou_cost,
        kpts,
        total,
        clamped,
    })
}

/// Dense `n_pred × n_gt` cost matrix with the per-term breakdown when built from records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    n_pred: usize,
    n_gt: usize,
    total: Vec<f64>,
    terms: Vec<CostTerms>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_gt = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_gt) {
            return Err(Error::shape("ragged cost matrix"));
        }
        Self::from_vec(rows.len(), n_gt, rows.concat())
    }

    pub fn from_vec(n_pred: usize, n_gt: usize, total: Vec<f64>) -> Result<Self> {
        if total.len() != n_pred * n_gt {
            return Err(Error::shape("cost matrix size"));
        }
        if total.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("cost matrix entries must be finite".into()));
        }
        Ok(Self {
            n_pred,
            n_gt,
            total,
            terms: Vec::new(),
        })
    }

    pub fn build(preds: &[PredView<'_>], gts: &[TargetView<'_>], w: &CostWeights) -> Result<Self> {
        let mut terms = Vec::with_capacity(preds.len() * gts.len());
        for p in preds {
            for g in gts {
                terms.push(cost_terms(p, g, w)?);
            }
        }
        let total: Vec<f64> = terms.iter().map(|t| t.total).collect();
        let mut m = Self::from_vec(preds.len(), gts.len(), total)?;
        m.terms = terms;
        Ok(m)
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    #[inline]
    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.total[p * self.n_gt + g]
    }

    pub fn terms(&self, p: usize, g: usize) -> Option<&CostTerms> {
        self.terms.get(p * self.n_gt + g)
    }

    /// Tolerance under which two costs are treated as tied.
    fn tie_tolerance(&self) -> f64 {
        let scale = self.total.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        1e-9 * scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(cost: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut pred_used = vec![false; cost.n_pred];
        let mut gt_used = vec![false; cost.n_gt];
        for &(p, g) in &pairs {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
        Self {
            pairs,
            unmatched_preds: (0..cost.n_pred).filter(|&p| !pred_used[p]).collect(),
            unmatched_gts: (0..cost.n_gt).filter(|&g| !gt_used[g]).collect(),
            total_cost,
        }
    }

    /// Ground-truth index matched to each prediction.
    pub fn gt_for_pred(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Optimal assignment of `min(n_pred, n_gt)` pairs.
///
/// Shortest-augmenting-path Hungarian method on the matrix padded to square
/// with a constant (zero) entry, which shifts every complete assignment by the
/// same amount. Among optimal assignments the lexicographically smallest pair
/// list is returned: after solving, the dual potentials identify the tight
/// edges, and rows are re-routed greedily to their smallest tight column.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (rows, cols) = (cost.n_pred, cost.n_gt);
    let n = rows.max(cols);
    if rows == 0 || cols == 0 {
        return Assignment::from_pairs(cost, Vec::new());
    }
    let a = |i: usize, j: usize| if i < rows && j < cols { cost.get(i, j) } else { 0.0 };

    // 1-based potentials and column owners; index 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    let mut row_of = vec![0usize; n];
    for j in 1..=n {
        col_of[owner[j] - 1] = j - 1;
        row_of[j - 1] = owner[j] - 1;
    }

    let tol = cost.tie_tolerance();
    let tight = |i: usize, j: usize| a(i, j) - u[i + 1] - v[j + 1] <= tol;
    let mut fixed_row = vec![false; n];
    let mut fixed_col = vec![false; n];
    for i in 0..rows {
        for j in 0..col_of[i] {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if reroute(i, j, &tight, &mut col_of, &mut row_of, &fixed_row, &fixed_col) {
                break;
            }
        }
        fixed_row[i] = true;
        fixed_col[col_of[i]] = true;
    }

    let pairs = (0..rows)
        .filter(|&i| col_of[i] < cols)
        .map(|i| (i, col_of[i]))
        .collect();
    Assignment::from_pairs(cost, pairs)
}

/// Moves row `i` onto column `j` inside the tight graph, freeing `i`'s old
/// column through an alternating path that avoids fixed rows and columns.
fn reroute(
    i: usize,
    j: usize,
    tight: &impl Fn(usize, usize) -> bool,
    col_of: &mut [usize],
    row_of: &mut [usize],
    fixed_row: &[bool],
    fixed_col: &[bool],
) -> bool {
    let n = col_of.len();
    let freed = col_of[i];
    let displaced = row_of[j];
    // search from `displaced` for an alternating path ending at `freed`
    let mut visited = vec![false; n];
    visited[j] = true;
    let mut path: Vec<(usize, usize)> = Vec::new();
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        r: usize,
        freed: usize,
        tight: &impl Fn(usize, usize) -> bool,
        row_of: &[usize],
        fixed_row: &[bool],
        fixed_col: &[bool],
        visited: &mut [bool],
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        for c in 0..row_of.len() {
            if visited[c] || fixed_col[c] || !tight(r, c) {
                continue;
            }
            visited[c] = true;
            if c == freed {
                path.push((r, c));
                return true;
            }
            let next = row_of[c];
            if fixed_row[next] {
                continue;
            }
            if dfs(next, freed, tight, row_of, fixed_row, fixed_col, visited, path) {
                path.push((r, c));
                return true;
            }
        }
        false
    }
    if displaced == i {
        return false;
    }
    visited[freed] = false;
    if !dfs(displaced, freed, tight, row_of, fixed_row, fixed_col, &mut visited, &mut path) {
        return false;
    }
    col_of[i] = j;
    row_of[j] = i;
    for (r, c) in path {
        col_of[r] = c;
        row_of[c] = r;
    }
    true
}

/// Exhaustive minimum over all injections, with the same tie rule as
/// [`hungarian`]. Refuses problems with a side longer than [`BRUTE_FORCE_LIMIT`].
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (rows, cols) = (cost.n_pred, cost.n_gt);
    if rows.max(cols) > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(rows.max(cols)));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::from_pairs(cost, Vec::new()));
    }
    let transposed = rows > cols;
    let (short, long) = if transposed { (cols, rows) } else { (rows, cols) };
    let entry = |s: usize, l: usize| if transposed { cost.get(l, s) } else { cost.get(s, l) };

    let mut injections: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let mut chosen = Vec::with_capacity(short);
    let mut used = vec![false; long];
    enumerate(short, long, &mut chosen, &mut used, &mut |chosen: &[usize]| {
        let mut pairs: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .map(|(s, &l)| if transposed { (l, s) } else { (s, l) })
            .collect();
        pairs.sort_unstable();
        let total = chosen.iter().enumerate().map(|(s, &l)| entry(s, l)).sum::<f64>();
        injections.push((total, pairs));
    });

    let best = injections.iter().map(|(c, _)| *c).fold(f64::INFINITY, f64::min);
    let tol = cost.tie_tolerance();
    let pairs = injections
        .into_iter()
        .filter(|(c, _)| *c <= best + tol)
        .map(|(_, p)| p)
        .min()
        .unwrap_or_default();
    Ok(Assignment::from_pairs(cost, pairs))
}

fn enumerate(
    short: usize,
    long: usize,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut impl FnMut(&[usize]),
) {
    if chosen.len() == short {
        visit(chosen);
        return;
    }
    for l in 0..long {
        if used[l] {
            continue;
        }
        used[l] = true;
        chosen.push(l);
        enumerate(short, long, chosen, used, visit);
        chosen.pop();
        used[l] = false;
    }
}
