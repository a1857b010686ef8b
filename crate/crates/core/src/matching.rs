//! Bipartite matching between predicted queries and ground-truth objects,
//! the matching cost, and the set-based detection loss.
//!
//! Matching runs on detached values; the loss differentiates through logits
//! and boxes with the assignment held fixed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{giou_pairs, giou_xyxy, BBox};
use crate::graph::{Graph, Var};
use crate::nn::focal_loss;
use crate::tensor::Tensor;

/// Matching cost weights: `-prob + 5*L1 + 2*(1 - GIoU)`.
pub const COST_PROB: f64 = 1.0;
pub const COST_L1: f64 = 5.0;
pub const COST_GIOU: f64 = 2.0;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Loss term weights:
/// `cls*focal + (l1*sum L1 + giou*sum(1 - GIoU)) / max(matched, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.cls < 0.0 || self.l1 < 0.0 || self.giou < 0.0 {
            return Err(Error::value("loss_weights", "weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Assignment of ground-truth objects to queries: `pairs[t] = (query, gt)`,
/// plus the queries left unmatched.
#[derive(Debug, Clone, Default)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Minimum-cost assignment of `tasks` rows to distinct `agents` columns of a
/// row-major `tasks x agents` cost matrix, `tasks <= agents`. Returns the
/// chosen agent per task.
pub fn hungarian(cost: &[f64], tasks: usize, agents: usize) -> Result<Vec<usize>> {
    if tasks > agents {
        return Err(Error::value(
            "hungarian",
            format!("{tasks} tasks cannot be assigned to {agents} agents"),
        ));
    }
    if cost.len() != tasks * agents {
        return Err(Error::shape(
            "hungarian",
            format!("cost matrix has {} entries, expected {}", cost.len(), tasks * agents),
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::value("hungarian", "cost matrix contains a non-finite entry"));
    }
    if tasks == 0 {
        return Ok(Vec::new());
    }

    // Successive shortest augmenting paths over dual potentials; 1-based
    // indices with column 0 as the virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; tasks + 1];
    let mut v = vec![0.0; agents + 1];
    let mut assigned = vec![0usize; agents + 1];
    let mut way = vec![0usize; agents + 1];
    for task in 1..=tasks {
        assigned[0] = task;
        let mut j0 = 0usize;
        let mut minv = vec![inf; agents + 1];
        let mut used = vec![false; agents + 1];
        loop {
            used[j0] = true;
            let i0 = assigned[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=agents {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * agents + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=agents {
                if used[j] {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; tasks];
    for j in 1..=agents {
        if assigned[j] != 0 {
            out[assigned[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&q| q != usize::MAX));
    Ok(out)
}

/// Row-major `gts x queries` matching cost from detached predictions.
pub fn matching_cost(
    probs: &Tensor,
    boxes: &[BBox],
    gts: &[(usize, BBox)],
) -> Result<Vec<f64>> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != boxes.len() {
        return Err(Error::shape(
            "matching",
            format!(
                "probs {} must be N x C with one row per box ({})",
                crate::error::shape_str(s),
                boxes.len()
            ),
        ));
    }
    let (n, c) = (s[0], s[1]);
    for (t, &(class, b)) in gts.iter().enumerate() {
        if class >= c {
            return Err(Error::value(
                "matching",
                format!("ground-truth {t} has class {class}, but only {c} classes exist"),
            ));
        }
        if !(b.w > 0.0) || !(b.h > 0.0) {
            return Err(Error::value(
                "matching",
                format!("ground-truth {t} has non-positive size {}x{}", b.w, b.h),
            ));
        }
    }
    let mut cost = vec![0.0; gts.len() * n];
    for (t, &(class, gb)) in gts.iter().enumerate() {
        let g_xyxy = gb.to_xyxy();
        for (q, &pb) in boxes.iter().enumerate() {
            let prob = probs.data()[q * c + class];
            let l1 = pb.l1(gb);
            let giou = giou_xyxy(pb.to_xyxy(), g_xyxy);
            cost[t * n + q] = -COST_PROB * prob + COST_L1 * l1 + COST_GIOU * (1.0 - giou);
        }
    }
    Ok(cost)
}

/// Hungarian matching under [`matching_cost`]: min(N, #GT) pairs, ordered by
/// object index, plus the queries left over.
pub fn match_queries(
    probs: &Tensor,
    boxes: &[BBox],
    gts: &[(usize, BBox)],
) -> Result<Matching> {
    let cost = matching_cost(probs, boxes, gts)?;
    let (n, k) = (boxes.len(), gts.len());
    if k > n {
        // More objects than queries: assign a distinct object to every query
        // by solving the transposed problem.
        let transposed: Vec<f64> =
            (0..n * k).map(|i| cost[(i % k) * n + i / k]).collect();
        let assignment = hungarian(&transposed, n, k)?;
        let mut pairs: Vec<(usize, usize)> =
            assignment.iter().enumerate().map(|(q, &t)| (q, t)).collect();
        pairs.sort_unstable_by_key(|p| p.1);
        return Ok(Matching { pairs, unmatched: Vec::new() });
    }
    let assignment = hungarian(&cost, k, n)?;
    let mut taken = vec![false; n];
    for &q in &assignment {
        taken[q] = true;
    }
    Ok(Matching {
        pairs: assignment.iter().enumerate().map(|(t, &q)| (q, t)).collect(),
        unmatched: (0..n).filter(|&q| !taken[q]).collect(),
    })
}

/// Detection loss for one prediction set under a fixed matching:
/// `2*focal + (5*sum L1 + 2*sum(1 - GIoU)) / max(matched, 1)`.
///
/// `logits` is `N x C`, `boxes` is `N x 4` center-size; matched ground-truth
/// boxes enter as constants. Classification targets are the matched one-hot
/// rows, all-zero for unmatched queries.
pub fn detection_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[(usize, BBox)],
    matching: &Matching,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let sl = g.shape(logits).to_vec();
    let sb = g.shape(boxes).to_vec();
    if sl.len() != 2 || sb.len() != 2 || sb[1] != 4 || sl[0] != sb[0] {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "logits {} and boxes {} must be N x C and N x 4",
                crate::error::shape_str(&sl),
                crate::error::shape_str(&sb)
            ),
        ));
    }
    let (n, c) = (sl[0], sl[1]);
    let mut targets = vec![0.0; n * c];
    for &(q, t) in &matching.pairs {
        if q >= n || t >= gts.len() {
            return Err(Error::value(
                "detection_loss",
                format!("pair ({q}, {t}) is outside {n} queries / {} objects", gts.len()),
            ));
        }
        let class = gts[t].0;
        if class >= c {
            return Err(Error::value(
                "detection_loss",
                format!("ground-truth {t} has class {class}, but only {c} classes exist"),
            ));
        }
        targets[q * c + class] = 1.0;
    }
    let targets = Tensor::new(&[n, c], targets)?;
    let cls = focal_loss(g, logits, &targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let mut loss = g.scale(cls, weights.cls);

    if !matching.pairs.is_empty() {
        let k = matching.pairs.len();
        let mut pred_rows = Vec::with_capacity(k);
        let mut gt_flat = Vec::with_capacity(k * 4);
        for &(q, t) in &matching.pairs {
            pred_rows.push(g.slice(boxes, 0, q, 1)?);
            let b = gts[t].1;
            gt_flat.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        }
        let pred = g.concat(0, &pred_rows)?;
        let gt = Tensor::new(&[k, 4], gt_flat)?;

        let gt_var = g.constant(gt.clone());
        let diff = g.sub(pred, gt_var)?;
        let absd = g.abs(diff);
        let l1_sum = g.sum_all(absd);
        let l1_term = g.scale(l1_sum, weights.l1 / k as f64);

        let giou = giou_pairs(g, pred, &gt)?;
        let giou_sum = g.sum_all(giou);
        // w/k * sum(1 - giou) = -w/k * sum(giou) + w.
        let giou_term = g.affine(giou_sum, -weights.giou / k as f64, weights.giou);

        let box_terms = g.add(l1_term, giou_term)?;
        loss = g.add(loss, box_terms)?;
    }
    Ok(loss)
}
