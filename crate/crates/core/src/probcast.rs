//! Ordinal-consistent exceedance probabilities.
//!
//! A model emits conditional probabilities
//! `q[t, c] = P(R_t >= e_c | R_t >= e_{c-1})` (with `q[t, 0] = P(R_t >= e_1)`);
//! exceedance probabilities are their running product and therefore
//! nonincreasing in `c` whatever the model outputs.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::intensity::{BinSet, ClassMasks};
use crate::{is_missing, Error, Result};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Conditional outputs `T x K x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondCube(pub Array4<f64>);

/// Exceedance probabilities `T x K x H x W`, nonincreasing along K.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCube(pub Array4<f64>);

impl ProbCube {
    /// Number of `(t, h, w)` columns violating `p[c] <= p[c-1]`.
    pub fn monotonicity_violations(&self) -> usize {
        let (t, k, h, w) = self.0.dim();
        let mut n = 0;
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    if (1..k).any(|c| self.0[[ti, c, y, x]] > self.0[[ti, c - 1, y, x]]) {
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

/// Running product along the class axis.
pub fn reconstruct(cond: &CondCube) -> ProbCube {
    let mut p = cond.0.clone();
    let k = p.shape()[1];
    for c in 1..k {
        let (prev, mut cur) = p.multi_slice_mut((s![.., c - 1, .., ..], s![.., c, .., ..]));
        cur *= &prev;
    }
    ProbCube(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightForm {
    /// `alpha^(-t/(T-1))`: first/last weight ratio equals alpha.
    #[default]
    Ratio,
    /// `exp(-alpha * t)` with integer lead index t.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadWeights {
    pub w: Vec<f64>,
    pub alpha: f64,
}

impl LeadWeights {
    pub fn uniform(t: usize) -> Self {
        Self {
            w: vec![1.0; t],
            alpha: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Exponentially decaying lead-time weights, normalized then rescaled to mean 1.
pub fn lead_time_weights(alpha: f64, t: usize, form: WeightForm) -> Result<LeadWeights> {
    if t == 0 {
        return Err(Error::Domain("need at least one lead time".into()));
    }
    let exp: Vec<f64> = match form {
        WeightForm::Ratio => {
            if !(alpha >= 1.0) {
                return Err(Error::Domain(format!("alpha must be >= 1, got {alpha}")));
            }
            if t == 1 {
                vec![1.0]
            } else {
                (0..t)
                    .map(|i| alpha.powf(-(i as f64) / (t - 1) as f64))
                    .collect()
            }
        }
        WeightForm::Literal => {
            if !(alpha >= 0.0) {
                return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
            }
            (0..t).map(|i| (-alpha * i as f64).exp()).collect()
        }
    };
    let total: f64 = exp.iter().sum();
    let norm: Vec<f64> = exp.iter().map(|v| v / total).collect();
    let mean = norm.iter().sum::<f64>() / t as f64;
    Ok(LeadWeights {
        w: norm.iter().map(|v| v / mean).collect(),
        alpha,
    })
}

/// Scalar loss with bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Number of averaged elements (|S| for the ordinal loss, valid pixels x
    /// leads for cross-entropy).
    pub count: usize,
}

impl LossValue {
    /// Set when no element contributed (e.g. a fully missing sample).
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn check_shapes(q: (usize, usize, usize, usize), m: &ClassMasks, lw: &LeadWeights) -> Result<()> {
    if q != m.masks.dim() {
        return Err(Error::Dimension(format!(
            "outputs {:?} vs targets {:?}",
            q,
            m.masks.dim()
        )));
    }
    if lw.len() != q.0 {
        return Err(Error::Dimension(format!(
            "{} lead weights for {} lead times",
            lw.len(),
            q.0
        )));
    }
    Ok(())
}

/// Masked BCE on the conditional outputs.
///
/// The averaging set holds every valid pixel for the first class and, for
/// class `c > 0`, only the pixels whose rate reached the previous edge.
/// Each term is scaled by its lead weight; the sum is divided by the element
/// count |S|, not by the weight total.
pub fn ordinal_loss(cond: &CondCube, targets: &ClassMasks, lw: &LeadWeights) -> Result<LossValue> {
    ordinal_loss_inner(cond, targets, lw, None)
}

/// [`ordinal_loss`] together with its gradient with respect to `q`.
pub fn ordinal_loss_grad(
    cond: &CondCube,
    targets: &ClassMasks,
    lw: &LeadWeights,
) -> Result<(LossValue, Array4<f64>)> {
    let mut g = Array4::zeros(cond.0.dim());
    let v = ordinal_loss_inner(cond, targets, lw, Some(&mut g))?;
    Ok((v, g))
}

fn ordinal_loss_inner(
    cond: &CondCube,
    targets: &ClassMasks,
    lw: &LeadWeights,
    mut grad: Option<&mut Array4<f64>>,
) -> Result<LossValue> {
    let q = &cond.0;
    check_shapes(q.dim(), targets, lw)?;
    let (t, k, h, w) = q.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        let wt = lw.w[ti];
        for c in 0..k {
            for y in 0..h {
                for x in 0..w {
                    if targets.valid[[ti, y, x]] == 0 {
                        continue;
                    }
                    if c > 0 && targets.masks[[ti, c - 1, y, x]] == 0 {
                        continue;
                    }
                    let raw = q[[ti, c, y, x]];
                    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    let target = targets.masks[[ti, c, y, x]] == 1;
                    sum += wt * if target { -p.ln() } else { -(1.0 - p).ln() };
                    count += 1;
                    if let Some(g) = grad.as_deref_mut() {
                        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
                            let d = if target { -1.0 / p } else { 1.0 / (1.0 - p) };
                            g[[ti, c, y, x]] = wt * d;
                        }
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok(LossValue { loss: 0.0, count });
    }
    let n = count as f64;
    if let Some(g) = grad {
        g.mapv_inplace(|v| v / n);
    }
    Ok(LossValue {
        loss: sum / n,
        count,
    })
}

/// Bucket index per pixel implied by exceedance masks.
fn bucket_of(targets: &ClassMasks, t: usize, y: usize, x: usize) -> usize {
    targets
        .masks
        .slice(s![t, .., y, x])
        .iter()
        .take_while(|&&m| m == 1)
        .count()
}

fn softmax_column(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax over the bucket axis of `T x (K+1) x H x W` logits.
pub fn bucket_softmax(logits: ArrayView4<f64>) -> Array4<f64> {
    let mut out = Array4::zeros(logits.dim());
    let (t, _, h, w) = logits.dim();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let col: Vec<f64> = logits.slice(s![ti, .., y, x]).to_vec();
                for (b, p) in softmax_column(&col).into_iter().enumerate() {
                    out[[ti, b, y, x]] = p;
                }
            }
        }
    }
    out
}

/// Cross-entropy over K+1 buckets (the ablation without ordinal structure),
/// lead-weighted and averaged over valid pixel-leads.
pub fn ce_loss(
    bucket_logits: ArrayView4<f64>,
    targets: &ClassMasks,
    lw: &LeadWeights,
) -> Result<LossValue> {
    ce_loss_inner(bucket_logits, targets, lw, None)
}

/// [`ce_loss`] and its gradient with respect to the logits.
pub fn ce_loss_grad(
    bucket_logits: ArrayView4<f64>,
    targets: &ClassMasks,
    lw: &LeadWeights,
) -> Result<(LossValue, Array4<f64>)> {
    let mut g = Array4::zeros(bucket_logits.dim());
    let v = ce_loss_inner(bucket_logits, targets, lw, Some(&mut g))?;
    Ok((v, g))
}

fn ce_loss_inner(
    logits: ArrayView4<f64>,
    targets: &ClassMasks,
    lw: &LeadWeights,
    mut grad: Option<&mut Array4<f64>>,
) -> Result<LossValue> {
    let (t, kb, h, w) = logits.dim();
    let (tt, k, th, tw) = targets.masks.dim();
    if (t, h, w) != (tt, th, tw) || kb != k + 1 {
        return Err(Error::Dimension(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.masks.dim()
        )));
    }
    if lw.len() != t {
        return Err(Error::Dimension("lead weight length mismatch".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if targets.valid[[ti, y, x]] == 0 {
                    continue;
                }
                let col: Vec<f64> = logits.slice(s![ti, .., y, x]).to_vec();
                let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + col.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                let b = bucket_of(targets, ti, y, x);
                sum += lw.w[ti] * (lse - col[b]);
                count += 1;
                if let Some(g) = grad.as_deref_mut() {
                    for (j, z) in col.iter().enumerate() {
                        let p = (z - lse).exp();
                        g[[ti, j, y, x]] = lw.w[ti] * (p - (j == b) as u8 as f64);
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok(LossValue { loss: 0.0, count });
    }
    let n = count as f64;
    if let Some(g) = grad {
        g.mapv_inplace(|v| v / n);
    }
    Ok(LossValue {
        loss: sum / n,
        count,
    })
}

/// Bucket probabilities `T x (K+1) x H x W` to exceedances
/// `p[c] = sum_{j > c} prob[j]` (K classes, bucket 0 is no rain).
pub fn tail_sum_exceedance(bucket_probs: ArrayView4<f64>) -> ProbCube {
    let (t, kb, h, w) = bucket_probs.dim();
    let k = kb - 1;
    let mut p = Array4::zeros((t, k, h, w));
    for c in (0..k).rev() {
        let mut acc = bucket_probs.slice(s![.., c + 1, .., ..]).to_owned();
        if c + 1 < k {
            acc += &p.slice(s![.., c + 1, .., ..]);
        }
        p.slice_mut(s![.., c, .., ..]).assign(&acc);
    }
    ProbCube(p)
}

/// Per-(class, lead) activation thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    pub edges: Vec<f64>,
    pub lead_min: Vec<i64>,
    /// `thr[c][t]`.
    pub thr: Vec<Vec<f64>>,
    /// `(c, t)` cells that fell back to 0.5 because the class never occurred.
    #[serde(default)]
    pub fallback: Vec<(usize, usize)>,
}

impl ThresholdTable {
    pub fn constant(bins: &BinSet, lead_min: Vec<i64>, value: f64) -> Self {
        Self {
            edges: bins.edges().to_vec(),
            thr: vec![vec![value; lead_min.len()]; bins.len()],
            lead_min,
            fallback: Vec::new(),
        }
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.thr[c][t]
    }

    /// Check a loaded table against the bins and lead times it is used with.
    pub fn check_compatible(&self, bins: &BinSet, lead_min: &[i64]) -> Result<()> {
        if self.edges != bins.edges() {
            return Err(Error::Format(format!(
                "threshold table edges {:?} do not match bins {:?}",
                self.edges,
                bins.edges()
            )));
        }
        if self.lead_min != lead_min {
            return Err(Error::Format(format!(
                "threshold table leads {:?} do not match {:?}",
                self.lead_min, lead_min
            )));
        }
        if self.thr.len() != bins.len()
            || self.thr.iter().any(|r| r.len() != lead_min.len())
            || self.thr.iter().flatten().any(|v| !(*v > 0.0 && *v < 1.0))
        {
            return Err(Error::Format("malformed threshold matrix".into()));
        }
        Ok(())
    }
}

/// `{0.02, 0.04, ..., 0.98}`.
pub fn default_candidates() -> Vec<f64> {
    (1..50).map(|i| i as f64 / 50.0).collect()
}

/// Accumulates confusion counts for every `(class, lead, candidate)` cell and
/// picks the CSI-maximizing threshold per cell.
#[derive(Debug, Clone)]
pub struct ThresholdCalibrator {
    edges: Vec<f64>,
    lead_min: Vec<i64>,
    candidates: Vec<f64>,
    /// `[c][t][j] -> (tp, fp, fn)`.
    counts: Vec<Vec<Vec<[u64; 3]>>>,
    samples: usize,
}

impl ThresholdCalibrator {
    pub fn new(bins: &BinSet, lead_min: Vec<i64>, candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() || candidates.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
            return Err(Error::Domain("candidate thresholds must lie in (0, 1)".into()));
        }
        let mut candidates = candidates;
        candidates.sort_by(f64::total_cmp);
        let counts = vec![vec![vec![[0u64; 3]; candidates.len()]; lead_min.len()]; bins.len()];
        Ok(Self {
            edges: bins.edges().to_vec(),
            lead_min,
            candidates,
            counts,
            samples: 0,
        })
    }

    pub fn add(&mut self, p: &ProbCube, target: ArrayView3<f64>) -> Result<()> {
        let (t, k, h, w) = p.0.dim();
        if (t, h, w) != target.dim() || k != self.edges.len() || t != self.lead_min.len() {
            return Err(Error::Dimension(format!(
                "probabilities {:?} vs target {:?}",
                p.0.dim(),
                target.dim()
            )));
        }
        for ti in 0..t {
            for c in 0..k {
                let e = self.edges[c];
                let cell = &mut self.counts[c][ti];
                for y in 0..h {
                    for x in 0..w {
                        let r = target[[ti, y, x]];
                        if is_missing(r) {
                            continue;
                        }
                        let obs = r >= e;
                        let prob = p.0[[ti, c, y, x]];
                        // Candidates are sorted: the forecast is positive for
                        // the prefix of thresholds not exceeding prob.
                        let n_pos = self.candidates.partition_point(|&thr| thr <= prob);
                        for (j, cnt) in cell.iter_mut().enumerate() {
                            let pred = j < n_pos;
                            match (pred, obs) {
                                (true, true) => cnt[0] += 1,
                                (true, false) => cnt[1] += 1,
                                (false, true) => cnt[2] += 1,
                                (false, false) => {}
                            }
                        }
                    }
                }
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<ThresholdTable> {
        if self.samples == 0 {
            return Err(Error::Empty("no validation samples for calibration".into()));
        }
        let k = self.edges.len();
        let t = self.lead_min.len();
        let mut thr = vec![vec![0.5; t]; k];
        let mut fallback = Vec::new();
        for c in 0..k {
            for ti in 0..t {
                let cell = &self.counts[c][ti];
                // tp + fn is the same for every candidate.
                let events = cell[0][0] + cell[0][2];
                if events == 0 {
                    fallback.push((c, ti));
                    continue;
                }
                let mut best = (f64::NEG_INFINITY, 0.5);
                for (j, cnt) in cell.iter().enumerate() {
                    let csi = cnt[0] as f64 / (cnt[0] + cnt[1] + cnt[2]) as f64;
                    if csi > best.0 {
                        best = (csi, self.candidates[j]);
                    }
                }
                thr[c][ti] = best.1;
            }
        }
        Ok(ThresholdTable {
            edges: self.edges.clone(),
            lead_min: self.lead_min.clone(),
            thr,
            fallback,
        })
    }
}

/// Convenience wrapper around [`ThresholdCalibrator`].
pub fn calibrate_thresholds<'a, I>(
    samples: I,
    bins: &BinSet,
    lead_min: Vec<i64>,
    candidates: Vec<f64>,
) -> Result<ThresholdTable>
where
    I: IntoIterator<Item = (&'a ProbCube, ArrayView3<'a, f64>)>,
{
    let mut cal = ThresholdCalibrator::new(bins, lead_min, candidates)?;
    for (p, r) in samples {
        cal.add(p, r)?;
    }
    cal.finish()
}

/// Rate of the highest activated bucket per pixel and lead (`T x H x W`).
pub fn extract_intensity(p: &ProbCube, thr: &ThresholdTable, bins: &BinSet) -> Result<Array3<f64>> {
    let (t, k, h, w) = p.0.dim();
    if k != bins.len() || thr.thr.len() != k || thr.thr.iter().any(|r| r.len() != t) {
        return Err(Error::Dimension(format!(
            "probability cube {:?} vs thresholds {}x{}",
            p.0.dim(),
            thr.thr.len(),
            thr.thr.first().map_or(0, |r| r.len())
        )));
    }
    let mut out = Array3::zeros((t, h, w));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let top = (0..k)
                    .rev()
                    .find(|&c| p.0[[ti, c, y, x]] >= thr.get(c, ti))
                    .map_or(0, |c| c + 1);
                out[[ti, y, x]] = bins.representative(top);
            }
        }
    }
    Ok(out)
}

/// Discretized CRPS for one pixel given its exceedance column.
pub fn crps_pixel(p: &[f64], rate: f64, bins: &BinSet) -> f64 {
    let widths = bins.widths();
    (0..=bins.len())
        .map(|b| {
            let lower = bins.lower(b);
            let prob_below = if b == 0 { 0.0 } else { 1.0 - p[b - 1] };
            let obs_below = (rate < lower) as u8 as f64;
            (prob_below - obs_below).powi(2) * widths[b]
        })
        .sum()
}

/// Sum of per-pixel CRPS and the number of valid pixel-leads.
pub fn crps_sum(p: &ProbCube, target: ArrayView3<f64>, bins: &BinSet) -> Result<(f64, usize)> {
    let (t, k, h, w) = p.0.dim();
    if (t, h, w) != target.dim() || k != bins.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs target {:?}",
            p.0.dim(),
            target.dim()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    let mut col = vec![0.0; k];
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let r = target[[ti, y, x]];
                if is_missing(r) {
                    continue;
                }
                for (c, v) in col.iter_mut().enumerate() {
                    *v = p.0[[ti, c, y, x]];
                }
                sum += crps_pixel(&col, r, bins);
                n += 1;
            }
        }
    }
    Ok((sum, n))
}

/// Mean CRPS over valid pixels and leads; `None` when nothing is valid.
pub fn crps(p: &ProbCube, target: ArrayView3<f64>, bins: &BinSet) -> Result<Option<f64>> {
    let (s, n) = crps_sum(p, target, bins)?;
    Ok((n > 0).then(|| s / n as f64))
}

/// Exceedance indicator of deterministic rates, i.e. a point-mass forecast.
pub fn point_mass(rates: ArrayView3<f64>, bins: &BinSet) -> ProbCube {
    let (t, h, w) = rates.dim();
    let mut p = Array4::zeros((t, bins.len(), h, w));
    Zip::indexed(&rates).for_each(|(ti, y, x), &r| {
        for (c, &e) in bins.edges().iter().enumerate() {
            if r >= e {
                p[[ti, c, y, x]] = 1.0;
            }
        }
    });
    ProbCube(p)
}

/// Lead-averaged exceedance probability for class `c` (handy for sanity checks).
pub fn mean_probability(p: &ProbCube, c: usize) -> f64 {
    p.0.index_axis(Axis(1), c).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::exceedance_masks;
    use approx::assert_relative_eq;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cube(v: &[f64]) -> Array4<f64> {
        Array::from_shape_vec((1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    fn bins12() -> BinSet {
        BinSet::new(vec![1.0, 2.0], 1.0).unwrap()
    }

    fn masks_for(r: f64, bins: &BinSet) -> ClassMasks {
        exceedance_masks(Array3::from_elem((1, 1, 1), r).view(), bins)
    }

    #[test]
    fn reconstruct_cumulative_product() {
        let p = reconstruct(&CondCube(cube(&[0.8, 0.5, 0.25])));
        let got: Vec<f64> = p.0.iter().copied().collect();
        assert_relative_eq!(got[0], 0.8);
        assert_relative_eq!(got[1], 0.4);
        assert_relative_eq!(got[2], 0.1, epsilon = 1e-15);
        let ones = reconstruct(&CondCube(cube(&[1.0; 4])));
        assert!(ones.0.iter().all(|&v| v == 1.0));
        let zero = reconstruct(&CondCube(cube(&[0.0, 0.7, 0.9])));
        assert!(zero.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ordinal_loss_both_classes() {
        let b = bins12();
        let v = ordinal_loss(&CondCube(cube(&[0.9, 0.1])), &masks_for(1.5, &b), &LeadWeights::uniform(1))
            .unwrap();
        assert_eq!(v.count, 2);
        assert_relative_eq!(v.loss, -(0.9f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(v.loss, 0.10536, epsilon = 1e-5);
    }

    #[test]
    fn ordinal_loss_masks_higher_class() {
        let b = bins12();
        let v = ordinal_loss(&CondCube(cube(&[0.2, 0.7])), &masks_for(0.5, &b), &LeadWeights::uniform(1))
            .unwrap();
        assert_eq!(v.count, 1);
        assert_relative_eq!(v.loss, -(0.8f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(v.loss, 0.22314, epsilon = 1e-5);
    }

    #[test]
    fn ordinal_loss_missing_is_flagged() {
        let b = bins12();
        let v = ordinal_loss(
            &CondCube(cube(&[0.2, 0.7])),
            &masks_for(crate::MISSING, &b),
            &LeadWeights::uniform(1),
        )
        .unwrap();
        assert!(v.is_empty());
        assert_eq!(v.loss, 0.0);
    }

    #[test]
    fn ordinal_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = BinSet::new(vec![0.5, 1.0, 2.0, 5.0], 5.0).unwrap();
        let rates = Array::from_shape_fn((3, 4, 4), |_| {
            if rng.gen_bool(0.1) {
                crate::MISSING
            } else {
                rng.gen_range(0.0..7.0)
            }
        });
        let targets = exceedance_masks(rates.view(), &b);
        let q = Array::from_shape_fn((3, 4, 4, 4), |_| rng.gen_range(0.05..0.95));
        let lw = lead_time_weights(4.0, 3, WeightForm::Ratio).unwrap();
        let (_, g) = ordinal_loss_grad(&CondCube(q.clone()), &targets, &lw).unwrap();
        let h = 1e-6;
        for (idx, &analytic) in g.indexed_iter() {
            let mut qp = q.clone();
            qp[idx] += h;
            let mut qm = q.clone();
            qm[idx] -= h;
            let fp = ordinal_loss(&CondCube(qp), &targets, &lw).unwrap().loss;
            let fm = ordinal_loss(&CondCube(qm), &targets, &lw).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs());
            if scale > 0.0 {
                assert!((analytic - fd).abs() / scale < 1e-6, "{idx:?}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn lead_weights_hand_values() {
        let lw = lead_time_weights(4.0, 3, WeightForm::Ratio).unwrap();
        assert_relative_eq!(lw.w[0], 12.0 / 7.0, epsilon = 1e-14);
        assert_relative_eq!(lw.w[1], 6.0 / 7.0, epsilon = 1e-14);
        assert_relative_eq!(lw.w[2], 3.0 / 7.0, epsilon = 1e-14);
        let flat = lead_time_weights(1.0, 5, WeightForm::Ratio).unwrap();
        assert!(flat.w.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(lead_time_weights(10.0, 1, WeightForm::Ratio).unwrap().w, vec![1.0]);
        assert!(lead_time_weights(0.5, 3, WeightForm::Ratio).is_err());
    }

    #[test]
    fn lead_weights_ratio_48() {
        let lw = lead_time_weights(10.0, 48, WeightForm::Ratio).unwrap();
        assert!((lw.w[0] / lw.w[47] - 10.0).abs() < 1e-12);
        let mean = lw.w.iter().sum::<f64>() / 48.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(lw.w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn literal_form_decays_fast() {
        let lw = lead_time_weights(10.0, 48, WeightForm::Literal).unwrap();
        assert!(lw.w[1] / lw.w[0] < 1e-4);
        let mean = lw.w.iter().sum::<f64>() / 48.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let b = bins12();
        let logits = Array4::zeros((1, 3, 1, 1));
        let v = ce_loss(logits.view(), &masks_for(1.5, &b), &LeadWeights::uniform(1)).unwrap();
        assert_relative_eq!(v.loss, 3f64.ln(), epsilon = 1e-14);
        let mut sharp = Array4::zeros((1, 3, 1, 1));
        sharp[[0, 1, 0, 0]] = 60.0;
        let v = ce_loss(sharp.view(), &masks_for(1.5, &b), &LeadWeights::uniform(1)).unwrap();
        assert!(v.loss < 1e-20);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let b = bins12();
        let rates = Array::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.0..3.0));
        let targets = exceedance_masks(rates.view(), &b);
        let z = Array::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(-2.0..2.0));
        let lw = lead_time_weights(3.0, 2, WeightForm::Ratio).unwrap();
        let (_, g) = ce_loss_grad(z.view(), &targets, &lw).unwrap();
        let h = 1e-6;
        for (idx, &analytic) in g.indexed_iter() {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (ce_loss(zp.view(), &targets, &lw).unwrap().loss
                - ce_loss(zm.view(), &targets, &lw).unwrap().loss)
                / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-8, "{idx:?}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn tail_sum_rule() {
        let p = tail_sum_exceedance(cube(&[0.5, 0.3, 0.2]).view());
        let got: Vec<f64> = p.0.iter().copied().collect();
        assert_relative_eq!(got[0], 0.5);
        assert_relative_eq!(got[1], 0.2);
    }

    #[test]
    fn calibration_separating_forecast() {
        let b = BinSet::new(vec![1.0], 1.0).unwrap();
        let rates = ndarray::array![[[2.0, 0.0, 3.0, 0.0]]];
        let p = ProbCube(ndarray::array![[[[0.9, 0.1, 0.9, 0.1]]]]);
        let t = calibrate_thresholds([(&p, rates.view())], &b, vec![10], default_candidates())
            .unwrap();
        assert_eq!(t.thr[0][0], 0.12);
        assert!(t.fallback.is_empty());
    }

    #[test]
    fn calibration_tie_breaks_low() {
        let b = BinSet::new(vec![1.0], 1.0).unwrap();
        let rates = ndarray::array![[[2.0, 0.0, 3.0, 0.0]]];
        let p = ProbCube(Array4::from_elem((1, 1, 1, 4), 0.5));
        let t = calibrate_thresholds([(&p, rates.view())], &b, vec![10], default_candidates())
            .unwrap();
        assert_eq!(t.thr[0][0], 0.02);
    }

    #[test]
    fn calibration_fallback_for_unseen_class() {
        let b = BinSet::new(vec![1.0, 50.0], 1.0).unwrap();
        let rates = ndarray::array![[[2.0, 0.0]]];
        let p = ProbCube(Array4::from_elem((1, 2, 1, 2), 0.3));
        let t = calibrate_thresholds([(&p, rates.view())], &b, vec![10], default_candidates())
            .unwrap();
        assert_eq!(t.thr[1][0], 0.5);
        assert_eq!(t.fallback, vec![(1, 0)]);
        let none: Vec<(&ProbCube, ArrayView3<f64>)> = Vec::new();
        assert!(calibrate_thresholds(none, &b, vec![10], default_candidates()).is_err());
    }

    #[test]
    fn extraction_walk() {
        let b = BinSet::new(vec![0.1, 1.0, 2.0], 1.0).unwrap();
        let mut thr = ThresholdTable::constant(&b, vec![10], 0.5);
        thr.thr = vec![vec![0.4], vec![0.35], vec![0.3]];
        let p = ProbCube(cube(&[0.5, 0.36, 0.1]));
        assert_eq!(extract_intensity(&p, &thr, &b).unwrap()[[0, 0, 0]], 1.5);
        let low = ProbCube(cube(&[0.2, 0.1, 0.05]));
        assert_eq!(extract_intensity(&low, &thr, &b).unwrap()[[0, 0, 0]], 0.0);
        let sat = ProbCube(cube(&[1.0, 1.0, 1.0]));
        assert_eq!(extract_intensity(&sat, &thr, &b).unwrap()[[0, 0, 0]], 2.0);
    }

    #[test]
    fn crps_anchors() {
        let b = bins12();
        assert_relative_eq!(crps_pixel(&[0.8, 0.2], 1.5, &b), 0.08, epsilon = 1e-15);
        assert_eq!(crps_pixel(&[1.0, 0.0], 1.5, &b), 0.0);
        let wide = BinSet::new(vec![1.0, 2.0, 4.0], 3.0).unwrap();
        // Rain buckets [1,2), [2,4), [4,inf) with widths 1, 2, 3.
        assert_eq!(crps_pixel(&[0.0, 0.0, 0.0], 10.0, &wide), 6.0);
    }

    proptest! {
        #[test]
        fn reconstruct_is_monotone(v in proptest::collection::vec(0f64..=1.0, 1..20)) {
            let p = reconstruct(&CondCube(cube(&v)));
            prop_assert_eq!(p.monotonicity_violations(), 0);
        }

        #[test]
        fn extraction_monotone_in_p(
            v in proptest::collection::vec(0f64..=1.0, 3),
            bump in 0f64..0.5, which in 0usize..3,
        ) {
            let b = BinSet::new(vec![0.1, 1.0, 2.0], 1.0).unwrap();
            let thr = ThresholdTable { thr: vec![vec![0.4], vec![0.35], vec![0.3]], ..ThresholdTable::constant(&b, vec![10], 0.5) };
            let p = ProbCube(cube(&v));
            let mut raised = v.clone();
            raised[which] = (raised[which] + bump).min(1.0);
            let before = extract_intensity(&p, &thr, &b).unwrap()[[0, 0, 0]];
            let after = extract_intensity(&ProbCube(cube(&raised)), &thr, &b).unwrap()[[0, 0, 0]];
            prop_assert!(after >= before);
        }

        #[test]
        fn crps_zero_iff_indicator(r in 0f64..8.0, v in proptest::collection::vec(0f64..=1.0, 4)) {
            let b = BinSet::new(vec![0.5, 1.0, 2.0, 5.0], 5.0).unwrap();
            let exact: Vec<f64> = b.edges().iter().map(|&e| (r >= e) as u8 as f64).collect();
            prop_assert_eq!(crps_pixel(&exact, r, &b), 0.0);
            let p = reconstruct(&CondCube(cube(&v)));
            let col: Vec<f64> = p.0.iter().copied().collect();
            if col != exact {
                prop_assert!(crps_pixel(&col, r, &b) > 0.0);
            }
        }

        #[test]
        fn ce_tail_sums_are_monotone(z in proptest::collection::vec(-5f64..5.0, 6)) {
            let probs = bucket_softmax(cube(&z).view());
            let p = tail_sum_exceedance(probs.view());
            prop_assert_eq!(p.monotonicity_violations(), 0);
        }

        #[test]
        fn ordinal_loss_pixel_permutation_invariant(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = BinSet::new(vec![0.5, 1.0, 2.0], 2.0).unwrap();
            let rates = Array::from_shape_fn((2, 1, 6), |_| rng.gen_range(0.0..3.0));
            let q = Array::from_shape_fn((2, 3, 1, 6), |_| rng.gen_range(0.01..0.99));
            let lw = LeadWeights::uniform(2);
            let a = ordinal_loss(&CondCube(q.clone()), &exceedance_masks(rates.view(), &b), &lw).unwrap();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let rates_p = Array::from_shape_fn((2, 1, 6), |(t, y, x)| rates[[t, y, perm[x]]]);
            let q_p = Array::from_shape_fn((2, 3, 1, 6), |(t, c, y, x)| q[[t, c, y, perm[x]]]);
            let bp = ordinal_loss(&CondCube(q_p), &exceedance_masks(rates_p.view(), &b), &lw).unwrap();
            prop_assert!((a.loss - bp.loss).abs() < 1e-12);
        }
    }
}
