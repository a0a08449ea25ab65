//! Forecast verification scores and their aggregation.
//!
//! Missing pixels (sentinel in the observation) are skipped by the
//! pixelwise scores. The neighborhood scores (FSS, pooled CSI) treat them as
//! non-events on both sides.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::intensity::BinSet;
use crate::probcast::{self, ProbCube};
use crate::{is_missing, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, pred: bool, obs: bool) {
        match (pred, obs) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Counts over pixels valid in `valid` (when given) and in the observation.
pub fn accumulate_confusion(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    threshold: f64,
    valid: Option<ArrayView2<bool>>,
) -> Result<ConfusionCounts> {
    if pred.dim() != obs.dim() || valid.is_some_and(|v| v.dim() != obs.dim()) {
        return Err(Error::Dimension("confusion inputs differ in shape".into()));
    }
    let mut c = ConfusionCounts::default();
    for ((idx, &p), &o) in pred.indexed_iter().zip(obs.iter()) {
        if is_missing(o) || valid.is_some_and(|v| !v[idx]) {
            continue;
        }
        c.add(p >= threshold, o >= threshold);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalScores {
    pub csi: Option<f64>,
    pub fbi: Option<f64>,
    pub hss: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn categorical_scores(c: &ConfusionCounts) -> CategoricalScores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    CategoricalScores {
        csi: ratio(tp, tp + fp + fn_),
        fbi: ratio(tp + fp, tp + fn_),
        hss: ratio(
            2.0 * (tp * tn - fn_ * fp),
            (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn),
        ),
    }
}

/// Neighborhood side for a distance, rounded to a symmetric odd window:
/// `2 * round_half_even(km / (2 * res)) + 1`.
pub fn window_for_km(neighborhood_km: f64, res_km: f64) -> usize {
    2 * (neighborhood_km / (2.0 * res_km)).round_ties_even() as usize + 1
}

/// Box-filter fractions with truncated-window normalization.
pub fn fractions(field: ArrayView2<bool>, window: usize) -> Array2<f64> {
    let (h, w) = field.dim();
    let r = window / 2;
    // Summed-area table with a zero border.
    let mut sat = Array2::<u32>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            sat[[y + 1, x + 1]] =
                field[[y, x]] as u32 + sat[[y, x + 1]] + sat[[y + 1, x]] - sat[[y, x]];
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let n = sat[[y1, x1]] + sat[[y0, x0]] - sat[[y0, x1]] - sat[[y1, x0]];
        n as f64 / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Accumulable FSS terms: `sum F*O`, `sum F^2`, `sum O^2`.
///
/// `1 - sum (F-O)^2 / (sum F^2 + sum O^2)` is evaluated as
/// `2 sum F*O / (sum F^2 + sum O^2)`, which at window 1 is literally the
/// Dice ratio of the confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FssSums {
    pub cross: f64,
    pub pred: f64,
    pub obs: f64,
}

impl FssSums {
    /// `(score, vacuous)`; vacuous when both fields were empty (score 1).
    pub fn score(&self) -> (f64, bool) {
        let den = self.pred + self.obs;
        if den == 0.0 {
            (1.0, true)
        } else {
            (2.0 * self.cross / den, false)
        }
    }

    fn add(&mut self, o: &FssSums) {
        self.cross += o.cross;
        self.pred += o.pred;
        self.obs += o.obs;
    }
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Precondition(format!("window must be odd and >= 1, got {window}")));
    }
    Ok(())
}

pub fn fss_sums(pred: ArrayView2<bool>, obs: ArrayView2<bool>, window: usize) -> Result<FssSums> {
    check_window(window)?;
    if pred.dim() != obs.dim() {
        return Err(Error::Dimension("fss fields differ in shape".into()));
    }
    let f = fractions(pred, window);
    let o = fractions(obs, window);
    let mut s = FssSums::default();
    for (a, b) in f.iter().zip(o.iter()) {
        s.cross += a * b;
        s.pred += a * a;
        s.obs += b * b;
    }
    Ok(s)
}

/// Fractions skill score; returns `(score, vacuous)`.
pub fn fss(pred: ArrayView2<bool>, obs: ArrayView2<bool>, window: usize) -> Result<(f64, bool)> {
    Ok(fss_sums(pred, obs, window)?.score())
}

/// Max-pool a binary field with stride equal to the pool size.
pub fn max_pool(field: ArrayView2<bool>, pool: usize) -> Result<Array2<bool>> {
    let (h, w) = field.dim();
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return Err(Error::Dimension(format!("pool {pool} does not divide {h}x{w}")));
    }
    Ok(Array2::from_shape_fn((h / pool, w / pool), |(y, x)| {
        field
            .slice(ndarray::s![y * pool..(y + 1) * pool, x * pool..(x + 1) * pool])
            .iter()
            .any(|&v| v)
    }))
}

/// Rates binarized at `threshold`; missing pixels become non-events.
pub fn binarize(rates: ArrayView2<f64>, threshold: f64) -> Array2<bool> {
    rates.mapv(|v| !is_missing(v) && v >= threshold)
}

pub fn pooled_counts(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    pool: usize,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if pred.dim() != obs.dim() {
        return Err(Error::Dimension("pooled CSI fields differ in shape".into()));
    }
    let p = max_pool(binarize(pred, threshold).view(), pool)?;
    let o = max_pool(binarize(obs, threshold).view(), pool)?;
    let mut c = ConfusionCounts::default();
    for (&a, &b) in p.iter().zip(o.iter()) {
        c.add(a, b);
    }
    Ok(c)
}

pub fn pooled_csi(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    pool: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    Ok(categorical_scores(&pooled_counts(pred, obs, pool, threshold)?).csi)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub n: u64,
}

impl ErrorSums {
    pub fn mae(&self) -> Option<f64> {
        (self.n > 0).then(|| self.abs / self.n as f64)
    }

    pub fn mse(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sq / self.n as f64)
    }
}

pub fn error_sums(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    valid: Option<ArrayView2<bool>>,
) -> Result<ErrorSums> {
    if pred.dim() != obs.dim() || valid.is_some_and(|v| v.dim() != obs.dim()) {
        return Err(Error::Dimension("error score inputs differ in shape".into()));
    }
    let mut s = ErrorSums::default();
    for ((idx, &p), &o) in pred.indexed_iter().zip(obs.iter()) {
        if is_missing(o) || is_missing(p) || valid.is_some_and(|v| !v[idx]) {
            continue;
        }
        s.abs += (p - o).abs();
        s.sq += (p - o) * (p - o);
        s.n += 1;
    }
    Ok(s)
}

/// `(mae, mse)`, `None` when no pixel is valid.
pub fn error_scores(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    valid: Option<ArrayView2<bool>>,
) -> Result<(Option<f64>, Option<f64>)> {
    let s = error_sums(pred, obs, valid)?;
    Ok((s.mae(), s.mse()))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    Array2::from_shape_fn((size, size), |(y, x)| g[y] * g[x] / (s * s))
}

/// Gaussian-windowed SSIM averaged over all fully contained windows. The
/// window shrinks to the largest odd size that fits small images. Dynamic
/// range is taken from the observation.
pub fn ssim(pred: ArrayView2<f64>, obs: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != obs.dim() {
        return Err(Error::Dimension("ssim fields differ in shape".into()));
    }
    if pred.iter().chain(obs.iter()).any(|&v| is_missing(v)) {
        return Err(Error::Precondition("ssim input contains missing pixels".into()));
    }
    let (h, w) = pred.dim();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let (lo, hi) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut total = 0.0;
    let mut n = 0usize;
    for y0 in 0..=(h - size) {
        for x0 in 0..=(w - size) {
            let (mut mx, mut my) = (0.0, 0.0);
            for ((dy, dx), &g) in win.indexed_iter() {
                mx += g * pred[[y0 + dy, x0 + dx]];
                my += g * obs[[y0 + dy, x0 + dx]];
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for ((dy, dx), &g) in win.indexed_iter() {
                let a = pred[[y0 + dy, x0 + dx]] - mx;
                let b = obs[[y0 + dy, x0 + dx]] - my;
                vx += g * a * a;
                vy += g * b * b;
                cxy += g * a * b;
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Event thresholds in mm/h.
    pub thresholds: Vec<f64>,
    /// FSS neighborhoods in km.
    pub neighborhoods_km: Vec<f64>,
    /// Max-pool sizes for pooled CSI (pixels).
    pub pools: Vec<usize>,
    pub res_km: f64,
    /// Lead time of each forecast frame in minutes.
    pub lead_min: Vec<i64>,
    #[serde(default)]
    pub ssim: bool,
}

impl ReportConfig {
    pub fn windows(&self) -> Vec<usize> {
        self.neighborhoods_km
            .iter()
            .map(|&km| window_for_km(km, self.res_km))
            .collect()
    }
}

/// One forecast/observation pair `T x H x W`, optionally with probabilities.
pub struct Sample<'a> {
    pub pred: ArrayView3<'a, f64>,
    pub obs: ArrayView3<'a, f64>,
    pub probs: Option<&'a ProbCube>,
}

#[derive(Debug, Clone, Default)]
struct LeadAccum {
    counts: Vec<ConfusionCounts>,
    fss: Vec<Vec<FssSums>>,
    pooled: Vec<Vec<ConfusionCounts>>,
    errors: ErrorSums,
    crps: (f64, u64),
    ssim: (f64, u64),
}

/// Micro-aggregating accumulator behind [`build_report`].
pub struct ReportBuilder<'b> {
    cfg: ReportConfig,
    bins: &'b BinSet,
    windows: Vec<usize>,
    leads: Vec<LeadAccum>,
    samples: usize,
}

impl<'b> ReportBuilder<'b> {
    pub fn new(cfg: ReportConfig, bins: &'b BinSet) -> Result<Self> {
        let windows = cfg.windows();
        for &w in &windows {
            check_window(w)?;
        }
        let nt = cfg.thresholds.len();
        let lead = LeadAccum {
            counts: vec![ConfusionCounts::default(); nt],
            fss: vec![vec![FssSums::default(); windows.len()]; nt],
            pooled: vec![vec![ConfusionCounts::default(); cfg.pools.len()]; nt],
            ..Default::default()
        };
        let leads = vec![lead; cfg.lead_min.len()];
        Ok(Self {
            cfg,
            bins,
            windows,
            leads,
            samples: 0,
        })
    }

    pub fn add(&mut self, s: &Sample<'_>) -> Result<()> {
        let (t, h, w) = s.obs.dim();
        if s.pred.dim() != (t, h, w) || t != self.cfg.lead_min.len() {
            return Err(Error::Dimension(format!(
                "forecast {:?} vs observation {:?} with {} leads",
                s.pred.dim(),
                s.obs.dim(),
                self.cfg.lead_min.len()
            )));
        }
        let point;
        let probs = match s.probs {
            Some(p) => p,
            None => {
                point = probcast::point_mass(s.pred, self.bins);
                &point
            }
        };
        for ti in 0..t {
            let pred = s.pred.index_axis(ndarray::Axis(0), ti);
            let obs = s.obs.index_axis(ndarray::Axis(0), ti);
            let acc = &mut self.leads[ti];
            for (k, &thr) in self.cfg.thresholds.iter().enumerate() {
                acc.counts[k] += accumulate_confusion(pred, obs, thr, None)?;
                let pb = binarize(pred, thr);
                let ob = binarize(obs, thr);
                for (j, &win) in self.windows.iter().enumerate() {
                    acc.fss[k][j].add(&fss_sums(pb.view(), ob.view(), win)?);
                }
                for (j, &pool) in self.cfg.pools.iter().enumerate() {
                    acc.pooled[k][j] += pooled_counts(pred, obs, pool, thr)?;
                }
            }
            let e = error_sums(pred, obs, None)?;
            acc.errors.abs += e.abs;
            acc.errors.sq += e.sq;
            acc.errors.n += e.n;
            let single = ProbCube(
                probs
                    .0
                    .slice(ndarray::s![ti..ti + 1, .., .., ..])
                    .to_owned(),
            );
            let (cs, cn) = probcast::crps_sum(
                &single,
                s.obs.slice(ndarray::s![ti..ti + 1, .., ..]),
                self.bins,
            )?;
            acc.crps.0 += cs;
            acc.crps.1 += cn as u64;
            if self.cfg.ssim && !obs.iter().chain(pred.iter()).any(|&v| is_missing(v)) {
                acc.ssim.0 += ssim(pred, obs)?;
                acc.ssim.1 += 1;
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SkillReport> {
        if self.samples == 0 {
            return Err(Error::Empty("no samples to evaluate".into()));
        }
        let mut rows = Vec::new();
        let mut counts = Vec::new();
        for (ti, acc) in self.leads.iter().enumerate() {
            let lead = self.cfg.lead_min[ti];
            for (k, &thr) in self.cfg.thresholds.iter().enumerate() {
                let c = acc.counts[k];
                counts.push(CountsRow {
                    threshold: thr,
                    lead_min: lead,
                    counts: c,
                });
                let sc = categorical_scores(&c);
                rows.push(ScoreRow::new("csi", Some(thr), lead, sc.csi));
                rows.push(ScoreRow::new("fbi", Some(thr), lead, sc.fbi));
                rows.push(ScoreRow::new("hss", Some(thr), lead, sc.hss));
                for (j, &win) in self.windows.iter().enumerate() {
                    let (v, _) = acc.fss[k][j].score();
                    rows.push(ScoreRow::new(&format!("fss_w{win}"), Some(thr), lead, Some(v)));
                }
                for (j, &pool) in self.cfg.pools.iter().enumerate() {
                    let v = categorical_scores(&acc.pooled[k][j]).csi;
                    rows.push(ScoreRow::new(&format!("csi_pool{pool}"), Some(thr), lead, v));
                }
            }
            rows.push(ScoreRow::new("mae", None, lead, acc.errors.mae()));
            rows.push(ScoreRow::new("mse", None, lead, acc.errors.mse()));
            let crps = (acc.crps.1 > 0).then(|| acc.crps.0 / acc.crps.1 as f64);
            rows.push(ScoreRow::new("crps", None, lead, crps));
            if self.cfg.ssim {
                let v = (acc.ssim.1 > 0).then(|| acc.ssim.0 / acc.ssim.1 as f64);
                rows.push(ScoreRow::new("ssim", None, lead, v));
            }
        }
        let macro_means = macro_summary(&rows);
        Ok(SkillReport {
            config: self.cfg,
            samples: self.samples,
            rows,
            counts,
            macro_means,
        })
    }
}

/// Aggregate a stream of samples into a [`SkillReport`].
pub fn build_report<'a, I>(samples: I, cfg: ReportConfig, bins: &BinSet) -> Result<SkillReport>
where
    I: IntoIterator<Item = Sample<'a>>,
{
    let mut b = ReportBuilder::new(cfg, bins)?;
    for s in samples {
        b.add(&s)?;
    }
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub metric: String,
    pub threshold: Option<f64>,
    pub lead_min: i64,
    pub value: Option<f64>,
}

impl ScoreRow {
    fn new(metric: &str, threshold: Option<f64>, lead_min: i64, value: Option<f64>) -> Self {
        Self {
            metric: metric.to_string(),
            threshold,
            lead_min,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsRow {
    pub threshold: f64,
    pub lead_min: i64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub config: ReportConfig,
    pub samples: usize,
    pub rows: Vec<ScoreRow>,
    pub counts: Vec<CountsRow>,
    /// Per metric: mean over thresholds, then over lead times. Undefined
    /// cells are skipped.
    pub macro_means: BTreeMap<String, f64>,
}

fn mean_defined<I: IntoIterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let (s, n) = it
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn macro_summary(rows: &[ScoreRow]) -> BTreeMap<String, f64> {
    // metric -> lead -> values over thresholds
    let mut by: BTreeMap<&str, BTreeMap<i64, Vec<Option<f64>>>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.metric)
            .or_default()
            .entry(r.lead_min)
            .or_default()
            .push(r.value);
    }
    by.into_iter()
        .filter_map(|(m, leads)| {
            let per_lead = leads.into_values().map(mean_defined);
            mean_defined(per_lead).map(|v| (m.to_string(), v))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl SkillReport {
    pub fn value(&self, metric: &str, threshold: Option<f64>, lead_min: i64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.threshold == threshold && r.lead_min == lead_min)
            .and_then(|r| r.value)
    }

    /// Mean of a metric over lead times at one threshold (defined cells only).
    pub fn lead_mean(&self, metric: &str, threshold: Option<f64>) -> Option<f64> {
        mean_defined(
            self.rows
                .iter()
                .filter(|r| r.metric == metric && r.threshold == threshold)
                .map(|r| r.value),
        )
    }

    /// `metric,threshold,lead_min,value`; undefined values print as `nan`,
    /// macro rows use `all` for threshold and lead.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,threshold,lead_min,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.metric,
                r.threshold.map_or_else(String::new, |t| format!("{t}")),
                r.lead_min,
                fmt_opt(r.value)
            ));
        }
        for (m, v) in &self.macro_means {
            out.push_str(&format!("{m},all,all,{v}\n"));
        }
        out
    }

    /// Per-lead series for plotting: `lead_min,metric,threshold,value`.
    pub fn plot_series_csv(&self) -> String {
        let mut out = String::from("lead_min,metric,threshold,value\n");
        let mut rows: Vec<&ScoreRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.metric
                .cmp(&b.metric)
                .then(a.threshold.unwrap_or(-1.0).total_cmp(&b.threshold.unwrap_or(-1.0)))
                .then(a.lead_min.cmp(&b.lead_min))
        });
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.lead_min,
                r.metric,
                r.threshold.map_or_else(String::new, |t| format!("{t}")),
                fmt_opt(r.value)
            ));
        }
        out
    }
}
