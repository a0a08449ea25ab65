//! The micromodel: space-to-depth stem, residual 3x3 conv core, depth-to-space
//! and a 1x1 head emitting every lead time's class maps from one pass.
//!
//! Input layout per sample, `C_in x H x W`:
//! `t_in` normalized rate frames, `t_in` validity masks and, in the
//! lead-conditioned mode only, `t_out` one-hot lead channels.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array3, Array4, ArrayView3};
use nowcast_core::intensity::ClassMasks;
use nowcast_core::probcast::{
    bucket_softmax, ce_loss_grad, ordinal_loss_grad, reconstruct, tail_sum_exceedance, CondCube,
    LeadWeights, LossValue, ProbCube, WeightForm,
};
use nowcast_core::is_missing;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::params::{ParamSet, Tensor};
use crate::{Error, Result};

/// Rates are divided by this cap and clipped to [0, 1].
pub const DEFAULT_INPUT_CAP: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// All lead times from one forward pass, time folded into channels.
    #[default]
    SinglePass,
    /// One forward pass per lead time, selected by one-hot input channels.
    LeadConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Ordinal,
    /// Softmax over K+1 buckets.
    Ce,
}

fn default_stem() -> usize {
    2
}

fn default_cap() -> f64 {
    DEFAULT_INPUT_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    #[serde(default = "default_stem")]
    pub stem_block: usize,
    pub channels: usize,
    pub n_blocks: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub loss: LossKind,
    pub alpha: f64,
    #[serde(default)]
    pub weight_form: WeightForm,
    #[serde(default = "default_cap")]
    pub input_cap: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bb = self.stem_block * self.stem_block;
        if self.t_in == 0 || self.t_out == 0 || self.k == 0 || self.stem_block == 0 {
            return Err(Error::Config("t_in, t_out, k and stem_block must be positive".into()));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(bb) {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of stem_block^2 = {bb}",
                self.channels
            )));
        }
        if !(self.alpha > 0.0) || !(self.input_cap > 0.0) {
            return Err(Error::Config("alpha and input_cap must be > 0".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        2 * self.t_in + if self.mode == Mode::LeadConditioned { self.t_out } else { 0 }
    }

    /// Maps per lead time: K conditionals, or K+1 bucket logits under CE.
    pub fn maps_per_lead(&self) -> usize {
        match self.loss {
            LossKind::Ordinal => self.k,
            LossKind::Ce => self.k + 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.mode {
            Mode::SinglePass => self.t_out * self.maps_per_lead(),
            Mode::LeadConditioned => self.maps_per_lead(),
        }
    }

    pub fn lead_weights(&self) -> Result<LeadWeights> {
        Ok(nowcast_core::probcast::lead_time_weights(
            self.alpha,
            self.t_out,
            self.weight_form,
        )?)
    }
}

/// Normalized model input from `t_in` rate frames (oldest first).
pub fn prepare_input(history: ArrayView3<f64>, cfg: &ModelConfig) -> Result<Array3<f64>> {
    let (t, h, w) = history.dim();
    if t != cfg.t_in {
        return Err(Error::Shape(format!("{t} history frames, config expects {}", cfg.t_in)));
    }
    let mut x = Array3::zeros((2 * t, h, w));
    for ((ti, y, xx), &r) in history.indexed_iter() {
        if !is_missing(r) {
            x[[ti, y, xx]] = (r / cfg.input_cap).clamp(0.0, 1.0);
            x[[t + ti, y, xx]] = 1.0;
        }
    }
    Ok(x)
}

/// Model output before conversion to exceedance probabilities.
#[derive(Debug, Clone, PartialEq)]
pub enum RawOutput {
    Conditional(CondCube),
    /// Softmax bucket probabilities `T x (K+1) x H x W`.
    Buckets(Array4<f64>),
}

impl RawOutput {
    pub fn into_probs(self) -> ProbCube {
        match self {
            RawOutput::Conditional(q) => reconstruct(&q),
            RawOutput::Buckets(b) => tail_sum_exceedance(b.view()),
        }
    }
}

pub struct Micromodel {
    pub config: ModelConfig,
    forwards: AtomicUsize,
}

impl Micromodel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            forwards: AtomicUsize::new(0),
        })
    }

    /// Network evaluations since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Fan-in scaled uniform kernels and zero biases. The head is zero unless
    /// `random_head`, so a fresh model outputs exactly 0.5 everywhere.
    pub fn init_params(&self, random_head: bool) -> ParamSet {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let bb = c.stem_block * c.stem_block;
        let mut p = ParamSet::default();
        let mut kernel = |p: &mut ParamSet, name: &str, shape: [usize; 4], zero: bool| {
            let mut t = Tensor::zeros(name, &shape);
            if !zero {
                let bound = (3.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
            p.push(t);
            p.push(Tensor::zeros(&name.replace(".w", ".b"), &[shape[0]]));
        };
        kernel(&mut p, "stem.w", [c.channels, c.in_channels() * bb, 1, 1], false);
        for i in 0..c.n_blocks {
            kernel(&mut p, &format!("block{i}.conv1.w"), [c.channels, c.channels, 3, 3], false);
            kernel(&mut p, &format!("block{i}.conv2.w"), [c.channels, c.channels, 3, 3], false);
        }
        kernel(&mut p, "head.w", [c.out_channels(), c.channels / bb, 1, 1], !random_head);
        p
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        params.check_layout(&self.init_params(false))?;
        if !params.is_finite() {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Records one network evaluation; returns the tape, its input node and
    /// the logits node.
    pub fn record(&self, params: &ParamSet, input: &Array3<f64>) -> Result<(Tape, NodeId, NodeId)> {
        let c = &self.config;
        if input.dim().0 != c.in_channels() {
            return Err(Error::Shape(format!(
                "{} input channels, config expects {}",
                input.dim().0,
                c.in_channels()
            )));
        }
        let (_, h, w) = input.dim();
        if h % c.stem_block != 0 || w % c.stem_block != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by stem_block {}", c.stem_block)));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let mut t = Tape::new();
        let x = t.input(input.clone());
        let s2d = t.space_to_depth(x, c.stem_block)?;
        let mut hdn = t.conv(params, s2d, 0, 1)?;
        for i in 0..c.n_blocks {
            let base = 2 + 4 * i;
            let a = t.silu(hdn);
            let a = t.conv(params, a, base, base + 1)?;
            let a = t.silu(a);
            let a = t.conv(params, a, base + 2, base + 3)?;
            hdn = t.add(hdn, a)?;
        }
        let d = t.depth_to_space(hdn, c.stem_block)?;
        let d = t.silu(d);
        let head = 2 + 4 * c.n_blocks;
        let logits = t.conv(params, d, head, head + 1)?;
        Ok((t, x, logits))
    }

    /// Input extended with the one-hot channels of `lead`.
    pub fn with_lead(&self, input: &Array3<f64>, lead: usize) -> Array3<f64> {
        let c = &self.config;
        let (ci, h, w) = input.dim();
        let mut x = Array3::zeros((ci + c.t_out, h, w));
        x.slice_mut(s![..ci, .., ..]).assign(input);
        x.slice_mut(s![ci + lead, .., ..]).fill(1.0);
        x
    }

    /// Per-lead network inputs: one for single-pass, `t_out` otherwise.
    fn lead_inputs(&self, input: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        let c = &self.config;
        if input.dim().0 != 2 * c.t_in {
            return Err(Error::Shape(format!(
                "{} input channels, expected {}",
                input.dim().0,
                2 * c.t_in
            )));
        }
        Ok(match c.mode {
            Mode::SinglePass => vec![input.clone()],
            Mode::LeadConditioned => (0..c.t_out).map(|l| self.with_lead(input, l)).collect(),
        })
    }

    /// Raw logits `T_out x maps_per_lead x H x W` for a prepared input.
    pub fn logits(&self, params: &ParamSet, input: &Array3<f64>) -> Result<Array4<f64>> {
        let c = &self.config;
        let (_, h, w) = input.dim();
        let m = c.maps_per_lead();
        let mut out = Array4::zeros((c.t_out, m, h, w));
        for (i, x) in self.lead_inputs(input)?.iter().enumerate() {
            let (t, _, l) = self.record(params, x)?;
            let v = t.value(l);
            match c.mode {
                Mode::SinglePass => {
                    for lead in 0..c.t_out {
                        out.slice_mut(s![lead, .., .., ..])
                            .assign(&v.slice(s![lead * m..(lead + 1) * m, .., ..]));
                    }
                }
                Mode::LeadConditioned => out.slice_mut(s![i, .., .., ..]).assign(v),
            }
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamSet, input: &Array3<f64>) -> Result<RawOutput> {
        let z = self.logits(params, input)?;
        Ok(match self.config.loss {
            LossKind::Ordinal => RawOutput::Conditional(CondCube(z.mapv(crate::autodiff::sigmoid))),
            LossKind::Ce => RawOutput::Buckets(bucket_softmax(z.view())),
        })
    }

    pub fn predict(&self, params: &ParamSet, input: &Array3<f64>) -> Result<ProbCube> {
        Ok(self.forward(params, input)?.into_probs())
    }

    /// Per-sample training loss and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamSet,
        input: &Array3<f64>,
        targets: &ClassMasks,
        lw: &LeadWeights,
    ) -> Result<(LossValue, ParamSet)> {
        let c = &self.config;
        let m = c.maps_per_lead();
        let (_, h, w) = input.dim();
        let mut tapes = Vec::new();
        let mut out = Array4::zeros((c.t_out, m, h, w));
        for (i, x) in self.lead_inputs(input)?.iter().enumerate() {
            let (mut t, _, l) = self.record(params, x)?;
            let node = match c.loss {
                LossKind::Ordinal => t.sigmoid(l),
                LossKind::Ce => l,
            };
            let v = t.value(node);
            match c.mode {
                Mode::SinglePass => {
                    for lead in 0..c.t_out {
                        out.slice_mut(s![lead, .., .., ..])
                            .assign(&v.slice(s![lead * m..(lead + 1) * m, .., ..]));
                    }
                }
                Mode::LeadConditioned => out.slice_mut(s![i, .., .., ..]).assign(v),
            }
            tapes.push((t, node));
        }
        let (loss, g) = match c.loss {
            LossKind::Ordinal => ordinal_loss_grad(&CondCube(out), targets, lw)?,
            LossKind::Ce => ce_loss_grad(out.view(), targets, lw)?,
        };
        let mut grads = params.zeros_like();
        for (i, (t, node)) in tapes.iter().enumerate() {
            let seed = match c.mode {
                Mode::SinglePass => g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c.t_out * m, h, w))
                    .map_err(|e| Error::Shape(e.to_string()))?,
                Mode::LeadConditioned => g.slice(s![i, .., .., ..]).to_owned(),
            };
            let gr = t.backward(params, *node, &seed)?;
            grads.add_scaled(&gr.params, 1.0);
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nowcast_core::intensity::{exceedance_masks, BinSet};
    use ndarray::Array;

    pub(crate) fn cfg(mode: Mode, loss: LossKind) -> ModelConfig {
        ModelConfig {
            t_in: 4,
            t_out: 6,
            k: 5,
            stem_block: 2,
            channels: 8,
            n_blocks: 1,
            mode,
            loss,
            alpha: 10.0,
            weight_form: WeightForm::Ratio,
            input_cap: DEFAULT_INPUT_CAP,
            seed: 3,
        }
    }

    fn history(t: usize, h: usize, w: usize) -> Array3<f64> {
        Array::from_shape_fn((t, h, w), |(t, y, x)| {
            if (y + x + t) % 17 == 0 {
                -1.0
            } else {
                ((y * 3 + x * 7 + t) % 11) as f64 * 1.5
            }
        })
    }

    #[test]
    fn output_shape_and_range() {
        let m = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ordinal)).unwrap();
        let p = m.init_params(true);
        let x = prepare_input(history(4, 32, 32).view(), &m.config).unwrap();
        let RawOutput::Conditional(q) = m.forward(&p, &x).unwrap() else { panic!() };
        assert_eq!(q.0.dim(), (6, 5, 32, 32));
        assert!(q.0.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_outputs_one_half() {
        let m = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ordinal)).unwrap();
        let p = m.init_params(false);
        let x = prepare_input(history(4, 16, 16).view(), &m.config).unwrap();
        let RawOutput::Conditional(q) = m.forward(&p, &x).unwrap() else { panic!() };
        assert!(q.0.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ordinal)).unwrap();
        let m2 = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ordinal)).unwrap();
        let x = prepare_input(history(4, 16, 16).view(), &m.config).unwrap();
        let a = m.forward(&m.init_params(true), &x).unwrap();
        let b = m2.forward(&m2.init_params(true), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_normalization_and_validity() {
        let c = cfg(Mode::SinglePass, LossKind::Ordinal);
        let mut h = Array3::zeros((4, 2, 2));
        h[[0, 0, 0]] = 64.0;
        h[[1, 0, 1]] = 8.0;
        h[[2, 1, 1]] = -1.0;
        let x = prepare_input(h.view(), &c).unwrap();
        assert_eq!(x[[0, 0, 0]], 1.0);
        assert_eq!(x[[1, 0, 1]], 0.25);
        assert_eq!(x[[2, 1, 1]], 0.0);
        assert_eq!(x[[6, 1, 1]], 0.0);
        assert_eq!(x[[6, 0, 0]], 1.0);
        assert!(prepare_input(Array3::zeros((3, 2, 2)).view(), &c).is_err());
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ordinal)).unwrap();
        let p = m.init_params(false);
        assert!(m.forward(&p, &Array3::zeros((5, 16, 16))).is_err());
        assert!(m.forward(&p, &Array3::zeros((8, 15, 16))).is_err());
        let mut bad = cfg(Mode::SinglePass, LossKind::Ordinal);
        bad.channels = 6;
        assert!(Micromodel::new(bad).is_err());
    }

    #[test]
    fn single_pass_uses_one_forward() {
        for (mode, want) in [(Mode::SinglePass, 1), (Mode::LeadConditioned, 6)] {
            let m = Micromodel::new(cfg(mode, LossKind::Ordinal)).unwrap();
            let p = m.init_params(true);
            let x = prepare_input(history(4, 8, 8).view(), &m.config).unwrap();
            m.reset_forward_count();
            let probs = m.predict(&p, &x).unwrap();
            assert_eq!(m.forward_count(), want);
            assert_eq!(probs.0.dim(), (6, 5, 8, 8));
        }
    }

    #[test]
    fn ce_mode_emits_bucket_probabilities() {
        let m = Micromodel::new(cfg(Mode::SinglePass, LossKind::Ce)).unwrap();
        let p = m.init_params(true);
        let x = prepare_input(history(4, 8, 8).view(), &m.config).unwrap();
        let RawOutput::Buckets(b) = m.forward(&p, &x).unwrap() else { panic!() };
        assert_eq!(b.dim(), (6, 6, 8, 8));
        for lane in b.lanes(ndarray::Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.predict(&p, &x).unwrap().monotonicity_violations(), 0);
    }

    #[test]
    fn lead_conditioned_loss_matches_stacked_forward() {
        let m = Micromodel::new(cfg(Mode::LeadConditioned, LossKind::Ordinal)).unwrap();
        let p = m.init_params(true);
        let x = prepare_input(history(4, 8, 8).view(), &m.config).unwrap();
        let bins = BinSet::new(vec![0.5, 1.0, 2.0, 5.0, 10.0], 5.0).unwrap();
        let target = history(6, 8, 8);
        let masks = exceedance_masks(target.view(), &bins);
        let lw = m.config.lead_weights().unwrap();
        let (lv, _) = m.loss_and_grad(&p, &x, &masks, &lw).unwrap();
        let RawOutput::Conditional(q) = m.forward(&p, &x).unwrap() else { panic!() };
        let direct = nowcast_core::probcast::ordinal_loss(&q, &masks, &lw).unwrap();
        assert_eq!(lv, direct);
    }
}
