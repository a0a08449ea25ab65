//! Deterministic AdamW training with optional EMA shadow.

use std::fmt::Write as _;

use ndarray::Array3;
use nowcast_core::intensity::ClassMasks;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Micromodel;
use crate::params::{Ema, ParamSet};
use crate::{Error, Result};

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Array3<f64>,
    pub targets: ClassMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled from the gradient (AdamW).
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            ema_decay: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr > 0 and betas in [0, 1) required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub ema: Option<ParamSet>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Parameters to evaluate with: the EMA shadow when present.
    pub fn eval_params(&self) -> &ParamSet {
        self.ema.as_ref().unwrap_or(&self.params)
    }
}

pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").unwrap();
    }
    s
}

struct AdamW {
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl AdamW {
    fn new(p: &ParamSet) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, p: &mut ParamSet, g: &ParamSet, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((pt, gt), mt), vt) in p
            .tensors
            .iter_mut()
            .zip(&g.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..pt.data.len() {
                let gi = gt.data[i];
                mt.data[i] = cfg.beta1 * mt.data[i] + (1.0 - cfg.beta1) * gi;
                vt.data[i] = cfg.beta2 * vt.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = mt.data[i] / c1;
                let vh = vt.data[i] / c2;
                pt.data[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * pt.data[i]);
            }
        }
    }
}

/// Mean loss and mean gradient over the non-empty samples of a batch.
pub fn batch_loss_and_grad(
    model: &Micromodel,
    params: &ParamSet,
    batch: &[&TrainSample],
) -> Result<(f64, ParamSet, usize)> {
    let lw = model.config.lead_weights()?;
    let mut grads = params.zeros_like();
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in batch {
        let (lv, g) = model.loss_and_grad(params, &s.input, &s.targets, &lw)?;
        if lv.is_empty() {
            continue;
        }
        sum += lv.loss;
        grads.add_scaled(&g, 1.0);
        n += 1;
    }
    if n > 0 {
        grads.scale(1.0 / n as f64);
        sum /= n as f64;
    }
    Ok((sum, grads, n))
}

/// Mean per-sample loss over a dataset, skipping empty samples.
pub fn dataset_loss(model: &Micromodel, params: &ParamSet, data: &[TrainSample]) -> Result<f64> {
    let refs: Vec<&TrainSample> = data.iter().collect();
    let (l, _, n) = batch_loss_and_grad(model, params, &refs)?;
    if n == 0 {
        return Err(Error::Config("dataset has no valid target pixels".into()));
    }
    Ok(l)
}

/// Trains from `init`. Batches walk a fresh seeded permutation each epoch.
pub fn train(
    model: &Micromodel,
    init: ParamSet,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&init)?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut params = init;
    let mut opt = AdamW::new(&params);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(&params, d)).transpose()?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads, _) = batch_loss_and_grad(model, &params, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut params, &grads, cfg);
        if let Some(e) = ema.as_mut() {
            e.update(&params);
        }
        losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        ema: ema.map(|e| e.shadow),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{prepare_input, LossKind, Mode, ModelConfig};
    use ndarray::{s, Array};
    use nowcast_core::intensity::{exceedance_masks, BinSet};
    use nowcast_core::probcast::{lead_time_weights, ordinal_loss, CondCube, WeightForm};

    fn model(alpha: f64) -> Micromodel {
        Micromodel::new(ModelConfig {
            t_in: 2,
            t_out: 3,
            k: 2,
            stem_block: 2,
            channels: 4,
            n_blocks: 1,
            mode: Mode::SinglePass,
            loss: LossKind::Ordinal,
            alpha,
            weight_form: WeightForm::Ratio,
            input_cap: 32.0,
            seed: 1,
        })
        .unwrap()
    }

    fn data(m: &Micromodel, n: usize) -> Vec<TrainSample> {
        let bins = BinSet::new(vec![1.0, 4.0], 4.0).unwrap();
        (0..n)
            .map(|i| {
                let seq = Array::from_shape_fn((5, 8, 8), |(t, y, x)| {
                    if (x + 8 - (t + i) % 8) % 8 < 3 && y > 2 {
                        6.0
                    } else {
                        0.0
                    }
                });
                TrainSample {
                    input: prepare_input(seq.slice(s![..2, .., ..]), &m.config).unwrap(),
                    targets: exceedance_masks(seq.slice(s![2.., .., ..]), &bins),
                }
            })
            .collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 40,
            batch: 2,
            lr: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rerun_reproduces_loss_curve() {
        let m = model(10.0);
        let d = data(&m, 4);
        let a = train(&m, m.init_params(false), &d, &quick()).unwrap();
        let b = train(&m, m.init_params(false), &d, &quick()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert!(dataset_loss(&m, &a.params, &d).unwrap() < dataset_loss(&m, &m.init_params(false), &d).unwrap());
    }

    #[test]
    fn lead_weights_scale_per_lead_terms() {
        // With alpha = 10 the first lead's term carries 10x the last lead's.
        let m = model(10.0);
        let d = &data(&m, 1)[0];
        let p = m.init_params(true);
        let q = match m.forward(&p, &d.input).unwrap() {
            crate::model::RawOutput::Conditional(q) => q,
            _ => unreachable!(),
        };
        let lw = lead_time_weights(10.0, 3, WeightForm::Ratio).unwrap();
        assert!((lw.w[0] / lw.w[2] - 10.0).abs() < 1e-12);
        let uniform = lead_time_weights(1.0, 3, WeightForm::Ratio).unwrap();
        let total = ordinal_loss(&q, &d.targets, &lw).unwrap();
        // Manual weighted sum of single-lead unweighted sums.
        let mut manual = 0.0;
        for t in 0..3 {
            let qt = CondCube(q.0.slice(s![t..t + 1, .., .., ..]).to_owned());
            let mt = ClassMasks {
                masks: d.targets.masks.slice(s![t..t + 1, .., .., ..]).to_owned(),
                valid: d.targets.valid.slice(s![t..t + 1, .., ..]).to_owned(),
            };
            let one = nowcast_core::probcast::LeadWeights::uniform(1);
            let lt = ordinal_loss(&qt, &mt, &one).unwrap();
            manual += lw.w[t] * lt.loss * lt.count as f64;
        }
        assert!((total.loss - manual / total.count as f64).abs() < 1e-12);
        let (l1, _) = model(1.0).loss_and_grad(&p, &d.input, &d.targets, &uniform).unwrap();
        assert!(l1.loss.is_finite());
    }

    #[test]
    fn both_alphas_converge() {
        for alpha in [1.0, 10.0] {
            let m = model(alpha);
            let d = data(&m, 4);
            let before = dataset_loss(&m, &m.init_params(false), &d).unwrap();
            let out = train(&m, m.init_params(false), &d, &TrainConfig { steps: 150, ..quick() }).unwrap();
            let after = dataset_loss(&m, &out.params, &d).unwrap();
            assert!(after < 0.7 * before, "alpha {alpha}: {before} -> {after}");
        }
    }

    #[test]
    fn ema_shadow_is_reported() {
        let m = model(10.0);
        let d = data(&m, 2);
        let cfg = TrainConfig {
            steps: 5,
            ema_decay: Some(0.0),
            ..quick()
        };
        let out = train(&m, m.init_params(false), &d, &cfg).unwrap();
        assert_eq!(out.eval_params(), &out.params);
    }

    #[test]
    fn divergence_aborts() {
        let m = model(10.0);
        let d = data(&m, 2);
        let mut p = m.init_params(false);
        p.tensors[0].data[0] = f64::NAN;
        assert!(train(&m, p, &d, &quick()).is_err());
        let mut blow = quick();
        blow.lr = f64::INFINITY;
        assert!(train(&m, m.init_params(false), &d, &blow).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        assert_eq!(loss_curve_csv(&[0.5, 0.25]), "step,loss\n0,0.5\n1,0.25\n");
    }
}
