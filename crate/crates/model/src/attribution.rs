//! Integrated gradients with a per-channel minimum baseline.

use ndarray::{Array3, Axis};

use crate::model::{Micromodel, Mode};
use crate::params::ParamSet;
use crate::{Error, Result};

/// A scalar function of a `C x H x W` input with its gradient.
pub trait ScalarFn {
    fn value(&self, x: &Array3<f64>) -> Result<f64>;
    fn gradient(&self, x: &Array3<f64>) -> Result<Array3<f64>>;
}

/// `f(x) = sum(w * x) + b`.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Array3<f64>,
    pub bias: f64,
}

impl ScalarFn for LinearProbe {
    fn value(&self, x: &Array3<f64>) -> Result<f64> {
        Ok((&self.weights * x).sum() + self.bias)
    }

    fn gradient(&self, _x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.weights.clone())
    }
}

/// Sum of the logits of class `class` at lead `lead` over `pixels`.
pub struct LogitTarget<'a> {
    pub model: &'a Micromodel,
    pub params: &'a ParamSet,
    pub lead: usize,
    pub class: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl LogitTarget<'_> {
    fn channel(&self) -> usize {
        match self.model.config.mode {
            Mode::SinglePass => self.lead * self.model.config.maps_per_lead() + self.class,
            Mode::LeadConditioned => self.class,
        }
    }

    /// Network input for the chosen lead; IG then runs over this tensor.
    pub fn network_input(&self, prepared: &Array3<f64>) -> Array3<f64> {
        match self.model.config.mode {
            Mode::SinglePass => prepared.clone(),
            Mode::LeadConditioned => self.model.with_lead(prepared, self.lead),
        }
    }

    fn check(&self) -> Result<()> {
        let c = &self.model.config;
        if self.lead >= c.t_out || self.class >= c.maps_per_lead() || self.pixels.is_empty() {
            return Err(Error::Shape("attribution target out of range or empty".into()));
        }
        Ok(())
    }
}

impl ScalarFn for LogitTarget<'_> {
    fn value(&self, x: &Array3<f64>) -> Result<f64> {
        self.check()?;
        let (t, _, l) = self.model.record(self.params, x)?;
        let v = t.value(l);
        let ch = self.channel();
        Ok(self.pixels.iter().map(|&(y, xx)| v[[ch, y, xx]]).sum())
    }

    fn gradient(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.check()?;
        let (t, input, l) = self.model.record(self.params, x)?;
        let mut seed = Array3::zeros(t.value(l).dim());
        let ch = self.channel();
        for &(y, xx) in &self.pixels {
            seed[[ch, y, xx]] += 1.0;
        }
        let g = t.backward(self.params, l, &seed)?;
        g.input(input)
            .cloned()
            .ok_or_else(|| Error::Shape("input gradient missing".into()))
    }
}

/// Each channel filled with its own minimum.
pub fn min_baseline(x: &Array3<f64>) -> Array3<f64> {
    let mut b = x.clone();
    for mut ch in b.axis_iter_mut(Axis(0)) {
        let m = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        ch.fill(m);
    }
    b
}

#[derive(Debug, Clone)]
pub struct Attribution {
    pub map: Array3<f64>,
    /// Map summed over space, one score per input channel.
    pub per_channel: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.map.sum()
    }

    /// `|sum(attr) - (F(x) - F(b))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.total() - (self.f_input - self.f_baseline)).abs()
    }
}

/// Midpoint Riemann sum of the gradient along the straight path from
/// `baseline` to `x`, scaled by `x - baseline`.
pub fn integrated_gradients<F: ScalarFn>(
    f: &F,
    x: &Array3<f64>,
    baseline: &Array3<f64>,
    steps: usize,
) -> Result<Attribution> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs steps >= 1".into()));
    }
    if x.dim() != baseline.dim() {
        return Err(Error::Shape("baseline shape differs from input".into()));
    }
    let delta = x - baseline;
    // Running mean: stays bit-exact when the gradient is constant.
    let mut avg = Array3::zeros(x.dim());
    for i in 0..steps {
        let a = (i as f64 + 0.5) / steps as f64;
        let point = baseline + &(&delta * a);
        let g = f.gradient(&point)?;
        let n = (i + 1) as f64;
        avg.zip_mut_with(&g, |m, &g| *m += (g - *m) / n);
    }
    let map = avg * &delta;
    let per_channel = map.axis_iter(Axis(0)).map(|c| c.sum()).collect();
    Ok(Attribution {
        map,
        per_channel,
        f_input: f.value(x)?,
        f_baseline: f.value(baseline)?,
    })
}
