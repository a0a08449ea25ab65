//! Synthetic radar sequences and the dataset mechanics around them: split
//! cycles with blackout periods and coverage-filtered patch sampling.

use ndarray::{s, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{is_missing, Error, Result, MISSING};

/// Upper clip for synthetic rates (mm/h), inside the dBZ-representable range.
pub const MAX_RATE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    /// Peak rate range of a cell (mm/h).
    pub amplitude: (f64, f64),
    /// Gaussian sigma range of a cell (px).
    pub radius: (f64, f64),
    /// Translation per step (px) as (vx, vy).
    pub velocity: (f64, f64),
    /// Rotation about the domain center (rad/step).
    #[serde(default)]
    pub rotation: f64,
    /// Log-intensity change per step.
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub hole_prob: f64,
    #[serde(default)]
    pub hole_radius: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_cells: 4,
            amplitude: (1.0, 20.0),
            radius: (2.0, 5.0),
            velocity: (2.0, 0.0),
            rotation: 0.0,
            drift: 0.0,
            noise_sigma: 0.0,
            hole_prob: 0.0,
            hole_radius: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height > 0
            && self.width > 0
            && self.amplitude.0 >= 0.0
            && self.amplitude.0 <= self.amplitude.1
            && self.radius.0 > 0.0
            && self.radius.0 <= self.radius.1
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.hole_prob)
            && self.hole_radius >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid scene config: {self:?}")))
        }
    }
}

/// A Gaussian rain cell at its initial position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

/// Render `t` frames of the given cells under the scene's motion and drift,
/// without noise or holes.
pub fn render_cells(cfg: &SceneConfig, cells: &[Cell], t: usize) -> Array3<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Array3::<f64>::zeros((t, h, w));
    for k in 0..t {
        let kf = k as f64;
        let (sin, cos) = (cfg.rotation * kf).sin_cos();
        let scale = (cfg.drift * kf).exp();
        let mut frame = out.slice_mut(s![k, .., ..]);
        for c in cells {
            let (rx, ry) = (c.x - cx, c.y - cy);
            let px = cx + cos * rx - sin * ry + kf * cfg.velocity.0;
            let py = cy + sin * rx + cos * ry + kf * cfg.velocity.1;
            let inv = 1.0 / (2.0 * c.sigma * c.sigma);
            let amp = c.amplitude * scale;
            for ((y, x), v) in frame.indexed_iter_mut() {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                *v += amp * (-d2 * inv).exp();
            }
        }
    }
    out.mapv_inplace(|v| v.min(MAX_RATE));
    out
}

/// Draw cells so that some start upstream and drift into the domain.
pub fn draw_cells(cfg: &SceneConfig, t: usize, rng: &mut impl Rng) -> Vec<Cell> {
    let travel_x = cfg.velocity.0 * t as f64;
    let travel_y = cfg.velocity.1 * t as f64;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let x_range = (-travel_x.max(0.0), w - travel_x.min(0.0));
    let y_range = (-travel_y.max(0.0), h - travel_y.min(0.0));
    (0..cfg.n_cells)
        .map(|_| Cell {
            x: rng.gen_range(x_range.0..=x_range.1),
            y: rng.gen_range(y_range.0..=y_range.1),
            amplitude: rng.gen_range(cfg.amplitude.0..=cfg.amplitude.1),
            sigma: rng.gen_range(cfg.radius.0..=cfg.radius.1),
        })
        .collect()
}

/// Deterministic synthetic sequence of `t` rain-rate frames.
pub fn gen_sequence(cfg: &SceneConfig, t: usize) -> Result<Array3<f64>> {
    cfg.validate()?;
    if t == 0 {
        return Err(Error::Domain("sequence length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = draw_cells(cfg, t, &mut rng);
    let mut out = render_cells(cfg, &cells, t);
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma > 0");
        out.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, MAX_RATE));
    }
    if cfg.hole_prob > 0.0 && rng.gen_bool(cfg.hole_prob) {
        let hy = rng.gen_range(0.0..cfg.height as f64);
        let hx = rng.gen_range(0.0..cfg.width as f64);
        let r2 = cfg.hole_radius * cfg.hole_radius;
        for mut frame in out.outer_iter_mut() {
            for ((y, x), v) in frame.indexed_iter_mut() {
                if (y as f64 - hy).powi(2) + (x as f64 - hx).powi(2) <= r2 {
                    *v = MISSING;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Blackout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// `(timestamp seconds, label)` in input order.
    pub labels: Vec<(i64, Split)>,
}

impl SplitAssignment {
    pub fn timestamps(&self, split: Split) -> Vec<i64> {
        self.labels
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn label(&self, t: i64) -> Option<Split> {
        self.labels.iter().find(|(ts, _)| *ts == t).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// (train, val, test) segment lengths in days.
    pub cycle_days: (u32, u32, u32),
    pub blackout_h: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            cycle_days: (12, 2, 2),
            blackout_h: 12,
        }
    }
}

/// Assign timestamps (seconds) to repeating train/val/test cycles anchored at
/// the first timestamp. The first `blackout_h` hours after every segment
/// boundary are labeled blackout.
pub fn make_splits(timestamps: &[i64], cfg: SplitConfig) -> Result<SplitAssignment> {
    let Some(&t0) = timestamps.first() else {
        return Err(Error::Empty("no timestamps to split".into()));
    };
    if timestamps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("timestamps must be sorted".into()));
    }
    const DAY: i64 = 86_400;
    let (tr, va, te) = cfg.cycle_days;
    let (tr, va, te) = (tr as i64 * DAY, va as i64 * DAY, te as i64 * DAY);
    let cycle = tr + va + te;
    if cycle == 0 {
        return Err(Error::Domain("cycle length must be positive".into()));
    }
    let blackout = cfg.blackout_h as i64 * 3600;
    let labels = timestamps
        .iter()
        .map(|&t| {
            let rel = t - t0;
            let (n, off) = (rel.div_euclid(cycle), rel.rem_euclid(cycle));
            let (split, start) = if off < tr {
                (Split::Train, 0)
            } else if off < tr + va {
                (Split::Val, tr)
            } else {
                (Split::Test, tr + va)
            };
            let first_segment = n == 0 && split == Split::Train;
            let label = if !first_segment && off - start < blackout {
                Split::Blackout
            } else {
                split
            };
            (t, label)
        })
        .collect();
    Ok(SplitAssignment { labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchMode {
    /// Jitter grid patches by up to `offset_km` and drop low-coverage ones.
    Train { offset_km: f64, min_coverage: f64 },
    /// Plain grid, low-coverage patches kept.
    Eval,
}

/// Valid-pixel fraction of a patch over all frames.
pub fn coverage(frames: ArrayView3<f64>, p: &Patch) -> f64 {
    let view = frames.slice(s![.., p.y..p.y + p.size, p.x..p.x + p.size]);
    let valid = view.iter().filter(|v| !is_missing(**v)).count();
    valid as f64 / view.len() as f64
}

pub fn sample_patches(
    frames: ArrayView3<f64>,
    res_km: f64,
    patch_km: f64,
    mode: PatchMode,
    seed: u64,
) -> Result<Vec<Patch>> {
    let (_, h, w) = frames.dim();
    let size = (patch_km / res_km).round() as usize;
    if size == 0 || size > h || size > w {
        return Err(Error::Dimension(format!(
            "patch of {patch_km} km ({size} px) does not fit {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for gy in 0..h / size {
        for gx in 0..w / size {
            let (mut y, mut x) = (gy * size, gx * size);
            if let PatchMode::Train { offset_km, .. } = mode {
                let off = (offset_km / res_km).round() as i64;
                let jy = rng.gen_range(-off..=off);
                let jx = rng.gen_range(-off..=off);
                y = (y as i64 + jy).clamp(0, (h - size) as i64) as usize;
                x = (x as i64 + jx).clamp(0, (w - size) as i64) as usize;
            }
            let p = Patch { y, x, size };
            if let PatchMode::Train { min_coverage, .. } = mode {
                if coverage(frames, &p) < min_coverage {
                    continue;
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}
