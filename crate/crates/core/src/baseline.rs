//! Reference forecasters: persistence and semi-Lagrangian extrapolation of
//! the last radar frame along an estimated motion field.
//!
//! Motion is expressed in pixels per step with `frame_{k+1}(p) = frame_k(p - v)`,
//! i.e. content travels by `+v`.

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::{is_missing, Error, Result, MISSING};

pub const DEFAULT_SEARCH_RADIUS: usize = 16;
/// Pearson correlation at the chosen shift below which an estimate is
/// reported as low confidence.
pub const MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum MotionField {
    Global { vx: f64, vy: f64 },
    Dense { vx: Array2<f64>, vy: Array2<f64> },
}

impl MotionField {
    pub fn zero() -> Self {
        MotionField::Global { vx: 0.0, vy: 0.0 }
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        match self {
            MotionField::Global { vx, vy } => (*vx, *vy),
            MotionField::Dense { vx, vy } => (vx[[y, x]], vy[[y, x]]),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        match self {
            MotionField::Global { vx, vy } => MotionField::Global { vx: vx * k, vy: vy * k },
            MotionField::Dense { vx, vy } => MotionField::Dense {
                vx: vx * k,
                vy: vy * k,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionEstimate {
    pub field: MotionField,
    /// Pearson correlation of the overlapping pixels at the best integer shift.
    pub confidence: f64,
    pub low_confidence: bool,
    /// Set when the frames carry no signal and zero motion was returned.
    pub degenerate: bool,
}

pub fn persistence(last: ArrayView2<f64>, t_out: usize) -> Array3<f64> {
    let (h, w) = last.dim();
    let mut out = Array3::zeros((t_out, h, w));
    for mut f in out.outer_iter_mut() {
        f.assign(&last);
    }
    out
}

/// Raw cross-correlation `sum f1(p) f2(p + d)` over pixels valid in both.
fn cross_corr(f1: ArrayView2<f64>, f2: ArrayView2<f64>, dx: i64, dy: i64) -> f64 {
    let (h, w) = f1.dim();
    let (h, w) = (h as i64, w as i64);
    let mut s = 0.0;
    for y in 0.max(-dy)..h.min(h - dy) {
        for x in 0.max(-dx)..w.min(w - dx) {
            let a = f1[[y as usize, x as usize]];
            let b = f2[[(y + dy) as usize, (x + dx) as usize]];
            if !is_missing(a) && !is_missing(b) {
                s += a * b;
            }
        }
    }
    s
}

fn pearson(f1: ArrayView2<f64>, f2: ArrayView2<f64>, dx: i64, dy: i64) -> f64 {
    let (h, w) = f1.dim();
    let (h, w) = (h as i64, w as i64);
    let mut pairs = Vec::new();
    for y in 0.max(-dy)..h.min(h - dy) {
        for x in 0.max(-dx)..w.min(w - dx) {
            let a = f1[[y as usize, x as usize]];
            let b = f2[[(y + dy) as usize, (x + dx) as usize]];
            if !is_missing(a) && !is_missing(b) {
                pairs.push((a, b));
            }
        }
    }
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Vertex offset of a parabola through three equally spaced samples.
fn parabola_offset(minus: f64, center: f64, plus: f64) -> f64 {
    let den = minus - 2.0 * center + plus;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (minus - plus) / den).clamp(-0.5, 0.5)
}

fn search(
    f1: ArrayView2<f64>,
    f2: ArrayView2<f64>,
    radius: usize,
    normalized: bool,
) -> (f64, f64, f64, bool) {
    let r = radius as i64;
    let n = (2 * r + 1) as usize;
    let mut grid = Array2::zeros((n, n));
    let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
    let mut any = false;
    for dy in -r..=r {
        for dx in -r..=r {
            let raw = cross_corr(f1, f2, dx, dy);
            any |= raw != 0.0;
            let c = if normalized { pearson(f1, f2, dx, dy) } else { raw };
            grid[[(dy + r) as usize, (dx + r) as usize]] = c;
            // Ties resolve toward the smallest |d| (scan is row-major).
            let better = c > best.0
                || (c == best.0 && dx.abs() + dy.abs() < best.1.abs() + best.2.abs());
            if better {
                best = (c, dx, dy);
            }
        }
    }
    if !any {
        return (0.0, 0.0, 0.0, true);
    }
    let (_, bx, by) = best;
    let (gx, gy) = ((bx + r) as usize, (by + r) as usize);
    let center = grid[[gy, gx]];
    let fx = if gx > 0 && gx + 1 < n {
        parabola_offset(grid[[gy, gx - 1]], center, grid[[gy, gx + 1]])
    } else {
        0.0
    };
    let fy = if gy > 0 && gy + 1 < n {
        parabola_offset(grid[[gy - 1, gx]], center, grid[[gy + 1, gx]])
    } else {
        0.0
    };
    let conf = pearson(f1, f2, bx, by);
    (bx as f64 + fx, by as f64 + fy, conf, false)
}

/// Global motion from the last two frames: integer cross-correlation search
/// within `radius` pixels, refined by a quadratic fit around the peak.
pub fn estimate_motion(frames: &[ArrayView2<f64>], radius: usize) -> Result<MotionEstimate> {
    if frames.len() < 2 {
        return Err(Error::Precondition("motion estimation needs two frames".into()));
    }
    let f1 = frames[frames.len() - 2];
    let f2 = frames[frames.len() - 1];
    if f1.dim() != f2.dim() {
        return Err(Error::Dimension("frames differ in shape".into()));
    }
    let (vx, vy, confidence, degenerate) = search(f1, f2, radius, false);
    Ok(MotionEstimate {
        field: MotionField::Global { vx, vy },
        confidence,
        low_confidence: degenerate || confidence < MIN_CONFIDENCE,
        degenerate,
    })
}

/// Per-block variant: each `block x block` tile of the older frame is matched
/// against the newer frame by Pearson correlation (partial patterns at tile
/// edges bias raw correlation); tiles without signal keep the global estimate.
pub fn estimate_motion_blocks(
    frames: &[ArrayView2<f64>],
    block: usize,
    radius: usize,
) -> Result<MotionEstimate> {
    let global = estimate_motion(frames, radius)?;
    let f1 = frames[frames.len() - 2];
    let f2 = frames[frames.len() - 1];
    let (h, w) = f1.dim();
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::Dimension(format!("block {block} does not divide {h}x{w}")));
    }
    let (gvx, gvy) = global.field.at(0, 0);
    let mut vx = Array2::from_elem((h, w), gvx);
    let mut vy = Array2::from_elem((h, w), gvy);
    for by in 0..h / block {
        for bx in 0..w / block {
            // Mask everything outside the tile in the first frame.
            let mut tile = Array2::from_elem((h, w), MISSING);
            let sl = s![by * block..(by + 1) * block, bx * block..(bx + 1) * block];
            tile.slice_mut(sl).assign(&f1.slice(sl));
            let (x, y, _, degenerate) = search(tile.view(), f2, radius, true);
            if !degenerate {
                vx.slice_mut(sl).fill(x);
                vy.slice_mut(sl).fill(y);
            }
        }
    }
    Ok(MotionEstimate {
        field: MotionField::Dense { vx, vy },
        ..global
    })
}

/// Bilinear sample at fractional `(y, x)`. Stencil points with nonzero weight
/// that fall outside the grid or on missing pixels make the result missing.
pub fn sample_bilinear(f: ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = f.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                return MISSING;
            }
            let v = f[[yy as usize, xx as usize]];
            if is_missing(v) {
                return MISSING;
            }
            acc += wgt * v;
        }
    }
    acc
}

/// Backward semi-Lagrangian extrapolation: `out[k-1](p) = last(p - k v(p))`.
pub fn advect(last: ArrayView2<f64>, motion: &MotionField, t_out: usize) -> Array3<f64> {
    let (h, w) = last.dim();
    let mut out = Array3::zeros((t_out, h, w));
    for k in 1..=t_out {
        let kf = k as f64;
        for y in 0..h {
            for x in 0..w {
                let (vx, vy) = motion.at(y, x);
                out[[k - 1, y, x]] = sample_bilinear(last, y as f64 - kf * vy, x as f64 - kf * vx);
            }
        }
    }
    out
}

/// Replace missing pixels (e.g. inflow from outside the domain) with `fill`.
pub fn fill_missing(frames: &mut Array3<f64>, fill: f64) {
    frames.mapv_inplace(|v| if is_missing(v) { fill } else { v });
}
