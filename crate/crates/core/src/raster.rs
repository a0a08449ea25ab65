//! Grid data model and the geometric transforms used for multi-resolution
//! fusion.
//!
//! Coordinates are in km with the origin at the top-left corner of a grid,
//! x growing rightward and y growing downward.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{is_missing, Error, Result, MISSING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterKind {
    /// Rain rate in mm/h.
    Rate,
    /// Reflectivity in dBZ.
    Dbz,
}

/// One georeferenced 2-D field.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub values: Array2<f64>,
    pub res_km: f64,
    pub origin_km: (f64, f64),
    pub kind: RasterKind,
}

impl Raster {
    pub fn new(
        values: Array2<f64>,
        res_km: f64,
        origin_km: (f64, f64),
        kind: RasterKind,
    ) -> Result<Self> {
        let r = Self {
            values,
            res_km,
            origin_km,
            kind,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn rate(values: Array2<f64>, res_km: f64) -> Result<Self> {
        Self::new(values, res_km, (0.0, 0.0), RasterKind::Rate)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height() == 0 || self.width() == 0 {
            return Err(Error::Dimension("raster must be at least 1x1".into()));
        }
        if !(self.res_km > 0.0) {
            return Err(Error::Domain(format!("res_km must be > 0, got {}", self.res_km)));
        }
        for &v in self.values.iter() {
            let ok = match self.kind {
                RasterKind::Rate => is_missing(v) || v >= 0.0,
                RasterKind::Dbz => (-1.0..=64.0).contains(&v),
            };
            if !ok || v.is_nan() {
                return Err(Error::Domain(format!("value {v} out of range for {:?}", self.kind)));
            }
        }
        Ok(())
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|&v| is_missing(v))
    }
}

/// A stack of frames `T x C x H x W` sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStack {
    pub data: Array4<f64>,
    pub res_km: f64,
    pub origin_km: (f64, f64),
    pub timesteps_min: Vec<i64>,
}

impl SourceStack {
    pub fn new(
        data: Array4<f64>,
        res_km: f64,
        origin_km: (f64, f64),
        timesteps_min: Vec<i64>,
    ) -> Result<Self> {
        if timesteps_min.len() != data.shape()[0] {
            return Err(Error::Dimension(format!(
                "{} timesteps for {} frames",
                timesteps_min.len(),
                data.shape()[0]
            )));
        }
        if timesteps_min.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition("timesteps_min must be strictly increasing".into()));
        }
        if !(res_km > 0.0) {
            return Err(Error::Domain(format!("res_km must be > 0, got {res_km}")));
        }
        Ok(Self {
            data,
            res_km,
            origin_km,
            timesteps_min,
        })
    }

    /// Single-channel stack from a `T x H x W` array with timesteps 0, step, 2*step, ...
    pub fn from_frames(frames: Array3<f64>, res_km: f64, step_min: i64) -> Result<Self> {
        let t = frames.shape()[0];
        let ts = (0..t as i64).map(|i| i * step_min).collect();
        Self::new(frames.insert_axis(Axis(1)), res_km, (0.0, 0.0), ts)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frame(&self, t: usize, c: usize) -> Raster {
        Raster {
            values: self.data.slice(s![t, c, .., ..]).to_owned(),
            res_km: self.res_km,
            origin_km: self.origin_km,
            kind: RasterKind::Rate,
        }
    }
}

/// Block mean over valid pixels. Blocks without any valid pixel stay missing.
pub fn downsample_mean(r: &Raster, factor: usize) -> Result<Raster> {
    let (h, w) = (r.height(), r.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::from_elem((oh, ow), MISSING);
    for oy in 0..oh {
        for ox in 0..ow {
            let block = r
                .values
                .slice(s![oy * factor..(oy + 1) * factor, ox * factor..(ox + 1) * factor]);
            let (sum, n) = block
                .iter()
                .filter(|v| !is_missing(**v))
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n > 0 {
                out[[oy, ox]] = sum / n as f64;
            }
        }
    }
    Ok(Raster {
        values: out,
        res_km: r.res_km * factor as f64,
        origin_km: r.origin_km,
        kind: r.kind,
    })
}

/// Bilinear upsampling with half-pixel-center alignment and edge clamping.
pub fn upsample_bilinear(r: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::Dimension("factor must be >= 1".into()));
    }
    if r.has_missing() {
        return Err(Error::Precondition(
            "upsample_bilinear input contains missing pixels".into(),
        ));
    }
    let (h, w) = (r.height(), r.width());
    let (oh, ow) = (h * factor, w * factor);
    let f = factor as f64;
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, w);
            let v = &r.values;
            let top = v[[y0, x0]] * (1.0 - fx) + v[[y0, x1]] * fx;
            let bot = v[[y1, x0]] * (1.0 - fx) + v[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(Raster {
        values: out,
        res_km: r.res_km / f,
        origin_km: r.origin_km,
        kind: r.kind,
    })
}

/// `C x H x W` -> `(C*b*b) x H/b x W/b`. Output channel `c*b*b + dy*b + dx`
/// holds the pixels at phase `(dy, dx)` of input channel `c`.
pub fn space_to_depth3(x: ArrayView3<f64>, block: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::Dimension(format!("block {block} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / block, w / block);
    let mut out = Array3::zeros((c * block * block, oh, ow));
    for ci in 0..c {
        for dy in 0..block {
            for dx in 0..block {
                let oc = ci * block * block + dy * block + dx;
                out.slice_mut(s![oc, .., ..])
                    .assign(&x.slice(s![ci, dy..;block, dx..;block]));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth3`].
pub fn depth_to_space3(x: ArrayView3<f64>, block: usize) -> Result<Array3<f64>> {
    let (cb, h, w) = x.dim();
    let bb = block * block;
    if block == 0 || cb % bb != 0 {
        return Err(Error::Dimension(format!(
            "{cb} channels not divisible by block^2 = {bb}"
        )));
    }
    let c = cb / bb;
    let mut out = Array3::zeros((c, h * block, w * block));
    for ci in 0..c {
        for dy in 0..block {
            for dx in 0..block {
                let ic = ci * bb + dy * block + dx;
                out.slice_mut(s![ci, dy..;block, dx..;block])
                    .assign(&x.slice(s![ic, .., ..]));
            }
        }
    }
    Ok(out)
}

pub fn space_to_depth(s: &SourceStack, block: usize) -> Result<SourceStack> {
    let frames: Vec<Array3<f64>> = s
        .data
        .outer_iter()
        .map(|f| space_to_depth3(f, block))
        .collect::<Result<_>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let data = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(SourceStack {
        data,
        res_km: s.res_km * block as f64,
        origin_km: s.origin_km,
        timesteps_min: s.timesteps_min.clone(),
    })
}

pub fn depth_to_space(s: &SourceStack, block: usize) -> Result<SourceStack> {
    let frames: Vec<Array3<f64>> = s
        .data
        .outer_iter()
        .map(|f| depth_to_space3(f, block))
        .collect::<Result<_>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let data = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(SourceStack {
        data,
        res_km: s.res_km / block as f64,
        origin_km: s.origin_km,
        timesteps_min: s.timesteps_min.clone(),
    })
}

/// Fold time into channels, time-major: `[t0c0, t0c1, .., t1c0, ..]`.
pub fn merge_time_channels(s: &SourceStack) -> Array3<f64> {
    let (t, c, h, w) = s.dims();
    s.data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t * c, h, w))
        .expect("contiguous reshape")
}

/// Inverse of [`merge_time_channels`] for `channels` channels per step.
pub fn split_time_channels(x: &Array3<f64>, channels: usize) -> Result<Array4<f64>> {
    let (tc, h, w) = x.dim();
    if channels == 0 || tc % channels != 0 {
        return Err(Error::Dimension(format!(
            "{tc} merged channels not divisible by {channels}"
        )));
    }
    Ok(x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((tc / channels, channels, h, w))
        .expect("contiguous reshape"))
}

fn extent_px(extent_km: f64, res_km: f64) -> Result<usize> {
    let px = extent_km / res_km;
    let r = px.round();
    if r < 1.0 || (px - r).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "extent {extent_km} km is not a positive multiple of {res_km} km"
        )));
    }
    Ok(r as usize)
}

/// Pad (with 0) or crop symmetrically so the stack covers exactly
/// `target_extent_km = (width, height)` around its own center.
pub fn align_center(s: &SourceStack, target_extent_km: (f64, f64)) -> Result<SourceStack> {
    let (t, c, h, w) = s.dims();
    let tw = extent_px(target_extent_km.0, s.res_km)?;
    let th = extent_px(target_extent_km.1, s.res_km)?;
    let dw = tw as i64 - w as i64;
    let dh = th as i64 - h as i64;
    if dw % 2 != 0 || dh % 2 != 0 {
        return Err(Error::Alignment(format!(
            "asymmetric pad/crop: {w}x{h} px -> {tw}x{th} px"
        )));
    }
    let (ex, ey) = (dw / 2, dh / 2);
    let mut out = Array4::zeros((t, c, th, tw));
    // Overlap in source and destination index space.
    let (sx0, dx0) = if ex >= 0 { (0, ex as usize) } else { ((-ex) as usize, 0) };
    let (sy0, dy0) = if ey >= 0 { (0, ey as usize) } else { ((-ey) as usize, 0) };
    let nx = w.min(tw);
    let ny = h.min(th);
    out.slice_mut(s![.., .., dy0..dy0 + ny, dx0..dx0 + nx])
        .assign(&s.data.slice(s![.., .., sy0..sy0 + ny, sx0..sx0 + nx]));
    Ok(SourceStack {
        data: out,
        res_km: s.res_km,
        origin_km: (
            s.origin_km.0 - ex as f64 * s.res_km,
            s.origin_km.1 - ey as f64 * s.res_km,
        ),
        timesteps_min: s.timesteps_min.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn stack(t: usize, c: usize, h: usize, w: usize, res: f64) -> SourceStack {
        let data = Array::from_shape_fn((t, c, h, w), |(a, b, y, x)| {
            (a * 1000 + b * 100 + y * 10 + x) as f64
        });
        let ts = (0..t as i64).collect();
        SourceStack::new(data, res, (0.0, 0.0), ts).unwrap()
    }

    #[test]
    fn downsample_block_mean() {
        let r = Raster::rate(array![[1.0, 2.0], [3.0, 4.0]], 1.0).unwrap();
        let d = downsample_mean(&r, 2).unwrap();
        assert_eq!(d.values, array![[2.5]]);
        assert_eq!(d.res_km, 2.0);
    }

    #[test]
    fn downsample_skips_missing() {
        let r = Raster::rate(
            array![[1.0, -1.0, -1.0, -1.0], [-1.0, -1.0, -1.0, -1.0]],
            1.0,
        )
        .unwrap();
        let d = downsample_mean(&r, 2).unwrap();
        assert_eq!(d.values, array![[1.0, -1.0]]);
    }

    #[test]
    fn downsample_identity_and_errors() {
        let r = Raster::rate(array![[1.0, 2.0, 3.0]], 2.0).unwrap();
        assert_eq!(downsample_mean(&r, 1).unwrap(), r);
        assert!(matches!(downsample_mean(&r, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_half_pixel_centers() {
        let r = Raster::rate(array![[0.0, 1.0]], 4.0).unwrap();
        let u = upsample_bilinear(&r, 2).unwrap();
        assert_eq!(u.values.shape(), &[2, 4]);
        for row in u.values.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
        }
        assert_eq!(u.res_km, 2.0);
        assert_eq!(upsample_bilinear(&r, 1).unwrap(), r);
    }

    #[test]
    fn upsample_constant_and_missing() {
        let r = Raster::rate(Array2::from_elem((3, 2), 7.5), 1.0).unwrap();
        let u = upsample_bilinear(&r, 3).unwrap();
        assert!(u.values.iter().all(|&v| v == 7.5));
        let m = Raster::rate(array![[1.0, -1.0]], 1.0).unwrap();
        assert!(matches!(upsample_bilinear(&m, 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn space_to_depth_phases() {
        let s = stack(1, 1, 4, 4, 1.0);
        let d = space_to_depth(&s, 2).unwrap();
        assert_eq!(d.dims(), (1, 4, 2, 2));
        // Index bookkeeping: out[c=dy*2+dx][oy][ox] = in[2*oy+dy][2*ox+dx].
        for dy in 0..2 {
            for dx in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        assert_eq!(
                            d.data[[0, dy * 2 + dx, oy, ox]],
                            s.data[[0, 0, 2 * oy + dy, 2 * ox + dx]]
                        );
                    }
                }
            }
        }
        assert_eq!(space_to_depth(&s, 1).unwrap().data, s.data);
        assert!(space_to_depth(&s, 3).is_err());
    }

    #[test]
    fn merge_ordering_is_time_major() {
        let s = stack(2, 3, 1, 1, 1.0);
        let m = merge_time_channels(&s);
        let got: Vec<f64> = m.iter().copied().collect();
        assert_eq!(got, vec![0.0, 100.0, 200.0, 1000.0, 1100.0, 1200.0]);
        assert!(split_time_channels(&m, 4).is_err());
    }

    #[test]
    fn align_pads_radar_context() {
        let s = stack(1, 1, 256, 256, 4.0);
        let a = align_center(&s, (1536.0, 1536.0)).unwrap();
        assert_eq!(a.dims(), (1, 1, 384, 384));
        assert_eq!(a.data[[0, 0, 63, 100]], 0.0);
        assert_eq!(a.data[[0, 0, 64, 64]], s.data[[0, 0, 0, 0]]);
        assert_eq!(a.data[[0, 0, 319, 319]], s.data[[0, 0, 255, 255]]);
        assert_eq!(a.data[[0, 0, 320, 320]], 0.0);
        assert_eq!(a.origin_km, (-256.0, -256.0));
    }

    #[test]
    fn align_crops_to_target() {
        let s = stack(1, 1, 192, 192, 8.0);
        let a = align_center(&s, (512.0, 512.0)).unwrap();
        assert_eq!(a.dims(), (1, 1, 64, 64));
        assert_eq!(a.data[[0, 0, 0, 0]], s.data[[0, 0, 64, 64]]);
        assert_eq!(a.origin_km, (512.0, 512.0));
        let same = align_center(&s, (1536.0, 1536.0)).unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn align_rejects_odd_remainder() {
        let s = stack(1, 1, 4, 4, 1.0);
        assert!(matches!(align_center(&s, (5.0, 4.0)), Err(Error::Alignment(_))));
        assert!(matches!(align_center(&s, (4.5, 4.0)), Err(Error::Alignment(_))));
    }

    proptest! {
        #[test]
        fn round_trips_are_exact(
            t in 1usize..3, c in 1usize..3, hb in 1usize..4, wb in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (hb * 2, wb * 2);
            let data = Array::from_shape_fn((t, c, h, w), |_| rng.gen::<f64>());
            let s = SourceStack::new(data, 2.0, (10.0, -4.0), (0..t as i64).collect()).unwrap();

            let back = depth_to_space(&space_to_depth(&s, 2).unwrap(), 2).unwrap();
            prop_assert_eq!(&back.data, &s.data);

            let merged = merge_time_channels(&s);
            prop_assert_eq!(split_time_channels(&merged, c).unwrap(), s.data.clone());

            let big = align_center(&s, ((w + 4) as f64 * 2.0, (h + 2) as f64 * 2.0)).unwrap();
            let back = align_center(&big, (w as f64 * 2.0, h as f64 * 2.0)).unwrap();
            prop_assert_eq!(&back, &s);
        }

        #[test]
        fn align_keeps_physical_coordinates(pad in 0usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array::from_shape_fn((1, 1, 6, 6), |_| rng.gen::<f64>());
            let s = SourceStack::new(data, 3.0, (30.0, 60.0), vec![0]).unwrap();
            let a = align_center(&s, ((6 + 2 * pad) as f64 * 3.0, 6.0 * 3.0)).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    // Pixel (y, x) of the input sits at the same km coordinate in the output.
                    let px = s.origin_km.0 + x as f64 * 3.0;
                    let py = s.origin_km.1 + y as f64 * 3.0;
                    let ox = ((px - a.origin_km.0) / 3.0).round() as usize;
                    let oy = ((py - a.origin_km.1) / 3.0).round() as usize;
                    prop_assert_eq!(a.data[[0, 0, oy, ox]], s.data[[0, 0, y, x]]);
                }
            }
        }

        #[test]
        fn downsample_preserves_mean(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..64) as f64 / 4.0);
            let r = Raster::rate(v, 1.0).unwrap();
            let d = downsample_mean(&r, 4).unwrap();
            prop_assert_eq!(r.values.mean().unwrap(), d.values.mean().unwrap());
        }
    }
}
