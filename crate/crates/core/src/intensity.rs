//! Reflectivity/rain-rate conversion and intensity classes.

use ndarray::{Array3, Array4, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::{is_missing, Error, Result, MISSING};

/// Marshall-Palmer Z = a R^b.
pub const MP_A: f64 = 200.0;
pub const MP_B: f64 = 1.6;

pub const DBZ_MIN: f64 = -1.0;
pub const DBZ_MAX: f64 = 64.0;

/// Clip reflectivity to the usable range. The missing sentinel coincides with
/// the lower bound, so it is left untouched either way.
pub fn clip_dbz(dbz: f64) -> f64 {
    if is_missing(dbz) {
        return dbz;
    }
    dbz.clamp(DBZ_MIN, DBZ_MAX)
}

/// Rain rate (mm/h) from clipped reflectivity. Pass `missing = true` for
/// pixels flagged as lacking coverage; they map to the sentinel.
pub fn dbz_to_rate(dbz: f64, missing: bool) -> f64 {
    if missing {
        return MISSING;
    }
    let z = 10f64.powf(clip_dbz(dbz) / 10.0);
    (z / MP_A).powf(1.0 / MP_B)
}

pub fn rate_to_dbz(rate: f64) -> f64 {
    10.0 * (MP_A * rate.powf(MP_B)).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSet {
    edges: Vec<f64>,
    top_width: f64,
}

impl BinSet {
    pub fn new(edges: Vec<f64>, top_width: f64) -> Result<Self> {
        let b = Self { edges, top_width };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() {
            return Err(Error::Domain("bin set needs at least one edge".into()));
        }
        if !(self.edges[0] > 0.0) || self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(format!(
                "edges must be positive and strictly increasing: {:?}",
                self.edges
            )));
        }
        if !(self.top_width > 0.0) {
            return Err(Error::Domain("top_width must be > 0".into()));
        }
        Ok(())
    }

    /// The 18 rain edges of the European radar setup.
    pub fn paper_europe() -> Self {
        Self::new(
            vec![
                0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 15.0,
                20.0, 25.0,
            ],
            5.0,
        )
        .unwrap()
    }

    /// SEVIR VIL thresholds; the open bucket takes the widest finite width.
    pub fn sevir() -> Self {
        Self::new(
            vec![16.0, 31.0, 59.0, 74.0, 100.0, 133.0, 160.0, 181.0, 219.0, 255.0],
            38.0,
        )
        .unwrap()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-europe" => Some(Self::paper_europe()),
            "sevir" => Some(Self::sevir()),
            _ => None,
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn top_width(&self) -> f64 {
        self.top_width
    }

    /// Number of exceedance classes K.
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Lower bound of bucket `c` (0 for the no-rain bucket).
    pub fn lower(&self, bucket: usize) -> f64 {
        if bucket == 0 {
            0.0
        } else {
            self.edges[bucket - 1]
        }
    }

    /// Widths of all K+1 buckets, the open top bucket taking `top_width`.
    pub fn widths(&self) -> Vec<f64> {
        let k = self.len();
        (0..=k)
            .map(|b| if b == k { self.top_width } else { self.edges[b] - self.lower(b) })
            .collect()
    }

    /// Bucket index in `0..=K`, left-closed.
    pub fn classify(&self, rate: f64) -> Result<usize> {
        if rate < 0.0 || rate.is_nan() {
            return Err(Error::Domain(format!("cannot classify rate {rate}")));
        }
        Ok(self.edges.partition_point(|&e| e <= rate))
    }

    /// Value reported for a bucket: midpoint for finite buckets, the lower
    /// edge for the open top bucket, 0 for no rain.
    pub fn representative(&self, bucket: usize) -> f64 {
        let k = self.len();
        match bucket {
            0 => 0.0,
            b if b >= k => self.edges[k - 1],
            b => 0.5 * (self.edges[b - 1] + self.edges[b]),
        }
    }
}

/// Exceedance targets `T x K x H x W` and validity `T x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMasks {
    pub masks: Array4<u8>,
    pub valid: Array3<u8>,
}

/// `masks[t, c] = 1(R_t >= e_c)`, `valid = 1(R_t != missing)`.
pub fn exceedance_masks(target: ArrayView3<f64>, bins: &BinSet) -> ClassMasks {
    let (t, h, w) = target.dim();
    let k = bins.len();
    let mut masks = Array4::zeros((t, k, h, w));
    let mut valid = Array3::zeros((t, h, w));
    Zip::indexed(&target).for_each(|(ti, y, x), &r| {
        if is_missing(r) {
            return;
        }
        valid[[ti, y, x]] = 1;
        for (c, &e) in bins.edges().iter().enumerate() {
            if r >= e {
                masks[[ti, c, y, x]] = 1;
            } else {
                break;
            }
        }
    });
    ClassMasks { masks, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn preset_top_width_is_widest_finite_bucket() {
        for b in [BinSet::paper_europe(), BinSet::sevir()] {
            let w = b.widths();
            let widest = w[1..w.len() - 1].iter().cloned().fold(0.0, f64::max);
            assert_eq!(b.top_width(), widest);
        }
    }

    #[test]
    fn marshall_palmer_anchors() {
        assert_relative_eq!(rate_to_dbz(1.0), 10.0 * 200f64.log10(), epsilon = 1e-12);
        assert_relative_eq!(rate_to_dbz(1.0), 23.0103, epsilon = 1e-4);
        assert_relative_eq!(dbz_to_rate(23.010299956639813, false), 1.0, epsilon = 1e-12);
        let r64 = dbz_to_rate(64.0, false);
        assert!((r64 - 364.7).abs() < 0.1, "{r64}");
        assert_relative_eq!(rate_to_dbz(r64), 64.0, epsilon = 1e-9);
        assert_eq!(dbz_to_rate(-1.0, true), MISSING);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_dbz(70.0), 64.0);
        assert_eq!(clip_dbz(-5.0), -1.0);
        assert_eq!(clip_dbz(23.0), 23.0);
        assert_eq!(clip_dbz(MISSING), MISSING);
    }

    #[test]
    fn classify_europe_bins() {
        let b = BinSet::paper_europe();
        assert_eq!(b.len(), 18);
        assert_eq!(b.classify(0.05).unwrap(), 0);
        assert_eq!(b.classify(30.0).unwrap(), 18);
        assert_eq!(b.lower(18), 25.0);
        assert_eq!(b.classify(1.0).unwrap(), 6);
        assert_eq!(b.lower(6), 1.0);
        assert!(b.classify(-0.5).is_err());
    }

    #[test]
    fn representatives() {
        let b = BinSet::paper_europe();
        assert_eq!(b.representative(b.classify(1.2).unwrap()), 1.5);
        assert_eq!(b.representative(18), 25.0);
        assert_eq!(b.representative(0), 0.0);
    }

    #[test]
    fn widths_include_top() {
        let b = BinSet::new(vec![1.0, 2.0, 4.0], 3.0).unwrap();
        assert_eq!(b.widths(), vec![1.0, 1.0, 2.0, 3.0]);
        assert!(BinSet::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(BinSet::new(vec![0.0, 1.0], 1.0).is_err());
        assert!(BinSet::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn masks_by_definition() {
        let b = BinSet::new(vec![1.0, 2.0], 1.0).unwrap();
        let m = exceedance_masks(array![[[1.5, MISSING, 0.0]]].view(), &b);
        assert_eq!(m.masks.slice(ndarray::s![0, .., 0, 0]).to_vec(), vec![1, 0]);
        assert_eq!(m.valid.as_slice().unwrap(), &[1, 0, 1]);
        assert_eq!(m.masks.slice(ndarray::s![0, .., 0, 2]).to_vec(), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn rate_dbz_round_trip(dbz in -0.999f64..63.999) {
            let r = dbz_to_rate(dbz, false);
            let back = dbz_to_rate(rate_to_dbz(r), false);
            prop_assert!(((back - r) / r).abs() <= 1e-9);
        }

        #[test]
        fn classify_is_monotone(a in 0f64..40.0, b in 0f64..40.0) {
            let bins = BinSet::paper_europe();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bins.classify(lo).unwrap() <= bins.classify(hi).unwrap());
        }

        #[test]
        fn masks_one_hot_the_bucket(r in 0f64..40.0) {
            let bins = BinSet::paper_europe();
            let m = exceedance_masks(Array3::from_elem((1, 1, 1), r).view(), &bins);
            let col: Vec<i32> = m.masks.iter().map(|&v| v as i32).collect();
            prop_assert!(col.windows(2).all(|w| w[0] >= w[1]));
            // mask_0 := 1 (P(R >= 0)); mask_{K+1} := 0.
            let mut ext = vec![1];
            ext.extend(col);
            ext.push(0);
            let onehot: Vec<i32> = ext.windows(2).map(|w| w[0] - w[1]).collect();
            let bucket = bins.classify(r).unwrap();
            for (i, v) in onehot.iter().enumerate() {
                prop_assert_eq!(*v, (i == bucket) as i32);
            }
        }
    }
}
