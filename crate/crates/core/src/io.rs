//! Portable raster files: a JSON header (`<base>.json`) next to a raw payload
//! of little-endian f32 values (`<base>.f32`), row-major and time-major.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::raster::{Raster, RasterKind, SourceStack};
use crate::{Error, Result};

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub h: usize,
    pub w: usize,
    pub res_km: f64,
    pub origin_km: (f64, f64),
    pub kind: RasterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps_min: Option<Vec<i64>>,
    /// Channels per timestep for stacked files.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
}

impl RasterHeader {
    fn frames(&self) -> usize {
        self.timesteps_min.as_ref().map_or(1, |t| t.len())
    }

    fn n_values(&self) -> usize {
        self.frames() * self.channels * self.h * self.w
    }
}

pub fn header_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

pub fn payload_path(base: &Path) -> PathBuf {
    base.with_extension("f32")
}

pub fn write_f32<'a, I: IntoIterator<Item = &'a f64>>(path: &Path, values: I) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: payload length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_header(base: &Path, header: &RasterHeader) -> Result<()> {
    fs::write(header_path(base), serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

fn read_header(base: &Path) -> Result<RasterHeader> {
    let text = fs::read_to_string(header_path(base))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", base.display())))
}

fn read_payload(base: &Path, header: &RasterHeader) -> Result<Vec<f64>> {
    let values = read_f32(&payload_path(base))?;
    if values.len() != header.n_values() {
        return Err(Error::Format(format!(
            "{}: expected {} values, found {}",
            base.display(),
            header.n_values(),
            values.len()
        )));
    }
    Ok(values)
}

pub fn write_raster(base: &Path, r: &Raster) -> Result<()> {
    let header = RasterHeader {
        h: r.height(),
        w: r.width(),
        res_km: r.res_km,
        origin_km: r.origin_km,
        kind: r.kind,
        timesteps_min: None,
        channels: 1,
    };
    write_header(base, &header)?;
    write_f32(&payload_path(base), r.values.as_standard_layout().iter())
}

pub fn read_raster(base: &Path) -> Result<Raster> {
    let header = read_header(base)?;
    if header.frames() != 1 || header.channels != 1 {
        return Err(Error::Format(format!("{} holds a stack, not one raster", base.display())));
    }
    let values = read_payload(base, &header)?;
    let values = Array2::from_shape_vec((header.h, header.w), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Raster::new(values, header.res_km, header.origin_km, header.kind)
}

pub fn write_stack(base: &Path, s: &SourceStack, kind: RasterKind) -> Result<()> {
    let (_, c, h, w) = s.dims();
    let header = RasterHeader {
        h,
        w,
        res_km: s.res_km,
        origin_km: s.origin_km,
        kind,
        timesteps_min: Some(s.timesteps_min.clone()),
        channels: c,
    };
    write_header(base, &header)?;
    write_f32(&payload_path(base), s.data.as_standard_layout().iter())
}

pub fn read_stack(base: &Path) -> Result<(SourceStack, RasterKind)> {
    let header = read_header(base)?;
    let values = read_payload(base, &header)?;
    let data = Array4::from_shape_vec((header.frames(), header.channels, header.h, header.w), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    let ts = header.timesteps_min.clone().unwrap_or_else(|| vec![0]);
    Ok((SourceStack::new(data, header.res_km, header.origin_km, ts)?, header.kind))
}
