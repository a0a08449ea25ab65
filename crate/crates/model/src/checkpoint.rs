//! Parameter checkpoints: a JSON manifest (`<base>.json`) and a little-endian
//! f32 payload (`<base>.f32`) holding the parameters, then the EMA shadow.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nowcast_core::io::{header_path, payload_path, read_f32, write_f32};
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::params::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: usize,
    pub tensors: Vec<Tensor>,
    pub has_ema: bool,
    /// Free-form provenance (e.g. the run-config hash).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet,
    pub ema: Option<ParamSet>,
}

impl Checkpoint {
    /// Parameters used for evaluation.
    pub fn eval_params(&self) -> &ParamSet {
        self.ema.as_ref().unwrap_or(&self.params)
    }
}

pub fn save(
    base: &Path,
    config: &ModelConfig,
    step: usize,
    params: &ParamSet,
    ema: Option<&ParamSet>,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    if let Some(e) = ema {
        params.check_layout(e)?;
    }
    let manifest = Manifest {
        config: config.clone(),
        step,
        tensors: params.tensors.clone(),
        has_ema: ema.is_some(),
        meta,
    };
    fs::write(header_path(base), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let values = params.iter().chain(ema.into_iter().flat_map(|e| e.iter()));
    write_f32(&payload_path(base), values)?;
    Ok(())
}

fn fill(layout: &[Tensor], values: &mut impl Iterator<Item = f64>) -> ParamSet {
    let mut p = ParamSet::default();
    for t in layout {
        let mut t = Tensor::zeros(&t.name, &t.shape);
        t.data.iter_mut().for_each(|v| *v = values.next().unwrap());
        p.push(t);
    }
    p
}

pub fn load(base: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(header_path(base))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", header_path(base).display())))?;
    let values = read_f32(&payload_path(base))?;
    let n: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let want = n * if manifest.has_ema { 2 } else { 1 };
    if values.len() != want {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values, manifest declares {want}",
            values.len()
        )));
    }
    let mut it = values.into_iter();
    let params = fill(&manifest.tensors, &mut it);
    let ema = manifest.has_ema.then(|| fill(&manifest.tensors, &mut it));
    Ok(Checkpoint {
        manifest,
        params,
        ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, Micromodel, Mode};
    use nowcast_core::probcast::WeightForm;

    #[test]
    fn round_trip_rounds_to_f32() {
        let cfg = ModelConfig {
            t_in: 2,
            t_out: 2,
            k: 2,
            stem_block: 2,
            channels: 4,
            n_blocks: 1,
            mode: Mode::SinglePass,
            loss: LossKind::Ordinal,
            alpha: 10.0,
            weight_form: WeightForm::Ratio,
            input_cap: 32.0,
            seed: 4,
        };
        let m = Micromodel::new(cfg.clone()).unwrap();
        let p = m.init_params(true);
        let mut shadow = p.clone();
        shadow.scale(0.5);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let meta = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
        save(&base, &cfg, 7, &p, Some(&shadow), meta).unwrap();
        let c = load(&base).unwrap();
        assert_eq!(c.manifest.step, 7);
        assert_eq!(c.manifest.config, cfg);
        assert_eq!(c.manifest.meta["config_hash"], "abc");
        for (a, b) in c.params.iter().zip(p.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(c.eval_params(), c.ema.as_ref().unwrap());
        m.check_params(&c.params).unwrap();
        fs::write(payload_path(&base), [0u8; 4]).unwrap();
        assert!(load(&base).is_err());
    }
}
