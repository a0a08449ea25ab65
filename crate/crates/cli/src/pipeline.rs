//! Pipeline stages. Every stage reads and writes fixed paths below the output
//! directory and stamps its artifacts with the run-config hash.
//!
//! ```text
//! data/manifest.json, data/epNNNNN.{json,f32}      gen
//! splits.json                                      split
//! model/checkpoint.{json,f32}, model/loss_curve.csv train
//! thresholds.json                                  calibrate
//! predictions/<model>/...                          predict
//! reports/<model>.{json,csv}                       eval
//! attribution.json, attribution_map.{json,f32}     attribute
//! report.csv, summary.csv, series.csv              report
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView2, Axis};
use nowcast_core::baseline::{advect, estimate_motion, fill_missing, persistence, DEFAULT_SEARCH_RADIUS};
use nowcast_core::intensity::{exceedance_masks, BinSet};
use nowcast_core::io::{header_path, read_stack, write_stack};
use nowcast_core::probcast::{
    default_candidates, extract_intensity, ProbCube, ThresholdCalibrator, ThresholdTable,
};
use nowcast_core::raster::{RasterKind, SourceStack};
use nowcast_core::synthdata::{gen_sequence, make_splits, Split};
use nowcast_core::verify::{ReportBuilder, Sample, SkillReport};
use nowcast_model::attribution::{integrated_gradients, min_baseline, LogitTarget};
use nowcast_model::checkpoint::{self, Checkpoint};
use nowcast_model::train::{dataset_loss, loss_curve_csv};
use nowcast_model::{prepare_input, train, Micromodel, Mode, TrainSample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Micromodel,
    Persistence,
    Advection,
}

impl ModelName {
    pub const ALL: [ModelName; 3] = [ModelName::Micromodel, ModelName::Persistence, ModelName::Advection];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Micromodel => "micromodel",
            ModelName::Persistence => "persistence",
            ModelName::Advection => "advection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Gen,
    Split,
    Train,
    Calibrate,
    Predict,
    Eval,
    Attribute,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub id: usize,
    /// Issuance time, seconds from the start of the timeline.
    pub timestamp_s: i64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub config_hash: String,
    pub res_km: f64,
    pub step_min: i64,
    pub t_in: usize,
    pub t_out: usize,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSplit {
    pub id: usize,
    pub timestamp_s: i64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsArtifact {
    pub config_hash: String,
    pub labels: Vec<EpisodeSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsArtifact {
    pub config_hash: String,
    pub table: ThresholdTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionManifest {
    pub config_hash: String,
    pub model: ModelName,
    pub lead_min: Vec<i64>,
    pub episodes: Vec<usize>,
    pub has_probs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArtifact {
    pub config_hash: String,
    pub model: ModelName,
    pub report: SkillReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelScore {
    pub channel: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionArtifact {
    pub config_hash: String,
    pub episode: usize,
    pub lead: usize,
    pub class: usize,
    pub steps: usize,
    pub n_pixels: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_gap: f64,
    pub channels: Vec<ChannelScore>,
}

/// Everything a stage needs: the validated config, its hash and the flags.
pub struct Ctx {
    pub cfg: RunConfig,
    pub bins: BinSet,
    pub hash: String,
    pub out: PathBuf,
    pub force: bool,
    pub plot_data: bool,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn require_stack(base: &Path) -> Result<SourceStack> {
    let hp = header_path(base);
    if !hp.exists() {
        return Err(CliError::Missing(hp));
    }
    Ok(read_stack(base)?.0)
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf, force: bool, plot_data: bool) -> Result<Self> {
        let bins = cfg.bins.resolve()?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            bins,
            out,
            force,
            plot_data,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn check_hash(&self, path: &Path, found: &str) -> Result<()> {
        if found == self.hash || self.force {
            return Ok(());
        }
        Err(CliError::HashMismatch {
            path: path.display().to_string(),
            found: found.to_string(),
            expected: self.hash.clone(),
        })
    }

    fn data_manifest(&self) -> Result<DataManifest> {
        let p = self.path("data/manifest.json");
        let m: DataManifest = read_json(&p)?;
        self.check_hash(&p, &m.config_hash)?;
        Ok(m)
    }

    fn splits(&self) -> Result<SplitsArtifact> {
        let p = self.path("splits.json");
        let s: SplitsArtifact = read_json(&p)?;
        self.check_hash(&p, &s.config_hash)?;
        Ok(s)
    }

    fn episodes_in(&self, split: Split) -> Result<Vec<usize>> {
        Ok(self
            .splits()?
            .labels
            .iter()
            .filter(|l| l.split == split)
            .map(|l| l.id)
            .collect())
    }

    /// Rain-rate frames `(t_in + t_out) x H x W` of one episode.
    fn episode(&self, m: &DataManifest, id: usize) -> Result<Array3<f64>> {
        let e = m
            .episodes
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CliError::Schema(format!("episode {id} not in data manifest")))?;
        let stack = require_stack(&self.path("data").join(&e.file))?;
        Ok(stack.data.index_axis(Axis(1), 0).to_owned())
    }

    fn checkpoint(&self) -> Result<(Micromodel, Checkpoint)> {
        let base = self.path("model/checkpoint");
        let hp = header_path(&base);
        if !hp.exists() {
            return Err(CliError::Missing(hp));
        }
        let ck = checkpoint::load(&base)?;
        let found = ck.manifest.meta.get("config_hash").cloned().unwrap_or_default();
        self.check_hash(&hp, &found)?;
        let model = Micromodel::new(ck.manifest.config.clone())?;
        model.check_params(ck.eval_params())?;
        Ok((model, ck))
    }

    fn thresholds(&self) -> Result<ThresholdTable> {
        let p = self.path("thresholds.json");
        let t: ThresholdsArtifact = read_json(&p)?;
        self.check_hash(&p, &t.config_hash)?;
        t.table.check_compatible(&self.bins, &self.cfg.lead_min())?;
        Ok(t.table)
    }

    fn t_in(&self) -> usize {
        self.cfg.model.t_in
    }

    pub fn gen(&self) -> Result<()> {
        let c = &self.cfg;
        let (t_in, t_out) = (c.model.t_in, c.model.t_out);
        let n = (c.timeline.days * 24 / c.timeline.interval_h) as usize;
        let step = c.timeline.step_min;
        let ts: Vec<i64> = (0..(t_in + t_out) as i64).map(|i| (i - t_in as i64 + 1) * step).collect();
        let dir = self.path("data");
        fs::create_dir_all(&dir)?;
        let mut episodes = Vec::with_capacity(n);
        for id in 0..n {
            let mut scene = c.scene.clone();
            scene.seed = derive_seed(c.scene.seed, id as u64);
            let seq = gen_sequence(&scene, t_in + t_out)?;
            let stack = SourceStack::new(seq.insert_axis(Axis(1)), c.res_km, (0.0, 0.0), ts.clone())?;
            let file = format!("ep{id:05}");
            write_stack(&dir.join(&file), &stack, RasterKind::Rate)?;
            episodes.push(EpisodeEntry {
                id,
                timestamp_s: id as i64 * c.timeline.interval_h as i64 * 3600,
                file,
            });
        }
        write_json(
            &dir.join("manifest.json"),
            &DataManifest {
                config_hash: self.hash.clone(),
                res_km: c.res_km,
                step_min: step,
                t_in,
                t_out,
                episodes,
            },
        )
    }

    pub fn split(&self) -> Result<()> {
        let m = self.data_manifest()?;
        let ts: Vec<i64> = m.episodes.iter().map(|e| e.timestamp_s).collect();
        let a = make_splits(&ts, self.cfg.timeline.splits)?;
        let labels = m
            .episodes
            .iter()
            .zip(&a.labels)
            .map(|(e, &(t, split))| EpisodeSplit {
                id: e.id,
                timestamp_s: t,
                split,
            })
            .collect();
        write_json(
            &self.path("splits.json"),
            &SplitsArtifact {
                config_hash: self.hash.clone(),
                labels,
            },
        )
    }

    fn samples(&self, m: &DataManifest, ids: &[usize], model: &Micromodel) -> Result<Vec<TrainSample>> {
        let t_in = self.t_in();
        ids.iter()
            .map(|&id| {
                let f = self.episode(m, id)?;
                Ok(TrainSample {
                    input: prepare_input(f.slice(s![..t_in, .., ..]), &model.config)?,
                    targets: exceedance_masks(f.slice(s![t_in.., .., ..]), &self.bins),
                })
            })
            .collect()
    }

    pub fn train(&self) -> Result<()> {
        let m = self.data_manifest()?;
        let ids = self.episodes_in(Split::Train)?;
        if ids.is_empty() {
            return Err(CliError::Other("no training episodes".into()));
        }
        let model = Micromodel::new(self.cfg.model.clone())?;
        let data = self.samples(&m, &ids, &model)?;
        let init = model.init_params(false);
        let before = dataset_loss(&model, &init, &data)?;
        let out = train(&model, init, &data, &self.cfg.train)?;
        let after = dataset_loss(&model, out.eval_params(), &data)?;
        let meta = BTreeMap::from([
            ("config_hash".to_string(), self.hash.clone()),
            ("initial_loss".to_string(), format!("{before}")),
            ("final_loss".to_string(), format!("{after}")),
        ]);
        fs::create_dir_all(self.path("model"))?;
        checkpoint::save(
            &self.path("model/checkpoint"),
            &model.config,
            out.losses.len(),
            &out.params,
            out.ema.as_ref(),
            meta,
        )?;
        fs::write(self.path("model/loss_curve.csv"), loss_curve_csv(&out.losses))?;
        println!("trained on {} episodes: loss {before:.6} -> {after:.6}", data.len());
        Ok(())
    }

    fn model_probs(&self, model: &Micromodel, ck: &Checkpoint, frames: &Array3<f64>) -> Result<ProbCube> {
        let x = prepare_input(frames.slice(s![..self.t_in(), .., ..]), &model.config)?;
        Ok(model.predict(ck.eval_params(), &x)?)
    }

    pub fn calibrate(&self) -> Result<()> {
        let m = self.data_manifest()?;
        let (model, ck) = self.checkpoint()?;
        let ids = self.episodes_in(Split::Val)?;
        let mut cal = ThresholdCalibrator::new(&self.bins, self.cfg.lead_min(), default_candidates())?;
        for id in ids {
            let f = self.episode(&m, id)?;
            let p = self.model_probs(&model, &ck, &f)?;
            cal.add(&p, f.slice(s![self.t_in().., .., ..]))?;
        }
        let table = cal.finish()?;
        if !table.fallback.is_empty() {
            println!("{} (class, lead) cells had no events and use 0.5", table.fallback.len());
        }
        write_json(
            &self.path("thresholds.json"),
            &ThresholdsArtifact {
                config_hash: self.hash.clone(),
                table,
            },
        )
    }

    fn forecast_stack(&self, values: Array4<f64>) -> Result<SourceStack> {
        Ok(SourceStack::new(values, self.cfg.res_km, (0.0, 0.0), self.cfg.lead_min())?)
    }

    pub fn predict(&self, name: ModelName) -> Result<()> {
        let m = self.data_manifest()?;
        let ids = self.episodes_in(Split::Test)?;
        let t_in = self.t_in();
        let t_out = self.cfg.model.t_out;
        let dir = self.path(&format!("predictions/{}", name.as_str()));
        fs::create_dir_all(&dir)?;
        let micro = match name {
            ModelName::Micromodel => Some((self.checkpoint()?, self.thresholds()?)),
            _ => None,
        };
        for &id in &ids {
            let f = self.episode(&m, id)?;
            let last = f.index_axis(Axis(0), t_in - 1);
            let mut intensity = match (name, &micro) {
                (ModelName::Persistence, _) => persistence(last, t_out),
                (ModelName::Advection, _) => {
                    let hist: Vec<ArrayView2<f64>> = (0..t_in).map(|t| f.index_axis(Axis(0), t)).collect();
                    let est = estimate_motion(&hist, DEFAULT_SEARCH_RADIUS)?;
                    advect(last, &est.field, t_out)
                }
                (ModelName::Micromodel, Some(((model, ck), thr))) => {
                    let p = self.model_probs(model, ck, &f)?;
                    let probs = self.forecast_stack(p.0.clone())?;
                    write_stack(&dir.join(format!("ep{id:05}_probs")), &probs, RasterKind::Rate)?;
                    extract_intensity(&p, thr, &self.bins)?
                }
                _ => unreachable!("micromodel artifacts loaded above"),
            };
            // Sentinels in a forecast (no history coverage, advected from
            // outside the domain) are treated as no rain.
            fill_missing(&mut intensity, 0.0);
            let stack = self.forecast_stack(intensity.insert_axis(Axis(1)))?;
            write_stack(&dir.join(format!("ep{id:05}")), &stack, RasterKind::Rate)?;
        }
        write_json(
            &dir.join("manifest.json"),
            &PredictionManifest {
                config_hash: self.hash.clone(),
                model: name,
                lead_min: self.cfg.lead_min(),
                episodes: ids,
                has_probs: name == ModelName::Micromodel,
            },
        )
    }

    pub fn eval(&self, name: ModelName) -> Result<SkillReport> {
        let m = self.data_manifest()?;
        let dir = self.path(&format!("predictions/{}", name.as_str()));
        let mp = dir.join("manifest.json");
        let pm: PredictionManifest = read_json(&mp)?;
        self.check_hash(&mp, &pm.config_hash)?;
        let mut b = ReportBuilder::new(self.cfg.report_config(), &self.bins)?;
        for &id in &pm.episodes {
            let truth = self.episode(&m, id)?;
            let obs = truth.slice(s![self.t_in().., .., ..]);
            let pred = require_stack(&dir.join(format!("ep{id:05}")))?;
            let pred = pred.data.index_axis(Axis(1), 0).to_owned();
            let probs = if pm.has_probs {
                Some(ProbCube(require_stack(&dir.join(format!("ep{id:05}_probs")))?.data))
            } else {
                None
            };
            b.add(&Sample {
                pred: pred.view(),
                obs,
                probs: probs.as_ref(),
            })?;
        }
        let report = b.finish()?;
        let rdir = self.path("reports");
        write_json(
            &rdir.join(format!("{}.json", name.as_str())),
            &ReportArtifact {
                config_hash: self.hash.clone(),
                model: name,
                report: report.clone(),
            },
        )?;
        fs::write(rdir.join(format!("{}.csv", name.as_str())), report.to_csv())?;
        if self.plot_data {
            fs::write(rdir.join(format!("{}_series.csv", name.as_str())), report.plot_series_csv())?;
        }
        Ok(report)
    }

    pub fn attribute(&self) -> Result<AttributionArtifact> {
        let m = self.data_manifest()?;
        let (model, ck) = self.checkpoint()?;
        let id = *self
            .episodes_in(Split::Test)?
            .first()
            .ok_or_else(|| CliError::Other("no test episodes to attribute".into()))?;
        let f = self.episode(&m, id)?;
        let a = &self.cfg.attribute;
        let t_in = self.t_in();
        let obs = f.index_axis(Axis(0), t_in + a.lead);
        let edge = self.bins.edges()[a.class.min(self.bins.len() - 1)];
        let mut pixels: Vec<(usize, usize)> =
            obs.indexed_iter().filter(|(_, &r)| r >= edge).map(|(p, _)| p).collect();
        if pixels.is_empty() {
            pixels = obs.indexed_iter().map(|(p, _)| p).collect();
        }
        let n_pixels = pixels.len();
        let target = LogitTarget {
            model: &model,
            params: ck.eval_params(),
            lead: a.lead,
            class: a.class,
            pixels,
        };
        let x = target.network_input(&prepare_input(f.slice(s![..t_in, .., ..]), &model.config)?);
        let attr = integrated_gradients(&target, &x, &min_baseline(&x), a.steps)?;
        let mut names: Vec<String> = (0..t_in).map(|t| format!("rate_t-{}", t_in - 1 - t)).collect();
        names.extend((0..t_in).map(|t| format!("valid_t-{}", t_in - 1 - t)));
        if model.config.mode == Mode::LeadConditioned {
            names.extend((0..model.config.t_out).map(|l| format!("lead_{l}")));
        }
        let art = AttributionArtifact {
            config_hash: self.hash.clone(),
            episode: id,
            lead: a.lead,
            class: a.class,
            steps: a.steps,
            n_pixels,
            f_input: attr.f_input,
            f_baseline: attr.f_baseline,
            completeness_gap: attr.completeness_gap(),
            channels: names
                .into_iter()
                .zip(&attr.per_channel)
                .map(|(channel, &score)| ChannelScore { channel, score })
                .collect(),
        };
        write_json(&self.path("attribution.json"), &art)?;
        let map = SourceStack::new(attr.map.insert_axis(Axis(0)), self.cfg.res_km, (0.0, 0.0), vec![0])?;
        write_stack(&self.path("attribution_map"), &map, RasterKind::Rate)?;
        Ok(art)
    }

    /// Merges every available per-model report into comparison tables.
    pub fn report(&self) -> Result<()> {
        let mut found = Vec::new();
        for name in ModelName::ALL {
            let p = self.path(&format!("reports/{}.json", name.as_str()));
            if p.exists() {
                let r: ReportArtifact = read_json(&p)?;
                self.check_hash(&p, &r.config_hash)?;
                found.push(r);
            }
        }
        if found.is_empty() {
            return Err(CliError::Missing(self.path("reports/micromodel.json")));
        }
        let mut table = String::from("model,metric,threshold,lead_min,value\n");
        let mut summary = String::from("model,metric,value\n");
        let mut series = Vec::new();
        for r in &found {
            let model = r.model.as_str();
            for row in &r.report.rows {
                let thr = row.threshold.map_or_else(String::new, |t| format!("{t}"));
                let val = row.value.map_or_else(|| "nan".to_string(), |v| format!("{v}"));
                table.push_str(&format!("{model},{},{thr},{},{val}\n", row.metric, row.lead_min));
                series.push((row.metric.clone(), row.threshold, model, row.lead_min, val));
            }
            for (metric, v) in &r.report.macro_means {
                summary.push_str(&format!("{model},{metric},{v}\n"));
            }
        }
        fs::write(self.path("report.csv"), table)?;
        fs::write(self.path("summary.csv"), summary)?;
        if self.plot_data {
            series.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.unwrap_or(-1.0).total_cmp(&b.1.unwrap_or(-1.0)))
                    .then(a.2.cmp(b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut out = String::from("metric,threshold,model,lead_min,value\n");
            for (metric, thr, model, lead, val) in series {
                let thr = thr.map_or_else(String::new, |t| format!("{t}"));
                out.push_str(&format!("{metric},{thr},{model},{lead},{val}\n"));
            }
            fs::write(self.path("series.csv"), out)?;
        }
        Ok(())
    }

    /// Runs one stage. `model` selects the predictor for `predict`/`eval`.
    pub fn run(&self, stage: Stage, model: ModelName) -> Result<()> {
        match stage {
            Stage::Gen => self.gen(),
            Stage::Split => self.split(),
            Stage::Train => self.train(),
            Stage::Calibrate => self.calibrate(),
            Stage::Predict => self.predict(model),
            Stage::Eval => self.eval(model).map(|_| ()),
            Stage::Attribute => self.attribute().map(|_| ()),
            Stage::Report => self.report(),
        }
    }
}
