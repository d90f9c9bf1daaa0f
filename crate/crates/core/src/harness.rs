//! Experiment orchestration: config, the end-to-end pipeline, persistence
//! and plot tables.
//!
//! Every stage draws its randomness from the root seed through a named
//! stream, so any stage can be re-run on its own with identical results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::attack::{attack_dataset, max_distance, Algorithm, AttackConfig, AttackOutcome, Mode, Norm, Pipeline};
use crate::checkpoint::Checkpoint;
use crate::data::{generate_dataset, GlyphDataset};
use crate::diffprior::{elbo_var, train_prior, Denoiser, DiffPrior, Draw, PriorConfig};
use crate::dualenc::{self, DualEncoder, EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::purifier::{Purifier, PurifyConfig, Variant};
use crate::riskbench::{
    bootstrap_ordering, cos_scores, elbo_scores, grad_norm_term, risk_report, BootstrapOrdering, Cohort, Estimator,
    Histogram, RiskReport, ScoreSet,
};
use crate::rng::{derive_index, derive_seed};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::Templates;
use crate::zeroshot::{build_bank, evaluate, write_records_csv, ClassBank, Evaluation, Preprocess, SampleRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// `full`, `fast` or a path to a template file
    pub templates: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub norm: Norm,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub sigma: f64,
    pub eot_samples: usize,
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub chunk: usize,
    pub eps_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifySection {
    pub steps: usize,
    pub eta: f64,
    /// candidate step sizes; empty keeps `eta`
    pub eta_grid: Vec<f64>,
    pub guidance_start: usize,
    pub guidance_grid: Vec<f64>,
    pub guidance_tau: f64,
    pub literal_polar: bool,
    /// samples attacked through the diffusion variant (0 skips it)
    pub diff_samples: usize,
    pub diff_eta: f64,
    pub diff_mode: Mode,
    pub diff_eot: usize,
    pub t_lo: usize,
    pub t_hi: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub hidden: usize,
    pub temb_dim: usize,
    pub timesteps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// training embeddings used as the prior corpus
    pub corpus: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSection {
    pub enabled: bool,
    pub samples: usize,
    pub bins: usize,
    pub sigma: f64,
    pub elbo_samples: usize,
    pub t_lo: usize,
    pub t_hi: usize,
    pub resamples: usize,
    pub pixel_epochs: usize,
    pub pixel_corpus: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    pub force: bool,
    pub timing_samples: usize,
    pub timing_reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub attack: AttackSection,
    pub purify: PurifySection,
    pub prior: PriorSection,
    pub risk: RiskSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let att = AttackConfig::default();
        let pur = PurifyConfig::default();
        let pri = PriorConfig::default();
        Self {
            data: DataSection {
                n_train: 12288,
                n_val: 256,
                n_eval: 1024,
                classes: 10,
                height: 32,
                width: 32,
            },
            encoder: EncoderSection {
                dim: enc.dim,
                hidden: enc.hidden,
                token_dim: enc.token_dim,
                tau: enc.tau,
                epochs: 25,
                lr: 0.05,
                momentum: 0.9,
                batch: 128,
                templates: "full".into(),
            },
            attack: AttackSection {
                norm: att.norm,
                eps: att.eps,
                alpha: att.alpha,
                steps: att.steps,
                sigma: att.sigma,
                eot_samples: att.eot_samples,
                mode: Mode::Adaptive,
                algorithm: Algorithm::Pgd,
                chunk: 64,
                eps_grid: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            },
            purify: PurifySection {
                steps: pur.steps,
                eta: pur.eta,
                eta_grid: vec![0.1, 1.0, 10.0, 30.0, 100.0],
                guidance_start: pur.guidance_start,
                guidance_grid: vec![0.0, 1e-4],
                guidance_tau: pur.tau,
                literal_polar: false,
                diff_samples: 256,
                diff_eta: pur.eta,
                diff_mode: Mode::Bpda,
                diff_eot: 4,
                t_lo: pur.t_lo,
                t_hi: pur.t_hi,
            },
            prior: PriorSection {
                hidden: pri.hidden,
                temb_dim: pri.temb_dim,
                timesteps: pri.timesteps,
                epochs: pri.epochs,
                lr: pri.lr,
                momentum: pri.momentum,
                batch: pri.batch,
                corpus: 4096,
            },
            risk: RiskSection {
                enabled: true,
                samples: 512,
                bins: 64,
                sigma: 1.0,
                elbo_samples: 8,
                t_lo: 1,
                t_hi: pri.timesteps,
                resamples: 10,
                pixel_epochs: 10,
                pixel_corpus: 4096,
            },
            run: RunSection {
                seed: 17,
                out_dir: "runs".into(),
                force: false,
                timing_samples: 100,
                timing_reps: 3,
            },
        }
    }
}

/// Keys that locate a run rather than define it.
const UNHASHED: [(&str, &str); 2] = [("run", "out_dir"), ("run", "force")];

fn parse_number(raw: &str, integer: bool) -> Option<Number> {
    if integer {
        return raw.parse::<u64>().ok().map(Number::from);
    }
    let v = match raw.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => raw.parse::<f64>().ok()?,
    };
    Number::from_f64(v)
}

fn coerce(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => raw.parse().ok().map(Value::Bool),
        Value::Number(n) => parse_number(raw, n.is_u64()).map(Value::Number),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(_) => {
            if raw.is_empty() {
                return Some(Value::Array(vec![]));
            }
            raw.split(',')
                .map(|p| parse_number(p.trim(), false).map(Value::Number))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        _ => None,
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines under `[section]` headers on top of the
    /// defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::config(format!("line {}: key outside a section", n + 1)))?;
            set_in(&mut value, sec, k.trim(), v.trim())?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Overrides one `section.key` with a raw string value.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| Error::config(format!("`{path}` is not of the form section.key")))?;
        let mut value = serde_json::to_value(&*self)?;
        set_in(&mut value, sec, key, raw)?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Every `section.key` accepted by [`ExperimentConfig::set`].
    pub fn keys() -> Vec<String> {
        let value = serde_json::to_value(Self::default()).expect("config serializes");
        let mut out = Vec::new();
        if let Value::Object(sections) = value {
            for (s, body) in sections {
                if let Value::Object(keys) = body {
                    out.extend(keys.keys().map(|k| format!("{s}.{k}")));
                }
            }
        }
        out
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    fn render(&self, all: bool) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        if let Value::Object(sections) = value {
            for (s, body) in sections {
                out.push_str(&format!("[{s}]\n"));
                if let Value::Object(keys) = body {
                    for (k, v) in keys {
                        if all || !UNHASHED.contains(&(s.as_str(), k.as_str())) {
                            out.push_str(&format!("{k} = {}\n", render_value(&v)));
                        }
                    }
                }
            }
        }
        out
    }

    /// Hex prefix of the SHA-256 of the canonical text, ignoring where the
    /// run is written.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render(false).as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_train == 0 || d.n_eval == 0 {
            return Err(Error::config("train and eval splits must be non-empty"));
        }
        self.encoder_config().validate()?;
        self.attack_config(self.attack.eps).validate()?;
        self.purify_config(self.purify.eta, 0.0).validate()?;
        self.prior_config().validate()?;
        Templates::by_name(&self.encoder.templates)?;
        if self.purify.eta_grid.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::config("eta_grid entries must be >= 0"));
        }
        if self.purify.guidance_grid.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("guidance_grid entries must be >= 0"));
        }
        if self.attack.eps_grid.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::config("eps_grid entries must be >= 0"));
        }
        if self.purify.diff_eot == 0 || self.attack.chunk == 0 {
            return Err(Error::config("diff_eot and chunk must be positive"));
        }
        let r = &self.risk;
        if r.enabled && (r.samples > d.n_eval || r.elbo_samples == 0 || r.bins == 0) {
            return Err(Error::config("risk needs samples <= n_eval and positive bins and elbo_samples"));
        }
        if r.t_lo > r.t_hi || r.t_hi > self.prior.timesteps || self.purify.t_hi > self.prior.timesteps {
            return Err(Error::config("timestep ranges must lie within the prior schedule"));
        }
        if self.run.timing_reps == 0 {
            return Err(Error::config("timing_reps must be positive"));
        }
        Ok(())
    }

    fn stream(&self, name: &str) -> u64 {
        derive_seed(self.run.seed, name)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            dim: e.dim,
            hidden: e.hidden,
            token_dim: e.token_dim,
            tau: e.tau,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let e = &self.encoder;
        TrainConfig {
            epochs: e.epochs,
            lr: e.lr,
            momentum: e.momentum,
            batch: e.batch,
            seed: self.stream("train"),
        }
    }

    pub fn attack_config(&self, eps: f64) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            norm: a.norm,
            eps,
            alpha: a.alpha,
            steps: a.steps,
            sigma: a.sigma,
            eot_samples: a.eot_samples,
            mode: a.mode,
            seed: self.stream("attack"),
        }
    }

    pub fn purify_config(&self, eta: f64, guidance_w: f64) -> PurifyConfig {
        let p = &self.purify;
        PurifyConfig {
            variant: Variant::Cos,
            steps: p.steps,
            eta,
            t_lo: p.t_lo,
            t_hi: p.t_hi,
            guidance_w,
            guidance_start: p.guidance_start,
            tau: p.guidance_tau,
            seed: self.stream("purify"),
            literal_polar: p.literal_polar,
        }
    }

    pub fn diff_purify_config(&self) -> PurifyConfig {
        PurifyConfig {
            variant: Variant::Diff,
            ..self.purify_config(self.purify.diff_eta, 0.0)
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        let p = &self.prior;
        PriorConfig {
            hidden: p.hidden,
            temb_dim: p.temb_dim,
            timesteps: p.timesteps,
            epochs: p.epochs,
            lr: p.lr,
            momentum: p.momentum,
            batch: p.batch,
            seed: self.stream("prior"),
        }
    }

    pub fn pixel_prior_config(&self) -> PriorConfig {
        PriorConfig {
            epochs: self.risk.pixel_epochs,
            seed: self.stream("pixel-prior"),
            ..self.prior_config()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.run.out_dir).join(self.hash())
    }
}

fn set_in(value: &mut Value, sec: &str, key: &str, raw: &str) -> Result<()> {
    let body: &mut Map<String, Value> = value
        .get_mut(sec)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| Error::config(format!("unknown section `{sec}`")))?;
    let slot = body
        .get_mut(key)
        .ok_or_else(|| Error::config(format!("unknown key `{sec}.{key}`")))?;
    *slot = coerce(slot, raw).ok_or_else(|| Error::config(format!("bad value `{raw}` for `{sec}.{key}`")))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub val_clean_accuracy: f64,
    pub val_robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub eps: f64,
    pub undefended_robust_accuracy: f64,
    pub max_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRow {
    pub guidance_w: f64,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseResult {
    pub name: String,
    pub variant: Variant,
    pub eta: f64,
    pub steps: usize,
    pub guidance_w: f64,
    pub attack_mode: Mode,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// accuracy on inputs attacked without the purifier in the loop
    pub direct_robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorHistogram {
    pub estimator: Estimator,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorLoss {
    pub initial: f64,
    pub first_epoch: f64,
    pub final_epoch: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Wall-clock measurements; excluded from run comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub samples: usize,
    pub classify_only_s: f64,
    pub classify_cos_s: f64,
    pub classify_diff_s: Option<f64>,
    pub cos_ratio: f64,
    pub diff_ratio: Option<f64>,
    pub stages: Vec<StageTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub version: String,
    pub config: String,
    pub clean_accuracy: f64,
    pub undefended_robust_accuracy: f64,
    pub eta_selected: f64,
    pub eta_sweep: Vec<EtaRow>,
    pub eps_sweep: Vec<EpsRow>,
    pub guidance_sweep: Vec<GuidanceRow>,
    pub defenses: Vec<DefenseResult>,
    pub risk: Vec<RiskReport>,
    pub histograms: Vec<EstimatorHistogram>,
    pub kl_ordering: Option<BootstrapOrdering>,
    pub encoder_loss: Vec<f64>,
    pub prior_loss: PriorLoss,
    /// per-sample results of the primary defense under attack
    pub records: Vec<SampleRecord>,
    pub timings: Timings,
}

impl RunReport {
    pub fn defense(&self, name: &str) -> Option<&DefenseResult> {
        self.defenses.iter().find(|d| d.name == name)
    }

    /// The report with every wall-clock field cleared.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}

/// One named threshold on a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Headline thresholds of the reference run.
pub fn check_thresholds(r: &RunReport) -> Vec<ThresholdCheck> {
    let at_least = |name, value: f64, bound| ThresholdCheck {
        name,
        value,
        bound,
        pass: value >= bound,
    };
    let at_most = |name, value: f64, bound| ThresholdCheck {
        name,
        value,
        bound,
        pass: value <= bound,
    };
    let mut out = vec![
        at_least("clean_accuracy", r.clean_accuracy, 0.90),
        at_most("undefended_robust_accuracy", r.undefended_robust_accuracy, 0.10),
    ];
    if let Some(cos) = r.defense("cos") {
        out.push(at_least("cos_robust_accuracy", cos.robust_accuracy, 0.60));
        out.push(at_most("cos_clean_degradation", r.clean_accuracy - cos.clean_accuracy, 0.03));
    }
    if let [unguided, guided, ..] = r.guidance_sweep.as_slice() {
        out.push(at_least(
            "guidance_delta",
            guided.robust_accuracy - unguided.robust_accuracy,
            -0.02,
        ));
    }
    if let Some(k) = &r.kl_ordering {
        out.push(at_least("kl_ordering_lower_quantile", k.lower_quantile, f64::MIN_POSITIVE));
    }
    if r.timings.samples > 0 {
        out.push(at_most("cos_time_ratio", r.timings.cos_ratio, 5.0));
    }
    out
}

/// The three splits of a run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: GlyphDataset,
    pub val: GlyphDataset,
    pub eval: GlyphDataset,
}

fn ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn first(ds: &GlyphDataset, n: usize) -> GlyphDataset {
    ds.subset(&ids(n.min(ds.len())))
}

/// Stage-level access to a run directory; artifacts are cached on disk
/// under the config hash.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    stages: Vec<StageTime>,
    checkpoints: Vec<(String, Checkpoint)>,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        Ok(Self {
            cfg,
            dir,
            stages: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn timed<R>(&mut self, stage: &'static str, seed: u64, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage, seed))?;
        self.stages.push(StageTime {
            stage: stage.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn cached(&self, name: &str) -> Option<Checkpoint> {
        if self.cfg.run.force {
            return None;
        }
        Checkpoint::load(self.checkpoint_path(name)).ok()
    }

    pub fn datasets(&mut self) -> Result<Datasets> {
        let seed = self.cfg.run.seed;
        self.timed("dataset", seed, |s| {
            let d = &s.cfg.data;
            let gen = |name: &str, n: usize| generate_dataset(s.cfg.stream(name), n, d.classes, d.height, d.width);
            Ok(Datasets {
                train: gen("dataset-train", d.n_train)?,
                val: gen("dataset-val", d.n_val)?,
                eval: gen("dataset-eval", d.n_eval)?,
            })
        })
    }

    /// Trained encoder, read from the run directory when present.
    pub fn encoder(&mut self, data: &Datasets) -> Result<(DualEncoder<f32>, Vec<f64>)> {
        let seed = self.cfg.stream("train");
        self.timed("train-encoder", seed, |s| {
            if let Some(c) = s.cached("encoder") {
                let enc = DualEncoder::from_checkpoint(&c)?;
                let curve = c
                    .meta("loss_curve")
                    .ok()
                    .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect())
                    .unwrap_or_default();
                return Ok((enc, curve));
            }
            let out = dualenc::train(&data.train, &s.cfg.encoder_config(), &s.cfg.train_config())?;
            let mut c = out.encoder.to_checkpoint();
            c.meta.insert(
                "loss_curve".into(),
                out.loss_curve.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","),
            );
            s.keep("encoder", c);
            Ok((out.encoder, out.loss_curve))
        })
    }

    pub fn bank(&self, enc: &DualEncoder<f32>, data: &Datasets) -> Result<ClassBank<f32>> {
        build_bank(enc, &data.eval.class_names, &Templates::by_name(&self.cfg.encoder.templates)?)
    }

    /// Latent diffusion prior over clean training embeddings, conditioned
    /// on the blank-template embedding.
    pub fn prior(&mut self, enc: &DualEncoder<f32>, bank: &ClassBank<f32>, data: &Datasets) -> Result<(DiffPrior<f32>, PriorLoss)> {
        let seed = self.cfg.stream("prior");
        self.timed("train-prior", seed, |s| {
            if let Some(c) = s.cached("prior") {
                return Ok((DiffPrior::from_checkpoint(&c)?, prior_loss_from(&c)));
            }
            let corpus = enc.encode_images(&first(&data.train, s.cfg.prior.corpus).flat_images())?;
            let out = train_prior(&corpus, Some(bank.blank.clone()), &s.cfg.prior_config())?;
            let loss = prior_loss(&out.loss_curve, out.initial_loss);
            s.keep("prior", with_loss_meta(out.prior.to_checkpoint(), &loss));
            Ok((out.prior, loss))
        })
    }

    /// Unconditional twin of the prior over raw pixels.
    pub fn pixel_prior(&mut self, data: &Datasets) -> Result<DiffPrior<f32>> {
        let seed = self.cfg.stream("pixel-prior");
        self.timed("train-pixel-prior", seed, |s| {
            if let Some(c) = s.cached("pixel_prior") {
                return DiffPrior::from_checkpoint(&c);
            }
            let corpus = first(&data.train, s.cfg.risk.pixel_corpus).flat_images();
            let out = train_prior(&corpus, None, &s.cfg.pixel_prior_config())?;
            let loss = prior_loss(&out.loss_curve, out.initial_loss);
            s.keep("pixel_prior", with_loss_meta(out.prior.to_checkpoint(), &loss));
            Ok(out.prior)
        })
    }

    fn keep(&mut self, name: &str, c: Checkpoint) {
        self.checkpoints.retain(|(n, _)| n != name);
        self.checkpoints.push((name.into(), c));
    }

    /// Attacks the first `n` rows of `ds` through `pipe`.
    pub fn attack(&self, pipe: &Pipeline<'_, f32>, ds: &GlyphDataset, eps: f64, eot: usize) -> Result<AttackOutcome<f32>> {
        let cfg = AttackConfig {
            eot_samples: eot,
            ..self.cfg.attack_config(eps)
        };
        attack_dataset(
            pipe,
            &ds.flat_images(),
            &ds.labels,
            &ids(ds.len()),
            &cfg,
            self.cfg.attack.algorithm,
            self.cfg.attack.chunk,
        )
    }

    /// Clean and adaptive-attack validation accuracy for every step size
    /// in the grid.
    pub fn eta_sweep(&self, enc: &DualEncoder<f32>, bank: &ClassBank<f32>, val: &GlyphDataset) -> Result<Vec<EtaRow>> {
        if val.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.cfg;
        let val_x = val.flat_images();
        let plain = Pipeline::new(enc, bank);
        cfg.purify
            .eta_grid
            .iter()
            .map(|&eta| {
                let pc = cfg.purify_config(eta, 0.0);
                let p = Purifier::new(&pc, bank, None)?;
                let adv = self.attack(&plain.with_purifier(p, cfg.attack.mode), val, cfg.attack.eps, 1)?;
                Ok(EtaRow {
                    eta,
                    val_clean_accuracy: accuracy(enc, bank, &val_x, &val.labels, Some(&p))?.accuracy,
                    val_robust_accuracy: accuracy(enc, bank, &adv.x_adv, &val.labels, Some(&p))?.accuracy,
                })
            })
            .collect()
    }

    /// Writes checkpoints trained in this session, stamped with the config
    /// hash.
    pub fn save_checkpoints(&self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(self.dir.join("checkpoints"))?;
        let hash = self.cfg.hash();
        let mut out = Vec::new();
        for (name, c) in &self.checkpoints {
            let mut c = c.clone();
            c.meta.insert("config_hash".into(), hash.clone());
            let path = self.checkpoint_path(name);
            c.save(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    /// Writes the checkpoints, the report, the per-sample table and the plot
    /// tables.
    pub fn persist(&mut self, report: &RunReport) -> Result<()> {
        self.save_checkpoints()?;
        fs::write(self.dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
        fs::write(self.dir.join("config.txt"), &report.config)?;
        let mut csv = Vec::new();
        writeln!(csv, "# config_hash={}", report.config_hash)?;
        write_records_csv(&mut csv, &report.records)?;
        fs::write(self.dir.join("samples.csv"), csv)?;
        emit_plots(std::slice::from_ref(report), self.dir.join("plots"))?;
        Ok(())
    }

    pub fn stage_times(&self) -> &[StageTime] {
        &self.stages
    }
}

fn prior_loss(curve: &[f64], initial: f64) -> PriorLoss {
    PriorLoss {
        initial,
        first_epoch: curve.first().copied().unwrap_or(initial),
        final_epoch: curve.last().copied().unwrap_or(initial),
    }
}

fn with_loss_meta(mut c: Checkpoint, l: &PriorLoss) -> Checkpoint {
    for (k, v) in [("loss_initial", l.initial), ("loss_first", l.first_epoch), ("loss_final", l.final_epoch)] {
        c.meta.insert(k.into(), format!("{v:?}"));
    }
    c
}

fn prior_loss_from(c: &Checkpoint) -> PriorLoss {
    let get = |k: &str| c.meta(k).ok().and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
    PriorLoss {
        initial: get("loss_initial"),
        first_epoch: get("loss_first"),
        final_epoch: get("loss_final"),
    }
}

fn accuracy(
    enc: &DualEncoder<f32>,
    bank: &ClassBank<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    pre: Option<&dyn Preprocess<f32>>,
) -> Result<Evaluation> {
    evaluate(enc, bank, x, labels, pre)
}

/// Picks the step size with the best validation robustness among those
/// that keep validation clean accuracy within 0.03 of undefended (ties go
/// to the higher clean accuracy, then the smaller step). When no step size
/// qualifies, the one with the highest clean accuracy is used.
pub fn select_eta(rows: &[EtaRow], undefended_clean: f64) -> Option<f64> {
    let ok: Vec<&EtaRow> = rows
        .iter()
        .filter(|r| undefended_clean - r.val_clean_accuracy <= 0.03)
        .collect();
    let by_clean = |a: &&EtaRow, b: &&EtaRow| {
        a.val_clean_accuracy
            .total_cmp(&b.val_clean_accuracy)
            .then(b.eta.total_cmp(&a.eta))
    };
    if ok.is_empty() {
        return rows.iter().max_by(by_clean).map(|r| r.eta);
    }
    ok.into_iter()
        .max_by(|a, b| {
            a.val_robust_accuracy
                .total_cmp(&b.val_robust_accuracy)
                .then_with(|| by_clean(a, b))
        })
        .map(|r| r.eta)
}

fn min_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best.max(1e-9))
}

/// Executes the full pipeline and persists the results. An existing report
/// for the same config hash is returned as is unless `run.force` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut s = Session::new(cfg.clone())?;
    let report_path = s.dir.join("report.json");
    if !cfg.run.force && report_path.exists() {
        return RunReport::load(report_path);
    }
    let report = execute(&mut s)?;
    s.persist(&report)?;
    Ok(report)
}

/// Runs every stage without touching the disk cache for the report.
pub fn execute(s: &mut Session) -> Result<RunReport> {
    let cfg = s.cfg.clone();
    let data = s.datasets()?;
    let (enc, encoder_loss) = s.encoder(&data)?;
    let bank = s.bank(&enc, &data)?;
    let eval_x = data.eval.flat_images();
    let labels = &data.eval.labels;
    let attack_seed = cfg.stream("attack");

    let clean = s.timed("eval", cfg.run.seed, |_| accuracy(&enc, &bank, &eval_x, labels, None))?;
    let plain = Pipeline::new(&enc, &bank);

    let undefended = s.timed("attack", attack_seed, |s| s.attack(&plain, &data.eval, cfg.attack.eps, 1))?;
    let undefended_acc = accuracy(&enc, &bank, &undefended.x_adv, labels, None)?.accuracy;

    let eps_sweep = s.timed("eps-sweep", attack_seed, |s| {
        cfg.attack
            .eps_grid
            .iter()
            .map(|&eps| {
                let x_adv = if eps == cfg.attack.eps {
                    undefended.x_adv.clone()
                } else {
                    s.attack(&plain, &data.eval, eps, 1)?.x_adv
                };
                Ok(EpsRow {
                    eps,
                    undefended_robust_accuracy: accuracy(&enc, &bank, &x_adv, labels, None)?.accuracy,
                    max_distance: max_distance(&eval_x, &x_adv, cfg.attack.norm),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let eta_sweep = s.timed("eta-sweep", cfg.stream("purify"), |s| s.eta_sweep(&enc, &bank, &data.val))?;
    let val_clean = if data.val.is_empty() {
        0.0
    } else {
        accuracy(&enc, &bank, &data.val.flat_images(), &data.val.labels, None)?.accuracy
    };
    let eta = select_eta(&eta_sweep, val_clean).unwrap_or(cfg.purify.eta);

    let mut defenses = Vec::new();
    let mut guidance_sweep = Vec::new();
    let mut records = Vec::new();
    s.timed("purify", cfg.stream("purify"), |s| {
        for &w in &cfg.purify.guidance_grid {
            let pc = cfg.purify_config(eta, w);
            let p = Purifier::new(&pc, &bank, None)?;
            let adv = s.attack(&plain.with_purifier(p, cfg.attack.mode), &data.eval, cfg.attack.eps, 1)?;
            let robust = accuracy(&enc, &bank, &adv.x_adv, labels, Some(&p))?;
            guidance_sweep.push(GuidanceRow {
                guidance_w: w,
                robust_accuracy: robust.accuracy,
            });
            let name = if w == 0.0 { "cos".to_string() } else { format!("cos-guided-{w}") };
            defenses.push(DefenseResult {
                name,
                variant: Variant::Cos,
                eta,
                steps: pc.steps,
                guidance_w: w,
                attack_mode: cfg.attack.mode,
                samples: labels.len(),
                clean_accuracy: accuracy(&enc, &bank, &eval_x, labels, Some(&p))?.accuracy,
                robust_accuracy: robust.accuracy,
                direct_robust_accuracy: accuracy(&enc, &bank, &undefended.x_adv, labels, Some(&p))?.accuracy,
            });
            if w == 0.0 {
                records = robust.records;
            }
        }
        Ok(())
    })?;

    let needs_prior = cfg.purify.diff_samples > 0 || cfg.risk.enabled;
    let prior = if needs_prior {
        Some(s.prior(&enc, &bank, &data)?)
    } else {
        None
    };
    let prior_loss = prior.as_ref().map(|p| p.1.clone()).unwrap_or_default();

    if let (Some((prior, _)), true) = (&prior, cfg.purify.diff_samples > 0) {
        let pc = cfg.diff_purify_config();
        let diff = s.timed("purify-diff", pc.seed, |s| {
            let p = Purifier::new(&pc, &bank, Some(prior))?;
            let sub = first(&data.eval, cfg.purify.diff_samples);
            let sub_x = sub.flat_images();
            let adv = s.attack(&plain.with_purifier(p, cfg.purify.diff_mode), &sub, cfg.attack.eps, cfg.purify.diff_eot)?;
            let direct = undefended.x_adv.select_rows(&ids(sub.len()));
            Ok(DefenseResult {
                name: "diff".into(),
                variant: Variant::Diff,
                eta: pc.eta,
                steps: pc.steps,
                guidance_w: 0.0,
                attack_mode: cfg.purify.diff_mode,
                samples: sub.len(),
                clean_accuracy: accuracy(&enc, &bank, &sub_x, &sub.labels, Some(&p))?.accuracy,
                robust_accuracy: accuracy(&enc, &bank, &adv.x_adv, &sub.labels, Some(&p))?.accuracy,
                direct_robust_accuracy: accuracy(&enc, &bank, &direct, &sub.labels, Some(&p))?.accuracy,
            })
        })?;
        defenses.push(diff);
    }

    let (risk, histograms, kl_ordering) = match (&prior, cfg.risk.enabled) {
        (Some((prior, _)), true) => {
            let pixel = s.pixel_prior(&data)?;
            s.timed("risk", cfg.stream("risk"), |_| {
                risk_stage(&cfg, &enc, &bank, prior, &pixel, &eval_x, &undefended.x_adv)
            })?
        }
        _ => (Vec::new(), Vec::new(), None),
    };

    let mut timings = s.timed("timing", cfg.run.seed, |_| {
        measure_timings(&cfg, &enc, &bank, prior.as_ref().map(|p| &p.0), &eval_x, eta)
    })?;
    timings.stages = s.stage_times().to_vec();

    Ok(RunReport {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.to_text(),
        clean_accuracy: clean.accuracy,
        undefended_robust_accuracy: undefended_acc,
        eta_selected: eta,
        eta_sweep,
        eps_sweep,
        guidance_sweep,
        defenses,
        risk,
        histograms,
        kl_ordering,
        encoder_loss,
        prior_loss,
        records,
        timings,
    })
}

type RiskOutputs = (Vec<RiskReport>, Vec<EstimatorHistogram>, Option<BootstrapOrdering>);

/// Score populations, KL and gradient-norm terms for the three estimators
/// on matched clean/adversarial corpora.
pub fn risk_stage(
    cfg: &ExperimentConfig,
    enc: &DualEncoder<f32>,
    bank: &ClassBank<f32>,
    prior: &DiffPrior<f32>,
    pixel: &DiffPrior<f32>,
    clean_x: &Tensor<f32>,
    adv_x: &Tensor<f32>,
) -> Result<RiskOutputs> {
    let r = &cfg.risk;
    let idx = ids(r.samples);
    let ben_x = clean_x.select_rows(&idx);
    let adv_x = adv_x.select_rows(&idx);
    let ben_z = enc.encode_images(&ben_x)?;
    let adv_z = enc.encode_images(&adv_x)?;
    let dt = cfg.attack.eps / cfg.attack.steps.max(1) as f64;
    let seed = cfg.stream("risk");
    let t_range = (r.t_lo, r.t_hi);

    let sets: Vec<(ScoreSet, ScoreSet)> = vec![
        (
            elbo_scores(pixel, &adv_x, &idx, t_range, r.elbo_samples, seed, Cohort::Adv, Estimator::PixelElbo)?,
            elbo_scores(pixel, &ben_x, &idx, t_range, r.elbo_samples, seed, Cohort::Ben, Estimator::PixelElbo)?,
        ),
        (
            elbo_scores(prior, &adv_z, &idx, t_range, r.elbo_samples, seed, Cohort::Adv, Estimator::LatentDiffElbo)?,
            elbo_scores(prior, &ben_z, &idx, t_range, r.elbo_samples, seed, Cohort::Ben, Estimator::LatentDiffElbo)?,
        ),
        (
            cos_scores(&adv_z, bank.blank.data(), Cohort::Adv)?,
            cos_scores(&ben_z, bank.blank.data(), Cohort::Ben)?,
        ),
    ];

    let blank64: Tensor<f64> = bank.blank.cast();
    let draw_t = (r.t_lo + r.t_hi) / 2;
    let pixel64 = pixel.cast::<f64>();
    let prior64 = prior.cast::<f64>();
    let grad_terms = [
        grad_norm_term(&adv_x.cast(), |t, x, rows| elbo_block(&pixel64, t, x, rows, draw_t, seed), r.sigma, dt)?,
        grad_norm_term(&adv_z.cast(), |t, z, rows| elbo_block(&prior64, t, z, rows, draw_t, seed), r.sigma, dt)?,
        grad_norm_term(&adv_z.cast(), |t, z, _| z.cosine_rows(t.constant(blank64.clone())), r.sigma, dt)?,
    ];

    let mut reports = Vec::new();
    let mut hists = Vec::new();
    for ((adv, ben), g) in sets.iter().zip(grad_terms) {
        reports.push(risk_report(adv, ben, g, r.sigma, dt, r.bins)?);
        hists.push(EstimatorHistogram {
            estimator: adv.estimator,
            histogram: Histogram::build(adv.scores(), ben.scores(), r.bins)?,
        });
    }
    let ordering = bootstrap_ordering(
        (&sets[2].0, &sets[2].1),
        (&sets[0].0, &sets[0].1),
        r.bins,
        r.resamples,
        derive_seed(seed, "bootstrap"),
    )?;
    Ok((reports, hists, Some(ordering)))
}

/// Single-draw ELBO per row at timestep `t`, noise keyed by row index.
fn elbo_block<'t>(
    den: &DiffPrior<f64>,
    tape: &'t Tape<f64>,
    x: Var<'t, f64>,
    rows: &[usize],
    t: usize,
    seed: u64,
) -> Result<Var<'t, f64>> {
    let d = den.data_dim();
    let draws: Vec<Draw<f64>> = rows.iter().map(|&i| Draw::at(t, d, derive_index(seed, i as u64))).collect();
    elbo_var(den, tape, x, &draws)
}

/// Classify-only versus classify+purify wall clock on the first
/// `timing_samples` evaluation images.
pub fn measure_timings(
    cfg: &ExperimentConfig,
    enc: &DualEncoder<f32>,
    bank: &ClassBank<f32>,
    prior: Option<&DiffPrior<f32>>,
    eval_x: &Tensor<f32>,
    eta: f64,
) -> Result<Timings> {
    let n = cfg.run.timing_samples.min(eval_x.rows());
    if n == 0 {
        return Ok(Timings::default());
    }
    let x = eval_x.select_rows(&ids(n));
    let row_ids = ids(n);
    let reps = cfg.run.timing_reps;
    let classify = |p: Option<&Purifier<'_, f32>>| -> Result<()> {
        let mut z = enc.encode_images(&x)?;
        if let Some(p) = p {
            z = p.purify(&z, &row_ids)?;
        }
        crate::zeroshot::classify_batch(&z, bank)?;
        Ok(())
    };
    let base = min_time(reps, || classify(None))?;
    let pc = cfg.purify_config(eta, 0.0);
    let cos = Purifier::new(&pc, bank, None)?;
    let with_cos = min_time(reps, || classify(Some(&cos)))?;
    let dc = cfg.diff_purify_config();
    let with_diff = match prior {
        Some(pr) => {
            let diff = Purifier::new(&dc, bank, Some(pr))?;
            Some(min_time(reps, || classify(Some(&diff)))?)
        }
        None => None,
    };
    Ok(Timings {
        samples: n,
        classify_only_s: base,
        classify_cos_s: with_cos,
        classify_diff_s: with_diff,
        cos_ratio: with_cos / base,
        diff_ratio: with_diff.map(|d| d / base),
        stages: Vec::new(),
    })
}

fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<PathBuf> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(path.to_path_buf())
}

/// Writes one CSV per figure family into `dir`; each file starts with its
/// column header and carries the config hash in the first column.
pub fn emit_plots(reports: &[RunReport], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Empty("report set"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    paths.push(write_table(
        &dir.join("kl_histograms.csv"),
        "config_hash,estimator,bin,lo,hi,adv_count,ben_count",
        reports.iter().flat_map(|r| {
            r.histograms.iter().flat_map(move |h| {
                let hist = &h.histogram;
                (0..hist.bins()).map(move |b| {
                    format!(
                        "{},{},{b},{:.9e},{:.9e},{},{}",
                        r.config_hash, h.estimator, hist.edges[b], hist.edges[b + 1], hist.adv[b], hist.ben[b]
                    )
                })
            })
        }),
    )?);
    paths.push(write_table(
        &dir.join("step_size_sweep.csv"),
        "config_hash,eta,val_clean_accuracy,val_robust_accuracy,selected",
        reports.iter().flat_map(|r| {
            r.eta_sweep.iter().map(move |e| {
                format!(
                    "{},{},{:.6},{:.6},{}",
                    r.config_hash,
                    e.eta,
                    e.val_clean_accuracy,
                    e.val_robust_accuracy,
                    e.eta == r.eta_selected
                )
            })
        }),
    )?);
    paths.push(write_table(
        &dir.join("eps_sweep.csv"),
        "config_hash,eps,undefended_robust_accuracy,max_distance",
        reports.iter().flat_map(|r| {
            r.eps_sweep.iter().map(move |e| {
                format!(
                    "{},{:.9},{:.6},{:.9}",
                    r.config_hash, e.eps, e.undefended_robust_accuracy, e.max_distance
                )
            })
        }),
    )?);
    paths.push(write_table(
        &dir.join("guidance_sweep.csv"),
        "config_hash,guidance_w,robust_accuracy",
        reports.iter().flat_map(|r| {
            r.guidance_sweep
                .iter()
                .map(move |g| format!("{},{},{:.6}", r.config_hash, g.guidance_w, g.robust_accuracy))
        }),
    )?);
    paths.push(write_table(
        &dir.join("risk.csv"),
        &format!("config_hash,{}", RiskReport::CSV_HEADER),
        reports
            .iter()
            .flat_map(|r| r.risk.iter().map(move |k| format!("{},{}", r.config_hash, k.csv_row()))),
    )?);
    Ok(paths)
}
