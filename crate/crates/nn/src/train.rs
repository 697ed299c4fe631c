//! The optimisation loop: batches in, PIT loss, clipped Adam updates,
//! periodic checkpoints and a JSON Lines log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Tensor};
use medleysep_core::corpus::{load_manifest, Category, Manifest};
use medleysep_core::mixer::MixPolicy;
use medleysep_core::objectives::{si_sdr, LossConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, BatchSource, DynamicSource, FixedSource, Prefetcher};
use crate::toy::toy_duets;
use crate::error::{Error, Result};
use crate::isrnet::ISRNetConfig;
use crate::losses::{mixture_consistency, orpit, upit, PairLoss};
use crate::model::{ModelSpec, Outputs, SeparationModel, BACKBONE_PREFIX, ISRNET_PREFIX};
use crate::optim::{Adam, AdamState, OptimConfig};
use crate::tasnet::BackboneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Validate every this many steps; 0 disables.
    pub every: u64,
    pub batches: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            every: 5000,
            batches: 4,
            seed: 1234,
        }
    }
}

/// Fixed synthetic duets used instead of manifests for smoke runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyData {
    pub n_examples: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for ToyData {
    fn default() -> Self {
        Self {
            n_examples: 10,
            seconds: 0.5,
            seed: 11,
        }
    }
}

/// Second-stage settings: iSRNet on top of a pre-trained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub backbone_checkpoint: Option<PathBuf>,
    pub isrnet: ISRNetConfig,
    /// Weight of the extra loss on backbone outputs.
    pub aux_weight: f64,
    /// Train only iSRNet.
    pub freeze_backbone: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            backbone_checkpoint: None,
            isrnet: ISRNetConfig::default(),
            aux_weight: 0.0,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub name: String,
    /// Runs are written to `<out_dir>/<name>/`.
    pub out_dir: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub sample_rate: u32,
    pub workers: usize,
    pub queue_depth: usize,
    /// Task arm weights; each batch comes from one arm.
    pub arms: BTreeMap<Category, f64>,
    pub mix: MixPolicy,
    pub manifests: Vec<PathBuf>,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub validation: ValidationConfig,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_bad_steps: usize,
    pub joint: Option<JointConfig>,
    /// Train on synthetic duets; manifests are then ignored.
    pub toy: Option<ToyData>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            steps: 200_000,
            batch_size: 8,
            sample_rate: 24_000,
            workers: 4,
            queue_depth: 4,
            arms: BTreeMap::from([(Category::Duet, 0.5), (Category::Unison, 0.5)]),
            mix: MixPolicy::default(),
            manifests: Vec::new(),
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            checkpoint_every: 5000,
            log_every: 10,
            validation: ValidationConfig::default(),
            max_bad_steps: 3,
            joint: None,
            toy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config("checkpoint_every and log_every must be positive"));
        }
        if self.max_bad_steps == 0 {
            return Err(Error::config("max_bad_steps must be positive"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("run name {:?} must be a plain directory name", self.name)));
        }
        if let Some((c, _)) = self.arms.iter().find(|(c, w)| **c == Category::NSinging || **w < 0.0) {
            return Err(Error::config(format!("invalid task arm {c}")));
        }
        self.optim.validate()?;
        self.loss.validate()?;
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            sample_rate: self.sample_rate,
            backbone: self.backbone.clone(),
            isrnet: self.joint.as_ref().map(|j| j.isrnet.clone()),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub category: Category,
    pub loss: f64,
    /// Mean loss over the steps since the previous log line.
    pub loss_avg: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_si_sdr_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_si_sdr_i: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub stopped: bool,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<StepRecord>,
    pub best_val_si_sdr_i: Option<f64>,
}

/// Mean SI-SDR improvement of `est` `[B, 2, L]` over the batch mixtures,
/// with the best output order per example unless `fixed_order`.
pub fn batch_si_sdr_i(est: &Tensor, batch: &Batch, fixed_order: bool) -> Result<f64> {
    let est = est.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let refs = batch.targets.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let mix = batch.mixture.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..est.len() {
        let score = |perm: [usize; 2]| -> Result<f64> {
            let mut s = 0.0;
            for (r, &e) in perm.iter().enumerate() {
                s += si_sdr(&est[b][e], &refs[b][r])? - si_sdr(&mix[b], &refs[b][r])?;
            }
            Ok(s)
        };
        let straight = score([0, 1])?;
        let best = if fixed_order { straight } else { straight.max(score([1, 0])?) };
        total += best;
        n += 2;
    }
    Ok(total / n.max(1) as f64)
}

/// The training source and validation batches a config describes.
pub fn build_sources(config: &TrainConfig) -> Result<(Box<dyn BatchSource>, Vec<Batch>)> {
    if let Some(t) = &config.toy {
        let examples = toy_duets(t.n_examples, t.seconds, config.sample_rate, t.seed)?;
        let val = Batch::from_examples(0, examples.clone(), DType::F32)?;
        let src = FixedSource::new(examples, config.batch_size)?;
        return Ok((Box::new(src), vec![val]));
    }
    if config.manifests.is_empty() {
        return Err(Error::config("field `manifests` is missing or empty (list manifest files or set `toy`)"));
    }
    let manifests = config
        .manifests
        .iter()
        .map(load_manifest)
        .collect::<medleysep_core::Result<Vec<_>>>()?;
    let manifest = Manifest::merge(manifests)?;
    let src = DynamicSource::new(
        manifest.clone(),
        &config.arms,
        config.mix.clone(),
        config.sample_rate,
        config.batch_size,
        config.seed,
    )?;
    let mut val = Vec::new();
    if config.validation.every > 0 {
        let mut vsrc = DynamicSource::new(
            manifest,
            &config.arms,
            config.mix.clone(),
            config.sample_rate,
            config.batch_size,
            config.validation.seed,
        )?;
        for k in 0..config.validation.batches as u64 {
            val.push(vsrc.batch(k)?);
        }
    }
    Ok((Box::new(src), val))
}

pub struct Trainer {
    config: TrainConfig,
    model: SeparationModel,
    loss: PairLoss,
    opt: Adam,
    trainable: Vec<String>,
    step: u64,
    resumed: bool,
    stop: Arc<AtomicBool>,
    best_val: Option<f64>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("name", &self.config.name)
            .field("step", &self.step)
            .field("params", &self.model.params().count())
            .finish()
    }
}

impl Trainer {
    /// Fresh run. With a joint section the backbone weights come from its
    /// checkpoint, and any shape mismatch is reported here.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SeparationModel::new(config.model_spec(), config.seed)?;
        let mut carried = None;
        if let Some(j) = &config.joint {
            if let Some(p) = &j.backbone_checkpoint {
                let ck = Checkpoint::load(p)?;
                ck.restore_into(model.params(), &["backbone."])?;
                carried = Some(ck);
            }
        }
        let mut t = Self::assemble(config, model, 0, false)?;
        // The backbone keeps its optimizer moments; iSRNet starts fresh.
        if let Some(ck) = carried {
            if let Some(state) = ck.extra.get("adam") {
                let state: AdamState = serde_json::from_value(state.clone())
                    .map_err(|e| Error::config(format!("bad optimizer state: {e}")))?;
                let prefix = format!("{BACKBONE_PREFIX}.");
                t.opt.import_moments(t.model.params(), &state, &ck.group("adam.", DType::F32)?.into_iter().map(|(k, v)| (format!("adam.{k}"), v)).collect(), &prefix);
            }
        }
        Ok(t)
    }

    /// Continues a run from one of its checkpoints. Step budget and other
    /// schedule settings come from `config`; model layout and weights from
    /// the checkpoint.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let ck = Checkpoint::load(checkpoint)?;
        let model = SeparationModel::from_checkpoint(&ck)?;
        if model.spec() != &config.model_spec() {
            return Err(Error::config(format!(
                "{} was written for a different model layout",
                checkpoint.display()
            )));
        }
        let mut t = Self::assemble(config, model, ck.step, true)?;
        if let Some(state) = ck.extra.get("adam") {
            let state: AdamState =
                serde_json::from_value(state.clone()).map_err(|e| Error::config(format!("bad optimizer state: {e}")))?;
            t.opt.restore(state, &ck.group("", DType::F32)?);
        }
        t.best_val = ck.extra.get("best_val_si_sdr_i").and_then(|v| v.as_f64());
        Ok(t)
    }

    fn assemble(config: TrainConfig, model: SeparationModel, step: u64, resumed: bool) -> Result<Self> {
        let loss = PairLoss::new(config.loss.clone(), DType::F32, model.params().device())?;
        let opt = Adam::new(config.optim.clone())?;
        let freeze = config.joint.as_ref().is_some_and(|j| j.freeze_backbone);
        let trainable = model
            .params()
            .vars()
            .keys()
            .filter(|k| !freeze || k.starts_with(&format!("{ISRNET_PREFIX}.")))
            .cloned()
            .collect();
        Ok(Self {
            config,
            model,
            loss,
            opt,
            trainable,
            step,
            resumed,
            stop: Arc::new(AtomicBool::new(false)),
            best_val: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SeparationModel {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Set to request a checkpoint-and-exit at the next step boundary.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    fn task_loss(&self, est: &Tensor, batch: &Batch) -> Result<Tensor> {
        let est = if self.config.loss.apply_mixture_consistency && !self.config.backbone.mixture_consistency {
            mixture_consistency(est, &batch.mixture)?
        } else {
            est.clone()
        };
        let pair = |e: &Tensor, r: &Tensor| self.loss.pair(e, r);
        match batch.category {
            Category::MainVsRest => orpit(&est, &batch.targets, pair),
            _ => Ok(upit(&est, &batch.targets, pair)?.0),
        }
    }

    /// Training loss of one batch and the model outputs it was computed on.
    pub fn batch_loss(&self, batch: &Batch) -> Result<(Tensor, Outputs)> {
        let out = self.model.forward(&batch.mixture)?;
        let mut loss = self.task_loss(out.last(), batch)?;
        if let (Some(j), Some(_)) = (&self.config.joint, &out.refined) {
            if j.aux_weight > 0.0 {
                let aux = self.task_loss(&out.initial, batch)?;
                loss = (loss + aux.affine(j.aux_weight, 0.0)?)?;
            }
        }
        Ok((loss, out))
    }

    /// Per-parameter gradient norms of the batch loss, without updating.
    pub fn gradient_norms(&self, batch: &Batch) -> Result<BTreeMap<String, f64>> {
        let (loss, _) = self.batch_loss(batch)?;
        let grads = loss.backward()?;
        let mut out = BTreeMap::new();
        for (name, var) in self.model.params().vars() {
            let n = match grads.get(var.as_tensor()) {
                Some(g) => g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt(),
                None => 0.0,
            };
            out.insert(name.clone(), n);
        }
        Ok(out)
    }

    /// One optimisation step on `batch`. Non-finite losses or gradients
    /// skip the update; too many in a row abort.
    pub fn train_step(&mut self, batch: &Batch, consecutive_bad: &mut usize) -> Result<StepRecord> {
        let started = Instant::now();
        let (loss_t, _) = self.batch_loss(batch)?;
        let loss = loss_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mut grad_norm = f64::NAN;
        let mut clipped = false;
        let mut skipped = !loss.is_finite();
        if !skipped {
            let grads = loss_t.backward()?;
            grad_norm = Adam::grad_norm(self.model.params(), &grads, &self.trainable)?;
            if grad_norm.is_finite() {
                let s = self.opt.step(self.model.params(), &grads, &self.trainable)?;
                clipped = s.clipped;
            } else {
                skipped = true;
            }
        }
        if skipped {
            *consecutive_bad += 1;
            log::warn!("step {}: non-finite loss {loss} or gradient norm {grad_norm}, update skipped", batch.step);
            if *consecutive_bad >= self.config.max_bad_steps {
                return Err(Error::Aborted(format!(
                    "{} consecutive non-finite steps ending at step {} (category {}, loss {loss}, grad norm {grad_norm}, lr {})",
                    consecutive_bad,
                    batch.step,
                    batch.category,
                    self.opt.lr()
                )));
            }
        } else {
            *consecutive_bad = 0;
        }
        self.step = batch.step + 1;
        Ok(StepRecord {
            step: batch.step,
            category: batch.category,
            loss,
            loss_avg: loss,
            grad_norm,
            clipped,
            lr: self.opt.lr(),
            skipped,
            train_si_sdr_i: None,
            val_si_sdr_i: None,
            elapsed_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Mean SI-SDRi of the model's final outputs over `batches`.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<f64> {
        let mut total = 0.0;
        for b in batches {
            let out = self.model.forward(&b.mixture)?;
            total += batch_si_sdr_i(out.last(), b, b.category == Category::MainVsRest)?;
        }
        Ok(total / batches.len().max(1) as f64)
    }

    /// Mean SI-SDRi of the backbone outputs alone.
    pub fn evaluate_backbone(&self, batches: &[Batch]) -> Result<f64> {
        let mut total = 0.0;
        for b in batches {
            let out = self.model.forward(&b.mixture)?;
            total += batch_si_sdr_i(&out.initial, b, b.category == Category::MainVsRest)?;
        }
        Ok(total / batches.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let kind = if self.model.spec().isrnet.is_some() { "joint" } else { "backbone" };
        let config = serde_json::to_value(&self.config).map_err(|e| Error::config(e.to_string()))?;
        let extra = json!({
            "model": self.model.spec(),
            "adam": self.opt.state(),
            "best_val_si_sdr_i": self.best_val,
        });
        let mut ck = Checkpoint::new(kind, self.step, config, extra);
        ck.insert_store(self.model.params())?;
        for (name, t) in self.opt.tensors() {
            ck.insert(&name, &t)?;
        }
        Ok(ck)
    }

    fn save(&self, dir: &Path, file: &str, summary: &mut RunSummary) -> Result<()> {
        let path = dir.join(file);
        self.checkpoint()?.save(&path)?;
        log::info!("wrote {}", path.display());
        summary.checkpoints.push(path);
        Ok(())
    }

    /// Runs until the configured step budget, a stop request, or an abort.
    pub fn run(&mut self, source: &dyn BatchSource, validation: &[Batch]) -> Result<RunSummary> {
        let dir = self.config.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let echo = serde_json::to_string_pretty(&self.config).map_err(|e| Error::config(e.to_string()))?;
        let echo_path = dir.join("config.json");
        std::fs::write(&echo_path, echo + "\n").map_err(|e| Error::io(&echo_path, e))?;
        let log_path = dir.join("log.jsonl");
        let log_file = if self.resumed {
            OpenOptions::new().create(true).append(true).open(&log_path)
        } else {
            File::create(&log_path)
        }
        .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(log_file);

        let mut summary = RunSummary {
            start_step: self.step,
            best_val_si_sdr_i: self.best_val,
            ..RunSummary::default()
        };
        if !self.resumed && self.step == 0 {
            self.save(&dir, "step_0.ckpt", &mut summary)?;
        }
        let total = self.config.steps;
        let started = Instant::now();
        let mut saved_at = self.step;
        let mut bad = 0usize;
        let mut window = (0.0, 0usize);
        if self.step < total {
            let mut feed = Prefetcher::new(
                source,
                self.config.workers,
                self.config.queue_depth,
                self.step,
                total,
            )?;
            while self.step < total {
                if self.stop.load(Ordering::Relaxed) {
                    summary.stopped = true;
                    log::info!("stop requested at step {}", self.step);
                    break;
                }
                let batch = feed.next(self.step)?;
                let mut rec = self.train_step(&batch, &mut bad)?;
                if !rec.skipped {
                    window.0 += rec.loss;
                    window.1 += 1;
                }
                let k = self.step;
                let mut write = rec.skipped || k % self.config.log_every == 0 || k == total;
                if self.config.validation.every > 0 && k % self.config.validation.every == 0 && !validation.is_empty() {
                    let v = self.evaluate(validation)?;
                    rec.val_si_sdr_i = Some(v);
                    if self.opt.observe(-v) {
                        log::info!("validation plateau, learning rate now {}", self.opt.lr());
                    }
                    if self.best_val.is_none_or(|b| v > b) {
                        self.best_val = Some(v);
                        summary.best_val_si_sdr_i = Some(v);
                        self.save(&dir, "best.ckpt", &mut summary)?;
                    }
                    write = true;
                }
                if write {
                    if window.1 > 0 {
                        rec.loss_avg = window.0 / window.1 as f64;
                    }
                    window = (0.0, 0);
                    if !rec.skipped {
                        let out = self.model.forward(&batch.mixture)?;
                        rec.train_si_sdr_i =
                            Some(batch_si_sdr_i(out.last(), &batch, batch.category == Category::MainVsRest)?);
                    }
                    rec.elapsed_s = started.elapsed().as_secs_f64();
                    let line = serde_json::to_string(&rec).map_err(|e| Error::config(e.to_string()))?;
                    writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                    log.flush().map_err(|e| Error::io(&log_path, e))?;
                    log::info!("step {k} loss {:.4} lr {:.2e}", rec.loss_avg, rec.lr);
                    summary.records.push(rec);
                }
                if k % self.config.checkpoint_every == 0 {
                    self.save(&dir, &format!("step_{k}.ckpt"), &mut summary)?;
                    saved_at = k;
                }
            }
        }
        if saved_at != self.step {
            self.save(&dir, &format!("step_{}.ckpt", self.step), &mut summary)?;
        }
        summary.final_step = self.step;
        Ok(summary)
    }
}
