//! Adam, the alternating labeled/unlabeled training loop, validation-based
//! checkpoint selection, and checkpoint files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment, AugmentParams, DataError, ImageRecord};
use crate::eval::{evaluate, EvalError, Metrics};
use crate::loss::{total_loss, total_loss_with_entropy, Batch, LossBreakdown, LossConfig, LossError, LossEval};
use crate::model::{ordinal_encode, Arch, CountingNoise, ModelError, ModelParams, ParamGroup};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("gradient for {name}: expected {expected} values, got {got}")]
    GradientShape { name: String, expected: usize, got: usize },
    #[error("gradient for unknown parameter {0}")]
    UnknownParam(String),
    #[error("non-finite {term} loss in the {phase} phase of epoch {epoch}")]
    NonFinite {
        term: &'static str,
        phase: Phase,
        epoch: u64,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

// ---------------------------------------------------------------- Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments of one parameter. Each parameter keeps its own step count, since
/// the regressor sits out the unlabeled updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of `adam_step` calls.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let numel = params
            .get(name)
            .ok_or_else(|| OptimError::UnknownParam(name.clone()))?
            .numel();
        if g.len() != numel {
            return Err(OptimError::GradientShape {
                name: name.clone(),
                expected: numel,
                got: g.len(),
            });
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    for (name, g) in grads {
        let theta = params.get_mut(name).expect("checked above").values_mut();
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            t: 0,
        });
        mo.t += 1;
        let c1 = 1.0 - beta1.powi(mo.t as i32);
        let c2 = 1.0 - beta2.powi(mo.t as i32);
        for (((th, m), v), gi) in theta.iter_mut().zip(&mut mo.m).zip(&mut mo.v).zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            *th -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    state.t += 1;
    Ok(())
}

// ---------------------------------------------------------------- configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Labeled and unlabeled phases (the semi-supervised model).
    VaeR,
    /// Labeled phase only.
    Supervised,
    /// Unlabeled phase also pays an entropy penalty and updates the regressor.
    Em,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::VaeR => "vae_r",
            Method::Supervised => "supervised",
            Method::Em => "em",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vae_r" => Ok(Method::VaeR),
            "supervised" => Ok(Method::Supervised),
            "em" => Ok(Method::Em),
            _ => Err(format!("unknown method {s:?} (expected vae_r, supervised or em)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub max_epochs: u64,
    /// Epochs between validations.
    pub validation_every: u64,
    /// Validations without improvement before stopping.
    pub patience: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub augment: AugmentParams,
    pub entropy_weight: f64,
}

impl TrainConfig {
    pub fn for_arch(arch: &Arch) -> Self {
        Self {
            method: Method::VaeR,
            labeled_batch: 16,
            unlabeled_batch: 16,
            max_epochs: 20,
            validation_every: 1,
            patience: 10,
            seed: 0,
            loss: LossConfig::for_arch(arch),
            adam: AdamConfig::default(),
            augment: AugmentParams {
                max_rotation_deg: 5.0,
                max_translation_px: 2.0,
                crop_size: arch.image_side,
            },
            entropy_weight: 0.1,
        }
    }

    pub fn validate(&self, arch: &Arch) -> Result<()> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return bad("minibatch sizes must be >= 1".into());
        }
        if self.validation_every == 0 {
            return bad("validation_every must be >= 1".into());
        }
        if self.augment.crop_size != arch.image_side {
            return bad(format!(
                "crop size {} differs from the model input side {}",
                self.augment.crop_size, arch.image_side
            ));
        }
        if !(self.entropy_weight >= 0.0) {
            return bad(format!("entropy_weight must be >= 0, got {}", self.entropy_weight));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam hyperparameters {a:?}"));
        }
        self.loss.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------- epochs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Labeled,
    Unlabeled,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Labeled => "labeled",
            Phase::Unlabeled => "unlabeled",
        })
    }
}

/// Image-weighted mean loss terms of one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStats {
    pub images: usize,
    pub batches: usize,
    pub kl: f64,
    pub regression: Option<f64>,
    pub reconstruction: f64,
    pub entropy: Option<f64>,
    pub total: f64,
}

impl PhaseStats {
    fn accumulate(acc: &mut Option<PhaseStats>, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        let s = acc.get_or_insert(PhaseStats {
            images: 0,
            batches: 0,
            kl: 0.0,
            regression: b.regression.map(|_| 0.0),
            reconstruction: 0.0,
            entropy: b.entropy.map(|_| 0.0),
            total: 0.0,
        });
        s.images += n;
        s.batches += 1;
        s.kl += w * b.kl;
        s.reconstruction += w * b.reconstruction;
        s.total += w * b.total;
        if let (Some(r), Some(v)) = (s.regression.as_mut(), b.regression) {
            *r += w * v;
        }
        if let (Some(e), Some(v)) = (s.entropy.as_mut(), b.entropy) {
            *e += w * v;
        }
    }

    fn finish(mut self) -> Self {
        let w = self.images as f64;
        self.kl /= w;
        self.reconstruction /= w;
        self.total /= w;
        self.regression = self.regression.map(|r| r / w);
        self.entropy = self.entropy.map(|e| e / w);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub labeled: PhaseStats,
    /// `None` when the unlabeled phase did not run.
    pub unlabeled: Option<PhaseStats>,
    /// Latent samples drawn (one per image per step).
    pub latent_samples: usize,
}

/// Hooks into a training run. All methods default to doing nothing.
pub trait TrainObserver {
    fn phase_started(&mut self, _epoch: u64, _phase: Phase, _params: &ModelParams) {}
    fn phase_finished(&mut self, _epoch: u64, _phase: Phase, _params: &ModelParams) {}
    fn epoch_finished(&mut self, _report: &EpochReport<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// The RNG driving epoch `epoch` of a run seeded with `seed`.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// One training epoch without hooks.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdamState,
    labeled: &[&ImageRecord],
    unlabeled: &[&ImageRecord],
    config: &TrainConfig,
    epoch: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    train_epoch_observed(params, state, labeled, unlabeled, config, epoch, rng, &mut NoObserver)
}

/// One epoch: every labeled minibatch updates encoder, decoder and regressor,
/// then every unlabeled minibatch updates encoder and decoder (and the
/// regressor under entropy minimization).
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_observed(
    params: &mut ModelParams,
    state: &mut AdamState,
    labeled: &[&ImageRecord],
    unlabeled: &[&ImageRecord],
    config: &TrainConfig,
    epoch: u64,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn TrainObserver,
) -> Result<EpochStats> {
    config.validate(params.arch())?;
    if labeled.is_empty() {
        return Err(OptimError::InvalidConfig("labeled training set is empty".into()));
    }
    let mut noise = CountingNoise::new(ChaCha8Rng::seed_from_u64(rng.gen()));
    let all_groups = [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Regressor];

    observer.phase_started(epoch, Phase::Labeled, params);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(rng);
    let mut stats = None;
    for chunk in order.chunks(config.labeled_batch) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let r = labeled[i];
            let class = r.severity.ok_or_else(|| EvalError::Unlabeled(r.image_id.clone()))?;
            images.push(augment(&r.pixels, r.side, rng, &config.augment)?);
            labels.push(ordinal_encode(class)?);
        }
        let batch = Batch::labeled(images.iter().map(Vec::as_slice).collect(), labels);
        let eval = total_loss(&batch, params, &config.loss, &mut noise)?;
        check_finite(&eval.breakdown, Phase::Labeled, epoch)?;
        PhaseStats::accumulate(&mut stats, &eval.breakdown, chunk.len());
        step(params, state, eval, &all_groups)?;
    }
    let labeled_stats = stats.expect("labeled set is nonempty").finish();
    observer.phase_finished(epoch, Phase::Labeled, params);

    let mut unlabeled_stats = None;
    if config.method != Method::Supervised && !unlabeled.is_empty() {
        observer.phase_started(epoch, Phase::Unlabeled, params);
        let groups: &[ParamGroup] = match config.method {
            Method::Em => &all_groups,
            _ => &all_groups[..2],
        };
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        order.shuffle(rng);
        let mut stats = None;
        for chunk in order.chunks(config.unlabeled_batch) {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = unlabeled[i];
                images.push(augment(&r.pixels, r.side, rng, &config.augment)?);
            }
            let batch = Batch::unlabeled(images.iter().map(Vec::as_slice).collect());
            let eval = match config.method {
                Method::Em => total_loss_with_entropy(&batch, params, &config.loss, &mut noise, config.entropy_weight)?,
                _ => total_loss(&batch, params, &config.loss, &mut noise)?,
            };
            check_finite(&eval.breakdown, Phase::Unlabeled, epoch)?;
            PhaseStats::accumulate(&mut stats, &eval.breakdown, chunk.len());
            step(params, state, eval, groups)?;
        }
        unlabeled_stats = stats.map(PhaseStats::finish);
        observer.phase_finished(epoch, Phase::Unlabeled, params);
    }
    Ok(EpochStats {
        epoch,
        labeled: labeled_stats,
        unlabeled: unlabeled_stats,
        latent_samples: noise.draws(),
    })
}

fn check_finite(b: &LossBreakdown, phase: Phase, epoch: u64) -> Result<()> {
    match b.non_finite_term() {
        Some(term) => Err(OptimError::NonFinite { term, phase, epoch }),
        None => Ok(()),
    }
}

fn step(params: &mut ModelParams, state: &mut AdamState, eval: LossEval, groups: &[ParamGroup]) -> Result<()> {
    let LossEval {
        mut graph,
        total,
        bindings,
        ..
    } = eval;
    let mut grads = graph.backward(total)?;
    let mut update = BTreeMap::new();
    for (name, id) in bindings {
        if ParamGroup::of(&name).is_some_and(|g| groups.contains(&g)) {
            if let Some(g) = grads.take(id) {
                update.insert(name, g);
            }
        }
    }
    adam_step(params, &update, state)
}

// ---------------------------------------------------------------- fit

/// Images feeding one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainData<'a> {
    pub labeled: Vec<&'a ImageRecord>,
    pub unlabeled: Vec<&'a ImageRecord>,
    pub validation: Vec<&'a ImageRecord>,
}

impl TrainData<'_> {
    fn check(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(OptimError::InvalidConfig("labeled training set is empty".into()));
        }
        if self.validation.is_empty() {
            return Err(OptimError::InvalidConfig("validation set is empty".into()));
        }
        let train: HashSet<&str> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|r| r.patient_id.as_str())
            .collect();
        if let Some(r) = self.validation.iter().find(|r| train.contains(r.patient_id.as_str())) {
            return Err(OptimError::InvalidConfig(format!(
                "validation patient {} also appears in training",
                r.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    /// The epoch whose stream drives the next training epoch.
    pub next_epoch: u64,
}

/// Early-stopping bookkeeping carried across resumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub best_epoch: u64,
    pub best_rms: f64,
    /// Validations since the last improvement.
    pub stale: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed training epochs.
    pub epoch: u64,
    /// Validation RMS of `params`, if they were validated.
    pub val_rms: Option<f64>,
    pub rng: RngState,
    pub progress: Progress,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: u64,
    pub labeled: Option<PhaseStats>,
    pub unlabeled: Option<PhaseStats>,
    pub latent_samples: usize,
    pub val_rms: Option<f64>,
    pub val_cc: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,labeled_total,labeled_kl,labeled_regression,labeled_reconstruction,\
unlabeled_total,unlabeled_kl,unlabeled_reconstruction,unlabeled_entropy,latent_samples,val_rms,val_cc";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let l = self.labeled;
        let u = self.unlabeled;
        [
            self.epoch.to_string(),
            f(l.map(|s| s.total)),
            f(l.map(|s| s.kl)),
            f(l.and_then(|s| s.regression)),
            f(l.map(|s| s.reconstruction)),
            f(u.map(|s| s.total)),
            f(u.map(|s| s.kl)),
            f(u.map(|s| s.reconstruction)),
            f(u.and_then(|s| s.entropy)),
            self.latent_samples.to_string(),
            f(self.val_rms),
            f(self.val_cc),
        ]
        .join(",")
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{}\n", LogRow::HEADER);
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

/// Handed to [`TrainObserver::epoch_finished`] after each epoch.
pub struct EpochReport<'a> {
    pub row: &'a LogRow,
    pub stats: Option<&'a EpochStats>,
    pub last: &'a Checkpoint,
    pub best: &'a Checkpoint,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
}

fn validate_model(params: &ModelParams, data: &TrainData<'_>) -> Result<Metrics> {
    Ok(evaluate(params, &data.validation)?)
}

/// Trains from `init` and returns the checkpoint with the lowest validation RMS.
pub fn fit(init: ModelParams, data: &TrainData<'_>, config: &TrainConfig) -> Result<FitOutcome> {
    fit_observed(init, data, config, &mut NoObserver)
}

pub fn fit_observed(
    init: ModelParams,
    data: &TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutcome> {
    config.validate(init.arch())?;
    data.check()?;
    let metrics = validate_model(&init, data)?;
    let start = Checkpoint {
        params: init,
        adam: AdamState::new(config.adam),
        epoch: 0,
        val_rms: Some(metrics.rms),
        rng: RngState {
            seed: config.seed,
            next_epoch: 1,
        },
        progress: Progress {
            best_epoch: 0,
            best_rms: metrics.rms,
            stale: 0,
        },
    };
    let row = LogRow {
        epoch: 0,
        labeled: None,
        unlabeled: None,
        latent_samples: 0,
        val_rms: Some(metrics.rms),
        val_cc: metrics.pearson_cc,
    };
    observer.epoch_finished(&EpochReport {
        row: &row,
        stats: None,
        last: &start,
        best: &start,
        improved: true,
    })?;
    run(start.clone(), start, vec![row], data, config, observer)
}

/// Continues a run from its last and best checkpoints.
pub fn resume(
    last: Checkpoint,
    best: Checkpoint,
    log: Vec<LogRow>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutcome> {
    config.validate(last.params.arch())?;
    data.check()?;
    if last.rng.seed != config.seed {
        return Err(OptimError::InvalidConfig(format!(
            "checkpoint seed {} differs from configured seed {}",
            last.rng.seed, config.seed
        )));
    }
    if last.params.arch() != best.params.arch() {
        return Err(OptimError::InvalidConfig("last and best checkpoints differ in architecture".into()));
    }
    run(last, best, log, data, config, observer)
}

fn run(
    mut last: Checkpoint,
    mut best: Checkpoint,
    mut log: Vec<LogRow>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutcome> {
    let unlabeled: &[&ImageRecord] = if config.method == Method::Supervised {
        &[]
    } else {
        &data.unlabeled
    };
    loop {
        if last.epoch >= config.max_epochs {
            return Ok(FitOutcome { best, last, log, stop: StopReason::MaxEpochs });
        }
        if last.progress.stale >= config.patience {
            return Ok(FitOutcome { best, last, log, stop: StopReason::EarlyStop });
        }
        let epoch = last.rng.next_epoch;
        let mut rng = epoch_rng(last.rng.seed, epoch);
        let stats = train_epoch_observed(
            &mut last.params,
            &mut last.adam,
            &data.labeled,
            unlabeled,
            config,
            epoch,
            &mut rng,
            observer,
        )?;
        last.epoch = epoch;
        last.rng.next_epoch = epoch + 1;
        let validate = epoch % config.validation_every == 0 || epoch == config.max_epochs;
        let metrics = if validate { Some(validate_model(&last.params, data)?) } else { None };
        last.val_rms = metrics.as_ref().map(|m| m.rms);
        let mut improved = false;
        if let Some(m) = &metrics {
            if m.rms < last.progress.best_rms {
                last.progress = Progress {
                    best_epoch: epoch,
                    best_rms: m.rms,
                    stale: 0,
                };
                improved = true;
            } else {
                last.progress.stale += 1;
            }
        }
        if improved {
            best = last.clone();
        }
        let row = LogRow {
            epoch,
            labeled: Some(stats.labeled),
            unlabeled: stats.unlabeled,
            latent_samples: stats.latent_samples,
            val_rms: metrics.as_ref().map(|m| m.rms),
            val_cc: metrics.as_ref().and_then(|m| m.pearson_cc),
        };
        observer.epoch_finished(&EpochReport {
            row: &row,
            stats: Some(&stats),
            last: &last,
            best: &best,
            improved,
        })?;
        log.push(row);
    }
}

// ---------------------------------------------------------------- checkpoint files

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSVR";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| OptimError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| OptimError::Corrupt("invalid UTF-8".into()))
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| OptimError::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn opt_f64(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Little-endian checkpoint image: header, parameters, Adam state, training
/// state, CRC32 of everything before it.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ckpt.params.arch().descriptor());
    let params: Vec<(&str, &Tensor)> = ckpt.params.iter().collect();
    w.u32(params.len() as u32);
    for (name, t) in params {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.values(t.values());
    }
    let a = &ckpt.adam;
    w.f64(a.config.lr);
    w.f64(a.config.beta1);
    w.f64(a.config.beta2);
    w.f64(a.config.eps);
    w.u64(a.t);
    w.u32(a.moments.len() as u32);
    for (name, m) in &a.moments {
        w.str(name);
        w.u64(m.t);
        w.u64(m.m.len() as u64);
        w.values(&m.m);
        w.values(&m.v);
    }
    w.u64(ckpt.epoch);
    w.f64(opt_f64(ckpt.val_rms));
    w.u64(ckpt.rng.seed);
    w.u64(ckpt.rng.next_epoch);
    w.u64(ckpt.progress.best_epoch);
    w.f64(ckpt.progress.best_rms);
    w.u64(ckpt.progress.stale);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(OptimError::Corrupt("missing SSVR header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(OptimError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(OptimError::Corrupt("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(OptimError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let arch = Arch::from_descriptor(&r.str()?).map_err(|e| OptimError::Corrupt(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| OptimError::Corrupt(format!("shape of {name} overflows")))?;
        let values = r.values(numel)?;
        let t = Tensor::new(shape, values).map_err(|e| OptimError::Corrupt(e.to_string()))?;
        tensors.insert(name, t.with_requires_grad(true));
    }
    let params = ModelParams::from_tensors(arch, tensors).map_err(|e| OptimError::Corrupt(e.to_string()))?;
    let config = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let t = r.u64()?;
    let mut moments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let mt = r.u64()?;
        let n = r.u64()? as usize;
        let expected = params
            .get(&name)
            .ok_or_else(|| OptimError::Corrupt(format!("Adam state for unknown parameter {name}")))?
            .numel();
        if n != expected {
            return Err(OptimError::Corrupt(format!("Adam state for {name} has {n} values, expected {expected}")));
        }
        let m = r.values(n)?;
        let v = r.values(n)?;
        moments.insert(name, Moments { m, v, t: mt });
    }
    let epoch = r.u64()?;
    let val_rms = Some(r.f64()?).filter(|v| !v.is_nan());
    let rng = RngState {
        seed: r.u64()?,
        next_epoch: r.u64()?,
    };
    let progress = Progress {
        best_epoch: r.u64()?,
        best_rms: r.f64()?,
        stale: r.u64()?,
    };
    if r.pos != body.len() {
        return Err(OptimError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        params,
        adam: AdamState { config, t, moments },
        epoch,
        val_rms,
        rng,
        progress,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|source| OptimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| OptimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
