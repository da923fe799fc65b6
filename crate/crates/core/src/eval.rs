//! Metrics, evaluation of a trained model, and the comparison baselines.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::{center_crop, DataError, ImageRecord, NUM_CLASSES};
use crate::model::{ModelError, ModelParams, ORDINAL_BITS};
use crate::optim::{fit, FitOutcome, Method, OptimError, TrainConfig, TrainData};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for a constant vector")]
    UndefinedCorrelation,
    #[error("image {0} has no severity label")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `√(mean (ŷ − y)²)`.
pub fn rms_error(predicted: &[f64], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let sq: f64 = predicted.iter().zip(truth).map(|(p, y)| (p - f64::from(*y)).powi(2)).sum();
    Ok((sq / predicted.len() as f64).sqrt())
}

/// Sample Pearson correlation.
pub fn pearson_cc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub class: u8,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rms: f64,
    /// `None` when predictions or labels are constant.
    pub pearson_cc: Option<f64>,
    /// Expected severities grouped by true class.
    pub per_class: [Vec<f64>; NUM_CLASSES as usize],
    pub n: usize,
    pub predictions: Vec<Prediction>,
}

impl Metrics {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Result<Self> {
        let yhat: Vec<f64> = predictions.iter().map(|p| p.severity).collect();
        let y: Vec<u8> = predictions.iter().map(|p| p.class).collect();
        let rms = rms_error(&yhat, &y)?;
        let yf: Vec<f64> = y.iter().map(|&c| f64::from(c)).collect();
        let pearson_cc = match pearson_cc(&yhat, &yf) {
            Ok(cc) => Some(cc),
            Err(EvalError::UndefinedCorrelation | EvalError::Empty) => None,
            Err(e) => return Err(e),
        };
        let mut per_class: [Vec<f64>; NUM_CLASSES as usize] = Default::default();
        for p in &predictions {
            per_class[p.class as usize].push(p.severity);
        }
        Ok(Self {
            rms,
            pearson_cc,
            per_class,
            n: predictions.len(),
            predictions,
        })
    }

    /// Median prediction for each true class (`None` for an absent class).
    pub fn class_medians(&self) -> [Option<f64>; NUM_CLASSES as usize] {
        let mut out = [None; NUM_CLASSES as usize];
        for (k, v) in self.per_class.iter().enumerate() {
            out[k] = median(v);
        }
        out
    }

    /// Medians of the classes present are strictly increasing.
    pub fn medians_increasing(&self) -> bool {
        let present: Vec<f64> = self.class_medians().into_iter().flatten().collect();
        present.len() == NUM_CLASSES as usize && present.windows(2).all(|w| w[0] < w[1])
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

const EVAL_CHUNK: usize = 16;

/// Worker threads allowed by `SSVR_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("SSVR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Expected severity at the posterior mean for each image, after a center crop
/// to the model's input side.
pub fn predict(params: &ModelParams, images: &[&ImageRecord]) -> Result<Vec<f64>> {
    predict_with_threads(params, images, worker_threads())
}

/// As [`predict`] with an explicit worker count; results do not depend on it.
pub fn predict_with_threads(params: &ModelParams, images: &[&ImageRecord], threads: usize) -> Result<Vec<f64>> {
    let threads = threads.min(images.len().div_ceil(EVAL_CHUNK)).max(1);
    let chunks: Vec<&[&ImageRecord]> = images.chunks(EVAL_CHUNK).collect();
    if threads == 1 {
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(predict_chunk(params, c)?);
        }
        return Ok(out);
    }
    // Fixed chunking keeps results independent of the thread count.
    let per_worker = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|work| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for c in work {
                        out.extend(predict_chunk(params, c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn predict_chunk(params: &ModelParams, images: &[&ImageRecord]) -> Result<Vec<f64>> {
    let n = params.arch().image_side;
    let mut pixels = Vec::with_capacity(images.len() * n * n);
    for r in images {
        pixels.extend(center_crop(&r.pixels, r.side, n)?);
    }
    let mut g = Graph::new();
    let mut fwd = crate::model::Forward::new(params, false);
    let x = g.constant(Tensor::new(vec![images.len(), 1, n, n], pixels)?);
    let q = fwd.encode(&mut g, x)?;
    let probs = fwd.regress(&mut g, q.mu)?;
    Ok(g.value(probs).values().chunks_exact(ORDINAL_BITS).map(|p| p.iter().sum()).collect())
}

/// Metrics of `params` on a fully labeled set of images.
pub fn evaluate(params: &ModelParams, images: &[&ImageRecord]) -> Result<Metrics> {
    if images.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut classes = Vec::with_capacity(images.len());
    for r in images {
        classes.push(r.severity.ok_or_else(|| EvalError::Unlabeled(r.image_id.clone()))?);
    }
    let yhat = predict(params, images)?;
    let predictions = images
        .iter()
        .zip(classes)
        .zip(yhat)
        .map(|((r, class), severity)| Prediction {
            image_id: r.image_id.clone(),
            class,
            severity,
        })
        .collect();
    Metrics::from_predictions(predictions)
}

/// The labeled-only baseline: the same pipeline with no unlabeled phase.
pub fn train_supervised_baseline(
    init: ModelParams,
    labeled: &[&ImageRecord],
    validation: &[&ImageRecord],
    config: &TrainConfig,
) -> std::result::Result<FitOutcome, OptimError> {
    let config = TrainConfig {
        method: Method::Supervised,
        ..config.clone()
    };
    let data = TrainData {
        labeled: labeled.to_vec(),
        unlabeled: Vec::new(),
        validation: validation.to_vec(),
    };
    fit(init, &data, &config)
}

/// Entropy-minimization self-training: unlabeled minibatches add
/// `entropy_weight · Σ_j H(ŷ_j)` and also update the regressor.
pub fn train_em_baseline(
    init: ModelParams,
    data: &TrainData<'_>,
    config: &TrainConfig,
    entropy_weight: f64,
) -> std::result::Result<FitOutcome, OptimError> {
    let config = TrainConfig {
        method: Method::Em,
        entropy_weight,
        ..config.clone()
    };
    fit(init, data, &config)
}

/// One line of a metrics table.
#[derive(Debug, Clone)]
pub struct MetricsRow<'a> {
    pub method: &'a str,
    pub seed: u64,
    pub metrics: &'a Metrics,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(body.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `method,seed,rms,cc,n`.
pub fn metrics_csv(rows: &[MetricsRow<'_>]) -> String {
    let mut s = String::from("method,seed,rms,cc,n\n");
    for r in rows {
        let cc = r.metrics.pearson_cc.map(|c| c.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.method, r.seed, r.metrics.rms, cc, r.metrics.n));
    }
    s
}

/// `method,seed,image_id,true_class,predicted` for external plotting.
pub fn predictions_csv(rows: &[MetricsRow<'_>]) -> String {
    let mut s = String::from("method,seed,image_id,true_class,predicted\n");
    for r in rows {
        for p in &r.metrics.predictions {
            s.push_str(&format!("{},{},{},{},{}\n", r.method, r.seed, p.image_id, p.class, p.severity));
        }
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow<'_>]) -> Result<()> {
    write_file(path, &metrics_csv(rows))
}

pub fn write_predictions_csv(path: &Path, rows: &[MetricsRow<'_>]) -> Result<()> {
    write_file(path, &predictions_csv(rows))
}
