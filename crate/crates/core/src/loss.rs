//! Negative lower bound on `log p(x, y)` for labeled and `log p(x)` for
//! unlabeled images.
//!
//! Per image the objective is
//!
//! ```text
//! KL(q(z|x) ‖ N(0, I)) / D  +  [labeled]  Σ_j BCE(y_j, f_R^j(z))  +  ½‖x − f_D(z)‖² / (σ² · n²)
//! ```
//!
//! with one reparameterized sample `z` per image. Additive constants are
//! dropped so a perfect fit scores zero. Minibatch values are the mean of the
//! per-image values, so the step size does not depend on the batch size.

use thiserror::Error;

use crate::model::{
    sample_latent_nodes, Forward, GaussianLatent, LatentNodes, ModelError, ModelParams, NoiseSource,
    OrdinalLabel, OrdinalPrediction, ORDINAL_BITS,
};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("minibatch mixes labeled and unlabeled images")]
    MixedBatch,
    #[error("non-finite log-variance at dimension {0}")]
    NonFiniteLogVar(usize),
    #[error("{what}: expected {expected} values, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weighting and normalization of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Decoder variance σ²: the reconstruction term is `½‖x − x̂‖² / σ²`.
    pub recon_variance: f64,
    /// Divides the KL term (the latent size `D`).
    pub kl_normalizer: f64,
    /// Divides the reconstruction term (the pixel count `n²`).
    pub recon_normalizer: f64,
}

impl LossConfig {
    pub const DEFAULT_RECON_VARIANCE: f64 = 10.0;

    pub fn for_arch(arch: &crate::model::Arch) -> Self {
        Self {
            recon_variance: Self::DEFAULT_RECON_VARIANCE,
            kl_normalizer: arch.latent_dim as f64,
            recon_normalizer: (arch.image_side * arch.image_side) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.recon_variance > 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "recon_variance must be positive, got {}",
                self.recon_variance
            )));
        }
        if !(self.kl_normalizer >= 1.0) || !(self.recon_normalizer >= 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "normalizers must be >= 1, got {} and {}",
                self.kl_normalizer, self.recon_normalizer
            )));
        }
        Ok(())
    }
}

/// Values of the individual terms of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kl: f64,
    /// Present for labeled minibatches only.
    pub regression: Option<f64>,
    pub reconstruction: f64,
    /// Entropy penalty on unlabeled predictions (entropy-minimization baseline only).
    pub entropy: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("kl", Some(self.kl)),
            ("regression", self.regression),
            ("reconstruction", Some(self.reconstruction)),
            ("entropy", self.entropy),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// `½ Σ_k (μ_k² + λ_k² − log λ_k² − 1) / normalizer`, i.e. `KL(q ‖ N(0, I))`.
pub fn kl_loss(q: &GaussianLatent, normalizer: f64) -> Result<f64> {
    if let Some(k) = q.log_var.iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteLogVar(k));
    }
    let sum: f64 = q
        .mu
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    Ok(0.5 * sum / normalizer)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Sum of the three Bernoulli cross-entropies between prediction and label bits.
pub fn regression_loss(pred: &OrdinalPrediction, label: &OrdinalLabel) -> f64 {
    pred.probs()
        .iter()
        .zip(label.as_f64())
        .map(|(&p, y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// `½ Σ (x − x̂)² / σ²`, divided by `config.recon_normalizer`.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor, config: &LossConfig) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction_loss",
            detail: format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        }
        .into());
    }
    let sq: f64 = x
        .values()
        .iter()
        .zip(x_hat.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * sq / config.recon_variance / config.recon_normalizer)
}

/// `Σ_j H(ŷ_j)` with `H` the Bernoulli entropy in nats.
pub fn bernoulli_entropy(pred: &OrdinalPrediction) -> f64 {
    pred.probs()
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Graph-level terms, each reduced to the minibatch mean.

fn batch_of(g: &Graph, id: NodeId) -> usize {
    g.shape(id)[0]
}

/// Mean over the batch of `KL(q_i ‖ N(0, I)) / normalizer`.
pub fn kl_term(g: &mut Graph, q: LatentNodes, normalizer: f64) -> Result<NodeId> {
    let numel = g.value(q.mu).numel() as f64;
    let batch = batch_of(g, q.mu) as f64;
    let mu2 = g.square(q.mu)?;
    let var = g.exp(q.log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, q.log_var)?;
    let s = g.sum(b)?;
    // ½ Σ (μ² + λ² − log λ² − 1) / (normalizer · batch)
    Ok(g.scale_shift(s, 0.5 / (normalizer * batch), -0.5 * numel / (normalizer * batch))?)
}

/// Mean over the batch of the summed per-bit cross-entropies. `probs` is `[batch, 3]`.
pub fn regression_term(g: &mut Graph, probs: NodeId, labels: &[OrdinalLabel]) -> Result<NodeId> {
    let batch = batch_of(g, probs);
    if labels.len() != batch {
        return Err(LossError::Length {
            what: "labels",
            expected: batch,
            got: labels.len(),
        });
    }
    let bits: Vec<f64> = labels.iter().flat_map(|l| l.as_f64()).collect();
    let y = g.constant(Tensor::new(vec![batch, ORDINAL_BITS], bits.clone())?);
    let not_y = g.constant(Tensor::new(vec![batch, ORDINAL_BITS], bits.iter().map(|b| 1.0 - b).collect())?);
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(p)?;
    let q = g.scale_shift(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let s = g.sum(ll)?;
    Ok(g.scale_shift(s, -1.0 / batch as f64, 0.0)?)
}

/// Mean over the batch of the normalized Gaussian reconstruction error.
pub fn reconstruction_term(g: &mut Graph, x: NodeId, x_hat: NodeId, config: &LossConfig) -> Result<NodeId> {
    let batch = batch_of(g, x) as f64;
    let d = g.sub(x, x_hat)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(g.scale_shift(s, 0.5 / (config.recon_variance * config.recon_normalizer * batch), 0.0)?)
}

/// Mean over the batch of `Σ_j H(ŷ_j)`.
pub fn entropy_term(g: &mut Graph, probs: NodeId) -> Result<NodeId> {
    let batch = batch_of(g, probs) as f64;
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(p)?;
    let q = g.scale_shift(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let a = g.mul(p, log_p)?;
    let b = g.mul(q, log_q)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    Ok(g.scale_shift(s, -1.0 / batch, 0.0)?)
}

/// Images of one minibatch (each `n×n`, row-major) with optional labels.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub images: Vec<&'a [f64]>,
    pub labels: Vec<Option<OrdinalLabel>>,
}

impl<'a> Batch<'a> {
    pub fn labeled(images: Vec<&'a [f64]>, labels: Vec<OrdinalLabel>) -> Self {
        Self {
            images,
            labels: labels.into_iter().map(Some).collect(),
        }
    }

    pub fn unlabeled(images: Vec<&'a [f64]>) -> Self {
        let labels = vec![None; images.len()];
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `Some(labels)` for a fully labeled batch, `None` for a fully unlabeled one.
    fn split_labels(&self) -> Result<Option<Vec<OrdinalLabel>>> {
        if self.images.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if self.labels.len() != self.images.len() {
            return Err(LossError::Length {
                what: "labels",
                expected: self.images.len(),
                got: self.labels.len(),
            });
        }
        let known: Vec<OrdinalLabel> = self.labels.iter().flatten().copied().collect();
        match known.len() {
            0 => Ok(None),
            n if n == self.images.len() => Ok(Some(known)),
            _ => Err(LossError::MixedBatch),
        }
    }
}

/// A recorded objective, ready for a backward pass.
#[derive(Debug)]
pub struct LossEval {
    pub graph: Graph,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Parameter name → leaf node, for every parameter the objective touched.
    pub bindings: Vec<(String, NodeId)>,
}

/// Objective of one minibatch: labeled batches score KL + regression +
/// reconstruction, unlabeled batches KL + reconstruction.
pub fn total_loss(batch: &Batch<'_>, params: &ModelParams, config: &LossConfig, noise: &mut dyn NoiseSource) -> Result<LossEval> {
    build_loss(batch, params, config, noise, None)
}

/// As [`total_loss`], but unlabeled batches also pay `entropy_weight · Σ_j H(ŷ_j)`.
pub fn total_loss_with_entropy(
    batch: &Batch<'_>,
    params: &ModelParams,
    config: &LossConfig,
    noise: &mut dyn NoiseSource,
    entropy_weight: f64,
) -> Result<LossEval> {
    if !(entropy_weight >= 0.0) {
        return Err(LossError::InvalidConfig(format!("entropy weight must be >= 0, got {entropy_weight}")));
    }
    build_loss(batch, params, config, noise, Some(entropy_weight))
}

fn build_loss(
    batch: &Batch<'_>,
    params: &ModelParams,
    config: &LossConfig,
    noise: &mut dyn NoiseSource,
    entropy_weight: Option<f64>,
) -> Result<LossEval> {
    config.validate()?;
    let labels = batch.split_labels()?;
    let arch = params.arch();
    let (n, d, b) = (arch.image_side, arch.latent_dim, batch.len());
    let mut pixels = Vec::with_capacity(b * n * n);
    for img in &batch.images {
        if img.len() != n * n {
            return Err(LossError::Length {
                what: "image",
                expected: n * n,
                got: img.len(),
            });
        }
        pixels.extend_from_slice(img);
    }
    // One latent sample per image.
    let mut eps = vec![0.0; b * d];
    for row in eps.chunks_exact_mut(d) {
        noise.standard_normal(row);
    }

    let mut g = Graph::new();
    let mut fwd = Forward::new(params, true);
    let x = g.constant(Tensor::new(vec![b, 1, n, n], pixels)?);
    let q = fwd.encode(&mut g, x)?;
    let z = sample_latent_nodes(&mut g, q, &eps)?;
    let x_hat = fwd.decode(&mut g, z)?;

    let kl = kl_term(&mut g, q, config.kl_normalizer)?;
    let recon = reconstruction_term(&mut g, x, x_hat, config)?;
    let mut total = g.add(kl, recon)?;
    let mut regression = None;
    let mut entropy = None;
    match (&labels, entropy_weight) {
        (Some(labels), _) => {
            let probs = fwd.regress(&mut g, z)?;
            let r = regression_term(&mut g, probs, labels)?;
            total = g.add(total, r)?;
            regression = Some(r);
        }
        (None, Some(w)) => {
            let probs = fwd.regress(&mut g, z)?;
            let h = entropy_term(&mut g, probs)?;
            let h = g.scale_shift(h, w, 0.0)?;
            total = g.add(total, h)?;
            entropy = Some(h);
        }
        (None, None) => {}
    }
    let value = |id: NodeId| g.scalar_value(id).expect("scalar loss term");
    let breakdown = LossBreakdown {
        kl: value(kl),
        regression: regression.map(value),
        reconstruction: value(recon),
        entropy: entropy.map(value),
        total: value(total),
    };
    let bindings = fwd.bindings().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(LossEval {
        graph: g,
        total,
        breakdown,
        bindings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ordinal_encode;

    #[test]
    fn kl_examples() {
        let std_normal = GaussianLatent::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(kl_loss(&std_normal, 1.0).unwrap(), 0.0);
        let shifted = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(kl_loss(&shifted, 1.0).unwrap(), 0.5);
        let bad = GaussianLatent::new(vec![0.0], vec![f64::NAN]).unwrap();
        assert_eq!(kl_loss(&bad, 1.0), Err(LossError::NonFiniteLogVar(0)));
    }

    #[test]
    fn regression_loss_examples() {
        let uniform = OrdinalPrediction([0.5; 3]);
        for c in 0..=3 {
            let l = regression_loss(&uniform, &ordinal_encode(c).unwrap());
            assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
        let label = ordinal_encode(1).unwrap();
        let l = regression_loss(&OrdinalPrediction([0.9, 0.5, 0.1]), &label);
        let oracle = -(0.9f64.ln()) - 0.5f64.ln() - 0.9f64.ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.90386).abs() < 1e-5);
        for c in 0..=3 {
            let label = ordinal_encode(c).unwrap();
            assert!(regression_loss(&OrdinalPrediction(label.as_f64()), &label) < 1e-9);
        }
    }

    #[test]
    fn reconstruction_examples() {
        let cfg = LossConfig {
            recon_variance: 10.0,
            kl_normalizer: 1.0,
            recon_normalizer: 1.0,
        };
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let zero = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(reconstruction_loss(&x, &x, &cfg).unwrap(), 0.0);
        assert!((reconstruction_loss(&x, &zero, &cfg).unwrap() - 0.05).abs() < 1e-15);
        let other = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        assert!(reconstruction_loss(&x, &other, &cfg).is_err());
    }

    #[test]
    fn entropy_is_maximal_at_one_half() {
        let h = bernoulli_entropy(&OrdinalPrediction([0.5; 3]));
        assert!((h - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bernoulli_entropy(&OrdinalPrediction([0.9, 0.2, 0.5])) < h);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::for_arch(&crate::model::Arch::default());
        assert_eq!(cfg.recon_variance, 10.0);
        assert_eq!(cfg.kl_normalizer, 32.0);
        assert_eq!(cfg.recon_normalizer, 4096.0);
        assert!(cfg.validate().is_ok());
        cfg.recon_variance = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn breakdown_reports_first_non_finite_term() {
        let b = LossBreakdown {
            kl: 0.1,
            regression: Some(f64::INFINITY),
            reconstruction: f64::NAN,
            entropy: None,
            total: f64::NAN,
        };
        assert_eq!(b.non_finite_term(), Some("regression"));
    }
}
