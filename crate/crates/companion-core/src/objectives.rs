//! Supervised loss and the logit-distance family.
//!
//! Every distance treats the target batch as a constant observation: it is
//! detached before any op is recorded, so gradients flow through the
//! prediction argument only. Batch reduction is a mean everywhere, keeping
//! the regularization weight and learning rates batch-size independent.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Tape, Tensor};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const DEFAULT_INFONCE_TAU: f64 = 0.1;

/// Which distance is applied between two logit batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceKind {
    /// Mean over the batch of `0.5 * ||pred_i - target_i||^2`.
    Mse,
    /// Mean over the batch of `KL(softmax(target_i) || softmax(pred_i))`.
    Kl,
    /// Mean over the batch of `(1/K) * sum_k |pred_ik - target_ik|`.
    L1,
    /// In-batch contrastive loss over cosine similarities at temperature
    /// `tau`, with the matching target row as the positive.
    InfoNce { tau: f64 },
}

impl DistanceKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::Mse => "mse",
            DistanceKind::Kl => "kl",
            DistanceKind::L1 => "l1",
            DistanceKind::InfoNce { .. } => "infonce",
        }
    }

    /// Parse the config string form; InfoNCE takes the default temperature.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mse" => Ok(DistanceKind::Mse),
            "kl" => Ok(DistanceKind::Kl),
            "l1" => Ok(DistanceKind::L1),
            "infonce" => Ok(DistanceKind::InfoNce {
                tau: DEFAULT_INFONCE_TAU,
            }),
            other => Err(Error::Input(format!(
                "unknown distance `{other}` (expected mse|kl|l1|infonce)"
            ))),
        }
    }
}

impl Serialize for DistanceKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DistanceKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        DistanceKind::parse(&s).map_err(D::Error::custom)
    }
}

/// Mean cross-entropy of a logit batch against class labels.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let logp = tape.log_softmax(logits)?;
    tape.nll_mean(&logp, labels)
}

/// Distance between two logit batches of equal `[b x K]` shape, reduced
/// by mean over the batch. The target is detached: it contributes values,
/// never gradients.
pub fn distance(
    tape: &mut Tape,
    kind: DistanceKind,
    pred: &Tensor,
    target: &Tensor,
) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "distance: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (batch, classes) = match pred.shape() {
        [b, k] => (*b, *k),
        other => {
            return Err(Error::Shape(format!(
                "distance expects a matrix, got {other:?}"
            )))
        }
    };
    if batch == 0 {
        return Err(Error::Input("distance on an empty batch".into()));
    }
    let target = target.detach();

    match kind {
        DistanceKind::Mse => {
            let diff = tape.sub(pred, &target)?;
            let sq = tape.mul(&diff, &diff)?;
            let total = tape.sum_all(&sq);
            Ok(tape.scale(&total, 0.5 / batch as f64))
        }
        DistanceKind::L1 => {
            let diff = tape.sub(pred, &target)?;
            let abs = tape.abs(&diff);
            let total = tape.sum_all(&abs);
            Ok(tape.scale(&total, 1.0 / (batch * classes) as f64))
        }
        DistanceKind::Kl => {
            // KL(p_t || p_s) = sum p_t * (log p_t - log p_s); the target
            // side is constant, computed with the same stabilized routine
            // as the tape op so identical inputs cancel exactly.
            let log_t = log_softmax_rows(target.data(), batch, classes);
            let prob_t: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
            let log_t = Tensor::matrix(batch, classes, log_t)?;
            let prob_t = Tensor::matrix(batch, classes, prob_t)?;
            let log_s = tape.log_softmax(pred)?;
            let neg_log_s = tape.scale(&log_s, -1.0);
            let diff = tape.add(&neg_log_s, &log_t)?;
            let weighted = tape.mul(&diff, &prob_t)?;
            let total = tape.sum_all(&weighted);
            Ok(tape.scale(&total, 1.0 / batch as f64))
        }
        DistanceKind::InfoNce { tau } => {
            if tau <= 0.0 {
                return Err(Error::Input(format!(
                    "infonce temperature must be positive, got {tau}"
                )));
            }
            for (name, t) in [("pred", pred), ("target", &target)] {
                for r in 0..batch {
                    let row = &t.data()[r * classes..(r + 1) * classes];
                    if row.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                        return Err(Error::Input(format!("infonce: zero-norm {name} row {r}")));
                    }
                }
            }
            // With a single sample the softmax over in-batch negatives is
            // trivially one, so the loss is identically zero.
            if batch == 1 {
                return Ok(Tensor::scalar(0.0));
            }
            let mut unit_t = target.data().to_vec();
            for r in 0..batch {
                let row = &mut unit_t[r * classes..(r + 1) * classes];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            let unit_t = Tensor::matrix(batch, classes, unit_t)?;
            // cos(pred_i, target_j) = (pred_i . unit_t_j) / ||pred_i||
            let dots = tape.matmul_nt(pred, &unit_t)?;
            let norms = tape.row_l2_norm(pred)?;
            let inv = tape.recip(&norms)?;
            let cos = tape.scale_rows(&dots, &inv)?;
            let scaled = tape.scale(&cos, 1.0 / tau);
            let logp = tape.log_softmax(&scaled)?;
            let diag: Vec<usize> = (0..batch).collect();
            tape.nll_mean(&logp, &diag)
        }
    }
}
