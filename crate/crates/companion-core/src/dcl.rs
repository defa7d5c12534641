//! The dual-model trainer: SGD on the deployed model regularized toward a
//! companion network, with the companion regressed onto a convex blend of
//! its own previous outputs and the deployed model's outputs.
//!
//! Snapshot discipline: within one step, every quantity on the right-hand
//! side of either update comes from the pre-step parameters. Both
//! gradients are computed before either model moves, so the update order
//! cannot leak state. The companion update consumes no random draws, which
//! is what makes the `lambda = 0, eta_omega = 0` configuration bit-identical
//! to a plain cross-entropy run under the same seed.

use crate::data::{epoch_batches, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, dataset_means, logit_variation, NonTargetHistogram};
use crate::model::{init_params, MlpSpec, ParamSet};
use crate::objectives::{cross_entropy, distance, DistanceKind};
use crate::rng::rng_stream;
use crate::tensor::{GradMap, NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Use the configured alpha at every step.
    Fixed,
    /// alpha_t = (t-1)/t on the 1-based step index; the idealized
    /// companion then tracks the exact running mean of historical logits.
    Harmonic,
}

/// Every training hyperparameter of one run.
#[derive(Debug, Clone, Serialize)]
pub struct DclConfig {
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub lambda: f64,
    pub eta_theta: f64,
    pub eta_omega: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distance: DistanceKind,
    /// Fraction of each batch (a deterministic prefix) fed to the
    /// companion update.
    pub companion_fraction: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Per-run seed; reports echo the seed list instead, so this field
    /// stays out of serialized form.
    #[serde(skip_serializing)]
    pub seed: u64,
}

impl Default for DclConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            alpha_mode: AlphaMode::Fixed,
            lambda: 1.0,
            eta_theta: 0.1,
            eta_omega: 0.1,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            distance: DistanceKind::Mse,
            companion_fraction: 1.0,
            epochs: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl DclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Input(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Input(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Input(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.companion_fraction > 0.0 && self.companion_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "companion_fraction must be in (0,1], got {}",
                self.companion_fraction
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if self.eta_theta < 0.0 || self.eta_omega < 0.0 {
            return Err(Error::Input("learning rates must be >= 0".into()));
        }
        if let DistanceKind::InfoNce { tau } = self.distance {
            if tau <= 0.0 {
                return Err(Error::Input(format!("infonce tau must be > 0, got {tau}")));
            }
        }
        Ok(())
    }

    /// The plain-SGD reduction: no regularizer, frozen companion.
    pub fn ce_variant(&self) -> DclConfig {
        DclConfig {
            lambda: 0.0,
            eta_omega: 0.0,
            ..self.clone()
        }
    }
}

/// Learning rate at step `t` of `total_steps`.
pub fn lr_at(schedule: LrSchedule, initial_eta: f64, t: u64, total_steps: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => initial_eta,
        LrSchedule::Cosine => {
            if total_steps == 0 {
                return initial_eta;
            }
            let progress = t as f64 / total_steps as f64;
            initial_eta * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// The detached blend `alpha * omega_logits + (1 - alpha) * theta_logits`.
/// Each entry is clamped into the closed interval between its sources, so
/// the convex-combination invariant holds exactly despite rounding.
pub fn companion_target(alpha: f64, omega_logits: &Tensor, theta_logits: &Tensor) -> Result<Tensor> {
    if omega_logits.shape() != theta_logits.shape() {
        return Err(Error::Shape(format!(
            "companion_target: omega {:?} vs theta {:?}",
            omega_logits.shape(),
            theta_logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must be in [0,1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(theta_logits.detach());
    }
    if alpha == 1.0 {
        return Ok(omega_logits.detach());
    }
    let data = omega_logits
        .data()
        .iter()
        .zip(theta_logits.data())
        .map(|(&w, &t)| {
            let blend = alpha * w + (1.0 - alpha) * t;
            blend.clamp(w.min(t), w.max(t))
        })
        .collect();
    Tensor::new(omega_logits.shape().to_vec(), data)
}

/// Per-model SGD velocity, aligned with the flattened parameter order.
#[derive(Debug, Clone)]
pub struct MomentumBuffers {
    velocity: Vec<f64>,
}

impl MomentumBuffers {
    pub fn zeros_for(params: &ParamSet) -> Self {
        Self {
            velocity: vec![0.0; params.flat().len()],
        }
    }
}

/// One SGD step with momentum and weight decay:
/// `g <- grad + wd * p; v <- mu * v + g; p <- p - lr * v`.
pub(crate) fn sgd_apply(
    params: &mut ParamSet,
    leaf_ids: &[NodeId],
    grads: &GradMap,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    buffers: &mut MomentumBuffers,
) -> Result<()> {
    let mut offset = 0usize;
    let mut slot = 0usize;
    for layer in params.layers_mut() {
        for values in [&mut layer.weight, &mut layer.bias] {
            let id = *leaf_ids.get(slot).ok_or_else(|| {
                Error::Contract("fewer staged leaves than parameter tensors".into())
            })?;
            let grad = grads
                .get(id)
                .ok_or_else(|| Error::Contract(format!("no gradient for leaf {id}")))?;
            if grad.numel() != values.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} vs parameter length {}",
                    grad.numel(),
                    values.len()
                )));
            }
            for (i, p) in values.iter_mut().enumerate() {
                let g = grad.data()[i] + weight_decay * *p;
                let v = momentum * buffers.velocity[offset + i] + g;
                buffers.velocity[offset + i] = v;
                *p -= lr * v;
            }
            offset += values.len();
            slot += 1;
        }
    }
    Ok(())
}

/// Mutable training state: both models, their velocities, the step count.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub theta: ParamSet,
    pub omega: ParamSet,
    pub t: u64,
    pub total_steps: u64,
    theta_momentum: MomentumBuffers,
    omega_momentum: MomentumBuffers,
}

impl TrainerState {
    /// Seeded initialization. When the companion mirrors the deployed
    /// architecture it starts as a bit-identical copy; a smaller companion
    /// draws from its own stream (the two interact only through logits).
    pub fn init(
        model_spec: &MlpSpec,
        companion_spec: &MlpSpec,
        seed: u64,
        total_steps: u64,
    ) -> Result<TrainerState> {
        model_spec.validate()?;
        companion_spec.validate()?;
        if companion_spec.input_dim != model_spec.input_dim
            || companion_spec.num_classes != model_spec.num_classes
        {
            return Err(Error::Input(
                "companion must share input_dim and num_classes with the model".into(),
            ));
        }
        let theta = init_params(model_spec, &mut rng_stream(seed, "init-theta"));
        let omega = if companion_spec == model_spec {
            theta.clone_params()
        } else {
            init_params(companion_spec, &mut rng_stream(seed, "init-omega"))
        };
        let theta_momentum = MomentumBuffers::zeros_for(&theta);
        let omega_momentum = MomentumBuffers::zeros_for(&omega);
        Ok(TrainerState {
            theta,
            omega,
            t: 0,
            total_steps,
            theta_momentum,
            omega_momentum,
        })
    }
}

fn take_rows(t: &Tensor, rows: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::matrix(rows, cols, t.data()[..rows * cols].to_vec()).expect("prefix shape")
}

/// One training step over a batch. Returns the deployed-model loss value.
///
/// The deployed model takes a gradient step on
/// `CE(f(theta, x), y) + lambda * distance(f(theta, x), f(omega_t, x))`
/// and the companion regresses its logits on the first
/// `ceil(companion_fraction * b)` samples toward
/// `alpha * f(omega_t, x') + (1 - alpha) * f(theta_t, x')`, both from
/// pre-step snapshots. With `lambda == 0` the regularizer term is skipped
/// entirely and with `eta_omega == 0` the companion is left untouched, so
/// the reduction to plain SGD is exact.
pub fn dcl_step(
    state: &mut TrainerState,
    x: &Tensor,
    labels: &[usize],
    config: &DclConfig,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("dcl_step on an empty batch".into()));
    }
    let batch = labels.len();
    let alpha = match config.alpha_mode {
        AlphaMode::Fixed => config.alpha,
        AlphaMode::Harmonic => {
            let s = (state.t + 1) as f64;
            (s - 1.0) / s
        }
    };
    let lr_theta = lr_at(config.lr_schedule, config.eta_theta, state.t, state.total_steps);
    let lr_omega = lr_at(config.lr_schedule, config.eta_omega, state.t, state.total_steps);

    let use_regularizer = config.lambda != 0.0;
    let update_omega = config.eta_omega != 0.0;

    // Pre-step companion logits on the full batch, needed only by the
    // regularizer.
    let omega_logits = if use_regularizer {
        Some(state.omega.forward(x)?)
    } else {
        None
    };

    // Deployed-model tape.
    let mut tape = Tape::new();
    let staged = state.theta.stage_trainable(&mut tape);
    let logits = state.theta.forward_staged(&mut tape, &staged, x)?;
    let ce = cross_entropy(&mut tape, &logits, labels)?;
    let loss = match &omega_logits {
        Some(om) => {
            let reg = distance(&mut tape, config.distance, &logits, om)?;
            let weighted = tape.scale(&reg, config.lambda);
            tape.add(&ce, &weighted)?
        }
        None => ce,
    };
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::Training {
            step: state.t,
            msg: format!("non-finite deployed loss {loss_value}"),
        });
    }
    let theta_grads = tape.backward(&loss)?;

    // Companion tape, from pre-step snapshots of both models.
    let omega_update = if update_omega {
        let sub = ((config.companion_fraction * batch as f64).ceil() as usize).clamp(1, batch);
        let x_sub = take_rows(x, sub);
        let theta_sub = take_rows(&logits, sub).detach();
        let omega_sub = match &omega_logits {
            Some(om) => take_rows(om, sub),
            None => state.omega.forward(&x_sub)?,
        };
        let target = companion_target(alpha, &omega_sub, &theta_sub)?;
        let mut om_tape = Tape::new();
        let om_staged = state.omega.stage_trainable(&mut om_tape);
        let om_logits = state.omega.forward_staged(&mut om_tape, &om_staged, &x_sub)?;
        let om_loss = distance(&mut om_tape, config.distance, &om_logits, &target)?;
        if !om_loss.item().is_finite() {
            return Err(Error::Training {
                step: state.t,
                msg: format!("non-finite companion loss {}", om_loss.item()),
            });
        }
        let om_grads = om_tape.backward(&om_loss)?;
        Some((om_staged.node_ids(), om_grads))
    } else {
        None
    };

    // Both gradients are in hand; apply theta first, then omega.
    sgd_apply(
        &mut state.theta,
        &staged.node_ids(),
        &theta_grads,
        lr_theta,
        config.momentum,
        config.weight_decay,
        &mut state.theta_momentum,
    )?;
    if let Some((ids, grads)) = omega_update {
        sgd_apply(
            &mut state.omega,
            &ids,
            &grads,
            lr_omega,
            config.momentum,
            config.weight_decay,
            &mut state.omega_momentum,
        )?;
    }
    state.t += 1;
    Ok(loss_value)
}

/// One completed epoch of logged metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: u64,
    /// Mean per-step deployed objective over the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Top non-target histogram over the train split at epoch end.
    pub hist: NonTargetHistogram,
    pub mean_consistency: f64,
    pub mean_perplexity: f64,
    /// Mean logit movement of the test split since the previous epoch
    /// (the initial parameters serve as the epoch-0 snapshot).
    pub logit_variation: f64,
    /// Wall-clock duration of the epoch; diagnostic only, excluded from
    /// reproducibility comparisons.
    pub seconds: f64,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: ParamSet,
    pub omega: ParamSet,
    pub logs: Vec<EpochLog>,
}

/// Train for `config.epochs` epochs of seeded shuffles. Fully
/// deterministic given (config, specs, data); wall-clock fields aside.
pub fn train(
    config: &DclConfig,
    model_spec: &MlpSpec,
    companion_spec: &MlpSpec,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
) -> Result<TrainOutput> {
    config.validate()?;
    train_split.validate()?;
    test_split.validate()?;
    if train_split.input_dim != test_split.input_dim
        || train_split.num_classes != test_split.num_classes
    {
        return Err(Error::Input(
            "train and test splits must share input_dim and num_classes".into(),
        ));
    }
    if model_spec.input_dim != train_split.input_dim
        || model_spec.num_classes != train_split.num_classes
    {
        return Err(Error::Input(format!(
            "model spec ({}, {}) does not match data ({}, {})",
            model_spec.input_dim,
            model_spec.num_classes,
            train_split.input_dim,
            train_split.num_classes
        )));
    }

    let n = train_split.len();
    let batches_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = config.epochs * batches_per_epoch;
    let mut state = TrainerState::init(model_spec, companion_spec, config.seed, total_steps)?;

    let (train_x, train_y) = train_split.full_batch();
    let (test_x, test_y) = test_split.full_batch();
    let mut prev_test_logits = state.theta.forward(&test_x)?;

    let mut logs = Vec::with_capacity(config.epochs as usize);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let batches = epoch_batches(n, config.batch_size, config.seed, epoch);
        for indices in &batches {
            let (x, y) = train_split.batch(indices);
            loss_sum += dcl_step(&mut state, &x, &y, config)?;
        }
        let train_loss = loss_sum / batches.len() as f64;

        let train_logits = state.theta.forward(&train_x)?;
        let train_acc = accuracy(&train_logits, &train_y)?;
        let hist =
            NonTargetHistogram::from_logits(&train_logits, &train_y, train_split.num_classes)?;
        let (mean_consistency, mean_perplexity) = dataset_means(&hist);

        let test_logits = state.theta.forward(&test_x)?;
        let test_acc = accuracy(&test_logits, &test_y)?;
        let variation = logit_variation(&prev_test_logits, &test_logits)?;
        prev_test_logits = test_logits;

        logs.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            test_acc,
            hist,
            mean_consistency,
            mean_perplexity,
            logit_variation: variation,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutput {
        theta: state.theta,
        omega: state.omega,
        logs,
    })
}

/// Idealized tabular companion: one free logit table updated by exactly
/// minimizing the blend objective at each step with the harmonic
/// schedule, alongside the directly computed running mean of the history.
#[derive(Debug, Clone)]
pub struct TabularOracle {
    pub recursive: Tensor,
    pub direct_mean: Tensor,
}

pub fn tabular_companion_oracle(history: &[Tensor]) -> Result<TabularOracle> {
    let first = history
        .first()
        .ok_or_else(|| Error::Input("empty logit history".into()))?;
    for h in history {
        if h.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "history shapes differ: {:?} vs {:?}",
                h.shape(),
                first.shape()
            )));
        }
    }
    // Exact minimizer of the step objective is the target itself:
    // z_s = alpha_s z_{s-1} + (1 - alpha_s) h_s with alpha_s = (s-1)/s.
    let mut recursive = first.data().to_vec();
    for (i, h) in history.iter().enumerate().skip(1) {
        let s = (i + 1) as f64;
        let alpha = (s - 1.0) / s;
        for (z, &v) in recursive.iter_mut().zip(h.data()) {
            *z = alpha * *z + (1.0 - alpha) * v;
        }
    }
    let mut mean = vec![0.0; first.numel()];
    for h in history {
        for (m, &v) in mean.iter_mut().zip(h.data()) {
            *m += v;
        }
    }
    let t = history.len() as f64;
    for m in mean.iter_mut() {
        *m /= t;
    }
    Ok(TabularOracle {
        recursive: Tensor::new(first.shape().to_vec(), recursive)?,
        direct_mean: Tensor::new(first.shape().to_vec(), mean)?,
    })
}

/// Both sides of the bias-variance split of the historical objective:
/// `lhs = (1/t) sum_i ||h_i - c||^2` and
/// `rhs = ||c - mean||^2 + (1/t) sum_i ||h_i - mean||^2`,
/// computed independently so tests can assert their equality.
pub fn orthogonality_check(history: &[Tensor], candidate: &Tensor) -> Result<(f64, f64)> {
    let first = history
        .first()
        .ok_or_else(|| Error::Input("empty logit history".into()))?;
    if candidate.shape() != first.shape() {
        return Err(Error::Shape(format!(
            "candidate {:?} vs history {:?}",
            candidate.shape(),
            first.shape()
        )));
    }
    let t = history.len() as f64;
    let mut lhs = 0.0;
    for h in history {
        if h.shape() != first.shape() {
            return Err(Error::Shape("history shapes differ".into()));
        }
        lhs += h
            .data()
            .iter()
            .zip(candidate.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    lhs /= t;

    let mut mean = vec![0.0; first.numel()];
    for h in history {
        for (m, &v) in mean.iter_mut().zip(h.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t;
    }
    let bias: f64 = candidate
        .data()
        .iter()
        .zip(&mean)
        .map(|(c, m)| (c - m) * (c - m))
        .sum();
    let mut variance = 0.0;
    for h in history {
        variance += h
            .data()
            .iter()
            .zip(&mean)
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    variance /= t;
    Ok((lhs, bias + variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;

    fn random_logits(rows: usize, cols: usize, tag: &str) -> Tensor {
        let mut rng = rng_stream(30, tag);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect()).unwrap()
    }

    #[test]
    fn lr_schedule_anchor_points() {
        assert_eq!(lr_at(LrSchedule::Constant, 0.1, 57, 100), 0.1);
        assert_eq!(lr_at(LrSchedule::Cosine, 0.1, 0, 100), 0.1);
        assert!(lr_at(LrSchedule::Cosine, 0.1, 100, 100).abs() < 1e-17);
        assert!((lr_at(LrSchedule::Cosine, 0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn companion_target_endpoints_and_blend() {
        let omega = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let theta = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(
            companion_target(0.0, &omega, &theta).unwrap().data(),
            theta.data()
        );
        assert_eq!(
            companion_target(1.0, &omega, &theta).unwrap().data(),
            omega.data()
        );
        let blend = companion_target(0.6, &omega, &theta).unwrap();
        assert!((blend.data()[0] - 0.6).abs() < 1e-15);
        assert!((blend.data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn companion_target_is_convex_per_entry() {
        let mut rng = rng_stream(31, "convexity");
        for _ in 0..200 {
            let omega = random_logits(2, 4, &format!("cx-o{}", rng.next_u64()));
            let theta = random_logits(2, 4, &format!("cx-t{}", rng.next_u64()));
            let alpha = rng.next_f64();
            let target = companion_target(alpha, &omega, &theta).unwrap();
            for ((&w, &t), &z) in omega
                .data()
                .iter()
                .zip(theta.data())
                .zip(target.data())
            {
                assert!(z >= w.min(t) && z <= w.max(t), "{z} outside [{w}, {t}]");
            }
        }
    }

    #[test]
    fn companion_target_rejects_shape_mismatch() {
        let a = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0; 2]).unwrap();
        assert!(companion_target(0.5, &a, &b).is_err());
    }

    #[test]
    fn sgd_velocity_hand_sequence() {
        // one weight, three steps of known gradients with mu=0.9, wd=0.1
        let spec = MlpSpec::new(1, vec![], 2).unwrap();
        let mut params = ParamSet::zeros(&spec);
        params.layers_mut()[0].weight = vec![1.0, 0.0];
        let mut buffers = MomentumBuffers::zeros_for(&params);

        let grads_per_step: [f64; 3] = [1.0, -0.5, 0.25];
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for &g0 in &grads_per_step {
            let mut tape = Tape::new();
            let staged = params.stage_trainable(&mut tape);
            let ids = staged.node_ids();
            // synthesize a gradient map through a linear loss: sum(w * c)
            let c = Tensor::matrix(2, 1, vec![g0, 0.0]).unwrap();
            let prod = tape.mul(&staged.tensors()[0], &c).unwrap();
            let loss = tape.sum_all(&prod);
            let grads = tape.backward(&loss).unwrap();
            sgd_apply(&mut params, &ids, &grads, 0.5, 0.9, 0.1, &mut buffers).unwrap();

            let g = g0 + 0.1 * p;
            v = 0.9 * v + g;
            p -= 0.5 * v;
            assert!(
                (params.layers()[0].weight[0] - p).abs() < 1e-15,
                "step mismatch"
            );
        }
    }

    #[test]
    fn alpha_one_mse_is_a_fixed_point_of_the_companion() {
        let spec = MlpSpec::new(3, vec![4], 2).unwrap();
        let config = DclConfig {
            alpha: 1.0,
            lambda: 1.0,
            epochs: 1,
            batch_size: 4,
            lr_schedule: LrSchedule::Constant,
            ..DclConfig::default()
        };
        let mut state = TrainerState::init(&spec, &spec, 5, 100).unwrap();
        let before = state.omega.to_bytes();
        let x = random_logits(4, 3, "fp-x");
        let y = vec![0usize, 1, 0, 1];
        for _ in 0..5 {
            dcl_step(&mut state, &x, &y, &config).unwrap();
        }
        assert_eq!(state.omega.to_bytes(), before);
        // theta, in contrast, moved
        assert_ne!(state.theta.to_bytes(), state.omega.to_bytes());
    }

    #[test]
    fn hand_sized_step_matches_finite_difference_gradient() {
        // 1 input, 1 hidden unit, 2 classes, b=1, lambda=1, MSE, no
        // momentum: theta' = theta - eta * grad(CE + MSE-to-omega).
        let spec = MlpSpec::new(1, vec![1], 2).unwrap();
        let config = DclConfig {
            alpha: 0.6,
            lambda: 1.0,
            eta_theta: 0.1,
            eta_omega: 0.0,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.0,
            weight_decay: 0.0,
            distance: DistanceKind::Mse,
            ..DclConfig::default()
        };
        let mut state = TrainerState::init(&spec, &spec, 7, 10).unwrap();
        // nudge omega away from theta so the regularizer is active
        state.omega.layers_mut()[0].weight[0] += 0.3;
        state.omega.layers_mut()[1].bias[1] -= 0.2;

        let x = Tensor::matrix(1, 1, vec![0.8]).unwrap();
        let y = vec![1usize];
        let theta0 = state.theta.flat();
        let omega = state.omega.clone_params();

        let objective = {
            let spec = spec.clone();
            let x = x.clone();
            let y = y.clone();
            move |flat: &[f64]| {
                let mut p = ParamSet::zeros(&spec);
                p.set_flat(flat).unwrap();
                let mut tape = Tape::new();
                let staged = p.stage_trainable(&mut tape);
                let logits = p.forward_staged(&mut tape, &staged, &x).unwrap();
                let ce = cross_entropy(&mut tape, &logits, &y).unwrap();
                let om = omega.forward(&x).unwrap();
                let reg = distance(&mut tape, DistanceKind::Mse, &logits, &om).unwrap();
                ce.item() + reg.item()
            }
        };
        let fd = finite_diff_grad(objective, &theta0, 1e-6).unwrap();
        let expected: Vec<f64> = theta0
            .iter()
            .zip(&fd)
            .map(|(p, g)| p - 0.1 * g)
            .collect();

        dcl_step(&mut state, &x, &y, &config).unwrap();
        let got = state.theta.flat();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn tabular_oracle_degenerate_histories() {
        let single = vec![random_logits(2, 3, "oracle-single")];
        let out = tabular_companion_oracle(&single).unwrap();
        assert_eq!(out.recursive.data(), single[0].data());
        assert_eq!(out.direct_mean.data(), single[0].data());

        let constant = vec![random_logits(2, 3, "oracle-const"); 7];
        let out = tabular_companion_oracle(&constant).unwrap();
        for (r, c) in out.recursive.data().iter().zip(constant[0].data()) {
            assert!((r - c).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_oracle_tracks_running_mean() {
        let history: Vec<Tensor> = (0..10)
            .map(|i| random_logits(3, 4, &format!("oracle-{i}")))
            .collect();
        let out = tabular_companion_oracle(&history).unwrap();
        for (r, m) in out.recursive.data().iter().zip(out.direct_mean.data()) {
            assert!((r - m).abs() < 1e-9, "{r} vs {m}");
        }
    }

    #[test]
    fn orthogonality_identity_degenerate_and_random() {
        // t = 1: both sides reduce to the squared distance
        let h = vec![random_logits(2, 3, "orth-single")];
        let c = random_logits(2, 3, "orth-cand");
        let (lhs, rhs) = orthogonality_check(&h, &c).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        // candidate at the mean: lhs equals the variance term
        let history: Vec<Tensor> = (0..5)
            .map(|i| random_logits(2, 3, &format!("orth-{i}")))
            .collect();
        let mut mean = vec![0.0; 6];
        for hh in &history {
            for (m, v) in mean.iter_mut().zip(hh.data()) {
                *m += v / 5.0;
            }
        }
        let mean_t = Tensor::matrix(2, 3, mean).unwrap();
        let (lhs, rhs) = orthogonality_check(&history, &mean_t).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let mut rng = rng_stream(33, "orth-sizes");
        for trial in 0..100 {
            let t = 1 + rng.next_below(50) as usize;
            let b = 1 + rng.next_below(8) as usize;
            let k = 2 + rng.next_below(9) as usize;
            let history: Vec<Tensor> = (0..t)
                .map(|i| random_logits(b, k, &format!("orth-r{trial}-{i}")))
                .collect();
            let cand = random_logits(b, k, &format!("orth-rc{trial}"));
            let (lhs, rhs) = orthogonality_check(&history, &cand).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "trial {trial}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let spec = MlpSpec::new(4, vec![5], 3).unwrap();
        let config = DclConfig {
            epochs: 0,
            ..DclConfig::default()
        };
        let (train_split, test_split) = crate::data::generate_clusters(
            &crate::data::SyntheticSpec {
                num_classes: 3,
                input_dim: 4,
                samples_per_class: 5,
                test_samples_per_class: 3,
                cluster_mean_scale: 2.0,
                noise_sigma: 0.3,
                label_noise_rate: 0.0,
                split_seed: 0,
            },
            1,
        )
        .unwrap();
        let out = train(&config, &spec, &spec, &train_split, &test_split).unwrap();
        let fresh = init_params(&spec, &mut rng_stream(config.seed, "init-theta"));
        assert_eq!(out.theta.to_bytes(), fresh.to_bytes());
        assert!(out.logs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = MlpSpec::new(4, vec![6], 3).unwrap();
        let config = DclConfig {
            epochs: 3,
            batch_size: 8,
            seed: 13,
            ..DclConfig::default()
        };
        let (train_split, test_split) = crate::data::generate_clusters(
            &crate::data::SyntheticSpec {
                num_classes: 3,
                input_dim: 4,
                samples_per_class: 20,
                test_samples_per_class: 8,
                cluster_mean_scale: 2.5,
                noise_sigma: 0.8,
                label_noise_rate: 0.1,
                split_seed: 0,
            },
            13,
        )
        .unwrap();
        let a = train(&config, &spec, &spec, &train_split, &test_split).unwrap();
        let b = train(&config, &spec, &spec, &train_split, &test_split).unwrap();
        assert_eq!(a.theta.to_bytes(), b.theta.to_bytes());
        assert_eq!(a.omega.to_bytes(), b.omega.to_bytes());
        assert_eq!(a.logs.len(), b.logs.len());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.train_acc, lb.train_acc);
            assert_eq!(la.test_acc, lb.test_acc);
            assert_eq!(la.logit_variation, lb.logit_variation);
            assert_eq!(la.hist, lb.hist);
        }
    }
}
