//! Prototype variant of the companion trainer: the companion network is
//! replaced by one EMA logit prototype per class, updated from batch
//! class-means with no second backward pass.

use crate::data::{epoch_batches, DatasetSplit};
use crate::dcl::{lr_at, sgd_apply, DclConfig, EpochLog, MomentumBuffers};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, dataset_means, logit_variation, NonTargetHistogram};
use crate::model::{init_params, MlpSpec, ParamSet};
use crate::objectives::cross_entropy;
use crate::rng::rng_stream;
use crate::tensor::{Tape, Tensor};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// K prototype vectors in logit space, one per class, each live only
/// after its class has been observed.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    num_classes: usize,
    protos: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            protos: vec![vec![0.0; num_classes]; num_classes],
            initialized: vec![false; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// Prototype vector for a class, when it has been initialized.
    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.initialized[class].then(|| self.protos[class].as_slice())
    }

    /// Raw byte image (rows of little-endian floats plus the flag byte);
    /// used for bit-identity assertions.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_classes * (self.num_classes * 8 + 1));
        for k in 0..self.num_classes {
            for v in &self.protos[k] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(self.initialized[k] as u8);
        }
        out
    }

    /// Write K rows of K little-endian f64 plus one initialized-flag byte
    /// per row.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Read a bank written by [`PrototypeBank::save`]. K is recovered from
    /// the file length, which `K * (8K + 1)` determines uniquely.
    pub fn load(path: &Path) -> Result<PrototypeBank> {
        let bytes = std::fs::read(path)?;
        let len = bytes.len();
        let mut num_classes = None;
        let mut k = 1usize;
        loop {
            let expected = k * (8 * k + 1);
            if expected == len {
                num_classes = Some(k);
                break;
            }
            if expected > len {
                break;
            }
            k += 1;
        }
        let k = num_classes.ok_or_else(|| {
            Error::Format(format!("bank file length {len} fits no class count"))
        })?;
        let mut bank = PrototypeBank::new(k);
        let row_bytes = 8 * k + 1;
        for c in 0..k {
            let row = &bytes[c * row_bytes..(c + 1) * row_bytes];
            for (j, chunk) in row[..8 * k].chunks_exact(8).enumerate() {
                bank.protos[c][j] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            bank.initialized[c] = match row[8 * k] {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Format(format!(
                        "bad initialized flag {other} for class {c}"
                    )))
                }
            };
        }
        Ok(bank)
    }
}

/// Mean over samples whose class prototype is live of
/// `0.5 * ||logits_i - p^{y_i}||^2`, prototypes detached. Zero when no
/// sample has a live prototype.
pub fn dcp_regularizer(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
    bank: &PrototypeBank,
) -> Result<Tensor> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("expected logit matrix, got {other:?}"))),
    };
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows with {} labels",
            labels.len()
        )));
    }
    if cols != bank.num_classes() {
        return Err(Error::Shape(format!(
            "{cols} logit columns with {}-class bank",
            bank.num_classes()
        )));
    }
    let covered: Vec<usize> = (0..rows)
        .filter(|&i| bank.is_initialized(labels[i]))
        .collect();
    if covered.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let mut target = Vec::with_capacity(covered.len() * cols);
    for &i in &covered {
        target.extend_from_slice(bank.prototype(labels[i]).expect("filtered to live classes"));
    }
    let target = Tensor::matrix(covered.len(), cols, target)?;
    let picked = tape.gather_rows(logits, &covered)?;
    let diff = tape.sub(&picked, &target)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum_all(&sq);
    Ok(tape.scale(&total, 0.5 / covered.len() as f64))
}

/// EMA prototype update from batch class means. Class means are computed
/// before any prototype moves, so the result is independent of sample
/// order within the batch. Classes absent from the batch keep their exact
/// bytes; a class seen for the first time adopts its mean outright.
pub fn update_prototypes(
    bank: &mut PrototypeBank,
    logits: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<()> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("expected logit matrix, got {other:?}"))),
    };
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows with {} labels",
            labels.len()
        )));
    }
    if cols != bank.num_classes() {
        return Err(Error::Shape(format!(
            "{cols} logit columns with {}-class bank",
            bank.num_classes()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must be in [0,1], got {alpha}")));
    }
    let k = bank.num_classes();
    for &y in labels {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for K={k}")));
        }
    }

    let mut sums = vec![vec![0.0f64; cols]; k];
    let mut counts = vec![0u64; k];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        let row = &logits.data()[i * cols..(i + 1) * cols];
        for (s, &v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }

    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let count = counts[c] as f64;
        let mean: Vec<f64> = sums[c].iter().map(|s| s / count).collect();
        if !bank.initialized[c] {
            bank.protos[c] = mean;
            bank.initialized[c] = true;
        } else if alpha == 0.0 {
            bank.protos[c] = mean;
        } else if alpha < 1.0 {
            for (p, &m) in bank.protos[c].iter_mut().zip(&mean) {
                let blend = alpha * *p + (1.0 - alpha) * m;
                // keep each entry inside the hull of its contributions
                *p = blend.clamp(p.min(m), p.max(m));
            }
        }
        // alpha == 1.0 leaves a live prototype untouched
        debug_assert!(bank.protos[c].iter().all(|v| v.is_finite()));
    }
    Ok(())
}

/// Training state for the prototype variant.
#[derive(Debug, Clone)]
pub struct DcpState {
    pub theta: ParamSet,
    pub bank: PrototypeBank,
    pub t: u64,
    pub total_steps: u64,
    momentum: MomentumBuffers,
}

impl DcpState {
    pub fn init(model_spec: &MlpSpec, seed: u64, total_steps: u64) -> Result<DcpState> {
        model_spec.validate()?;
        let theta = init_params(model_spec, &mut rng_stream(seed, "init-theta"));
        let momentum = MomentumBuffers::zeros_for(&theta);
        Ok(DcpState {
            bank: PrototypeBank::new(model_spec.num_classes),
            theta,
            t: 0,
            total_steps,
            momentum,
        })
    }
}

/// One prototype-variant step: gradient step on
/// `CE + lambda * dcp_regularizer`, then an EMA prototype update from the
/// pre-step logits of the companion sub-batch. No second backward pass.
pub fn dcp_step(
    state: &mut DcpState,
    x: &Tensor,
    labels: &[usize],
    config: &DclConfig,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("dcp_step on an empty batch".into()));
    }
    let batch = labels.len();
    let lr = lr_at(config.lr_schedule, config.eta_theta, state.t, state.total_steps);

    let mut tape = Tape::new();
    let staged = state.theta.stage_trainable(&mut tape);
    let logits = state.theta.forward_staged(&mut tape, &staged, x)?;
    let ce = cross_entropy(&mut tape, &logits, labels)?;
    let loss = if config.lambda != 0.0 {
        let reg = dcp_regularizer(&mut tape, &logits, labels, &state.bank)?;
        let weighted = tape.scale(&reg, config.lambda);
        tape.add(&ce, &weighted)?
    } else {
        ce
    };
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::Training {
            step: state.t,
            msg: format!("non-finite loss {loss_value}"),
        });
    }
    let grads = tape.backward(&loss)?;

    // Prototype update from the pre-step logits, companion prefix only.
    let sub = ((config.companion_fraction * batch as f64).ceil() as usize).clamp(1, batch);
    let cols = logits.shape()[1];
    let sub_logits = Tensor::matrix(sub, cols, logits.data()[..sub * cols].to_vec())?;
    update_prototypes(&mut state.bank, &sub_logits, &labels[..sub], config.alpha)?;

    sgd_apply(
        &mut state.theta,
        &staged.node_ids(),
        &grads,
        lr,
        config.momentum,
        config.weight_decay,
        &mut state.momentum,
    )?;
    state.t += 1;
    Ok(loss_value)
}

/// Result of a prototype-variant run.
#[derive(Debug, Clone)]
pub struct DcpOutput {
    pub theta: ParamSet,
    pub bank: PrototypeBank,
    pub logs: Vec<EpochLog>,
}

/// Train the prototype variant; same loop shape and logging as the
/// dual-model trainer, with the companion network replaced by the bank.
pub fn dcp_train(
    config: &DclConfig,
    model_spec: &MlpSpec,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
) -> Result<DcpOutput> {
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
    let mut state = DcpState::init(model_spec, config.seed, total_steps)?;

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
            loss_sum += dcp_step(&mut state, &x, &y, config)?;
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

    Ok(DcpOutput {
        theta: state.theta,
        bank: state.bank,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn random_logits(rows: usize, cols: usize, tag: &str) -> Tensor {
        let mut rng = rng_stream(40, tag);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect()).unwrap()
    }

    #[test]
    fn empty_bank_regularizer_is_zero() {
        let bank = PrototypeBank::new(3);
        let mut tape = Tape::new();
        let logits = random_logits(4, 3, "empty-bank");
        let reg = dcp_regularizer(&mut tape, &logits, &[0, 1, 2, 0], &bank).unwrap();
        assert_eq!(reg.item(), 0.0);
    }

    #[test]
    fn matching_row_contributes_zero() {
        let mut bank = PrototypeBank::new(2);
        let proto = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        update_prototypes(&mut bank, &proto, &[0], 0.6).unwrap();
        let mut tape = Tape::new();
        let logits = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        let reg = dcp_regularizer(&mut tape, &logits, &[0], &bank).unwrap();
        assert_eq!(reg.item(), 0.0);
    }

    #[test]
    fn single_sample_regularizer_value() {
        let mut bank = PrototypeBank::new(2);
        update_prototypes(
            &mut bank,
            &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            &[1],
            0.6,
        )
        .unwrap();
        let mut tape = Tape::new();
        let logits = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let reg = dcp_regularizer(&mut tape, &logits, &[1], &bank).unwrap();
        assert_eq!(reg.item(), 2.0);
    }

    #[test]
    fn uninitialized_classes_are_excluded_from_the_mean() {
        let mut bank = PrototypeBank::new(3);
        update_prototypes(
            &mut bank,
            &Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
            &[0],
            0.6,
        )
        .unwrap();
        // two samples: class 0 has a prototype, class 1 does not
        let mut tape = Tape::new();
        let logits = Tensor::matrix(2, 3, vec![2.0, 0.0, 0.0, 9.0, 9.0, 9.0]).unwrap();
        let reg = dcp_regularizer(&mut tape, &logits, &[0, 1], &bank).unwrap();
        // mean over the one covered sample only: 0.5 * 4 = 2
        assert_eq!(reg.item(), 2.0);
    }

    #[test]
    fn absent_class_keeps_exact_bytes() {
        let mut bank = PrototypeBank::new(3);
        update_prototypes(
            &mut bank,
            &random_logits(3, 3, "seed-bank"),
            &[0, 1, 2],
            0.6,
        )
        .unwrap();
        let before = bank.to_bytes();
        // a batch containing only class 1
        update_prototypes(
            &mut bank,
            &random_logits(2, 3, "only-class-1"),
            &[1, 1],
            0.6,
        )
        .unwrap();
        let after = bank.to_bytes();
        let row = 8 * 3 + 1;
        assert_eq!(before[0..row], after[0..row], "class 0 bytes moved");
        assert_eq!(before[2 * row..], after[2 * row..], "class 2 bytes moved");
        assert_ne!(before[row..2 * row], after[row..2 * row]);
    }

    #[test]
    fn ema_arithmetic_and_alpha_zero() {
        let mut bank = PrototypeBank::new(2);
        update_prototypes(
            &mut bank,
            &Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            &[0],
            0.6,
        )
        .unwrap();
        update_prototypes(
            &mut bank,
            &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            &[0],
            0.6,
        )
        .unwrap();
        let p = bank.prototype(0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15);
        assert!((p[1] - 0.6).abs() < 1e-15);

        let batch = random_logits(3, 2, "alpha-zero");
        update_prototypes(&mut bank, &batch, &[0, 0, 0], 0.0).unwrap();
        let mean0: f64 = (0..3).map(|i| batch.data()[i * 2]).sum::<f64>() / 3.0;
        let mean1: f64 = (0..3).map(|i| batch.data()[i * 2 + 1]).sum::<f64>() / 3.0;
        let p = bank.prototype(0).unwrap();
        assert_eq!(p[0], mean0);
        assert_eq!(p[1], mean1);
    }

    #[test]
    fn update_is_order_independent_within_a_batch() {
        let logits = random_logits(6, 3, "order");
        let labels = [0usize, 1, 0, 2, 1, 0];
        let mut bank_a = PrototypeBank::new(3);
        update_prototypes(&mut bank_a, &logits, &labels, 0.6).unwrap();

        // reverse the rows
        let cols = 3;
        let mut rev = Vec::new();
        for i in (0..6).rev() {
            rev.extend_from_slice(&logits.data()[i * cols..(i + 1) * cols]);
        }
        let rev_logits = Tensor::matrix(6, cols, rev).unwrap();
        let rev_labels: Vec<usize> = labels.iter().rev().copied().collect();
        let mut bank_b = PrototypeBank::new(3);
        update_prototypes(&mut bank_b, &rev_logits, &rev_labels, 0.6).unwrap();
        // sums accumulate in a different order, so compare to a tolerance
        for c in 0..3 {
            for (a, b) in bank_a.protos[c].iter().zip(&bank_b.protos[c]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototypes_stay_in_the_hull_of_their_contributions() {
        let mut rng = rng_stream(41, "hull");
        let mut bank = PrototypeBank::new(2);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for step in 0..100 {
            let rows = 1 + rng.next_below(4) as usize;
            let logits = random_logits(rows, 2, &format!("hull-{step}"));
            let labels = vec![0usize; rows];
            // the hull is over batch means, which lie inside the raw
            // value hull as well
            for &v in logits.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            update_prototypes(&mut bank, &logits, &labels, 0.6).unwrap();
            for &p in bank.prototype(0).unwrap() {
                assert!(p >= lo && p <= hi, "prototype {p} escaped [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_theta_and_bank_untouched() {
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
            2,
        )
        .unwrap();
        let out = dcp_train(&config, &spec, &train_split, &test_split).unwrap();
        let fresh = init_params(&spec, &mut rng_stream(config.seed, "init-theta"));
        assert_eq!(out.theta.to_bytes(), fresh.to_bytes());
        assert!(!out.bank.any_initialized());
        assert!(out.logs.is_empty());
    }

    #[test]
    fn dcp_training_is_deterministic() {
        let spec = MlpSpec::new(4, vec![6], 3).unwrap();
        let config = DclConfig {
            epochs: 2,
            batch_size: 8,
            seed: 19,
            ..DclConfig::default()
        };
        let (train_split, test_split) = crate::data::generate_clusters(
            &crate::data::SyntheticSpec {
                num_classes: 3,
                input_dim: 4,
                samples_per_class: 15,
                test_samples_per_class: 6,
                cluster_mean_scale: 2.5,
                noise_sigma: 0.7,
                label_noise_rate: 0.1,
                split_seed: 0,
            },
            19,
        )
        .unwrap();
        let a = dcp_train(&config, &spec, &train_split, &test_split).unwrap();
        let b = dcp_train(&config, &spec, &train_split, &test_split).unwrap();
        assert_eq!(a.theta.to_bytes(), b.theta.to_bytes());
        assert_eq!(a.bank.to_bytes(), b.bank.to_bytes());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.test_acc, lb.test_acc);
        }
    }

    #[test]
    fn bank_checkpoint_roundtrip() {
        let mut bank = PrototypeBank::new(4);
        update_prototypes(
            &mut bank,
            &random_logits(3, 4, "bank-save"),
            &[0, 2, 0],
            0.6,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("companion_bank_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.ckpt");
        bank.save(&path).unwrap();
        let loaded = PrototypeBank::load(&path).unwrap();
        assert_eq!(loaded, bank);
        assert_eq!(loaded.to_bytes(), bank.to_bytes());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
