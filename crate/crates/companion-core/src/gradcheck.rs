//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::model::{init_params, MlpSpec, ParamSet};
use crate::objectives::{cross_entropy, distance, DistanceKind};
use crate::rng::rng_stream;
use crate::tensor::{Tape, Tensor};

/// Numerical gradient of a scalar function by central differences.
pub fn finite_diff_grad<F>(mut f: F, x0: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        point[i] = x0[i] + h;
        let plus = f(&point);
        point[i] = x0[i] - h;
        let minus = f(&point);
        point[i] = x0[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Eval(format!(
                "function non-finite near coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Max relative error between an analytic gradient and the central
/// finite-difference gradient of `f` at `x0`:
/// `max_i |g_a[i] - g_fd[i]| / max(1, |g_fd[i]|)`.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], x0: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x0.len() {
        return Err(Error::Shape(format!(
            "gradient length {} vs point length {}",
            analytic.len(),
            x0.len()
        )));
    }
    let fd = finite_diff_grad(f, x0, h)?;
    let mut worst = 0.0f64;
    for (ga, gf) in analytic.iter().zip(&fd) {
        let err = (ga - gf).abs() / gf.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Randomized end-to-end gradient verification: `count` random MLPs with
/// up to 2 hidden layers of at most 16 units and at most 5 classes. For
/// each net, the analytic gradient of the cross-entropy, of every
/// distance kind, and of the composite `CE + lambda * distance` objective
/// is compared against central finite differences with `h = 1e-6`.
/// Returns the worst relative error observed.
pub fn mlp_gradient_sweep(count: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..count {
        let mut rng = rng_stream(seed, &format!("sweep/{trial}"));
        let input_dim = 1 + rng.next_below(8) as usize;
        let depth = rng.next_below(3) as usize;
        let hidden: Vec<usize> = (0..depth).map(|_| 1 + rng.next_below(16) as usize).collect();
        let classes = 2 + rng.next_below(4) as usize;
        let batch = 2 + rng.next_below(5) as usize;
        let spec = MlpSpec::new(input_dim, hidden, classes)?;

        let mut params =
            init_params(&spec, &mut rng_stream(seed, &format!("sweep-params/{trial}")));
        // jitter the biases so no ReLU pre-activation sits on its kink,
        // where central differences are meaningless
        let mut bias_rng = rng_stream(seed, &format!("sweep-bias/{trial}"));
        for layer in params.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = 0.1 * bias_rng.next_normal();
            }
        }
        let x = Tensor::matrix(
            batch,
            input_dim,
            (0..batch * input_dim).map(|_| rng.next_normal()).collect(),
        )?;
        let labels: Vec<usize> = (0..batch)
            .map(|_| rng.next_below(classes as u64) as usize)
            .collect();
        // companion-style target logits; a plain Gaussian draw never has
        // the zero-norm rows a dead-ReLU net can produce
        let mut target_rng = rng_stream(seed, &format!("sweep-target/{trial}"));
        let target = Tensor::matrix(
            batch,
            classes,
            (0..batch * classes).map(|_| target_rng.next_normal()).collect(),
        )?;
        let lambda = 0.25 + 1.5 * rng.next_f64();
        let tau = 0.1 + 0.9 * rng.next_f64();

        let kinds = [
            DistanceKind::Mse,
            DistanceKind::Kl,
            DistanceKind::L1,
            DistanceKind::InfoNce { tau },
        ];

        // objective builders: cross-entropy alone, each distance alone,
        // and the composite with each distance
        type LossBuilder = Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>>;
        let mut objectives: Vec<LossBuilder> = Vec::new();
        {
            let labels = labels.clone();
            objectives.push(Box::new(move |tape, logits| {
                cross_entropy(tape, logits, &labels)
            }));
        }
        for kind in kinds {
            let target = target.clone();
            objectives.push(Box::new(move |tape, logits| {
                distance(tape, kind, logits, &target)
            }));
        }
        for kind in kinds {
            let target = target.clone();
            let labels = labels.clone();
            objectives.push(Box::new(move |tape, logits| {
                let ce = cross_entropy(tape, logits, &labels)?;
                let reg = distance(tape, kind, logits, &target)?;
                let weighted = tape.scale(&reg, lambda);
                tape.add(&ce, &weighted)
            }));
        }

        let flat0 = params.flat();
        for objective in &objectives {
            let mut tape = Tape::new();
            let staged = params.stage_trainable(&mut tape);
            let logits = params.forward_staged(&mut tape, &staged, &x)?;
            let loss = objective(&mut tape, &logits)?;
            let grads = tape.backward(&loss)?;
            let mut analytic = Vec::with_capacity(flat0.len());
            for id in staged.node_ids() {
                let g = grads
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("missing gradient for leaf {id}")))?;
                analytic.extend_from_slice(g.data());
            }

            let spec = spec.clone();
            let x = x.clone();
            let f = |flat: &[f64]| -> f64 {
                let mut p = ParamSet::zeros(&spec);
                p.set_flat(flat).expect("same length");
                let mut tape = Tape::new();
                let staged = p.stage_trainable(&mut tape);
                let logits = p.forward_staged(&mut tape, &staged, &x).expect("forward");
                objective(&mut tape, &logits).expect("objective").item()
            };
            let err = finite_diff_check(f, &analytic, &flat0, 1e-6)?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // Central differences have zero truncation on quadratics, so a
        // generous step leaves only rounding noise.
        let x0 = [1.25, -0.5, 3.0];
        let analytic: Vec<f64> = x0.iter().map(|x| 2.0 * x).collect();
        let err = finite_diff_check(
            |x| x.iter().map(|v| v * v).sum(),
            &analytic,
            &x0,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn linear_is_exact() {
        let mut rng = rng_stream(1, "gradcheck-linear");
        let w: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let x0: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let wc = w.clone();
        let err = finite_diff_check(
            move |x| x.iter().zip(&wc).map(|(a, b)| a * b).sum(),
            &w,
            &x0,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let res = finite_diff_check(|x| x[0].ln(), &[1.0], &[0.0], 1e-6);
        assert!(matches!(res, Err(Error::Eval(_))));
    }

    #[test]
    fn two_hidden_layer_mlp_cross_entropy_gradient() {
        let spec = MlpSpec::new(3, vec![5, 4], 3).unwrap();
        let params = init_params(&spec, &mut rng_stream(8, "mlp-ce"));
        let mut rng = rng_stream(8, "mlp-ce-batch");
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.next_normal()).collect()).unwrap();
        let labels = vec![0usize, 2, 1, 1];

        let mut tape = Tape::new();
        let staged = params.stage_trainable(&mut tape);
        let logits = params.forward_staged(&mut tape, &staged, &x).unwrap();
        let loss = cross_entropy(&mut tape, &logits, &labels).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut analytic = Vec::new();
        for id in staged.node_ids() {
            analytic.extend_from_slice(grads.get(id).unwrap().data());
        }

        let flat0 = params.flat();
        let f = |flat: &[f64]| -> f64 {
            let mut p = ParamSet::zeros(&spec);
            p.set_flat(flat).unwrap();
            let mut tape = Tape::new();
            let staged = p.stage_trainable(&mut tape);
            let logits = p.forward_staged(&mut tape, &staged, &x).unwrap();
            cross_entropy(&mut tape, &logits, &labels).unwrap().item()
        };
        let err = finite_diff_check(f, &analytic, &flat0, 1e-6).unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn quick_sweep_stays_under_tolerance() {
        let worst = mlp_gradient_sweep(4, 77).unwrap();
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
