//! Logit-space diagnostics: top non-target statistics, per-class
//! consistency and perplexity, epoch-to-epoch logit variation, accuracy.
//!
//! Ties break to the lowest index everywhere so every number is
//! reproducible across implementations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per target class, how often each other class was the top non-target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonTargetHistogram {
    num_classes: usize,
    // counts[c][k]: samples of class c whose top non-target was k.
    // The diagonal is structurally excluded by `record`.
    counts: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

impl NonTargetHistogram {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
            totals: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Samples observed for target class `c`.
    pub fn total(&self, c: usize) -> u64 {
        self.totals[c]
    }

    /// Count for (target class, top non-target class); `k == c` is not a
    /// real cell and always reads 0.
    pub fn count(&self, c: usize, k: usize) -> u64 {
        self.counts[c][k]
    }

    /// Record one sample of class `target` whose top non-target was `top`.
    pub fn record(&mut self, target: usize, top: usize) -> Result<()> {
        if target >= self.num_classes || top >= self.num_classes {
            return Err(Error::Input(format!(
                "histogram record ({target}, {top}) out of range for K={}",
                self.num_classes
            )));
        }
        if target == top {
            return Err(Error::Input(format!(
                "top non-target class equals the target class {target}"
            )));
        }
        self.counts[target][top] += 1;
        self.totals[target] += 1;
        Ok(())
    }

    /// Build the histogram for a whole logit batch.
    pub fn from_logits(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut hist = Self::new(num_classes);
        let (rows, cols) = match logits.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::Shape(format!("expected logit matrix, got {other:?}"))),
        };
        if rows != labels.len() || cols != num_classes {
            return Err(Error::Shape(format!(
                "logits {rows}x{cols} with {} labels, K={num_classes}",
                labels.len()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * cols..(i + 1) * cols];
            let top = top_nontarget_class(row, y)?;
            hist.record(y, top)?;
        }
        Ok(hist)
    }

    /// Nested map {class -> {class -> count}} with zero cells omitted;
    /// this is the JSON dump schema.
    pub fn to_nested_counts(&self) -> Vec<(usize, Vec<(usize, u64)>)> {
        let mut out = Vec::new();
        for c in 0..self.num_classes {
            if self.totals[c] == 0 {
                continue;
            }
            let row: Vec<(usize, u64)> = (0..self.num_classes)
                .filter(|&k| self.counts[c][k] > 0)
                .map(|k| (k, self.counts[c][k]))
                .collect();
            out.push((c, row));
        }
        out
    }
}

/// The non-target class with the largest logit; ties break to the lowest
/// index. Monotone-invariant, so logits and softmax probabilities agree.
pub fn top_nontarget_class(logits: &[f64], target: usize) -> Result<usize> {
    if logits.len() < 2 {
        return Err(Error::Input("need at least 2 classes".into()));
    }
    if target >= logits.len() {
        return Err(Error::Input(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let mut best: Option<usize> = None;
    for (k, &v) in logits.iter().enumerate() {
        if k == target {
            continue;
        }
        match best {
            None => best = Some(k),
            Some(b) => {
                if v > logits[b] {
                    best = Some(k);
                }
            }
        }
    }
    Ok(best.expect("at least one non-target class"))
}

/// Fraction of class-c samples sharing the most frequent top non-target.
pub fn class_consistency(hist: &NonTargetHistogram, c: usize) -> Result<f64> {
    let total = hist.total(c);
    if total == 0 {
        return Err(Error::UndefinedClass(c));
    }
    let max = (0..hist.num_classes())
        .map(|k| hist.count(c, k))
        .max()
        .unwrap_or(0);
    Ok(max as f64 / total as f64)
}

/// Perplexity of the top non-target distribution for class c: the
/// exponential of its entropy in nats, with 0 log 0 = 0. Ranges over
/// [1, K-1].
pub fn class_perplexity(hist: &NonTargetHistogram, c: usize) -> Result<f64> {
    let total = hist.total(c);
    if total == 0 {
        return Err(Error::UndefinedClass(c));
    }
    let mut entropy = 0.0;
    for k in 0..hist.num_classes() {
        let count = hist.count(c, k);
        if count > 0 {
            let p = count as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Means over classes with at least one sample: (consistency, perplexity).
/// NaN when every class is empty (an empty evaluation never happens in a
/// real run).
pub fn dataset_means(hist: &NonTargetHistogram) -> (f64, f64) {
    let mut n = 0usize;
    let mut cons = 0.0;
    let mut perp = 0.0;
    for c in 0..hist.num_classes() {
        if hist.total(c) > 0 {
            cons += class_consistency(hist, c).expect("non-empty class");
            perp += class_perplexity(hist, c).expect("non-empty class");
            n += 1;
        }
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (cons / n as f64, perp / n as f64)
}

/// Mean per-row Euclidean distance between two logit snapshots of the
/// same evaluation set.
pub fn logit_variation(prev: &Tensor, curr: &Tensor) -> Result<f64> {
    if prev.shape() != curr.shape() {
        return Err(Error::Shape(format!(
            "logit_variation: {:?} vs {:?}",
            prev.shape(),
            curr.shape()
        )));
    }
    let (rows, cols) = match prev.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("expected matrices, got {other:?}"))),
    };
    let mut total = 0.0;
    for r in 0..rows {
        let mut sq = 0.0;
        for c in 0..cols {
            let d = curr.data()[r * cols + c] - prev.data()[r * cols + c];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / rows as f64)
}

/// Fraction of rows whose argmax (ties to lowest index) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = match logits.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::Shape(format!("expected logit matrix, got {other:?}"))),
    };
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "{rows} rows with {} labels",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= cols {
            return Err(Error::Input(format!(
                "label {y} out of range for {cols} classes"
            )));
        }
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * cols..(i + 1) * cols];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn hist_from(tops: &[usize], c: usize, k: usize) -> NonTargetHistogram {
        let mut hist = NonTargetHistogram::new(k);
        for &t in tops {
            hist.record(c, t).unwrap();
        }
        hist
    }

    #[test]
    fn top_nontarget_examples() {
        assert_eq!(top_nontarget_class(&[3.0, 5.0, 2.0], 1).unwrap(), 0);
        assert_eq!(top_nontarget_class(&[3.0, 5.0, 2.0], 0).unwrap(), 1);
        // ties break to the lowest index
        assert_eq!(top_nontarget_class(&[1.0, 1.0, 0.0], 2).unwrap(), 0);
    }

    #[test]
    fn top_nontarget_is_softmax_invariant() {
        let mut rng = rng_stream(14, "softmax-invariance");
        for _ in 0..200 {
            let k = 3 + (rng.next_below(6) as usize);
            let logits: Vec<f64> = (0..k).map(|_| 3.0 * rng.next_normal()).collect();
            let y = rng.next_below(k as u64) as usize;
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            assert_eq!(
                top_nontarget_class(&logits, y).unwrap(),
                top_nontarget_class(&probs, y).unwrap()
            );
        }
    }

    #[test]
    fn consistency_examples() {
        let hist = hist_from(&[2, 2, 3, 2], 0, 4);
        assert_eq!(class_consistency(&hist, 0).unwrap(), 0.75);

        let all_same = hist_from(&[1, 1, 1], 0, 4);
        assert_eq!(class_consistency(&all_same, 0).unwrap(), 1.0);

        let uniform = hist_from(&[1, 2, 3, 4], 0, 5);
        assert_eq!(class_consistency(&uniform, 0).unwrap(), 0.25);
    }

    #[test]
    fn consistency_undefined_for_empty_class() {
        let hist = NonTargetHistogram::new(3);
        assert!(matches!(
            class_consistency(&hist, 1),
            Err(Error::UndefinedClass(1))
        ));
        assert!(matches!(
            class_perplexity(&hist, 1),
            Err(Error::UndefinedClass(1))
        ));
    }

    #[test]
    fn perplexity_examples() {
        let dominant = hist_from(&[2, 2, 2], 0, 4);
        assert_eq!(class_perplexity(&dominant, 0).unwrap(), 1.0);

        let two_way = hist_from(&[1, 2], 0, 4);
        assert!((class_perplexity(&two_way, 0).unwrap() - 2.0).abs() < 1e-12);

        // p = {0.6, 0.3, 0.1} against a direct entropy computation
        let mut tops = vec![1; 6];
        tops.extend_from_slice(&[2, 2, 2, 3]);
        let hist = hist_from(&tops, 0, 4);
        let expected =
            (-(0.6f64 * 0.6f64.ln() + 0.3 * 0.3f64.ln() + 0.1 * 0.1f64.ln())).exp();
        assert!((class_perplexity(&hist, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn perplexity_bounds_on_random_histograms() {
        let mut rng = rng_stream(15, "pp-bounds");
        for _ in 0..1000 {
            let k = 3 + (rng.next_below(8) as usize);
            let n = 1 + (rng.next_below(40) as usize);
            let mut hist = NonTargetHistogram::new(k);
            for _ in 0..n {
                let mut top = rng.next_below(k as u64) as usize;
                if top == 0 {
                    top = 1;
                }
                hist.record(0, top).unwrap();
            }
            let pp = class_perplexity(&hist, 0).unwrap();
            assert!(pp >= 1.0 - 1e-12, "pp {pp} < 1");
            assert!(pp <= (k - 1) as f64 + 1e-12, "pp {pp} > K-1 = {}", k - 1);
            // consistency 1 <=> perplexity 1
            let cons = class_consistency(&hist, 0).unwrap();
            assert_eq!(cons == 1.0, (pp - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perplexity_hits_bounds_at_extremes() {
        let one_class = hist_from(&[3; 17], 0, 5);
        assert_eq!(class_perplexity(&one_class, 0).unwrap(), 1.0);

        let uniform = hist_from(&[1, 2, 3, 4], 0, 5);
        assert!((class_perplexity(&uniform, 0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn variation_examples() {
        let a = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(logit_variation(&a, &a).unwrap(), 0.0);

        let prev = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let curr = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(logit_variation(&prev, &curr).unwrap(), 5.0);
    }

    #[test]
    fn variation_matches_per_row_norm_oracle() {
        let mut rng = rng_stream(16, "variation");
        let n = 7;
        let k = 5;
        let a: Vec<f64> = (0..n * k).map(|_| rng.next_normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.next_normal()).collect();
        let mut expected = 0.0;
        for r in 0..n {
            let mut sq = 0.0;
            for c in 0..k {
                let d = b[r * k + c] - a[r * k + c];
                sq += d * d;
            }
            expected += sq.sqrt();
        }
        expected /= n as f64;
        let ta = Tensor::matrix(n, k, a).unwrap();
        let tb = Tensor::matrix(n, k, b).unwrap();
        assert!((logit_variation(&ta, &tb).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let perfect = Tensor::matrix(3, 3, vec![
            9.0, 0.0, 0.0, //
            0.0, 9.0, 0.0, //
            0.0, 0.0, 9.0,
        ])
        .unwrap();
        assert_eq!(accuracy(&perfect, &[0, 1, 2]).unwrap(), 1.0);

        let zeros = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        // ties break to index 0
        assert_eq!(accuracy(&zeros, &[0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&zeros, &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn dataset_means_skip_empty_classes_and_ignore_order() {
        let mut hist = NonTargetHistogram::new(4);
        for &(c, t) in &[(0, 1), (0, 1), (0, 2), (2, 3)] {
            hist.record(c, t).unwrap();
        }
        let (cons, perp) = dataset_means(&hist);
        // class 0: consistency 2/3; class 2: consistency 1; classes 1, 3 empty
        assert!((cons - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!(perp >= 1.0);

        // permuting the sample order leaves the histogram unchanged
        let mut permuted = NonTargetHistogram::new(4);
        for &(c, t) in &[(2, 3), (0, 2), (0, 1), (0, 1)] {
            permuted.record(c, t).unwrap();
        }
        assert_eq!(hist, permuted);
    }

    #[test]
    fn histogram_from_logits_and_json_shape() {
        let logits = Tensor::matrix(3, 3, vec![
            1.0, 2.0, 0.0, // y=0 -> top nontarget 1
            1.0, 2.0, 0.0, // y=1 -> top nontarget 0
            5.0, 2.0, 0.0, // y=0 -> top nontarget 1
        ])
        .unwrap();
        let hist = NonTargetHistogram::from_logits(&logits, &[0, 1, 0], 3).unwrap();
        assert_eq!(hist.count(0, 1), 2);
        assert_eq!(hist.count(1, 0), 1);
        assert_eq!(hist.total(0), 2);
        let nested = hist.to_nested_counts();
        assert_eq!(nested, vec![(0, vec![(1, 2)]), (1, vec![(0, 1)])]);
    }

    #[test]
    fn histogram_rejects_diagonal_records() {
        let mut hist = NonTargetHistogram::new(3);
        assert!(hist.record(1, 1).is_err());
    }
}
