//! Deterministic dataset sources and seeded epoch batching.
//!
//! Three sources: synthetic Gaussian clusters (class means on a sphere),
//! CSV tables, and IDX image/label files. Batching is keyed by
//! `(seed, epoch)` only, never by which trainer consumes the batches, so
//! competing methods see identical data order under a shared seed.

use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A labelled split: `n x input_dim` features plus class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub name: String,
}

impl DatasetSplit {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let split = Self {
            features,
            labels,
            input_dim,
            num_classes,
            name: name.into(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Input(format!("dataset `{}` is empty", self.name)));
        }
        if self.features.len() != self.labels.len() * self.input_dim {
            return Err(Error::Shape(format!(
                "dataset `{}`: {} features for {} samples of width {}",
                self.name,
                self.features.len(),
                self.labels.len(),
                self.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Input(format!(
                "dataset `{}`: label {bad} >= num_classes {}",
                self.name, self.num_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "dataset `{}` contains non-finite features",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature row of one sample.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Gather the given samples into a `[b x input_dim]` batch tensor and
    /// a label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::matrix(indices.len(), self.input_dim, data).expect("batch shape");
        (t, labels)
    }

    /// The whole split as one batch, in stored order.
    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let t = Tensor::matrix(self.len(), self.input_dim, self.features.clone())
            .expect("dataset shape invariant");
        (t, self.labels.clone())
    }
}

/// Synthetic Gaussian-cluster generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Training samples drawn per class.
    pub samples_per_class: usize,
    /// Test samples drawn per class.
    #[serde(default = "default_test_samples")]
    pub test_samples_per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    pub cluster_mean_scale: f64,
    /// Isotropic noise standard deviation around each class mean.
    pub noise_sigma: f64,
    /// Fraction of train labels resampled uniformly (may redraw the
    /// original label). Test labels stay clean.
    #[serde(default)]
    pub label_noise_rate: f64,
    /// Extra entropy folded into the data streams, separating the
    /// train/test draw from the run seed when desired.
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_samples() -> usize {
    50
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Input("synthetic: num_classes must be >= 2".into()));
        }
        if self.input_dim < 1 || self.samples_per_class < 1 || self.test_samples_per_class < 1 {
            return Err(Error::Input(
                "synthetic: dims and per-class sample counts must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Input(
                "synthetic: label_noise_rate must be in [0, 1)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Input("synthetic: noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generate (train, test) splits. Fully deterministic per (spec, seed):
/// class means come from one stream, train/test samples and label noise
/// from their own streams, so changing one knob never shifts the others.
pub fn generate_clusters(spec: &SyntheticSpec, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    spec.validate()?;
    let base = seed ^ spec.split_seed;
    let k = spec.num_classes;
    let d = spec.input_dim;

    let mut mean_rng = rng_stream(base, "data/means");
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        loop {
            let v: Vec<f64> = (0..d).map(|_| mean_rng.next_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                means.push(
                    v.into_iter()
                        .map(|x| x / norm * spec.cluster_mean_scale)
                        .collect::<Vec<f64>>(),
                );
                break;
            }
        }
    }

    let draw_split = |tag: &str, per_class: usize, name: &str| -> DatasetSplit {
        let mut rng = rng_stream(base, tag);
        let mut features = Vec::with_capacity(k * per_class * d);
        let mut labels = Vec::with_capacity(k * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    features.push(m + spec.noise_sigma * rng.next_normal());
                }
                labels.push(c);
            }
        }
        DatasetSplit {
            features,
            labels,
            input_dim: d,
            num_classes: k,
            name: name.into(),
        }
    };

    let mut train = draw_split("data/train", spec.samples_per_class, "synthetic-train");
    let test = draw_split("data/test", spec.test_samples_per_class, "synthetic-test");

    if spec.label_noise_rate > 0.0 {
        let mut noise_rng = rng_stream(base, "data/label-noise");
        for y in train.labels.iter_mut() {
            if noise_rng.next_f64() < spec.label_noise_rate {
                *y = noise_rng.next_below(k as u64) as usize;
            }
        }
    }

    Ok((train, test))
}

/// Parse the CSV schema `label,f0,f1,...` with a header row. K is
/// inferred as max label + 1.
pub fn load_csv(path: &Path) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Input(format!("{}: empty file", path.display()))),
    };
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"label") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with `label`, got `{header}`"),
        });
    }
    let input_dim = columns.len() - 1;
    if input_dim == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_tok = fields.next().unwrap_or("");
        let label: usize = label_tok.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label `{label_tok}`"),
        })?;
        labels.push(label);
        let mut count = 0;
        for tok in fields {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad feature `{tok}`"),
            })?;
            features.push(v);
            count += 1;
        }
        if count != input_dim {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {input_dim} features, got {count}"),
            });
        }
    }
    if labels.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    DatasetSplit::new(features, labels, input_dim, num_classes.max(2), name)
}

/// Write the CSV schema `load_csv` reads. Floats use the shortest
/// round-trip representation, so save-then-load reproduces the split
/// exactly.
pub fn save_csv(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("label");
    for i in 0..split.input_dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..split.len() {
        let mut line = split.labels[i].to_string();
        for v in split.row(i) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("truncated IDX header: {what}")));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load a big-endian IDX image/label pair (the MNIST container format).
/// Pixels are flattened row-major; `normalize` maps them to [0,1] by /255.
pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<DatasetSplit> {
    let img = std::fs::read(images_path)?;
    let magic = read_be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&img, 4, "image count")? as usize;
    let rows = read_be_u32(&img, 8, "image rows")? as usize;
    let cols = read_be_u32(&img, 12, "image cols")? as usize;
    let pixels = count * rows * cols;
    if img.len() != 16 + pixels {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header implies {pixels}",
            img.len().saturating_sub(16)
        )));
    }

    let lab = std::fs::read(labels_path)?;
    let magic = read_be_u32(&lab, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_be_u32(&lab, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if lab.len() != 8 + count {
        return Err(Error::Format(format!(
            "label payload is {} bytes, header implies {count}",
            lab.len().saturating_sub(8)
        )));
    }

    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let features: Vec<f64> = img[16..].iter().map(|&b| b as f64 * scale).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    DatasetSplit::new(features, labels, rows * cols, num_classes.max(2), name)
}

/// Deterministic epoch batching: a Fisher-Yates permutation of `0..n`
/// keyed by `(seed, epoch)`, chunked into `batch_size` pieces with the
/// short final chunk kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_stream(seed, &format!("shuffle/{epoch}"));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
