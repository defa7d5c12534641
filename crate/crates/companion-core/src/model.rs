//! MLP construction, seeded initialization, forward evaluation, and the
//! binary checkpoint format.
//!
//! Networks are affine -> ReLU chains with a raw affine output layer: no
//! softmax is ever applied inside `forward`, so the logits live in the
//! unconstrained space the logit-space regularizers require.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Architecture of one MLP. Activation is fixed to ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::Input("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Input("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&d| d < 1) {
            return Err(Error::Input("hidden dims must all be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output: `[input, hidden..., classes]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }
}

/// One affine layer: `weight` is `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// The full parameter collection of one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Parameter tensors staged on (or off) a tape, in update order
/// `[W0, b0, W1, b1, ...]`.
#[derive(Debug)]
pub struct TapedParams {
    tensors: Vec<Tensor>,
}

impl TapedParams {
    /// Leaf node ids in update order; empty for constant staging.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.tensors.iter().filter_map(|t| t.node()).collect()
    }

    /// The staged tensors in update order `[W0, b0, W1, b1, ...]`.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// He-style normal initialization: weights ~ N(0, 2/fan_in), biases zero.
/// Draws are consumed row-major per weight matrix, layer by layer, so an
/// identical (spec, stream) pair gives bit-identical parameters.
pub fn init_params(spec: &MlpSpec, rng: &mut RngStream) -> ParamSet {
    let dims = spec.dims();
    let mut layers = Vec::with_capacity(spec.num_layers());
    for l in 0..spec.num_layers() {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| std * rng.next_normal())
            .collect();
        layers.push(Layer {
            weight,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        });
    }
    ParamSet {
        spec: spec.clone(),
        layers,
    }
}

impl ParamSet {
    /// All-zero parameters of the given architecture.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let dims = spec.dims();
        let layers = (0..spec.num_layers())
            .map(|l| Layer {
                weight: vec![0.0; dims[l] * dims[l + 1]],
                bias: vec![0.0; dims[l + 1]],
                in_dim: dims[l],
                out_dim: dims[l + 1],
            })
            .collect();
        ParamSet {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Independent deep copy; mutating one side never touches the other.
    pub fn clone_params(&self) -> ParamSet {
        self.clone()
    }

    /// Parameters flattened in update order `[W0, b0, W1, b1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Overwrite every parameter from a flat vector in update order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self
            .layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.len();
            layer.weight.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// Little-endian bytes of the flattened parameters; used for the
    /// bit-identity checks in tests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn stage_trainable(&self, tape: &mut Tape) -> TapedParams {
        let mut tensors = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            let w = Tensor::matrix(layer.out_dim, layer.in_dim, layer.weight.clone())
                .expect("layer shape invariant");
            tensors.push(tape.leaf(&w));
            tensors.push(tape.leaf(&Tensor::vector(layer.bias.clone())));
        }
        TapedParams { tensors }
    }

    /// Parameters as constants: same forward math, no gradients.
    pub fn stage_constant(&self) -> TapedParams {
        let mut tensors = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            let w = Tensor::matrix(layer.out_dim, layer.in_dim, layer.weight.clone())
                .expect("layer shape invariant");
            tensors.push(w);
            tensors.push(Tensor::vector(layer.bias.clone()));
        }
        TapedParams { tensors }
    }

    /// Forward pass producing raw logits `[b x K]`, recorded on `tape`
    /// when the staged parameters are differentiable leaves.
    pub fn forward_staged(
        &self,
        tape: &mut Tape,
        staged: &TapedParams,
        batch: &Tensor,
    ) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.spec.input_dim
            )));
        }
        let num_layers = self.layers.len();
        let mut x = batch.clone();
        for l in 0..num_layers {
            let w = &staged.tensors[2 * l];
            let b = &staged.tensors[2 * l + 1];
            let z = tape.matmul_nt(&x, w)?;
            let z = tape.add_row_vec(&z, b)?;
            x = if l + 1 < num_layers { tape.relu(&z) } else { z };
        }
        Ok(x)
    }

    /// Pure evaluation; returns constant logits and records nothing.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let staged = self.stage_constant();
        self.forward_staged(&mut tape, &staged, batch)
    }

    /// Write the checkpoint: a plain-text header line with the layer
    /// widths, then every parameter as little-endian f64 in update order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let dims: Vec<String> = self.spec.dims().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{}", dims.join(" "))?;
        for v in self.flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint written by [`ParamSet::save`]. The payload must
    /// contain exactly the number of floats the header dims imply.
    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad dimension `{tok}` in header")))
            })
            .collect::<Result<_>>()?;
        if dims.len() < 2 {
            return Err(Error::Format(format!(
                "header lists {} dims, need at least input and output",
                dims.len()
            )));
        }
        let spec = MlpSpec::new(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
        )?;
        let expected: usize = (0..dims.len() - 1)
            .map(|l| dims[l] * dims[l + 1] + dims[l + 1])
            .sum();
        let payload = &bytes[newline + 1..];
        if payload.len() != expected * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload is {} bytes, dims {:?} imply {}",
                payload.len(),
                dims,
                expected * 8
            )));
        }
        let mut flat = Vec::with_capacity(expected);
        let mut cursor = payload;
        let mut buf = [0u8; 8];
        for _ in 0..expected {
            cursor.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
        let mut params = ParamSet::zeros(&spec);
        params.set_flat(&flat)?;
        Ok(params)
    }
}
