//! Parameter storage and the dense layers shared by the encoder, projection
//! head and CTR model.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use diffcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Ordered, named trainable tensors. Order is the contract between a model,
/// its optimizer state and its checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on `tape` as a trainable leaf, in order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Puts every tensor on `tape` as a constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces the tensor named `name`, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| CoreError::Config(format!("no parameter named {name}")))?;
        if self.tensors[id].shape() != t.shape() {
            return Err(CoreError::Config(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[id].shape(),
                t.shape()
            )));
        }
        self.tensors[id] = t;
        Ok(())
    }
}

/// A named tensor whose data is base64 of little-endian `f64` bytes, so it
/// survives a JSON round trip bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode(name: &str, t: &Tensor) -> EncodedTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    EncodedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub fn decode(e: &EncodedTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&e.data)
        .map_err(|err| CoreError::Data(format!("tensor {}: {err}", e.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(CoreError::Data(format!("tensor {}: truncated payload", e.name)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(e.shape.clone(), data)?)
}

impl ParamSet {
    pub fn encode_all(&self) -> Vec<EncodedTensor> {
        self.names.iter().zip(&self.tensors).map(|(n, t)| encode(n, t)).collect()
    }

    /// Overwrites every tensor from `encoded`, which must name exactly the
    /// parameters of `self`.
    pub fn load_encoded(&mut self, encoded: &[EncodedTensor]) -> Result<()> {
        if encoded.len() != self.len() {
            return Err(CoreError::Data(format!(
                "{} stored tensors, model has {}",
                encoded.len(),
                self.len()
            )));
        }
        for e in encoded {
            self.set(&e.name, decode(e)?)?;
        }
        Ok(())
    }
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// `(weight, bias)` parameter ids per layer.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Adds Xavier-uniform weights and zero biases for `dims[0] → … →
    /// dims[last]` to `params`.
    pub fn new<R: Rng>(params: &mut ParamSet, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let wid = params.push(format!("{prefix}.{i}.weight"), uniform(rng, &[w[0], w[1]], bound));
                let bid = params.push(format!("{prefix}.{i}.bias"), Tensor::zeros(&[w[1]]));
                (wid, bid)
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            layers,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// `x` is `[n × input_dim]`; `vars` are the registered [`ParamSet`] vars.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars[w])?;
            h = tape.add_row(z, vars[b])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, params: &ParamSet, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let x = tape.constant(Tensor::from_rows(rows)?);
        let y = self.forward(&mut tape, &vars, x)?;
        let t = tape.value(y);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }
}
