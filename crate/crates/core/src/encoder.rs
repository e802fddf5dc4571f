//! Item encoder (feature vector → embedding) with an optional projection
//! head used only inside the training losses.

use diffcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Mlp, ParamSet};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Hidden widths of the projection head (output width is always
    /// `embedding_dim`); `None` disables the head.
    #[serde(default)]
    pub projection_head: Option<Vec<usize>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
            projection_head: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub params: ParamSet,
    pub encoder: Mlp,
    pub head: Option<Mlp>,
}

impl EmbeddingModel {
    pub fn new(feature_dim: usize, config: &EncoderConfig, seed: u64) -> Result<Self> {
        if feature_dim == 0 || config.embedding_dim == 0 || config.hidden.contains(&0) {
            return Err(CoreError::Config("encoder widths must be >= 1".into()));
        }
        let mut rng = seed::stream(seed, "encoder.init", 0);
        let mut params = ParamSet::new();
        let mut dims = vec![feature_dim];
        dims.extend(&config.hidden);
        dims.push(config.embedding_dim);
        let encoder = Mlp::new(&mut params, "encoder", &dims, &mut rng);
        let head = match &config.projection_head {
            None => None,
            Some(hidden) => {
                if hidden.contains(&0) {
                    return Err(CoreError::Config("projection head widths must be >= 1".into()));
                }
                let mut dims = vec![config.embedding_dim];
                dims.extend(hidden);
                dims.push(config.embedding_dim);
                Some(Mlp::new(&mut params, "head", &dims, &mut rng))
            }
        };
        Ok(Self {
            params,
            encoder,
            head,
        })
    }

    /// Single linear layer with identity weights and zero bias (`d → d`).
    pub fn identity(dim: usize, with_head: bool) -> Self {
        let config = EncoderConfig {
            hidden: vec![],
            embedding_dim: dim,
            projection_head: with_head.then(Vec::new),
        };
        let mut m = Self::new(dim, &config, 0).expect("valid widths");
        m.params.set("encoder.0.weight", Tensor::eye(dim)).expect("shape");
        if with_head {
            m.params.set("head.0.weight", Tensor::eye(dim)).expect("shape");
        }
        m
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        self.encoder.forward(tape, vars, features)
    }

    /// Applies the projection head when configured, identity otherwise.
    pub fn project(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        match &self.head {
            Some(h) => h.forward(tape, vars, emb),
            None => Ok(emb),
        }
    }

    /// Pre-head embeddings of raw feature rows.
    pub fn embed(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        if features.iter().any(|f| f.len() != self.feature_dim()) {
            return Err(CoreError::Data(format!(
                "encoder expects {}-d features",
                self.feature_dim()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let x = tape.constant(Tensor::from_rows(features)?);
        let y = self.encode(&mut tape, &vars, x)?;
        let t = tape.value(y);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }
}
