use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Array, Rng};
use crate::scalar::Scalar;

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    Output,
    Ln2Gain,
    Ln2Bias,
    Ffn1,
    Ffn1Bias,
    Ffn2,
    Ffn2Bias,
}

impl BlockParam {
    pub const ALL: [BlockParam; 12] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::Query,
        BlockParam::Key,
        BlockParam::Value,
        BlockParam::Output,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::Ffn1,
        BlockParam::Ffn1Bias,
        BlockParam::Ffn2,
        BlockParam::Ffn2Bias,
    ];

    pub fn is_linear(self) -> bool {
        matches!(
            self,
            BlockParam::Query
                | BlockParam::Key
                | BlockParam::Value
                | BlockParam::Output
                | BlockParam::Ffn1
                | BlockParam::Ffn2
        )
    }

    fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::Query => "attn.query",
            BlockParam::Key => "attn.key",
            BlockParam::Value => "attn.value",
            BlockParam::Output => "attn.output",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::Ffn1 => "ffn1.weight",
            BlockParam::Ffn1Bias => "ffn1.bias",
            BlockParam::Ffn2 => "ffn2.weight",
            BlockParam::Ffn2Bias => "ffn2.bias",
        }
    }
}

/// Identifies one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    TokenEmbedding,
    OutputEmbedding,
    Positional,
    Block(usize, BlockParam),
    FinalLnGain,
    FinalLnBias,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::TokenEmbedding => write!(f, "token_embedding"),
            ParamId::OutputEmbedding => write!(f, "output_embedding"),
            ParamId::Positional => write!(f, "positional"),
            ParamId::Block(i, p) => write!(f, "block{i}.{}", p.name()),
            ParamId::FinalLnGain => write!(f, "final_ln.gain"),
            ParamId::FinalLnBias => write!(f, "final_ln.bias"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Array<T>,
    pub bias: Array<T>,
}

/// Weights of one encoder block. Linear maps act on row vectors: `y = x·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub w_q: Array<T>,
    pub w_k: Array<T>,
    pub w_v: Array<T>,
    pub w_o: Array<T>,
    pub ln2: LayerNormParams<T>,
    pub w_1: Array<T>,
    pub b_1: Array<T>,
    pub w_2: Array<T>,
    pub b_2: Array<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn get(&self, p: BlockParam) -> &Array<T> {
        match p {
            BlockParam::Ln1Gain => &self.ln1.gain,
            BlockParam::Ln1Bias => &self.ln1.bias,
            BlockParam::Query => &self.w_q,
            BlockParam::Key => &self.w_k,
            BlockParam::Value => &self.w_v,
            BlockParam::Output => &self.w_o,
            BlockParam::Ln2Gain => &self.ln2.gain,
            BlockParam::Ln2Bias => &self.ln2.bias,
            BlockParam::Ffn1 => &self.w_1,
            BlockParam::Ffn1Bias => &self.b_1,
            BlockParam::Ffn2 => &self.w_2,
            BlockParam::Ffn2Bias => &self.b_2,
        }
    }

    pub fn get_mut(&mut self, p: BlockParam) -> &mut Array<T> {
        match p {
            BlockParam::Ln1Gain => &mut self.ln1.gain,
            BlockParam::Ln1Bias => &mut self.ln1.bias,
            BlockParam::Query => &mut self.w_q,
            BlockParam::Key => &mut self.w_k,
            BlockParam::Value => &mut self.w_v,
            BlockParam::Output => &mut self.w_o,
            BlockParam::Ln2Gain => &mut self.ln2.gain,
            BlockParam::Ln2Bias => &mut self.ln2.bias,
            BlockParam::Ffn1 => &mut self.w_1,
            BlockParam::Ffn1Bias => &mut self.b_1,
            BlockParam::Ffn2 => &mut self.w_2,
            BlockParam::Ffn2Bias => &mut self.b_2,
        }
    }
}

/// All trainable weights. Gradients use the same type.
///
/// `token_embedding` is `M×d` (row `t - 1` embeds token `t`), `positional`
/// is `L×d`. `output_embedding` exists iff sharing is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_embedding: Array<T>,
    pub output_embedding: Option<Array<T>>,
    pub positional: Array<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln: LayerNormParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Parameter-group ids in canonical order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::TokenEmbedding];
        if self.output_embedding.is_some() {
            ids.push(ParamId::OutputEmbedding);
        }
        ids.push(ParamId::Positional);
        for b in 0..self.blocks.len() {
            ids.extend(BlockParam::ALL.iter().map(|&p| ParamId::Block(b, p)));
        }
        ids.push(ParamId::FinalLnGain);
        ids.push(ParamId::FinalLnBias);
        ids
    }

    pub fn get(&self, id: ParamId) -> Option<&Array<T>> {
        match id {
            ParamId::TokenEmbedding => Some(&self.token_embedding),
            ParamId::OutputEmbedding => self.output_embedding.as_ref(),
            ParamId::Positional => Some(&self.positional),
            ParamId::Block(b, p) => self.blocks.get(b).map(|blk| blk.get(p)),
            ParamId::FinalLnGain => Some(&self.final_ln.gain),
            ParamId::FinalLnBias => Some(&self.final_ln.bias),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array<T>> {
        match id {
            ParamId::TokenEmbedding => Some(&mut self.token_embedding),
            ParamId::OutputEmbedding => self.output_embedding.as_mut(),
            ParamId::Positional => Some(&mut self.positional),
            ParamId::Block(b, p) => self.blocks.get_mut(b).map(|blk| blk.get_mut(p)),
            ParamId::FinalLnGain => Some(&mut self.final_ln.gain),
            ParamId::FinalLnBias => Some(&mut self.final_ln.bias),
        }
    }

    pub fn groups(&self) -> Vec<(ParamId, &Array<T>)> {
        self.ids()
            .into_iter()
            .map(|id| (id, self.get(id).expect("listed id exists")))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array<T>| Array::zeros(a.shape());
        let zl = |ln: &LayerNormParams<T>| LayerNormParams {
            gain: z(&ln.gain),
            bias: z(&ln.bias),
        };
        ModelParams {
            config: self.config.clone(),
            token_embedding: z(&self.token_embedding),
            output_embedding: self.output_embedding.as_ref().map(z),
            positional: z(&self.positional),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: zl(&b.ln1),
                    w_q: z(&b.w_q),
                    w_k: z(&b.w_k),
                    w_v: z(&b.w_v),
                    w_o: z(&b.w_o),
                    ln2: zl(&b.ln2),
                    w_1: z(&b.w_1),
                    b_1: z(&b.b_1),
                    w_2: z(&b.w_2),
                    b_2: z(&b.b_2),
                })
                .collect(),
            final_ln: zl(&self.final_ln),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.groups().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn sum_sq(&self) -> T {
        self.groups().iter().map(|(_, a)| a.sum_sq()).sum()
    }

    pub fn norm(&self) -> T {
        self.sum_sq().sqrt()
    }

    /// `self += s * other`, group by group.
    pub fn axpy(&mut self, s: T, other: &ModelParams<T>) -> Result<()> {
        for id in self.ids() {
            let src = other
                .get(id)
                .ok_or_else(|| Error::Shape(format!("missing group {id}")))?;
            self.get_mut(id).expect("own id").axpy(s, src)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for id in self.ids() {
            self.get_mut(id).expect("own id").scale(s);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams<T>) -> T {
        self.ids()
            .into_iter()
            .filter_map(|id| Some(self.get(id)?.max_abs_diff(other.get(id)?)))
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |a: &Array<T>| a.cast::<U>();
        let cl = |ln: &LayerNormParams<T>| LayerNormParams {
            gain: c(&ln.gain),
            bias: c(&ln.bias),
        };
        ModelParams {
            config: self.config.clone(),
            token_embedding: c(&self.token_embedding),
            output_embedding: self.output_embedding.as_ref().map(c),
            positional: c(&self.positional),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: cl(&b.ln1),
                    w_q: c(&b.w_q),
                    w_k: c(&b.w_k),
                    w_v: c(&b.w_v),
                    w_o: c(&b.w_o),
                    ln2: cl(&b.ln2),
                    w_1: c(&b.w_1),
                    b_1: c(&b.b_1),
                    w_2: c(&b.w_2),
                    b_2: c(&b.b_2),
                })
                .collect(),
            final_ln: cl(&self.final_ln),
        }
    }
}

/// Uniform `(-1/√d, 1/√d)` weights and embeddings, unit layernorm gains,
/// zero biases.
pub fn init_params<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    config.validate()?;
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let mut uniform = |shape: &[usize]| -> Array<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-scale..scale)))
            .collect();
        Array::from_vec(shape, data).expect("finite init")
    };
    let ln = |n: usize| LayerNormParams {
        gain: Array::filled(&[n], T::one()),
        bias: Array::zeros(&[n]),
    };
    let token_embedding = uniform(&[config.vocab_size, d]);
    let output_embedding = (!config.share_embedding).then(|| uniform(&[config.vocab_size, d]));
    let positional = uniform(&[config.max_len, d]);
    let blocks = (0..config.n_blocks)
        .map(|_| BlockParams {
            ln1: ln(d),
            w_q: uniform(&[d, d]),
            w_k: uniform(&[d, d]),
            w_v: uniform(&[d, d]),
            w_o: uniform(&[d, d]),
            ln2: ln(d),
            w_1: uniform(&[d, config.d_ff]),
            b_1: Array::zeros(&[config.d_ff]),
            w_2: uniform(&[config.d_ff, d]),
            b_2: Array::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        output_embedding,
        positional,
        blocks,
        final_ln: ln(d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    #[test]
    fn shapes_and_determinism() {
        let cfg = ModelConfig::new(100, 50);
        let a: ModelParams<f64> = init_params(&cfg, &mut Rng::new(1, Stream::Init)).unwrap();
        assert_eq!(a.token_embedding.shape(), &[100, 64]);
        let b: ModelParams<f64> = init_params(&cfg, &mut Rng::new(1, Stream::Init)).unwrap();
        assert_eq!(a, b);
        assert!(a.final_ln.gain.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::new(10, 4);
        cfg.n_heads = 3;
        assert!(init_params::<f64>(&cfg, &mut Rng::new(1, Stream::Init)).is_err());
    }

    #[test]
    fn unshared_model_has_extra_matrix() {
        let mut cfg = ModelConfig::new(30, 8);
        let shared: ModelParams<f64> = init_params(&cfg, &mut Rng::new(1, Stream::Init)).unwrap();
        cfg.share_embedding = false;
        let split: ModelParams<f64> = init_params(&cfg, &mut Rng::new(1, Stream::Init)).unwrap();
        assert_eq!(
            split.num_parameters() - shared.num_parameters(),
            30 * cfg.d_model
        );
    }
}
