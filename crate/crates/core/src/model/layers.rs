//! Transformer building blocks expressed with differentiable tensor ops.

use candle_core::{Tensor, D};

use super::params::{Init, Scope};
use crate::Result;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: s.param("bias", &[out_dim], Init::Uniform(bound))?,
        })
    }

    /// Xavier-uniform weights and zero bias, used for attention projections.
    pub fn xavier(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: s.param("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(s: &mut Scope, in_dim: usize, hidden: usize, out_dim: usize, n_layers: usize) -> Result<Self> {
        assert!(n_layers >= 1);
        let layers = (0..n_layers)
            .map(|i| {
                let din = if i == 0 { in_dim } else { hidden };
                let dout = if i + 1 == n_layers { out_dim } else { hidden };
                Linear::new(&mut s.sub(format!("layers.{i}")), din, dout)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(s: &mut Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.sub("fc1"), dim, hidden)?,
            fc2: Linear::new(&mut s.sub("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &mut Scope, dim: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::xavier(&mut s.sub("q"), dim, dim)?,
            k: Linear::xavier(&mut s.sub("k"), dim, dim)?,
            v: Linear::xavier(&mut s.sub("v"), dim, dim)?,
            out: Linear::xavier(&mut s.sub("out"), dim, dim)?,
            n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.n_heads, d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Scaled dot-product attention; inputs are `(batch, tokens, dim)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let head_dim = d / self.n_heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        self.out.forward(&ctx)
    }
}

fn add_pos(x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
    Ok(match pos {
        Some(p) => x.broadcast_add(p)?,
        None => x.clone(),
    })
}

/// Pre-norm encoder layer: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(s: &mut Scope, dim: usize, n_heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut s.sub("self_attn"), dim, n_heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            ffn: FeedForward::new(&mut s.sub("ffn"), dim, ffn_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let qk = h.broadcast_add(pos)?;
        let x = (x + self.attn.forward(&qk, &qk, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention against the
/// encoded scene, feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(s: &mut Scope, dim: usize, n_heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            self_attn: MultiHeadAttention::new(&mut s.sub("self_attn"), dim, n_heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            cross_attn: MultiHeadAttention::new(&mut s.sub("cross_attn"), dim, n_heads)?,
            norm3: LayerNorm::new(&mut s.sub("norm3"), dim)?,
            ffn: FeedForward::new(&mut s.sub("ffn"), dim, ffn_dim)?,
        })
    }

    /// `memory` is the encoded scene, `memory_pos` its positional encoding
    /// (added to the cross-attention keys only).
    pub fn forward(&self, x: &Tensor, memory: &Tensor, memory_pos: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        let keys = add_pos(memory, memory_pos)?;
        let x = (&x + self.cross_attn.forward(&h, &keys, memory)?)?;
        let h = self.norm3.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Sine/cosine 2-D positional encoding of shape `(rows * cols, dim)`,
/// first half encoding the row, second half the column.
pub fn sine_position_encoding(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let per_axis = dim / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            let y = (r as f64 + 1.0) / rows as f64 * two_pi;
            let x = (c as f64 + 1.0) / cols as f64 * two_pi;
            for i in 0..per_axis {
                let freq = 10000f64.powf((2 * (i / 2)) as f64 / per_axis as f64);
                let (vy, vx) = (y / freq, x / freq);
                let (ey, ex) = if i % 2 == 0 { (vy.sin(), vx.sin()) } else { (vy.cos(), vx.cos()) };
                out[t * dim + i] = ey;
                out[t * dim + per_axis + i] = ex;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&mut Scope::new(&mut store, "ln"), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // with identity projections the output is a softmax-weighted mean of values
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let mha = MultiHeadAttention::new(&mut Scope::new(&mut store, "a"), 2, 1).unwrap();
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        for l in [&mha.q, &mha.k, &mha.v, &mha.out] {
            let name_w = store
                .iter()
                .find(|(_, v)| v.as_tensor().id() == l.weight.id())
                .map(|(n, _)| n.clone())
                .unwrap();
            store.assign(&name_w, &eye).unwrap();
        }
        let values = Tensor::new(&[[[0.0f64, 0.0], [1.0, 1.0]]], &Device::Cpu).unwrap();
        let q = Tensor::new(&[[[0.0f64, 0.0]]], &Device::Cpu).unwrap();
        let out = mha.forward(&q, &values, &values).unwrap().to_vec3::<f64>().unwrap();
        assert!((out[0][0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn position_encoding_rows_are_distinct() {
        let pe = sine_position_encoding(8, 8, 64);
        let row = |t: usize| &pe[t * 64..(t + 1) * 64];
        for a in 0..64 {
            for b in (a + 1)..64 {
                assert_ne!(row(a), row(b));
            }
        }
    }
}
