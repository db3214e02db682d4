//! Neural network building blocks. Each block registers its parameters in a
//! `ParamStore` under a dotted name prefix and reads them back through a
//! `ParamTensors` view at forward time, so the same code serves tracked
//! training passes and frozen inference passes.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, ParamTensors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `y = x W + b` with W of shape [in, out].
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(&format!("{prefix}.weight"), &[in_dim, out_dim], ParamKind::Weight)?,
            bias: store.add(&format!("{prefix}.bias"), &[out_dim], ParamKind::Bias)?,
            in_dim,
            out_dim,
        })
    }

    /// Accepts [n, in] or a bare [in] vector (returned as [out]).
    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let vector_in = x.rank() == 1;
        let x2 = if vector_in {
            x.reshape(&[1, x.numel()])?
        } else {
            x.clone()
        };
        if x2.rank() != 2 || x2.shape()[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let y = x2.matmul(pt.get(self.weight))?.add(pt.get(self.bias))?;
        if vector_in {
            y.reshape(&[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{prefix}.gamma"), &[dim], ParamKind::Gamma)?,
            beta: store.add(&format!("{prefix}.beta"), &[dim], ParamKind::Beta)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(pt.get(self.gamma), pt.get(self.beta), self.eps)
    }
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d_k)) V`. Works on
/// 2-D [n, d_k] inputs or 3-D [heads, n, d_k] batches.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rank = q.rank();
    if rank < 2 || k.rank() != rank || v.rank() != rank {
        return Err(Error::contract(format!(
            "attention: inputs must share rank 2 or 3, got {:?}/{:?}/{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dk = q.shape()[rank - 1];
    if k.shape()[rank - 1] != dk || k.shape()[rank - 2] != v.shape()[rank - 2] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let scores = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (dk as f64).sqrt());
    let weights = scores.softmax(rank - 1)?;
    weights.matmul(v)
}

/// Multi-head attention with learned Q/K/V/output projections. The head
/// split is internal: inputs and outputs are full-width [n, d] token sets.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    num_heads: usize,
    head_dim: usize,
    embed_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "attention: {num_heads} heads must evenly divide width {embed_dim}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), embed_dim, embed_dim)?,
            wk: Linear::new(store, &format!("{prefix}.wk"), embed_dim, embed_dim)?,
            wv: Linear::new(store, &format!("{prefix}.wv"), embed_dim, embed_dim)?,
            wo: Linear::new(store, &format!("{prefix}.wo"), embed_dim, embed_dim)?,
            num_heads,
            head_dim: embed_dim / num_heads,
            embed_dim,
        })
    }

    /// Full attention pipeline on pre-projection inputs: project queries from
    /// `q_src` and keys/values from `k_src`/`v_src`, attend per head,
    /// concatenate heads, and apply the output projection.
    pub fn attention<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        q_src: &Tensor<T>,
        k_src: &Tensor<T>,
        v_src: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        for t in [q_src, k_src, v_src] {
            if t.rank() != 2 || t.shape()[1] != self.embed_dim {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: t.shape().to_vec(),
                    rhs: vec![0, self.embed_dim],
                });
            }
        }
        if k_src.shape()[0] != v_src.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: k_src.shape().to_vec(),
                rhs: v_src.shape().to_vec(),
            });
        }
        let (nq, nk) = (q_src.shape()[0], k_src.shape()[0]);
        let (h, dk) = (self.num_heads, self.head_dim);

        let q = self.wq.forward(pt, q_src)?;
        let k = self.wk.forward(pt, k_src)?;
        let v = self.wv.forward(pt, v_src)?;

        let split = |t: &Tensor<T>, n: usize| -> Result<Tensor<T>> {
            t.reshape(&[n, h, dk])?.permute(&[1, 0, 2])
        };
        let ctx = scaled_dot_attention(&split(&q, nq)?, &split(&k, nk)?, &split(&v, nk)?)?;
        let merged = ctx.permute(&[1, 0, 2])?.reshape(&[nq, self.embed_dim])?;
        self.wo.forward(pt, &merged)
    }

    /// Queries, keys, and values all drawn from `x`.
    pub fn self_attention<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.attention(pt, x, x, x)
    }

    /// Queries drawn from `queries_from`; keys and values both drawn from
    /// `keys_values_from`. Information flows one way.
    pub fn cross_attention<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        queries_from: &Tensor<T>,
        keys_values_from: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.attention(pt, queries_from, keys_values_from, keys_values_from)
    }
}

/// Two-layer position-wise MLP with a GELU between.
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(pt, &self.fc1.forward(pt, x)?.gelu())
    }
}

/// Turns an image [bands, H, W] into [(H/P)(W/P), d] tokens: non-overlapping
/// P x P tiles, flattened band-major, linearly projected.
pub struct PatchEmbedder {
    pub proj: Linear,
    patch: usize,
    bands: usize,
}

impl PatchEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: usize,
        bands: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        Ok(PatchEmbedder {
            proj: Linear::new(store, prefix, patch * patch * bands, embed_dim)?,
            patch,
            bands,
        })
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.rank() != 3 || image.shape()[0] != self.bands {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: image.shape().to_vec(),
                rhs: vec![self.bands, 0, 0],
            });
        }
        self.proj.forward(pt, &image.extract_patches(self.patch)?)
    }
}

/// Learned per-position embedding table, added to the token matrix (never
/// concatenated). The table length is fixed to the model's token count.
pub struct PositionalEmbedding {
    pub table: ParamId,
    len: usize,
}

impl PositionalEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        len: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(PositionalEmbedding {
            table: store.add(name, &[len, dim], ParamKind::Positional)?,
            len,
        })
    }

    pub fn apply<T: Scalar>(&self, pt: &ParamTensors<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        if tokens.rank() != 2 || tokens.shape()[0] != self.len {
            return Err(Error::contract(format!(
                "positional table holds {} rows but got {:?} tokens",
                self.len,
                tokens.shape()
            )));
        }
        tokens.add(pt.get(self.table))
    }
}
