//! Task heads: the multi-depth MLP segmentation decoder and the small
//! fully-connected heads used for classification and regression.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamStore, ParamTensors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Segmentation decoder over encoder depth taps. Each tap is projected to
/// the decoder width, taps are concatenated along features, fused through a
/// linear+GELU, classified per token, laid out on the patch grid, and
/// bilinearly upsampled back to pixel resolution.
pub struct SegDecoder {
    taps: Vec<(usize, Linear)>,
    fuse: Linear,
    classify: Linear,
    grid: usize,
    patch: usize,
    classes: usize,
}

impl SegDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tap_depths: &[usize],
        embed_dim: usize,
        decoder_dim: usize,
        classes: usize,
        grid: usize,
        patch: usize,
    ) -> Result<Self> {
        let mut taps = Vec::with_capacity(tap_depths.len());
        for &depth in tap_depths {
            taps.push((
                depth,
                Linear::new(store, &format!("{prefix}.tap{depth}"), embed_dim, decoder_dim)?,
            ));
        }
        Ok(SegDecoder {
            fuse: Linear::new(
                store,
                &format!("{prefix}.fuse"),
                tap_depths.len() * decoder_dim,
                decoder_dim,
            )?,
            classify: Linear::new(store, &format!("{prefix}.classify"), decoder_dim, classes)?,
            taps,
            grid,
            patch,
            classes,
        })
    }

    /// Per-pixel class logits [classes, H, W] from the encoder's tap map.
    pub fn forward<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        taps: &BTreeMap<usize, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = self.grid * self.grid;
        let mut projected = Vec::with_capacity(self.taps.len());
        for (depth, proj) in &self.taps {
            let t = taps.get(depth).ok_or_else(|| {
                Error::contract(format!("segmentation decoder: tap at depth {depth} missing"))
            })?;
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::contract(format!(
                    "segmentation decoder: tap {depth} has shape {:?}, expected {n} tokens",
                    t.shape()
                )));
            }
            projected.push(proj.forward(pt, t)?);
        }
        let refs: Vec<&Tensor<T>> = projected.iter().collect();
        let fused = self.fuse.forward(pt, &Tensor::concat(&refs, 1)?)?.gelu();
        let logits = self.classify.forward(pt, &fused)?;
        logits
            .reshape(&[self.grid, self.grid, self.classes])?
            .permute(&[2, 0, 1])?
            .upsample_bilinear(self.patch)
    }
}

/// Two-layer fully-connected head. `linear_only` skips the GELU so tests can
/// compare against a plain matrix-product oracle.
pub struct DenseHead {
    pub fc1: Linear,
    pub fc2: Linear,
    linear_only: bool,
}

impl DenseHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(DenseHead {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, out_dim)?,
            linear_only: false,
        })
    }

    /// Diagnostic constructor without the activation.
    pub fn new_linear<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(DenseHead {
            linear_only: true,
            ..Self::new(store, prefix, in_dim, hidden, out_dim)?
        })
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(pt, x)?;
        let h = if self.linear_only { h } else { h.gelu() };
        self.fc2.forward(pt, &h)
    }
}
