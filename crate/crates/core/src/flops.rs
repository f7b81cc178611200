//! FLOPs accounting for dense and conv2d layers.
//!
//! Activation, flatten and pooling layers count zero. Unstructured sparsity
//! scales a layer's FLOPs linearly with its fraction of surviving weights.
//! Bias additions are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::network::Network;
use crate::prune::PruneMask;
use crate::scalar::Scalar;

/// `2 * o_h * o_w * o_c * (k_h * k_w * i_c)`.
pub fn conv2d_flops(out_h: usize, out_w: usize, out_c: usize, k_h: usize, k_w: usize, in_c: usize) -> Result<u64> {
    let dims = [out_h, out_w, out_c, k_h, k_w, in_c];
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("conv2d FLOPs need positive dimensions, got {dims:?}")));
    }
    dims.iter()
        .try_fold(2u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::NumericOverflow("conv2d FLOPs overflow u64".into()))
}

/// `2 * i_s * o_s`.
pub fn dense_flops(input_size: usize, output_size: usize) -> Result<u64> {
    if input_size == 0 || output_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "dense FLOPs need positive dimensions, got ({input_size}, {output_size})"
        )));
    }
    2u64.checked_mul(input_size as u64)
        .and_then(|x| x.checked_mul(output_size as u64))
        .ok_or_else(|| Error::NumericOverflow("dense FLOPs overflow u64".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub layer: usize,
    pub kind: String,
    pub dense_flops: u64,
    pub effective_flops: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub layers: Vec<FlopsRow>,
    pub total_dense: u64,
    pub total_effective: f64,
    pub reduction_pct: f64,
}

impl FlopsLedger {
    /// Whether the effective total fits within `budget` FLOPs.
    pub fn within_budget(&self, budget: f64) -> bool {
        self.total_effective <= budget
    }
}

/// FLOPs of every layer of `net`, scaled by the surviving-weight fraction of
/// `mask` when one is given.
pub fn ledger<T: Scalar>(net: &Network<T>, mask: Option<&PruneMask>) -> Result<FlopsLedger> {
    if let Some(m) = mask {
        if m.keep.len() != net.weight_count() {
            return Err(Error::Shape(format!(
                "mask has {} entries, network has {} weights",
                m.keep.len(),
                net.weight_count()
            )));
        }
    }
    let mut weight_offset = 0;
    let mut rows = Vec::with_capacity(net.layers().len());
    for (k, layer) in net.layers().iter().enumerate() {
        let dense = match *layer.spec() {
            LayerSpec::Dense { input_size, output_size } => dense_flops(input_size, output_size)?,
            LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => {
                let out = net.output_shape(k);
                conv2d_flops(out[1], out[2], out[0], kernel_h, kernel_w, in_channels)?
            }
            _ => 0,
        };
        let n = layer.weight_count();
        let sparsity = mask.map_or(0.0, |m| m.sparsity_of(weight_offset, n));
        weight_offset += n;
        rows.push(FlopsRow {
            layer: k,
            kind: layer.spec().name().to_string(),
            dense_flops: dense,
            effective_flops: dense as f64 * (1.0 - sparsity),
            sparsity,
        });
    }
    let total_dense: u64 = rows.iter().map(|r| r.dense_flops).sum();
    let total_effective: f64 = rows.iter().map(|r| r.effective_flops).sum();
    let reduction_pct = if total_dense == 0 { 0.0 } else { 100.0 * (1.0 - total_effective / total_dense as f64) };
    Ok(FlopsLedger { layers: rows, total_dense, total_effective, reduction_pct })
}
