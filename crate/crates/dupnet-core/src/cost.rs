//! MAdds / FLOPs / model-size accounting with duplication-aware weight
//! sizes and the low-precision FLOPs divisor rule.
//!
//! All MAdd and weight-bit counts are exact integers; KB and MFLOPs
//! rounding happens only at display. Feature-map duplication multiplies a
//! layer's effective input channels; weight duplication shrinks stored
//! weights but, in `DupFull` mode, leaves compute untouched (the optimized
//! template-times-summed-input cost is reported as an extra column in
//! `DupOptimized` mode, never as the headline).

use crate::config::{LayerSpec, NetworkSpec};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    DupFull,
    DupOptimized,
}

/// Converts low-precision multiply-adds to FLOP equivalents:
/// 64 a1w1 MAdds, 32 a2w1 MAdds or 8 a8w1 MAdds equal one FLOP. Full
/// precision on either side costs full FLOPs.
pub fn flops_divisor(a_bits: u8, w_bits: u8) -> u32 {
    if a_bits >= 32 || w_bits >= 32 {
        return 1;
    }
    (64 / (a_bits as u32 * w_bits as u32)).max(1)
}

/// Raw multiply-accumulate count of a conv layer. Feature duplication
/// multiplies the input channels; weight duplication does not change the
/// full-mode cost.
pub fn layer_madds(layer: &LayerSpec) -> u64 {
    debug_assert!(layer.is_conv());
    (layer.out_h * layer.out_w) as u64
        * (layer.c_in * layer.d_x) as u64
        * (layer.k * layer.k) as u64
        * layer.c_out as u64
}

/// Multiply-accumulate count of the optimized duplicated-weight form:
/// the template convolution plus the channel-group-sum additions.
pub fn layer_madds_optimized(layer: &LayerSpec) -> u64 {
    let full = layer_madds(layer);
    if layer.d_w <= 1 {
        return full;
    }
    let sum_adds = (layer.d_w - 1) as u64
        * (layer.c_in / layer.d_w) as u64
        * (layer.in_h * layer.in_w) as u64;
    full / layer.d_w as u64 + sum_adds
}

/// Stored weight bits: duplicated features widen the tensor, duplicated
/// weights store only the template. Full precision stores 32-bit reals.
pub fn layer_weight_bits(layer: &LayerSpec) -> u64 {
    debug_assert!(layer.is_conv());
    let w_bits = if layer.quant.w_bits >= 32 {
        32
    } else {
        layer.quant.w_bits as u64
    };
    layer.weight_c_in() as u64 * (layer.k * layer.k) as u64 * layer.c_out as u64 * w_bits
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub madds: u64,
    pub divisor: u32,
    pub weight_bits: u64,
    /// Optimized-form MAdds, present for dup-weight layers in
    /// `DupOptimized` mode.
    pub opt_madds: Option<u64>,
}

impl CostRow {
    pub fn mflops(&self) -> f64 {
        self.madds as f64 / self.divisor as f64 / 1e6
    }

    pub fn weight_kb(&self) -> f64 {
        self.weight_bits as f64 / 8192.0
    }

    pub fn opt_mflops(&self) -> Option<f64> {
        self.opt_madds
            .map(|m| m as f64 / self.divisor as f64 / 1e6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub mode: CostMode,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_madds(&self) -> u64 {
        self.rows.iter().map(|r| r.madds).sum()
    }

    pub fn total_mflops(&self) -> f64 {
        self.rows.iter().map(|r| r.mflops()).sum()
    }

    pub fn total_weight_bits(&self) -> u64 {
        self.rows.iter().map(|r| r.weight_bits).sum()
    }

    pub fn total_weight_kb(&self) -> f64 {
        self.total_weight_bits() as f64 / 8192.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,madds,mflops,weight_bits,weight_kb\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{},{:.4}\n",
                row.name,
                row.madds,
                row.mflops(),
                row.weight_bits,
                row.weight_kb()
            ));
        }
        out.push_str(&format!(
            "Overall,{},{:.4},{},{:.4}\n",
            self.total_madds(),
            self.total_mflops(),
            self.total_weight_bits(),
            self.total_weight_kb()
        ));
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let optimized = self.mode == CostMode::DupOptimized;
        write!(
            f,
            "{:<10} {:>14} {:>10} {:>13} {:>10}",
            "layer", "madds", "mflops", "weight_bits", "weight_kb"
        )?;
        if optimized {
            write!(f, " {:>14} {:>10}", "opt_madds", "opt_mflops")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(
                f,
                "{:<10} {:>14} {:>10.1} {:>13} {:>10.2}",
                row.name,
                row.madds,
                row.mflops(),
                row.weight_bits,
                row.weight_kb()
            )?;
            if optimized {
                match (row.opt_madds, row.opt_mflops()) {
                    (Some(m), Some(fl)) => write!(f, " {m:>14} {fl:>10.1}")?,
                    _ => write!(f, " {:>14} {:>10}", "-", "-")?,
                }
            }
            writeln!(f)?;
        }
        write!(
            f,
            "{:<10} {:>14} {:>10.1} {:>13} {:>10.2}",
            "Overall",
            self.total_madds(),
            self.total_mflops(),
            self.total_weight_bits(),
            self.total_weight_kb()
        )?;
        if optimized {
            let opt_total: f64 = self
                .rows
                .iter()
                .map(|r| r.opt_mflops().unwrap_or_else(|| r.mflops()))
                .sum();
            let opt_madds: u64 = self
                .rows
                .iter()
                .map(|r| r.opt_madds.unwrap_or(r.madds))
                .sum();
            write!(f, " {opt_madds:>14} {opt_total:>10.1}")?;
        }
        writeln!(f)
    }
}

/// Per-layer cost rows for every conv in the network.
pub fn analyze(net: &NetworkSpec, mode: CostMode) -> CostReport {
    let rows = net
        .conv_layers()
        .map(|layer| CostRow {
            name: layer.name.clone(),
            madds: layer_madds(layer),
            divisor: flops_divisor(layer.quant.a_bits, layer.quant.w_bits),
            weight_bits: layer_weight_bits(layer),
            opt_madds: match (mode, layer.d_w > 1) {
                (CostMode::DupOptimized, true) => Some(layer_madds_optimized(layer)),
                _ => None,
            },
        })
        .collect();
    CostReport { mode, rows }
}
