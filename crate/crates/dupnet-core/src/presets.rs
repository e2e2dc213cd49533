//! Shipped architecture presets and the programmatic variants used by the
//! layer-wise quantization and feature-duplication sweeps.

use crate::config::{Activation, ConfigError, LayerKind, NetworkSpec};

pub const TINIER_YOLO_CFG: &str = include_str!("../presets/tinier-yolo.cfg");
pub const TINIER_YOLO_H_CFG: &str = include_str!("../presets/tinier-yolo-h.cfg");
pub const DUPNET_CFG: &str = include_str!("../presets/dupnet.cfg");
pub const DUPNET_L_CFG: &str = include_str!("../presets/dupnet-l.cfg");
pub const DESK64_CFG: &str = include_str!("../presets/desk64.cfg");

/// Resolves a preset name to its embedded cfg text.
pub fn preset_cfg(name: &str) -> Option<&'static str> {
    match name {
        "tinier-yolo" => Some(TINIER_YOLO_CFG),
        "tinier-yolo-h" => Some(TINIER_YOLO_H_CFG),
        "dupnet" => Some(DUPNET_CFG),
        "dupnet-l" => Some(DUPNET_L_CFG),
        "desk64" => Some(DESK64_CFG),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["tinier-yolo", "tinier-yolo-h", "dupnet", "dupnet-l", "desk64"]
}

/// Returns a copy of `spec` where only the conv layers selected by
/// `quantized` (indexed in conv order) keep low-precision settings; all
/// other convs run at full precision with leaky activations. Quantized
/// convs use a8w1 for the first layer and a2w1 elsewhere.
pub fn with_quant_pattern(spec: &NetworkSpec, quantized: &[bool]) -> Result<NetworkSpec, ConfigError> {
    let mut out = spec.clone();
    let mut conv_idx = 0usize;
    for layer in out.layers.iter_mut() {
        if layer.kind != LayerKind::Conv {
            continue;
        }
        let quantize = quantized.get(conv_idx).copied().unwrap_or(false);
        if quantize {
            layer.quant.a_bits = if conv_idx == 0 { 8 } else { 2 };
            layer.quant.w_bits = 1;
            layer.quant.weight_scale_mode = crate::quant::WeightScaleMode::PerFilterMeanAbs;
            if layer.activation == Activation::Leaky {
                layer.activation = Activation::Quant;
            }
        } else {
            layer.quant.a_bits = 32;
            layer.quant.w_bits = 32;
            layer.quant.weight_scale_mode = crate::quant::WeightScaleMode::None;
            if layer.activation == Activation::Quant {
                layer.activation = Activation::Leaky;
            }
        }
        conv_idx += 1;
    }
    // round-trip through the text form so every variant passes validation
    NetworkSpec::parse(&out.to_cfg())
}

/// The five progressive quantization rows of the layer-wise sensitivity
/// sweep, as conv masks over the nine-conv halved architecture:
/// none, Conv4-8, Conv2-8, Conv1-8, all.
pub fn sensitivity_rows() -> Vec<(&'static str, Vec<bool>)> {
    let mask = |range: std::ops::RangeInclusive<usize>| -> Vec<bool> {
        (1..=9).map(|i| range.contains(&i)).collect()
    };
    vec![
        ("none", vec![false; 9]),
        ("conv4-8", mask(4..=8)),
        ("conv2-8", mask(2..=8)),
        ("conv1-8", mask(1..=8)),
        ("all", mask(1..=9)),
    ]
}

/// Returns a copy of `spec` with per-conv input feature-map duplication
/// factors applied (conv order, factor 1 leaves a layer untouched).
pub fn with_feature_dup(spec: &NetworkSpec, dup_x: &[usize]) -> Result<NetworkSpec, ConfigError> {
    let mut out = spec.clone();
    let mut conv_idx = 0usize;
    for layer in out.layers.iter_mut() {
        if layer.kind != LayerKind::Conv {
            continue;
        }
        if let Some(&d) = dup_x.get(conv_idx) {
            layer.d_x = d;
        }
        conv_idx += 1;
    }
    NetworkSpec::parse(&out.to_cfg())
}

/// The progressive feature-duplication rows: baseline, Conv2(4x)+Conv3(2x),
/// plus Conv1(4x), plus Conv9(2x).
pub fn feature_dup_rows() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("baseline", vec![1, 1, 1, 1, 1, 1, 1, 1, 1]),
        ("dup-conv2-3", vec![1, 4, 2, 1, 1, 1, 1, 1, 1]),
        ("dup-conv1-3", vec![4, 4, 2, 1, 1, 1, 1, 1, 1]),
        ("dup-conv1-3-9", vec![4, 4, 2, 1, 1, 1, 1, 1, 2]),
    ]
}

/// Returns a copy of `spec` with per-conv weight-duplication factors
/// applied (conv order, factor 1 leaves a layer untouched).
pub fn with_weight_dup(spec: &NetworkSpec, dup_w: &[usize]) -> Result<NetworkSpec, ConfigError> {
    let mut out = spec.clone();
    let mut conv_idx = 0usize;
    for layer in out.layers.iter_mut() {
        if layer.kind != LayerKind::Conv {
            continue;
        }
        if let Some(&d) = dup_w.get(conv_idx) {
            layer.d_w = d;
        }
        conv_idx += 1;
    }
    NetworkSpec::parse(&out.to_cfg())
}

/// Filter-slimming comparison hook: rebuilds the halved architecture with
/// the given Conv6/Conv7/Conv8 filter counts instead of duplicated weights.
pub fn slimmed_tinier_yolo_h(
    conv6: usize,
    conv7: usize,
    conv8: usize,
) -> Result<NetworkSpec, ConfigError> {
    let mut spec = NetworkSpec::parse(TINIER_YOLO_H_CFG)?;
    let mut conv_idx = 0usize;
    for layer in spec.layers.iter_mut() {
        if layer.kind != LayerKind::Conv {
            continue;
        }
        conv_idx += 1;
        match conv_idx {
            6 => layer.c_out = conv6,
            7 => layer.c_out = conv7,
            8 => layer.c_out = conv8,
            _ => {}
        }
    }
    // re-deriving from text fixes up the c_in chain
    NetworkSpec::parse(&spec.to_cfg())
}

/// Desk-scale 64x64 variant builder: feature duplication on Conv2 and
/// weight duplication on Conv3.
pub fn desk64_variant(conv2_dup_x: usize, conv3_dup_w: usize) -> Result<NetworkSpec, ConfigError> {
    let spec = NetworkSpec::parse(DESK64_CFG)?;
    let spec = with_feature_dup(&spec, &[1, conv2_dup_x, 1, 1])?;
    with_weight_dup(&spec, &[1, 1, conv3_dup_w, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse() {
        for name in preset_names() {
            let text = preset_cfg(name).unwrap();
            let spec = NetworkSpec::parse(text)
                .unwrap_or_else(|e| panic!("preset {name} failed to parse: {e}"));
            assert!(spec.conv_layers().count() >= 4, "{name}");
        }
    }

    #[test]
    fn preset_round_trips_are_exact() {
        for name in preset_names() {
            let spec = NetworkSpec::parse(preset_cfg(name).unwrap()).unwrap();
            let again = NetworkSpec::parse(&spec.to_cfg()).unwrap();
            assert_eq!(spec, again, "{name}");
        }
    }

    #[test]
    fn tinier_yolo_reference_geometry() {
        let spec = NetworkSpec::parse(TINIER_YOLO_CFG).unwrap();
        let convs: Vec<_> = spec.conv_layers().collect();
        assert_eq!(convs.len(), 9);
        let chans: Vec<_> = convs.iter().map(|l| (l.c_in, l.c_out)).collect();
        assert_eq!(
            chans,
            vec![
                (3, 8),
                (8, 16),
                (16, 32),
                (32, 64),
                (64, 128),
                (128, 256),
                (256, 512),
                (512, 512),
                (512, 30)
            ]
        );
        let spatial: Vec<_> = convs.iter().map(|l| l.in_h).collect();
        assert_eq!(spatial, vec![608, 304, 152, 76, 38, 38, 38, 38, 38]);
        assert_eq!(spec.head_channels(), 30);
    }

    #[test]
    fn dupnet_presets_carry_dup_factors() {
        let spec = NetworkSpec::parse(DUPNET_CFG).unwrap();
        let convs: Vec<_> = spec.conv_layers().collect();
        let dups: Vec<_> = convs.iter().map(|l| (l.d_w, l.d_x)).collect();
        assert_eq!(
            dups,
            vec![
                (1, 1),
                (1, 4),
                (1, 2),
                (1, 1),
                (1, 1),
                (4, 1),
                (4, 1),
                (4, 1),
                (1, 1)
            ]
        );
        let l = NetworkSpec::parse(DUPNET_L_CFG).unwrap();
        let dups: Vec<_> = l.conv_layers().map(|l| (l.d_w, l.d_x)).collect();
        assert_eq!(dups[0], (1, 4));
        assert_eq!(dups[8], (1, 2));
    }

    #[test]
    fn quant_pattern_variants_validate() {
        let base = NetworkSpec::parse(TINIER_YOLO_H_CFG).unwrap();
        for (name, mask) in sensitivity_rows() {
            let spec = with_quant_pattern(&base, &mask)
                .unwrap_or_else(|e| panic!("row {name} failed: {e}"));
            let quantized = spec.conv_layers().filter(|l| l.quant.a_bits < 32).count();
            assert_eq!(quantized, mask.iter().filter(|&&b| b).count(), "{name}");
        }
    }

    #[test]
    fn feature_dup_variants_validate() {
        let base = NetworkSpec::parse(TINIER_YOLO_H_CFG).unwrap();
        for (name, dups) in feature_dup_rows() {
            let spec =
                with_feature_dup(&base, &dups).unwrap_or_else(|e| panic!("row {name} failed: {e}"));
            let got: Vec<_> = spec.conv_layers().map(|l| l.d_x).collect();
            assert_eq!(got, dups, "{name}");
        }
    }

    #[test]
    fn desk_variants_validate() {
        assert!(desk64_variant(1, 1).is_ok());
        assert!(desk64_variant(4, 1).is_ok());
        assert!(desk64_variant(1, 4).is_ok());
    }
}
