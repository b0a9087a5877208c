//! Closed-form parameter and FLOP tallies for a configuration, derived
//! from the type definitions rather than from instantiated tensors.
//!
//! FLOP conventions (stated once, used throughout): one multiply-accumulate
//! is 2 FLOPs; activations (sigmoid, tanh, ReLU, exp) and pooling
//! comparisons cost 1 FLOP per element; a normalization over n elements
//! costs 6n+4 (mean, variance, and the shifted-scaled application).

use crate::han::{HanConfig, UNITS};

/// Parameters of one layer's routers.
fn router_params_per_layer(cfg: &HanConfig) -> usize {
    let c = cfg.channels;
    let h = cfg.hidden_width();
    UNITS * (4 * c * h + h + h * UNITS + UNITS)
}

/// Parameters of one layer's fusion units (no routers).
fn unit_params_per_layer(cfg: &HanConfig) -> usize {
    let c = cfg.channels;
    let inner = cfg.inner_channels();
    let seu = 2 * (2 * cfg.groups);
    let ceu = 2 * cfg.kernel;
    let cmeu = 2 * (2 * c + 3 * c * inner + inner * c);
    seu + ceu + cmeu
}

/// Total trainable parameters. Exactly linear in the layer count: layers
/// share nothing, so the total is `layers` copies of one per-layer block.
pub fn param_count(cfg: &HanConfig) -> usize {
    cfg.layers * (unit_params_per_layer(cfg) + router_params_per_layer(cfg))
}

/// Parameter count with every router removed (the fixed dense variant).
pub fn param_count_router_free(cfg: &HanConfig) -> usize {
    cfg.layers * unit_params_per_layer(cfg)
}

fn mean_flops(n: usize) -> usize {
    n + 1
}

fn normalize_flops(n: usize) -> usize {
    6 * n + 4
}

fn seu_flops_one_stream(cfg: &HanConfig) -> usize {
    let (c, g) = (cfg.channels, cfg.groups);
    let hw = cfg.height * cfg.width;
    let group_means = c * mean_flops(hw);
    let maps = 2 * c * hw; // gs MACs per position, summed over groups
    let norms = g * normalize_flops(hw);
    let gates = 3 * g * hw; // affine (2) + sigmoid (1) per map element
    let apply = c * hw;
    group_means + maps + norms + gates + apply
}

fn ceu_flops_one_stream(cfg: &HanConfig) -> usize {
    let c = cfg.channels;
    let hw = cfg.height * cfg.width;
    c * mean_flops(hw) + 2 * c * cfg.kernel + c + c * hw
}

fn cmeu_flops(cfg: &HanConfig) -> usize {
    let c = cfg.channels;
    let inner = cfg.inner_channels();
    let hw = cfg.height * cfg.width;
    let norms = 2 * (c * normalize_flops(hw) + 2 * c * hw); // both inputs, plus affine
    let projections = 3 * 2 * hw * c * inner; // Q, K, V
    let scores = 2 * hw * hw * inner + hw * hw; // QKᵀ plus the 1/√c scale
    let softmax = 5 * hw * hw; // max, shift, exp, sum, divide per row element
    let mix = 2 * hw * hw * inner; // Att·V
    let out = 2 * hw * inner * c + c * hw; // Wo projection + residual add
    norms + projections + scores + softmax + mix + out
}

fn router_flops(cfg: &HanConfig) -> usize {
    let c = cfg.channels;
    let h = cfg.hidden_width();
    let hw = cfg.height * cfg.width;
    let pools = 2 * c * mean_flops(hw) + 2 * c * hw; // GAP and GMP over 2C channels
    let layer1 = 8 * c * h + h + h; // MACs, bias, ReLU
    let layer2 = 8 * h + UNITS + 2 * UNITS; // MACs+bias, tanh, ReLU
    pools + layer1 + layer2
}

/// FLOPs of one forward pass under the conventions above. Affine in the
/// layer count (the layer-boundary aggregations add an L−1 term).
pub fn flop_count(cfg: &HanConfig) -> usize {
    let hw = cfg.height * cfg.width;
    let c = cfg.channels;
    let per_layer = 2 * seu_flops_one_stream(cfg)
        + 2 * ceu_flops_one_stream(cfg)
        + 2 * cmeu_flops(cfg)
        + UNITS * router_flops(cfg);
    let aggregation = (cfg.layers - 1) * (UNITS * UNITS * 2 * 2 * c * hw);
    let fusion = UNITS * 2 * 2 * c * hw + c * hw + 5 * UNITS;
    cfg.layers * per_layer + aggregation + fusion
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::han::HanParams;

    fn with_layers(l: usize) -> HanConfig {
        HanConfig { layers: l, ..HanConfig::default() }
    }

    #[test]
    fn closed_form_matches_instantiated_parameters() {
        for cfg in [
            HanConfig::default(),
            HanConfig { layers: 1, channels: 8, groups: 4, ..HanConfig::default() },
            HanConfig {
                layers: 4,
                channels: 12,
                groups: 3,
                kernel: 5,
                attn_channels: Some(5),
                router_hidden: Some(7),
                ..HanConfig::default()
            },
        ] {
            let params = HanParams::init(&cfg).unwrap();
            assert_eq!(param_count(&cfg), params.num_params(), "config {cfg:?}");
        }
    }

    #[test]
    fn parameter_count_is_linear_in_depth_with_zero_intercept() {
        let per_layer = param_count(&with_layers(1));
        for l in 1..=4 {
            assert_eq!(param_count(&with_layers(l)), l * per_layer);
        }
        assert_eq!(per_layer, 5558, "default per-layer block size");
    }

    #[test]
    fn router_free_depth_ratio_is_exact() {
        let one = param_count_router_free(&with_layers(1));
        let three = param_count_router_free(&with_layers(3));
        assert_eq!(three, 3 * one);
        assert!(one > 0 && one < param_count(&with_layers(1)));
    }

    #[test]
    fn doubling_spatial_size_grows_flops_superlinearly() {
        let base = with_layers(3);
        let doubled = HanConfig { height: 16, width: 16, ..base.clone() };
        let ratio = flop_count(&doubled) as f64 / flop_count(&base) as f64;
        assert!(ratio > 4.0, "attention term must dominate, ratio {ratio}");
    }

    #[test]
    fn flops_scale_affinely_with_depth() {
        let f1 = flop_count(&with_layers(1));
        let f2 = flop_count(&with_layers(2));
        let f3 = flop_count(&with_layers(3));
        assert_eq!(f3 - f2, f2 - f1, "constant per-layer increment");
        assert!(f1 > 0);
    }
}
