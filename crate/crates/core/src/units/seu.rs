//! Spatial enhancement unit.
//!
//! Channels are split into G groups. Each group builds a spatial attention
//! map from the dot product between its spatially-averaged channel vector
//! and every position's channel vector, normalizes the map, applies a
//! per-group affine (γ, β) and a sigmoid, and gates the group with it.

use crate::error::{HanError, Result};
use crate::feature::FeatureMap;
use crate::tensor::{mean_canonical, normalize_slice, normalize_slice_backward, sigmoid};

/// Per-group scale and offset on the normalized attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct SeuParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SeuParams {
    /// Neutral start: γ=0, β=0 puts every gate at sigmoid(0) = 0.5.
    pub fn zeros(groups: usize) -> Self {
        SeuParams { gamma: vec![0.0; groups], beta: vec![0.0; groups] }
    }

    pub fn groups(&self) -> usize {
        self.gamma.len()
    }
}

/// Intermediates cached by the forward pass, per group.
#[derive(Debug, Clone)]
pub struct SeuCache {
    pub(crate) input: FeatureMap,
    pub(crate) eps: f64,
    /// Spatially-averaged channel vector per group (length C/G each).
    pub(crate) group_means: Vec<Vec<f64>>,
    /// Raw attention map per group (length H·W each).
    pub(crate) maps: Vec<Vec<f64>>,
    /// (mean, std) of each raw map, as used by normalization.
    pub(crate) map_stats: Vec<(f64, f64)>,
    /// Normalized maps.
    pub(crate) maps_hat: Vec<Vec<f64>>,
    /// Sigmoid gates per group.
    pub(crate) gates: Vec<Vec<f64>>,
}

impl SeuCache {
    /// Smallest normalization std seen — a zero here means the forward sat
    /// on the zero-variance branch, where the map is non-differentiable.
    pub fn min_map_std(&self) -> f64 {
        self.map_stats.iter().map(|&(_, s)| s).fold(f64::INFINITY, f64::min)
    }
}

pub fn seu_forward(f: &FeatureMap, p: &SeuParams, groups: usize, eps: f64) -> Result<FeatureMap> {
    seu_forward_cached(f, p, groups, eps).map(|(out, _)| out)
}

pub fn seu_forward_cached(
    f: &FeatureMap,
    p: &SeuParams,
    groups: usize,
    eps: f64,
) -> Result<(FeatureMap, SeuCache)> {
    let c = f.channels();
    if groups == 0 || c % groups != 0 {
        return Err(HanError::Config(format!(
            "SEU group count {groups} must divide channel count {c}"
        )));
    }
    if p.gamma.len() != groups || p.beta.len() != groups {
        return Err(HanError::Config(format!(
            "SEU params sized for {} groups, config wants {groups}",
            p.gamma.len()
        )));
    }
    let gs = c / groups;
    let hw = f.spatial();
    let mut out = f.zeros_like();
    let mut cache = SeuCache {
        input: f.clone(),
        eps,
        group_means: Vec::with_capacity(groups),
        maps: Vec::with_capacity(groups),
        map_stats: Vec::with_capacity(groups),
        maps_hat: Vec::with_capacity(groups),
        gates: Vec::with_capacity(groups),
    };
    for s in 0..groups {
        let first = s * gs;
        let m: Vec<f64> = (0..gs).map(|u| mean_canonical(f.channel(first + u))).collect();
        // a(p) = ⟨m, F(·,p)⟩ over the group's channels.
        let mut a = vec![0.0; hw];
        for (u, mu) in m.iter().enumerate() {
            for (ap, &v) in a.iter_mut().zip(f.channel(first + u)) {
                *ap += mu * v;
            }
        }
        let mut a_hat = vec![0.0; hw];
        let (mean, std) = normalize_slice(&a, eps, &mut a_hat);
        let gate: Vec<f64> = a_hat
            .iter()
            .map(|&v| sigmoid(p.gamma[s] * v + p.beta[s]))
            .collect();
        for u in 0..gs {
            let src = f.channel(first + u);
            let dst = &mut out.data_mut()[(first + u) * hw..(first + u + 1) * hw];
            for pos in 0..hw {
                dst[pos] = gate[pos] * src[pos];
            }
        }
        cache.group_means.push(m);
        cache.maps.push(a);
        cache.map_stats.push((mean, std));
        cache.maps_hat.push(a_hat);
        cache.gates.push(gate);
    }
    Ok((out, cache))
}

/// Reverse-mode pass. Returns (parameter gradients, input gradient).
///
/// The input enters three ways — as the gated value, inside the attention
/// map's dot product, and through the group-mean vector — and all three
/// paths are accumulated.
pub fn seu_backward(cache: &SeuCache, p: &SeuParams, d_out: &FeatureMap) -> (SeuParams, FeatureMap) {
    let f = &cache.input;
    let groups = p.gamma.len();
    let gs = f.channels() / groups;
    let hw = f.spatial();
    let mut d_in = f.zeros_like();
    let mut d_p = SeuParams::zeros(groups);
    for s in 0..groups {
        let first = s * gs;
        let gate = &cache.gates[s];
        let a_hat = &cache.maps_hat[s];
        let (mean, std) = cache.map_stats[s];

        // Gate path: out = gate ⊙ F.
        let mut d_gate = vec![0.0; hw];
        for u in 0..gs {
            let src = f.channel(first + u);
            let dup = &d_out.data()[(first + u) * hw..(first + u + 1) * hw];
            let din = &mut d_in.data_mut()[(first + u) * hw..(first + u + 1) * hw];
            for pos in 0..hw {
                d_gate[pos] += dup[pos] * src[pos];
                din[pos] += gate[pos] * dup[pos];
            }
        }

        // Sigmoid and affine.
        let mut d_hat = vec![0.0; hw];
        for pos in 0..hw {
            let dt = d_gate[pos] * gate[pos] * (1.0 - gate[pos]);
            d_p.gamma[s] += dt * a_hat[pos];
            d_p.beta[s] += dt;
            d_hat[pos] = dt * p.gamma[s];
        }

        // Normalization.
        let mut d_a = vec![0.0; hw];
        normalize_slice_backward(&cache.maps[s], mean, std, cache.eps, &d_hat, &mut d_a);

        // Map path a(p) = Σ_u m[u]·F[u,p]: gradient reaches both operands.
        let m = &cache.group_means[s];
        let mut d_m = vec![0.0; gs];
        for u in 0..gs {
            let src = f.channel(first + u);
            let din = &mut d_in.data_mut()[(first + u) * hw..(first + u + 1) * hw];
            for pos in 0..hw {
                d_m[u] += d_a[pos] * src[pos];
                din[pos] += m[u] * d_a[pos];
            }
        }

        // Group-mean path m[u] = mean over positions of channel u.
        for u in 0..gs {
            let din = &mut d_in.data_mut()[(first + u) * hw..(first + u + 1) * hw];
            let spread = d_m[u] / hw as f64;
            for v in din.iter_mut() {
                *v += spread;
            }
        }
    }
    (d_p, d_in)
}
