//! Channel enhancement unit: global average pool, shared 1-D convolution
//! across the channel axis, sigmoid, per-channel gate.

use crate::error::Result;
use crate::feature::FeatureMap;
use crate::tensor::{conv1d_same, conv1d_same_backward, mean_canonical, sigmoid};

/// The shared convolution kernel (odd length, k=3 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct CeuParams {
    pub w: Vec<f64>,
}

impl CeuParams {
    pub fn zeros(k: usize) -> Self {
        CeuParams { w: vec![0.0; k] }
    }

    pub fn kernel_len(&self) -> usize {
        self.w.len()
    }
}

#[derive(Debug, Clone)]
pub struct CeuCache {
    pub(crate) input: FeatureMap,
    /// Per-channel spatial means.
    pub(crate) pooled: Vec<f64>,
    /// Per-channel gates.
    pub(crate) gates: Vec<f64>,
}

pub fn ceu_forward(f: &FeatureMap, p: &CeuParams) -> Result<FeatureMap> {
    ceu_forward_cached(f, p).map(|(out, _)| out)
}

pub fn ceu_forward_cached(f: &FeatureMap, p: &CeuParams) -> Result<(FeatureMap, CeuCache)> {
    let c = f.channels();
    let hw = f.spatial();
    let pooled: Vec<f64> = (0..c).map(|ch| mean_canonical(f.channel(ch))).collect();
    let conv = conv1d_same(&pooled, &p.w)?;
    let gates: Vec<f64> = conv.iter().map(|&z| sigmoid(z)).collect();
    let mut out = f.zeros_like();
    for ch in 0..c {
        let src = f.channel(ch);
        let dst = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        for pos in 0..hw {
            dst[pos] = gates[ch] * src[pos];
        }
    }
    Ok((out, CeuCache { input: f.clone(), pooled, gates }))
}

/// Reverse-mode pass. Returns (kernel gradient, input gradient).
pub fn ceu_backward(cache: &CeuCache, p: &CeuParams, d_out: &FeatureMap) -> (CeuParams, FeatureMap) {
    let f = &cache.input;
    let c = f.channels();
    let hw = f.spatial();
    let mut d_in = f.zeros_like();
    // Value path out = gate ⊙ f, and the gate's own sensitivity.
    let mut d_gate = vec![0.0; c];
    for ch in 0..c {
        let src = f.channel(ch);
        let dup = &d_out.data()[ch * hw..(ch + 1) * hw];
        let din = &mut d_in.data_mut()[ch * hw..(ch + 1) * hw];
        for pos in 0..hw {
            d_gate[ch] += dup[pos] * src[pos];
            din[pos] += cache.gates[ch] * dup[pos];
        }
    }
    let d_conv: Vec<f64> = d_gate
        .iter()
        .zip(&cache.gates)
        .map(|(dg, &g)| dg * g * (1.0 - g))
        .collect();
    let mut d_pooled = vec![0.0; c];
    let mut d_w = vec![0.0; p.w.len()];
    conv1d_same_backward(&cache.pooled, &p.w, &d_conv, &mut d_pooled, &mut d_w);
    for ch in 0..c {
        let din = &mut d_in.data_mut()[ch * hw..(ch + 1) * hw];
        let spread = d_pooled[ch] / hw as f64;
        for v in din.iter_mut() {
            *v += spread;
        }
    }
    (CeuParams { w: d_w }, d_in)
}
