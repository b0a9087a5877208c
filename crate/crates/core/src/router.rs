//! Per-unit soft router.
//!
//! The unit's bimodal output pair is concatenated along channels, reduced
//! to a 4C statistics vector by global average + max pooling, and pushed
//! through a two-layer perceptron with a Tanh→ReLU head. The result is one
//! gate in [0,1) per unit of the next layer — soft, so gradients flow
//! straight through.

use crate::error::{HanError, Result};
use crate::feature::{FeatureMap, ModalityPair};
use crate::han::UNITS;
use crate::tensor::{max_with_argmax, mean_canonical, relu, Tensor};

/// Largest double below 1.0 — the ceiling a saturated gate is clamped to.
const GATE_CEILING: f64 = f64::from_bits(0x3FEF_FFFF_FFFF_FFFF);

/// Two affine layers: (4C)×H_r with bias, then H_r×N with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl RouterParams {
    pub fn zeros(c: usize, hidden: usize) -> Result<Self> {
        Ok(RouterParams {
            w1: Tensor::zeros(vec![4 * c, hidden])?,
            b1: vec![0.0; hidden],
            w2: Tensor::zeros(vec![hidden, UNITS])?,
            b2: vec![0.0; UNITS],
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    /// Channel count the router was built for (input width is 4C).
    pub fn channels(&self) -> usize {
        self.w1.dims()[0] / 4
    }
}

#[derive(Debug, Clone)]
pub struct RouterCache {
    /// Pooled statistics vector, length 4C.
    pub(crate) f_r: Vec<f64>,
    pub(crate) z1: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
    pub(crate) z2: Vec<f64>,
    pub(crate) tanh_out: Vec<f64>,
    /// Argmax position per concatenated channel (first hit in scan order),
    /// used to route the max-pool gradient.
    pub(crate) argmax: Vec<usize>,
    /// max − runner-up per concatenated channel; the margin before a max
    /// switch makes the pooling non-differentiable.
    pub(crate) pool_gaps: Vec<f64>,
    pub(crate) spatial: usize,
}

impl RouterCache {
    /// Smallest |pre-activation| across both kink sites (hidden ReLU and the
    /// Tanh→ReLU head).
    pub fn min_kink_margin(&self) -> f64 {
        self.z1
            .iter()
            .chain(&self.z2)
            .map(|z| z.abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_pool_gap(&self) -> f64 {
        self.pool_gaps.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn router_forward(rgb: &FeatureMap, tir: &FeatureMap, p: &RouterParams) -> Result<Vec<f64>> {
    router_forward_cached(rgb, tir, p).map(|(g, _)| g)
}

pub fn router_forward_cached(
    rgb: &FeatureMap,
    tir: &FeatureMap,
    p: &RouterParams,
) -> Result<(Vec<f64>, RouterCache)> {
    if !rgb.same_shape(tir) {
        return Err(HanError::Shape(format!(
            "router inputs differ: rgb {:?} vs tir {:?}",
            rgb.as_tensor().dims(),
            tir.as_tensor().dims()
        )));
    }
    let c = rgb.channels();
    if p.w1.dims()[0] != 4 * c {
        return Err(HanError::Config(format!(
            "router expects {} channels, input has {c}",
            p.channels()
        )));
    }
    let hw = rgb.spatial();
    let hidden_n = p.hidden();

    // f = concat(rgb, tir) along channels; f_R = [GAP(f), GMP(f)].
    let mut f_r = vec![0.0; 4 * c];
    let mut argmax = vec![0usize; 2 * c];
    let mut pool_gaps = vec![0.0; 2 * c];
    for (slot, map) in [(0, rgb), (c, tir)] {
        for ch in 0..c {
            let slice = map.channel(ch);
            f_r[slot + ch] = mean_canonical(slice);
            let (max, idx) = max_with_argmax(slice);
            f_r[2 * c + slot + ch] = max;
            argmax[slot + ch] = idx;
            let runner_up = slice
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != idx)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            pool_gaps[slot + ch] = if runner_up.is_finite() { max - runner_up } else { f64::INFINITY };
        }
    }

    let mut z1 = p.b1.clone();
    for (row, &x) in f_r.iter().enumerate() {
        let wrow = &p.w1.data()[row * hidden_n..(row + 1) * hidden_n];
        for (a, w) in z1.iter_mut().zip(wrow) {
            *a += x * w;
        }
    }
    let hidden: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
    let mut z2 = p.b2.clone();
    for (row, &h) in hidden.iter().enumerate() {
        let wrow = &p.w2.data()[row * UNITS..(row + 1) * UNITS];
        for (a, w) in z2.iter_mut().zip(wrow) {
            *a += h * w;
        }
    }
    let tanh_out: Vec<f64> = z2.iter().map(|z| z.tanh()).collect();
    // tanh rounds to exactly 1.0 once z clears ~19, and z2 itself can be
    // non-finite when a caller's parameters have blown up mid-training, so
    // the half-open gate range needs a clamp rather than an assert. The
    // clamp point carries no gradient anyway: 1 - tanh^2 underflows to zero
    // well before tanh reaches 1.0.
    let gates: Vec<f64> = tanh_out.iter().map(|&t| relu(t).min(GATE_CEILING)).collect();
    debug_assert!(gates.iter().all(|&g| (0.0..1.0).contains(&g)));
    let cache = RouterCache { f_r, z1, hidden, z2, tanh_out, argmax, pool_gaps, spatial: hw };
    Ok((gates, cache))
}

/// One layer boundary's gate matrix: row j comes from router j applied to
/// unit j's output pair.
pub fn route_layer(
    outputs: &[ModalityPair],
    routers: &[RouterParams],
) -> Result<[[f64; UNITS]; UNITS]> {
    route_layer_cached(outputs, routers).map(|(g, _)| g)
}

pub fn route_layer_cached(
    outputs: &[ModalityPair],
    routers: &[RouterParams],
) -> Result<([[f64; UNITS]; UNITS], Vec<RouterCache>)> {
    if outputs.len() != UNITS || routers.len() != UNITS {
        return Err(HanError::Config(format!(
            "route_layer needs exactly {UNITS} outputs and routers, got {} and {}",
            outputs.len(),
            routers.len()
        )));
    }
    let mut gates = [[0.0; UNITS]; UNITS];
    let mut caches = Vec::with_capacity(UNITS);
    for j in 0..UNITS {
        let (g, cache) = router_forward_cached(&outputs[j].rgb, &outputs[j].tir, &routers[j])?;
        gates[j].copy_from_slice(&g);
        caches.push(cache);
    }
    Ok((gates, caches))
}

/// Reverse-mode pass. Returns parameter gradients and accumulates input
/// gradients into the provided pair.
pub fn router_backward(
    cache: &RouterCache,
    p: &RouterParams,
    d_gates: &[f64],
    d_input: &mut ModalityPair,
) -> RouterParams {
    let c = p.channels();
    let hidden_n = p.hidden();
    let hw = cache.spatial;

    // Head: relu(tanh(z2)), with ReLU'(0) = 0.
    let mut d_z2 = vec![0.0; UNITS];
    for i in 0..UNITS {
        let dt = if cache.tanh_out[i] > 0.0 { d_gates[i] } else { 0.0 };
        d_z2[i] = dt * (1.0 - cache.tanh_out[i] * cache.tanh_out[i]);
    }

    let mut d_p = RouterParams::zeros(c, hidden_n).expect("dims already valid");
    d_p.b2.copy_from_slice(&d_z2);
    let mut d_hidden = vec![0.0; hidden_n];
    for row in 0..hidden_n {
        let wrow = &p.w2.data()[row * UNITS..(row + 1) * UNITS];
        let drow = &mut d_p.w2.data_mut()[row * UNITS..(row + 1) * UNITS];
        for i in 0..UNITS {
            drow[i] += cache.hidden[row] * d_z2[i];
            d_hidden[row] += wrow[i] * d_z2[i];
        }
    }

    let mut d_z1 = vec![0.0; hidden_n];
    for a in 0..hidden_n {
        d_z1[a] = if cache.z1[a] > 0.0 { d_hidden[a] } else { 0.0 };
    }
    d_p.b1.copy_from_slice(&d_z1);
    let mut d_f_r = vec![0.0; 4 * c];
    for row in 0..4 * c {
        let wrow = &p.w1.data()[row * hidden_n..(row + 1) * hidden_n];
        let drow = &mut d_p.w1.data_mut()[row * hidden_n..(row + 1) * hidden_n];
        for a in 0..hidden_n {
            drow[a] += cache.f_r[row] * d_z1[a];
            d_f_r[row] += wrow[a] * d_z1[a];
        }
    }

    // GAP spreads uniformly; GMP routes to the recorded argmax.
    for ch in 0..2 * c {
        let (map, local) = if ch < c {
            (&mut d_input.rgb, ch)
        } else {
            (&mut d_input.tir, ch - c)
        };
        let slice = &mut map.data_mut()[local * hw..(local + 1) * hw];
        let spread = d_f_r[ch] / hw as f64;
        for v in slice.iter_mut() {
            *v += spread;
        }
        slice[cache.argmax[ch]] += d_f_r[2 * c + ch];
    }
    d_p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    pub(crate) fn random_router(rng: &mut RngState, c: usize, hidden: usize) -> RouterParams {
        let w1 = (0..4 * c * hidden).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let w2 = (0..hidden * UNITS).map(|_| rng.uniform(-0.5, 0.5)).collect();
        RouterParams {
            w1: Tensor::matrix(4 * c, hidden, w1).unwrap(),
            b1: (0..hidden).map(|_| rng.uniform(-0.3, 0.3)).collect(),
            w2: Tensor::matrix(hidden, UNITS, w2).unwrap(),
            b2: (0..UNITS).map(|_| rng.uniform(-0.3, 0.3)).collect(),
        }
    }

    #[test]
    fn zero_perceptron_gives_zero_gates() {
        let mut rng = RngState::new(71);
        let rgb = FeatureMap::random(8, 4, 4, &mut rng, -1.0, 1.0).unwrap();
        let tir = FeatureMap::random(8, 4, 4, &mut rng, -1.0, 1.0).unwrap();
        let gates = router_forward(&rgb, &tir, &RouterParams::zeros(8, 8).unwrap()).unwrap();
        assert_eq!(gates, vec![0.0; UNITS]);
    }

    #[test]
    fn gates_stay_in_unit_interval() {
        let mut rng = RngState::new(72);
        for _ in 0..200 {
            let p = random_router(&mut rng, 4, 4);
            let rgb = FeatureMap::random(4, 3, 3, &mut rng, -3.0, 3.0).unwrap();
            let tir = FeatureMap::random(4, 3, 3, &mut rng, -3.0, 3.0).unwrap();
            let gates = router_forward(&rgb, &tir, &p).unwrap();
            for &g in &gates {
                assert!((0.0..1.0).contains(&g), "gate {g} outside [0,1)");
            }
        }
    }

    #[test]
    fn matches_perceptron_oracle() {
        let mut rng = RngState::new(73);
        for _ in 0..10 {
            let (c, hidden, h, w) = (8, 8, 4, 4);
            let hw = h * w;
            let p = random_router(&mut rng, c, hidden);
            let rgb = FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap();
            let tir = FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap();
            let gates = router_forward(&rgb, &tir, &p).unwrap();

            // Oracle: pools and both layers written independently.
            let mut f_r = vec![0.0; 4 * c];
            for ch in 0..2 * c {
                let slice: Vec<f64> = if ch < c {
                    rgb.data()[ch * hw..(ch + 1) * hw].to_vec()
                } else {
                    tir.data()[(ch - c) * hw..(ch - c + 1) * hw].to_vec()
                };
                f_r[ch] = slice.iter().sum::<f64>() / hw as f64;
                f_r[2 * c + ch] = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            for i in 0..UNITS {
                let mut z2 = p.b2[i];
                for a in 0..hidden {
                    let mut z1 = p.b1[a];
                    for row in 0..4 * c {
                        z1 += f_r[row] * p.w1.at2(row, a);
                    }
                    z2 += z1.max(0.0) * p.w2.at2(a, i);
                }
                let want = z2.tanh().max(0.0);
                assert!(
                    (gates[i] - want).abs() < 1e-12,
                    "gate {i}: {} vs oracle {want}",
                    gates[i]
                );
            }
        }
    }

    #[test]
    fn gates_are_exactly_invariant_to_shared_spatial_permutation() {
        let mut rng = RngState::new(74);
        let (c, h, w) = (4, 3, 4);
        let hw = h * w;
        let p = random_router(&mut rng, c, 4);
        let rgb = FeatureMap::random(c, h, w, &mut rng, -2.0, 2.0).unwrap();
        let tir = FeatureMap::random(c, h, w, &mut rng, -2.0, 2.0).unwrap();
        let base = router_forward(&rgb, &tir, &p).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..hw).collect();
            for i in (1..hw).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                perm.swap(i, j);
            }
            let shuffle = |f: &FeatureMap| {
                let mut data = vec![0.0; c * hw];
                for ch in 0..c {
                    for (pos, &src) in perm.iter().enumerate() {
                        data[ch * hw + pos] = f.data()[ch * hw + src];
                    }
                }
                FeatureMap::new(c, h, w, data).unwrap()
            };
            let permuted = router_forward(&shuffle(&rgb), &shuffle(&tir), &p).unwrap();
            for (a, b) in base.iter().zip(&permuted) {
                assert_eq!(a.to_bits(), b.to_bits(), "gate moved under permutation");
            }
        }
    }

    #[test]
    fn gates_are_lipschitz_in_the_input() {
        // relu and tanh are 1-Lipschitz; pooling is 1-Lipschitz per channel
        // statistic, so ‖Δgates‖ ≤ ‖W1‖_F·‖W2‖_F·‖Δf_R‖ always holds.
        let mut rng = RngState::new(75);
        let (c, h, w) = (4, 3, 3);
        let p = random_router(&mut rng, c, 4);
        let w1_norm = p.w1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let w2_norm = p.w2.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rgb = FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap();
        let tir = FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap();
        let base = router_forward(&rgb, &tir, &p).unwrap();
        for delta_exp in [-3, -4, -5] {
            let delta = 10f64.powi(delta_exp);
            let mut bumped = rgb.clone();
            bumped.data_mut()[0] += delta;
            let moved = router_forward(&bumped, &tir, &p).unwrap();
            let change: f64 = base
                .iter()
                .zip(&moved)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // One element moved by δ shifts (gap, gmp) of one channel by at
            // most (δ/HW, δ), so ‖Δf_R‖ ≤ δ·√2.
            let bound = w1_norm * w2_norm * delta * 2f64.sqrt();
            assert!(
                change <= bound + 1e-15,
                "gate change {change} exceeds Lipschitz bound {bound} at δ={delta}"
            );
        }
    }

    #[test]
    fn route_layer_rows_are_independent_router_calls() {
        let mut rng = RngState::new(77);
        let (c, h, w) = (4, 3, 3);
        let outputs: Vec<ModalityPair> = (0..UNITS)
            .map(|_| {
                ModalityPair::new(
                    FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap(),
                    FeatureMap::random(c, h, w, &mut rng, -1.0, 1.0).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let mut routers: Vec<RouterParams> =
            (0..UNITS).map(|_| random_router(&mut rng, c, 4)).collect();
        let gates = route_layer(&outputs, &routers).unwrap();
        for j in 0..UNITS {
            let row = router_forward(&outputs[j].rgb, &outputs[j].tir, &routers[j]).unwrap();
            for i in 0..UNITS {
                assert!((gates[j][i] - row[i]).abs() < 1e-12);
            }
        }
        // Zeroing one router zeroes exactly its row.
        routers[2] = RouterParams::zeros(c, 4).unwrap();
        let gates = route_layer(&outputs, &routers).unwrap();
        assert_eq!(gates[2], [0.0; UNITS]);
        assert!(gates[0].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(76);
        let (c, hidden) = (4, 4);
        let p = random_router(&mut rng, c, hidden);
        let rgb = FeatureMap::random(c, 3, 3, &mut rng, -1.0, 1.0).unwrap();
        let tir = FeatureMap::random(c, 3, 3, &mut rng, -1.0, 1.0).unwrap();
        let upstream: Vec<f64> = (0..UNITS).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |rgb: &FeatureMap, tir: &FeatureMap, p: &RouterParams| -> f64 {
            router_forward(rgb, tir, p)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(g, u)| g * u)
                .sum()
        };
        let (_, cache) = router_forward_cached(&rgb, &tir, &p).unwrap();
        let mut d_input = ModalityPair::zeros(c, 3, 3).unwrap();
        let d_p = router_backward(&cache, &p, &upstream, &mut d_input);
        let h = 1e-6;
        for idx in (0..4 * c * hidden).step_by(3) {
            let mut pp = p.clone();
            pp.w1.data_mut()[idx] += h;
            let mut pm = p.clone();
            pm.w1.data_mut()[idx] -= h;
            let fd = (loss(&rgb, &tir, &pp) - loss(&rgb, &tir, &pm)) / (2.0 * h);
            assert!(
                (d_p.w1.data()[idx] - fd).abs() < 1e-7,
                "dw1[{idx}] {} vs {fd}",
                d_p.w1.data()[idx]
            );
        }
        for idx in 0..hidden * UNITS {
            let mut pp = p.clone();
            pp.w2.data_mut()[idx] += h;
            let mut pm = p.clone();
            pm.w2.data_mut()[idx] -= h;
            let fd = (loss(&rgb, &tir, &pp) - loss(&rgb, &tir, &pm)) / (2.0 * h);
            assert!((d_p.w2.data()[idx] - fd).abs() < 1e-7, "dw2[{idx}]");
        }
        for idx in (0..rgb.data().len()).step_by(4) {
            let mut fp = rgb.clone();
            fp.data_mut()[idx] += h;
            let mut fm = rgb.clone();
            fm.data_mut()[idx] -= h;
            let fd = (loss(&fp, &tir, &p) - loss(&fm, &tir, &p)) / (2.0 * h);
            assert!(
                (d_input.rgb.data()[idx] - fd).abs() < 1e-7,
                "drgb[{idx}] {} vs {fd}",
                d_input.rgb.data()[idx]
            );
        }
    }
}
