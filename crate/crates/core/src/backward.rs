//! Reverse-mode differentiation of the full network. Every forward
//! intermediate comes from `HanCache`, so the gradients describe exactly
//! the computation `han_forward_cached` performed — including the routed
//! aggregation, whose gates are differentiated like any other activation.

use crate::error::Result;
use crate::feature::{FeatureMap, ModalityPair};
use crate::han::{HanCache, HanConfig, HanParams, UnitCache, UNITS};
use crate::router::router_backward;
use crate::tensor::Tensor;
use crate::units::{ceu_backward, cmeu_backward, seu_backward};

fn add_vec(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

fn add_tensor(acc: &mut Tensor, inc: &Tensor) {
    add_vec(acc.data_mut(), inc.data());
}

/// Both-stream inner product ⟨pair, other⟩ — the gate's sensitivity, since
/// a gate scales the whole pair.
fn pair_dot(a: &ModalityPair, b: &ModalityPair) -> f64 {
    let rgb: f64 = a.rgb.data().iter().zip(b.rgb.data()).map(|(x, y)| x * y).sum();
    let tir: f64 = a.tir.data().iter().zip(b.tir.data()).map(|(x, y)| x * y).sum();
    rgb + tir
}

/// Gradients of a scalar loss with respect to every parameter and to the
/// input pair, given `d loss / d fused` as `upstream`.
///
/// Walks the layers in reverse. At each layer the unit-output gradients are
/// assembled first (final-fusion seeding for the last layer, routed
/// aggregation otherwise), the routers' contributions are added — a router
/// reads its own unit's output, so its input gradient lands there too —
/// and only then are the unit backwards run.
pub fn han_backward(
    cache: &HanCache,
    params: &HanParams,
    cfg: &HanConfig,
    upstream: &FeatureMap,
) -> Result<(HanParams, ModalityPair)> {
    let layers = cfg.layers;
    let mut grads = params.zeros_like();
    let gates = cache.gates();

    // Gradient w.r.t. each unit's *input* pair, produced while walking layer
    // l and consumed at the l−1 boundary.
    let mut d_inputs: Vec<ModalityPair> = Vec::new();

    for l in (0..layers).rev() {
        let record_outputs = &cache.records()[l].outputs;
        let mut d_outputs: Vec<ModalityPair> = (0..UNITS)
            .map(|_| record_outputs[0].zeros_like())
            .collect();
        let mut d_gates = [[0.0; UNITS]; UNITS];

        if l == layers - 1 {
            // fused = Σ_j ḡ_j·(O_j.rgb + O_j.tir), ḡ_j = mean of row j.
            for j in 0..UNITS {
                let gbar = cache.gbar()[j];
                for (a, u) in d_outputs[j].rgb.data_mut().iter_mut().zip(upstream.data()) {
                    *a += gbar * u;
                }
                for (a, u) in d_outputs[j].tir.data_mut().iter_mut().zip(upstream.data()) {
                    *a += gbar * u;
                }
                let d_gbar: f64 = record_outputs[j]
                    .rgb
                    .data()
                    .iter()
                    .zip(record_outputs[j].tir.data())
                    .zip(upstream.data())
                    .map(|((r, t), u)| (r + t) * u)
                    .sum();
                for i in 0..UNITS {
                    d_gates[j][i] = d_gbar / UNITS as f64;
                }
            }
        } else {
            // input_i^{(l+1)} = Σ_j gates[l][j][i]·O_j^{(l)}.
            for j in 0..UNITS {
                for (i, d_in) in d_inputs.iter().enumerate() {
                    let g = gates.gates[l][j][i];
                    d_outputs[j].axpy(g, d_in);
                    d_gates[j][i] = pair_dot(&record_outputs[j], d_in);
                }
            }
        }

        // Routers: row j of the gate matrix came from router j reading O_j.
        let router_caches = cache.router_caches(l);
        for j in 0..UNITS {
            let d_router = router_backward(
                &router_caches[j],
                &params.layers[l].routers[j],
                &d_gates[j],
                &mut d_outputs[j],
            );
            let acc = &mut grads.layers[l].routers[j];
            add_tensor(&mut acc.w1, &d_router.w1);
            add_vec(&mut acc.b1, &d_router.b1);
            add_tensor(&mut acc.w2, &d_router.w2);
            add_vec(&mut acc.b2, &d_router.b2);
        }

        // Units.
        let mut next_d_inputs = Vec::with_capacity(UNITS);
        for (i, d_out) in d_outputs.iter().enumerate() {
            let d_in = match &cache.records()[l].unit_caches[i] {
                UnitCache::Seu { rgb, tir } => {
                    let (dp, din_rgb) = seu_backward(rgb, &params.layers[l].seu_rgb, &d_out.rgb);
                    add_vec(&mut grads.layers[l].seu_rgb.gamma, &dp.gamma);
                    add_vec(&mut grads.layers[l].seu_rgb.beta, &dp.beta);
                    let (dp, din_tir) = seu_backward(tir, &params.layers[l].seu_tir, &d_out.tir);
                    add_vec(&mut grads.layers[l].seu_tir.gamma, &dp.gamma);
                    add_vec(&mut grads.layers[l].seu_tir.beta, &dp.beta);
                    ModalityPair { rgb: din_rgb, tir: din_tir }
                }
                UnitCache::Ceu { rgb, tir } => {
                    let (dp, din_rgb) = ceu_backward(rgb, &params.layers[l].ceu_rgb, &d_out.rgb);
                    add_vec(&mut grads.layers[l].ceu_rgb.w, &dp.w);
                    let (dp, din_tir) = ceu_backward(tir, &params.layers[l].ceu_tir, &d_out.tir);
                    add_vec(&mut grads.layers[l].ceu_tir.w, &dp.w);
                    ModalityPair { rgb: din_rgb, tir: din_tir }
                }
                UnitCache::CmeuR2t(c) => {
                    // Output pair was (rgb passthrough, cmeu(query=tir, kv=rgb)).
                    let (dp, d_query, d_kv) =
                        cmeu_backward(c, &params.layers[l].cmeu_r2t, &d_out.tir);
                    accumulate_cmeu(&mut grads.layers[l].cmeu_r2t, &dp);
                    let mut din_rgb = d_kv;
                    for (a, b) in din_rgb.data_mut().iter_mut().zip(d_out.rgb.data()) {
                        *a += b;
                    }
                    ModalityPair { rgb: din_rgb, tir: d_query }
                }
                UnitCache::CmeuT2r(c) => {
                    // Output pair was (cmeu(query=rgb, kv=tir), tir passthrough).
                    let (dp, d_query, d_kv) =
                        cmeu_backward(c, &params.layers[l].cmeu_t2r, &d_out.rgb);
                    accumulate_cmeu(&mut grads.layers[l].cmeu_t2r, &dp);
                    let mut din_tir = d_kv;
                    for (a, b) in din_tir.data_mut().iter_mut().zip(d_out.tir.data()) {
                        *a += b;
                    }
                    ModalityPair { rgb: d_query, tir: din_tir }
                }
            };
            next_d_inputs.push(d_in);
        }
        d_inputs = next_d_inputs;
    }

    // Layer 0 broadcast: every unit read the same raw pair.
    let mut d_input = d_inputs[0].zeros_like();
    for d in &d_inputs {
        d_input.axpy(1.0, d);
    }
    Ok((grads, d_input))
}

fn accumulate_cmeu(acc: &mut crate::units::CmeuParams, inc: &crate::units::CmeuParams) {
    add_vec(&mut acc.norm_scale, &inc.norm_scale);
    add_vec(&mut acc.norm_shift, &inc.norm_shift);
    add_tensor(&mut acc.wq, &inc.wq);
    add_tensor(&mut acc.wk, &inc.wk);
    add_tensor(&mut acc.wv, &inc.wv);
    add_tensor(&mut acc.wo, &inc.wo);
}

// ------------------------------------------------------------- smoothness

/// How far a forward pass stayed from the non-differentiable points that
/// would poison a finite-difference comparison: ReLU kinks in the routers,
/// max-pool argmax ties, and near-constant normalization slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessReport {
    /// Smallest |pre-activation| across every router ReLU (both layers of
    /// the perceptron and the tanh∘ReLU output head).
    pub min_kink_margin: f64,
    /// Smallest winner-vs-runner-up gap across every router max pool.
    pub min_pool_gap: f64,
    /// Smallest standard deviation across every normalization slice (SEU
    /// attention maps and CMEU channel rows).
    pub min_norm_std: f64,
}

impl SmoothnessReport {
    /// True when every margin clears `floor` — the pass is safe to compare
    /// against central differences with step h ≪ floor.
    pub fn clears(&self, floor: f64) -> bool {
        self.min_kink_margin > floor && self.min_pool_gap > floor && self.min_norm_std > floor
    }
}

/// Scan a forward cache for the smallest differentiability margins.
pub fn smoothness_report(cache: &HanCache) -> SmoothnessReport {
    let mut report = SmoothnessReport {
        min_kink_margin: f64::INFINITY,
        min_pool_gap: f64::INFINITY,
        min_norm_std: f64::INFINITY,
    };
    for l in 0..cache.records().len() {
        for rc in cache.router_caches(l) {
            report.min_kink_margin = report.min_kink_margin.min(rc.min_kink_margin());
            report.min_pool_gap = report.min_pool_gap.min(rc.min_pool_gap());
        }
        for uc in &cache.records()[l].unit_caches {
            match uc {
                UnitCache::Seu { rgb, tir } => {
                    report.min_norm_std =
                        report.min_norm_std.min(rgb.min_map_std()).min(tir.min_map_std());
                }
                UnitCache::Ceu { .. } => {}
                UnitCache::CmeuR2t(c) | UnitCache::CmeuT2r(c) => {
                    report.min_norm_std = report.min_norm_std.min(c.min_norm_std());
                }
            }
        }
    }
    report
}
