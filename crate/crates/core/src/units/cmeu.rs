//! Cross-modal enhancement unit.
//!
//! One modality supplies the query, the other the key/value pair. Both are
//! first put through a per-channel spatial normalization with learnable
//! scale/shift, then projected to an inner width c by 1×1 convolutions
//! (realized as position-wise matrix products):
//!
//!   Q = X·Wq,  K = Y·Wk,  V = Y·Wv          X,Y ∈ (H·W)×C
//!   Att = softmax_rows(Q·Kᵀ / √c)
//!   out = f_query + reshape((Att·V)·Wo)
//!
//! The residual keeps the unit an exact identity whenever Wv = 0.

use crate::error::{HanError, Result};
use crate::feature::FeatureMap;
use crate::tensor::{
    matmul, matmul_nt, matmul_tn, normalize_slice, normalize_slice_backward, softmax_rows,
    softmax_row_backward, Tensor, NORM_EPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CmeuParams {
    /// Per-channel affine applied after spatial normalization.
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    /// C×c projections.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// c×C back-projection making the residual addition dimension-valid.
    pub wo: Tensor,
}

impl CmeuParams {
    /// Every parameter zero, including the normalization affine — the
    /// template for gradient accumulators.
    pub fn zeros(c: usize, inner: usize) -> Result<Self> {
        if inner == 0 {
            return Err(HanError::Config("CMEU inner width must be ≥ 1".into()));
        }
        Ok(CmeuParams {
            norm_scale: vec![0.0; c],
            norm_shift: vec![0.0; c],
            wq: Tensor::zeros(vec![c, inner])?,
            wk: Tensor::zeros(vec![c, inner])?,
            wv: Tensor::zeros(vec![c, inner])?,
            wo: Tensor::zeros(vec![inner, c])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.norm_scale.len()
    }

    pub fn inner(&self) -> usize {
        self.wq.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct CmeuCache {
    pub(crate) f_query: FeatureMap,
    pub(crate) f_kv: FeatureMap,
    /// Normalized-but-unscaled channels (x̂) of each input, C×HW layout.
    pub(crate) query_hat: Vec<f64>,
    pub(crate) kv_hat: Vec<f64>,
    /// Per-channel (mean, std) from normalization.
    pub(crate) query_stats: Vec<(f64, f64)>,
    pub(crate) kv_stats: Vec<(f64, f64)>,
    /// Affined inputs as (HW)×C matrices.
    pub(crate) x: Tensor,
    pub(crate) y: Tensor,
    pub(crate) q: Tensor,
    pub(crate) k: Tensor,
    pub(crate) v: Tensor,
    /// Softmax attention, (HW)×(HW).
    pub(crate) att: Tensor,
    /// Att·V, (HW)×c.
    pub(crate) z: Tensor,
}

impl CmeuCache {
    pub fn min_norm_std(&self) -> f64 {
        self.query_stats
            .iter()
            .chain(&self.kv_stats)
            .map(|&(_, s)| s)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Normalize each channel over its spatial positions, apply scale/shift,
/// and lay the result out position-major as an (HW)×C matrix.
fn normalize_to_matrix(
    f: &FeatureMap,
    scale: &[f64],
    shift: &[f64],
) -> (Tensor, Vec<f64>, Vec<(f64, f64)>) {
    let (c, hw) = (f.channels(), f.spatial());
    let mut hat = vec![0.0; c * hw];
    let mut stats = Vec::with_capacity(c);
    let mut mat = vec![0.0; hw * c];
    for ch in 0..c {
        let dst = &mut hat[ch * hw..(ch + 1) * hw];
        stats.push(normalize_slice(f.channel(ch), NORM_EPS, dst));
        for pos in 0..hw {
            mat[pos * c + ch] = scale[ch] * dst[pos] + shift[ch];
        }
    }
    (Tensor::matrix(hw, c, mat).expect("sized by construction"), hat, stats)
}

pub fn cmeu_forward(f_query: &FeatureMap, f_kv: &FeatureMap, p: &CmeuParams) -> Result<FeatureMap> {
    cmeu_forward_cached(f_query, f_kv, p).map(|(out, _)| out)
}

pub fn cmeu_forward_cached(
    f_query: &FeatureMap,
    f_kv: &FeatureMap,
    p: &CmeuParams,
) -> Result<(FeatureMap, CmeuCache)> {
    if !f_query.same_shape(f_kv) {
        return Err(HanError::Shape(format!(
            "CMEU query {:?} and kv {:?} shapes differ",
            f_query.as_tensor().dims(),
            f_kv.as_tensor().dims()
        )));
    }
    let c = f_query.channels();
    if p.channels() != c {
        return Err(HanError::Config(format!(
            "CMEU params built for {} channels, input has {c}",
            p.channels()
        )));
    }
    let hw = f_query.spatial();
    let (x, query_hat, query_stats) = normalize_to_matrix(f_query, &p.norm_scale, &p.norm_shift);
    let (y, kv_hat, kv_stats) = normalize_to_matrix(f_kv, &p.norm_scale, &p.norm_shift);
    let q = matmul(&x, &p.wq)?;
    let k = matmul(&y, &p.wk)?;
    let v = matmul(&y, &p.wv)?;
    let scale = 1.0 / (p.inner() as f64).sqrt();
    let mut scores = matmul_nt(&q, &k);
    for s in scores.data_mut() {
        *s *= scale;
    }
    let att = softmax_rows(&scores)?;
    let z = matmul(&att, &v)?;
    let u = matmul(&z, &p.wo)?;
    let mut out = f_query.clone();
    for ch in 0..c {
        let dst = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        for pos in 0..hw {
            dst[pos] += u.at2(pos, ch);
        }
    }
    let cache = CmeuCache {
        f_query: f_query.clone(),
        f_kv: f_kv.clone(),
        query_hat,
        kv_hat,
        query_stats,
        kv_stats,
        x,
        y,
        q,
        k,
        v,
        att,
        z,
    };
    Ok((out, cache))
}

/// Reverse-mode pass. Returns (parameter gradients, query gradient, kv gradient).
pub fn cmeu_backward(
    cache: &CmeuCache,
    p: &CmeuParams,
    d_out: &FeatureMap,
) -> (CmeuParams, FeatureMap, FeatureMap) {
    let c = cache.f_query.channels();
    let hw = cache.f_query.spatial();
    let inner = p.inner();
    let scale = 1.0 / (inner as f64).sqrt();

    // Residual: d f_query picks up d_out directly.
    let mut d_query = d_out.clone();
    let mut d_kv = cache.f_kv.zeros_like();

    // dU in (HW)×C layout.
    let mut d_u = vec![0.0; hw * c];
    for ch in 0..c {
        for pos in 0..hw {
            d_u[pos * c + ch] = d_out.channel(ch)[pos];
        }
    }
    let d_u = Tensor::matrix(hw, c, d_u).expect("sized by construction");

    let d_z = matmul_nt(&d_u, &p.wo);
    let d_wo = matmul_tn(&cache.z, &d_u);
    let d_att = matmul_nt(&d_z, &cache.v);
    let d_v = matmul_tn(&cache.att, &d_z);

    // Softmax rows, exact Jacobian-vector product per query position.
    let mut d_scores = vec![0.0; hw * hw];
    for row in 0..hw {
        softmax_row_backward(
            &cache.att.data()[row * hw..(row + 1) * hw],
            &d_att.data()[row * hw..(row + 1) * hw],
            &mut d_scores[row * hw..(row + 1) * hw],
        );
    }
    let d_scores = Tensor::matrix(hw, hw, d_scores).expect("sized by construction");

    let mut d_q = matmul(&d_scores, &cache.k).expect("conformant");
    for v in d_q.data_mut() {
        *v *= scale;
    }
    let mut d_k = matmul_tn(&d_scores, &cache.q);
    for v in d_k.data_mut() {
        *v *= scale;
    }

    let d_wq = matmul_tn(&cache.x, &d_q);
    let d_wk = matmul_tn(&cache.y, &d_k);
    let d_wv = matmul_tn(&cache.y, &d_v);
    let d_x = matmul_nt(&d_q, &p.wq);
    let d_y_k = matmul_nt(&d_k, &p.wk);
    let mut d_y = matmul_nt(&d_v, &p.wv);
    for (a, b) in d_y.data_mut().iter_mut().zip(d_y_k.data()) {
        *a += b;
    }

    // Undo the affine + normalization for both inputs.
    let mut d_scale = vec![0.0; c];
    let mut d_shift = vec![0.0; c];
    let mut apply_norm_backward = |d_mat: &Tensor,
                                   hat: &[f64],
                                   stats: &[(f64, f64)],
                                   input: &FeatureMap,
                                   d_input: &mut FeatureMap| {
        for ch in 0..c {
            let hat_ch = &hat[ch * hw..(ch + 1) * hw];
            let mut d_hat = vec![0.0; hw];
            for pos in 0..hw {
                let g = d_mat.at2(pos, ch);
                d_scale[ch] += g * hat_ch[pos];
                d_shift[ch] += g;
                d_hat[pos] = g * p.norm_scale[ch];
            }
            let (mean, std) = stats[ch];
            let din = &mut d_input.data_mut()[ch * hw..(ch + 1) * hw];
            normalize_slice_backward(input.channel(ch), mean, std, NORM_EPS, &d_hat, din);
        }
    };
    apply_norm_backward(&d_x, &cache.query_hat, &cache.query_stats, &cache.f_query, &mut d_query);
    apply_norm_backward(&d_y, &cache.kv_hat, &cache.kv_stats, &cache.f_kv, &mut d_kv);

    let d_p = CmeuParams {
        norm_scale: d_scale,
        norm_shift: d_shift,
        wq: d_wq,
        wk: d_wk,
        wv: d_wv,
        wo: d_wo,
    };
    (d_p, d_query, d_kv)
}
