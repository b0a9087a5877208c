//! Dense tensor storage and the kernels every fusion unit is built on.
//!
//! All math runs in f64 on flat row-major buffers. Pooling and
//! normalization statistics accumulate in sorted value order, so they come
//! out bit-identical under any spatial permutation of the input — routing
//! decisions downstream depend only on the multiset of values, never on
//! their layout.

use crate::error::{HanError, Result};

/// Epsilon added to standard deviations before dividing.
pub const NORM_EPS: f64 = 1e-5;

/// Rank 1-3 dense tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(HanError::Shape(format!(
                "tensor rank must be 1-3, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(HanError::Shape(format!("tensor dims {dims:?} contain zero")));
        }
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(HanError::Shape(format!(
                "tensor dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let numel = dims.iter().product();
        Tensor::new(dims, vec![0.0; numel])
    }

    /// Rank-2 convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rank-2 element accessor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.dims[1] + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------- kernels

/// c[m][n] = Σ_k a[m][k]·b[k][n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return Err(HanError::Shape(format!(
            "matmul needs M×K · K×N matrices, got {:?} · {:?}",
            a.dims, b.dims
        )));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    debug_assert!(out.iter().all(|v| v.is_finite()) || !a.is_finite() || !b.is_finite());
    Tensor::matrix(m, n, out)
}

/// a·bᵀ for a M×K, b N×K. Gradient plumbing; avoids materializing transposes.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.dims[1], b.dims[1]);
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out).expect("conformant by construction")
}

/// aᵀ·b for a K×M, b K×N. Gradient plumbing.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.dims[0], b.dims[0]);
    let (k, m, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += api * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out).expect("conformant by construction")
}

/// Row-wise softmax with per-row max subtraction, so finite input can never
/// overflow.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(HanError::Shape(format!(
            "softmax_rows needs a matrix, got rank {}",
            a.rank()
        )));
    }
    let (m, n) = (a.dims[0], a.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(m, n, out)
}

/// Exact softmax Jacobian-vector product for one row:
/// ds[j] = a[j]·(da[j] − Σ_k da[k]·a[k]) where a is the softmax output.
pub(crate) fn softmax_row_backward(a_row: &[f64], d_row: &[f64], out: &mut [f64]) {
    let dot: f64 = a_row.iter().zip(d_row).map(|(a, d)| a * d).sum();
    for j in 0..a_row.len() {
        out[j] = a_row[j] * (d_row[j] - dot);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Per-channel mean or max over the H·W spatial positions of a C×H×W tensor.
pub fn spatial_pool(f: &Tensor, mode: PoolMode) -> Result<Vec<f64>> {
    if f.rank() != 3 {
        return Err(HanError::Shape(format!(
            "spatial_pool needs a C×H×W tensor, got dims {:?}",
            f.dims
        )));
    }
    let (c, hw) = (f.dims[0], f.dims[1] * f.dims[2]);
    if hw == 0 {
        return Err(HanError::Shape("spatial_pool on empty spatial extent".into()));
    }
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &f.data[ch * hw..(ch + 1) * hw];
        out.push(match mode {
            PoolMode::Avg => mean_canonical(slice),
            PoolMode::Max => max_with_argmax(slice).0,
        });
    }
    Ok(out)
}

/// Zero-padded same-length 1-D convolution with an odd-length kernel shared
/// across channels: y[i] = Σ_d w[d]·x[i+d], d in [−(k−1)/2, (k−1)/2].
pub fn conv1d_same(x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let k = w.len();
    if k % 2 == 0 || k == 0 {
        return Err(HanError::Config(format!("conv1d kernel length {k} must be odd")));
    }
    if x.is_empty() {
        return Err(HanError::Shape("conv1d on empty input".into()));
    }
    // k ≤ 2C−1 keeps at least one tap on real data for every output.
    if k > 2 * x.len() - 1 {
        return Err(HanError::Config(format!(
            "conv1d kernel length {k} exceeds 2·{}−1",
            x.len()
        )));
    }
    let half = (k - 1) / 2;
    let n = x.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (t, &wt) in w.iter().enumerate() {
            let j = i as isize + t as isize - half as isize;
            if j >= 0 && (j as usize) < n {
                acc += wt * x[j as usize];
            }
        }
        y[i] = acc;
    }
    Ok(y)
}

/// Gradient of `conv1d_same` with respect to both operands.
pub(crate) fn conv1d_same_backward(
    x: &[f64],
    w: &[f64],
    d_y: &[f64],
    d_x: &mut [f64],
    d_w: &mut [f64],
) {
    let half = (w.len() - 1) / 2;
    let n = x.len();
    for i in 0..n {
        let dyi = d_y[i];
        for t in 0..w.len() {
            let j = i as isize + t as isize - half as isize;
            if j >= 0 && (j as usize) < n {
                d_w[t] += dyi * x[j as usize];
                d_x[j as usize] += dyi * w[t];
            }
        }
    }
}

/// Per-row (a − mean)/(std + eps) over spatial positions; zero-variance rows
/// map to all-zeros.
pub fn normalize_spatial(a: &Tensor, eps: f64) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(HanError::Shape(format!(
            "normalize_spatial needs groups×positions, got dims {:?}",
            a.dims
        )));
    }
    if !(eps > 0.0) {
        return Err(HanError::Config(format!("normalize eps must be > 0, got {eps}")));
    }
    let (g, n) = (a.dims[0], a.dims[1]);
    let mut out = vec![0.0; g * n];
    for row in 0..g {
        let src = &a.data[row * n..(row + 1) * n];
        let dst = &mut out[row * n..(row + 1) * n];
        normalize_slice(src, eps, dst);
    }
    Tensor::matrix(g, n, out)
}

// --------------------------------------------- canonical statistics helpers

/// Sum in ascending value order. Identical result for any permutation of x.
pub(crate) fn sum_canonical(x: &[f64]) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

pub(crate) fn mean_canonical(x: &[f64]) -> f64 {
    sum_canonical(x) / x.len() as f64
}

/// Population mean and standard deviation, permutation-invariant.
pub(crate) fn mean_std_canonical(x: &[f64]) -> (f64, f64) {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalize one slice into `out`; returns (mean, std) for gradient caches.
pub(crate) fn normalize_slice(x: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let (mean, std) = mean_std_canonical(x);
    if std == 0.0 {
        out.fill(0.0);
    } else {
        let denom = std + eps;
        for (o, &v) in out.iter_mut().zip(x) {
            *o = (v - mean) / denom;
        }
    }
    (mean, std)
}

/// Accumulates d(normalized)/d(x) into `d_x` given the cached forward stats.
///
/// With y_p = (x_p − μ)/(σ+eps):
///   dx_p = dy_p/(σ+eps) − (Σ_q dy_q)/(n(σ+eps)) − (x_p−μ)·(Σ_q dy_q(x_q−μ))/(n·σ·(σ+eps)²)
/// For σ = 0 the forward emitted zeros; the subgradient taken is 0.
pub(crate) fn normalize_slice_backward(
    x: &[f64],
    mean: f64,
    std: f64,
    eps: f64,
    d_out: &[f64],
    d_x: &mut [f64],
) {
    if std == 0.0 {
        return;
    }
    let n = x.len() as f64;
    let denom = std + eps;
    let sum_d: f64 = d_out.iter().sum();
    let sum_dx: f64 = d_out.iter().zip(x).map(|(d, &v)| d * (v - mean)).sum();
    for p in 0..x.len() {
        d_x[p] += d_out[p] / denom
            - sum_d / (n * denom)
            - (x[p] - mean) * sum_dx / (n * std * denom * denom);
    }
}

/// Max and the index of its first occurrence in scan order.
pub(crate) fn max_with_argmax(x: &[f64]) -> (f64, usize) {
    let mut best = x[0];
    let mut idx = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = i;
        }
    }
    (best, idx)
}

// ----------------------------------------------------------- activations

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ReLU with the subgradient convention relu'(0) = 0.
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random_matrix(rng: &mut RngState, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::matrix(m, n, data).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(HanError::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2, 2, 2], vec![0.0; 16]),
            Err(HanError::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(HanError::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(HanError::Shape(_))
        ));
    }

    #[test]
    fn matmul_identity_case() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = matmul(&eye, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngState::new(21);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..5 {
                    want += a.at2(i, k) * b.at2(k, j);
                }
                let got = c.at2(i, j);
                assert!(
                    (got - want).abs() < 1e-12,
                    "matmul[{i}][{j}] = {got}, oracle {want}"
                );
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(HanError::Shape(_))));
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = RngState::new(22);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 6);
            let b = random_matrix(&mut rng, 6, 3);
            let c = random_matrix(&mut rng, 3, 5);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let rel = (l - r).abs() / l.abs().max(r.abs()).max(1e-12);
                assert!(rel < 1e-9, "associativity violated: {l} vs {r}");
            }
        }
    }

    #[test]
    fn transpose_variants_match_explicit_matmul() {
        let mut rng = RngState::new(23);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let nt = matmul_nt(&a, &b);
        for i in 0..4 {
            for j in 0..5 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += a.at2(i, k) * b.at2(j, k);
                }
                assert!((nt.at2(i, j) - want).abs() < 1e-12);
            }
        }
        let c = random_matrix(&mut rng, 3, 4);
        let d = random_matrix(&mut rng, 3, 5);
        let tn = matmul_tn(&c, &d);
        for i in 0..4 {
            for j in 0..5 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += c.at2(k, i) * d.at2(k, j);
                }
                assert!((tn.at2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let a = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&a).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let a = Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap();
        let s = softmax_rows(&a).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = RngState::new(31);
        let a = random_matrix(&mut rng, 4, 6);
        let s = softmax_rows(&a).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = (0..6).map(|j| a.at2(i, j)).collect();
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..6 {
                let want = exps[j] / sum;
                assert!(
                    (s.at2(i, j) - want).abs() < 1e-12,
                    "softmax[{i}][{j}] off: {} vs {want}",
                    s.at2(i, j)
                );
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_across_magnitudes() {
        let mut rng = RngState::new(32);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.uniform(-4.0, 4.0));
            let data: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0) * scale).collect();
            let a = Tensor::matrix(1, 8, data).unwrap();
            let s = softmax_rows(&a).unwrap();
            let sum: f64 = s.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum} at scale {scale}");
            assert!(s.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let mut rng = RngState::new(33);
        let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let upstream: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let fwd = |z: &[f64]| {
            let t = Tensor::matrix(1, 5, z.to_vec()).unwrap();
            softmax_rows(&t).unwrap().data().to_vec()
        };
        let a = fwd(&logits);
        let mut analytic = vec![0.0; 5];
        softmax_row_backward(&a, &upstream, &mut analytic);
        let h = 1e-6;
        for p in 0..5 {
            let mut plus = logits.clone();
            plus[p] += h;
            let mut minus = logits.clone();
            minus[p] -= h;
            let (sp, sm) = (fwd(&plus), fwd(&minus));
            let fd: f64 = (0..5).map(|j| upstream[j] * (sp[j] - sm[j]) / (2.0 * h)).sum();
            assert!(
                (analytic[p] - fd).abs() < 1e-8,
                "softmax grad[{p}]: analytic {} vs fd {fd}",
                analytic[p]
            );
        }
    }

    #[test]
    fn pool_constant_tensor() {
        let t = Tensor::new(vec![3, 2, 2], vec![0.7; 12]).unwrap();
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let p = spatial_pool(&t, mode).unwrap();
            assert_eq!(p, vec![0.7; 3]);
        }
    }

    #[test]
    fn pool_hand_arithmetic() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_pool(&t, PoolMode::Avg).unwrap(), vec![2.5]);
        assert_eq!(spatial_pool(&t, PoolMode::Max).unwrap(), vec![4.0]);
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = RngState::new(41);
        let data: Vec<f64> = (0..8 * 3 * 5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let t = Tensor::new(vec![8, 3, 5], data.clone()).unwrap();
        let avg = spatial_pool(&t, PoolMode::Avg).unwrap();
        let max = spatial_pool(&t, PoolMode::Max).unwrap();
        for c in 0..8 {
            let slice = &data[c * 15..(c + 1) * 15];
            let want_avg = slice.iter().sum::<f64>() / 15.0;
            let want_max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((avg[c] - want_avg).abs() < 1e-12);
            assert_eq!(max[c], want_max);
        }
    }

    #[test]
    fn pool_is_exactly_permutation_invariant() {
        let mut rng = RngState::new(42);
        let hw = 24;
        let data: Vec<f64> = (0..2 * hw).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let t = Tensor::new(vec![2, 4, 6], data.clone()).unwrap();
        let base_avg = spatial_pool(&t, PoolMode::Avg).unwrap();
        let base_max = spatial_pool(&t, PoolMode::Max).unwrap();
        for trial in 0..20 {
            // Fisher-Yates with the shared stream, applied identically per channel.
            let mut perm: Vec<usize> = (0..hw).collect();
            for i in (1..hw).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                perm.swap(i, j);
            }
            let mut shuffled = vec![0.0; 2 * hw];
            for c in 0..2 {
                for (pos, &src) in perm.iter().enumerate() {
                    shuffled[c * hw + pos] = data[c * hw + src];
                }
            }
            let tp = Tensor::new(vec![2, 4, 6], shuffled).unwrap();
            let avg = spatial_pool(&tp, PoolMode::Avg).unwrap();
            let max = spatial_pool(&tp, PoolMode::Max).unwrap();
            for c in 0..2 {
                assert_eq!(
                    avg[c].to_bits(),
                    base_avg[c].to_bits(),
                    "avg pool drifted under permutation (trial {trial})"
                );
                assert_eq!(max[c].to_bits(), base_max[c].to_bits());
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y = conv1d_same(&x, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel() {
        let x = vec![1.0, -2.0, 3.0];
        let y = conv1d_same(&x, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn conv_matches_padded_loop_oracle() {
        let mut rng = RngState::new(51);
        let x: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y = conv1d_same(&x, &w).unwrap();
        for i in 0..16 {
            let mut want = 0.0;
            for d in -1i32..=1 {
                let j = i as i32 + d;
                if j >= 0 && j < 16 {
                    want += w[(d + 1) as usize] * x[j as usize];
                }
            }
            assert!((y[i] - want).abs() < 1e-12, "conv[{i}] {} vs {want}", y[i]);
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(matches!(
            conv1d_same(&[1.0, 2.0], &[0.5, 0.5]),
            Err(HanError::Config(_))
        ));
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = RngState::new(52);
        let x: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (alpha, beta) = (1.7, -0.4);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = conv1d_same(&mixed, &w).unwrap();
        let cx = conv1d_same(&x, &w).unwrap();
        let cy = conv1d_same(&y, &w).unwrap();
        for i in 0..12 {
            let rhs = alpha * cx[i] + beta * cy[i];
            assert!((lhs[i] - rhs).abs() < 1e-10, "linearity broke at {i}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = RngState::new(53);
        let x: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let upstream: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            conv1d_same(x, w)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(y, u)| y * u)
                .sum()
        };
        let mut dx = vec![0.0; 8];
        let mut dw = vec![0.0; 3];
        conv1d_same_backward(&x, &w, &upstream, &mut dx, &mut dw);
        let h = 1e-6;
        for p in 0..8 {
            let mut xp = x.clone();
            xp[p] += h;
            let mut xm = x.clone();
            xm[p] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((dx[p] - fd).abs() < 1e-8, "dx[{p}] {} vs {fd}", dx[p]);
        }
        for t in 0..3 {
            let mut wp = w.clone();
            wp[t] += h;
            let mut wm = w.clone();
            wm[t] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((dw[t] - fd).abs() < 1e-8, "dw[{t}] {} vs {fd}", dw[t]);
        }
    }

    #[test]
    fn normalize_constant_group_returns_zeros() {
        let a = Tensor::matrix(1, 6, vec![3.25; 6]).unwrap();
        let n = normalize_spatial(&a, 1e-5).unwrap();
        assert_eq!(n.data(), &[0.0; 6]);
    }

    #[test]
    fn normalize_unit_std_group() {
        let a = Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap();
        let n = normalize_spatial(&a, 1e-12).unwrap();
        assert!((n.data()[0] - -1.0).abs() < 1e-10);
        assert!((n.data()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalize_statistics_oracle() {
        let mut rng = RngState::new(61);
        let data: Vec<f64> = (0..64).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let a = Tensor::matrix(1, 64, data).unwrap();
        let n = normalize_spatial(&a, 1e-5).unwrap();
        let mean = n.data().iter().sum::<f64>() / 64.0;
        let var = n.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10, "normalized mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-3, "normalized std {}", var.sqrt());
    }

    #[test]
    fn normalize_is_shift_invariant() {
        let mut rng = RngState::new(62);
        let data: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let shifted: Vec<f64> = data.iter().map(|v| v + 7.5).collect();
        let a = Tensor::matrix(1, 20, data).unwrap();
        let b = Tensor::matrix(1, 20, shifted).unwrap();
        let na = normalize_spatial(&a, 1e-5).unwrap();
        let nb = normalize_spatial(&b, 1e-5).unwrap();
        for (x, y) in na.data().iter().zip(nb.data()) {
            assert!((x - y).abs() < 1e-10, "shift changed normalization: {x} vs {y}");
        }
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let mut rng = RngState::new(63);
        let x: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let upstream: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let eps = 1e-5;
        let loss = |x: &[f64]| -> f64 {
            let mut out = vec![0.0; x.len()];
            normalize_slice(x, eps, &mut out);
            out.iter().zip(&upstream).map(|(y, u)| y * u).sum()
        };
        let mut out = vec![0.0; 10];
        let (mean, std) = normalize_slice(&x, eps, &mut out);
        let mut dx = vec![0.0; 10];
        normalize_slice_backward(&x, mean, std, eps, &upstream, &mut dx);
        let h = 1e-6;
        for p in 0..10 {
            let mut xp = x.clone();
            xp[p] += h;
            let mut xm = x.clone();
            xm[p] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((dx[p] - fd).abs() < 1e-7, "dx[{p}] {} vs {fd}", dx[p]);
        }
    }

    #[test]
    fn argmax_takes_first_on_ties() {
        let (max, idx) = max_with_argmax(&[1.0, 5.0, 5.0, 2.0]);
        assert_eq!(max, 5.0);
        assert_eq!(idx, 1);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
