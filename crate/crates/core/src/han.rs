//! The dynamic fusion network: L densely connected layers of the four
//! units, soft-routed aggregation between layers, and a parameter-free
//! final fusion.
//!
//! Layer 0 units all read the raw modality pair. Every later unit i reads
//! input_i = Σ_j gates[l−1][j][i] · O_j^{(l−1)}, where row j of the gate
//! matrix comes from the router embedded in unit j. The last layer's gate
//! rows are averaged into one weight per unit and the weighted outputs are
//! summed, streams added, to produce the fused map.

use serde::{Deserialize, Serialize};

use crate::error::{HanError, Result};
use crate::feature::{FeatureMap, ModalityPair};
use crate::rng::RngState;
use crate::router::{route_layer_cached, RouterCache, RouterParams};
use crate::tensor::{Tensor, NORM_EPS};
use crate::units::{
    ceu_forward_cached, cmeu_forward_cached, seu_forward_cached, CeuCache, CeuParams, CmeuCache,
    CmeuParams, SeuCache, SeuParams,
};

/// Units per layer. The architecture is fixed at four: SEU, CEU, and the
/// two cross-modal units.
pub const UNITS: usize = 4;

/// Default display threshold for active-edge extraction in traces.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;

// ------------------------------------------------------------------ config

fn default_layers() -> usize {
    3
}
fn default_units() -> usize {
    UNITS
}
fn default_channels() -> usize {
    16
}
fn default_height() -> usize {
    8
}
fn default_width() -> usize {
    8
}
fn default_groups() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_seed() -> u64 {
    42
}

/// Structural hyperparameters. `attn_channels` and `router_hidden` may be
/// left unset, in which case they derive from the channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HanConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// SEU channel groups.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// CEU kernel length.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// CMEU inner width c; defaults to channels/2.
    #[serde(default)]
    pub attn_channels: Option<usize>,
    /// Router hidden width; defaults to max(channels, 4).
    #[serde(default)]
    pub router_hidden: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for HanConfig {
    fn default() -> Self {
        HanConfig {
            layers: default_layers(),
            units: default_units(),
            channels: default_channels(),
            height: default_height(),
            width: default_width(),
            groups: default_groups(),
            kernel: default_kernel(),
            attn_channels: None,
            router_hidden: None,
            seed: default_seed(),
        }
    }
}

impl HanConfig {
    /// Effective CMEU inner width.
    pub fn inner_channels(&self) -> usize {
        self.attn_channels.unwrap_or((self.channels / 2).max(1))
    }

    /// Effective router hidden width.
    pub fn hidden_width(&self) -> usize {
        self.router_hidden.unwrap_or(self.channels.max(UNITS))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HanError::Config(msg));
        if self.layers == 0 {
            return fail("layers must be ≥ 1".into());
        }
        if self.units != UNITS {
            return fail(format!("units is fixed at {UNITS}, got {}", self.units));
        }
        if self.channels == 0 {
            return fail("channels must be ≥ 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return fail(format!(
                "height and width must be ≥ 1, got {}×{}",
                self.height, self.width
            ));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return fail(format!(
                "groups ({}) must divide channels ({})",
                self.groups, self.channels
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return fail(format!("kernel ({}) must be odd", self.kernel));
        }
        if self.kernel > 2 * self.channels - 1 {
            return fail(format!(
                "kernel ({}) exceeds 2·channels−1 ({})",
                self.kernel,
                2 * self.channels - 1
            ));
        }
        if self.inner_channels() == 0 {
            return fail("attn_channels must be ≥ 1".into());
        }
        if self.hidden_width() == 0 {
            return fail("router_hidden must be ≥ 1".into());
        }
        Ok(())
    }
}

// ------------------------------------------------------------- parameters

/// One layer's worth of unit and router parameters. Nothing is shared
/// between layers or between the two modality streams.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub seu_rgb: SeuParams,
    pub seu_tir: SeuParams,
    pub ceu_rgb: CeuParams,
    pub ceu_tir: CeuParams,
    pub cmeu_r2t: CmeuParams,
    pub cmeu_t2r: CmeuParams,
    pub routers: Vec<RouterParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HanParams {
    pub layers: Vec<LayerParams>,
}

fn xavier(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

impl HanParams {
    /// Seeded initialization. Draw order is fixed: layers in order, within
    /// a layer seu_rgb, seu_tir, ceu_rgb, ceu_tir, cmeu_r2t, cmeu_t2r, then
    /// routers 0..3. SEU starts neutral (γ=β=0 → 0.5 gates), CEU kernels
    /// are small uniform, CMEU projections and router weights are
    /// Xavier-uniform, and router output biases sit at 0.2 so the initial
    /// gates are small but non-zero.
    pub fn init(cfg: &HanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(cfg.seed);
        let (c, inner, hidden) = (cfg.channels, cfg.inner_channels(), cfg.hidden_width());
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let seu_rgb = SeuParams::zeros(cfg.groups);
            let seu_tir = SeuParams::zeros(cfg.groups);
            let ceu = |rng: &mut RngState| CeuParams {
                w: (0..cfg.kernel).map(|_| rng.uniform(-0.1, 0.1)).collect(),
            };
            let ceu_rgb = ceu(&mut rng);
            let ceu_tir = ceu(&mut rng);
            let cmeu = |rng: &mut RngState| CmeuParams {
                norm_scale: vec![1.0; c],
                norm_shift: vec![0.0; c],
                wq: xavier(rng, c, inner),
                wk: xavier(rng, c, inner),
                wv: xavier(rng, c, inner),
                wo: xavier(rng, inner, c),
            };
            let cmeu_r2t = cmeu(&mut rng);
            let cmeu_t2r = cmeu(&mut rng);
            let routers = (0..UNITS)
                .map(|_| RouterParams {
                    w1: xavier(&mut rng, 4 * c, hidden),
                    b1: vec![0.0; hidden],
                    w2: xavier(&mut rng, hidden, UNITS),
                    b2: vec![0.2; UNITS],
                })
                .collect();
            layers.push(LayerParams {
                seu_rgb,
                seu_tir,
                ceu_rgb,
                ceu_tir,
                cmeu_r2t,
                cmeu_t2r,
                routers,
            });
        }
        Ok(HanParams { layers })
    }

    /// Every parameter exactly zero.
    pub fn zeros(cfg: &HanConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, inner, hidden) = (cfg.channels, cfg.inner_channels(), cfg.hidden_width());
        let layers = (0..cfg.layers)
            .map(|_| {
                Ok(LayerParams {
                    seu_rgb: SeuParams::zeros(cfg.groups),
                    seu_tir: SeuParams::zeros(cfg.groups),
                    ceu_rgb: CeuParams::zeros(cfg.kernel),
                    ceu_tir: CeuParams::zeros(cfg.kernel),
                    cmeu_r2t: CmeuParams::zeros(c, inner)?,
                    cmeu_t2r: CmeuParams::zeros(c, inner)?,
                    routers: (0..UNITS)
                        .map(|_| RouterParams::zeros(c, hidden))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HanParams { layers })
    }

    /// Every parameter drawn uniformly from [lo, hi) — the regime used by
    /// gradient checks, where saturation must be avoided.
    pub fn random_uniform(cfg: &HanConfig, rng: &mut RngState, lo: f64, hi: f64) -> Result<Self> {
        let mut params = HanParams::zeros(cfg)?;
        params.for_each_entry_mut(|data| {
            for v in data {
                *v = rng.uniform(lo, hi);
            }
        });
        Ok(params)
    }

    pub fn zeros_like(&self) -> HanParams {
        let mut out = self.clone();
        out.for_each_entry_mut(|data| data.fill(0.0));
        out
    }

    /// Visit every tensor in canonical order with its name and dims.
    pub fn for_each_entry(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            let g = layer.seu_rgb.gamma.len();
            let k = layer.ceu_rgb.w.len();
            let c = layer.cmeu_r2t.channels();
            f(&format!("layer{l}.seu_rgb.gamma"), &[g], &layer.seu_rgb.gamma);
            f(&format!("layer{l}.seu_rgb.beta"), &[g], &layer.seu_rgb.beta);
            f(&format!("layer{l}.seu_tir.gamma"), &[g], &layer.seu_tir.gamma);
            f(&format!("layer{l}.seu_tir.beta"), &[g], &layer.seu_tir.beta);
            f(&format!("layer{l}.ceu_rgb.w"), &[k], &layer.ceu_rgb.w);
            f(&format!("layer{l}.ceu_tir.w"), &[k], &layer.ceu_tir.w);
            for (unit, p) in [("cmeu_r2t", &layer.cmeu_r2t), ("cmeu_t2r", &layer.cmeu_t2r)] {
                f(&format!("layer{l}.{unit}.norm_scale"), &[c], &p.norm_scale);
                f(&format!("layer{l}.{unit}.norm_shift"), &[c], &p.norm_shift);
                f(&format!("layer{l}.{unit}.wq"), p.wq.dims(), p.wq.data());
                f(&format!("layer{l}.{unit}.wk"), p.wk.dims(), p.wk.data());
                f(&format!("layer{l}.{unit}.wv"), p.wv.dims(), p.wv.data());
                f(&format!("layer{l}.{unit}.wo"), p.wo.dims(), p.wo.data());
            }
            for (j, r) in layer.routers.iter().enumerate() {
                f(&format!("layer{l}.router{j}.w1"), r.w1.dims(), r.w1.data());
                f(&format!("layer{l}.router{j}.b1"), &[r.b1.len()], &r.b1);
                f(&format!("layer{l}.router{j}.w2"), r.w2.dims(), r.w2.data());
                f(&format!("layer{l}.router{j}.b2"), &[r.b2.len()], &r.b2);
            }
        }
    }

    /// Mutable visit in the same canonical order as `for_each_entry`.
    pub fn for_each_entry_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            f(&mut layer.seu_rgb.gamma);
            f(&mut layer.seu_rgb.beta);
            f(&mut layer.seu_tir.gamma);
            f(&mut layer.seu_tir.beta);
            f(&mut layer.ceu_rgb.w);
            f(&mut layer.ceu_tir.w);
            for p in [&mut layer.cmeu_r2t, &mut layer.cmeu_t2r] {
                f(&mut p.norm_scale);
                f(&mut p.norm_shift);
                f(p.wq.data_mut());
                f(p.wk.data_mut());
                f(p.wv.data_mut());
                f(p.wo.data_mut());
            }
            for r in &mut layer.routers {
                f(r.w1.data_mut());
                f(&mut r.b1);
                f(r.w2.data_mut());
                f(&mut r.b2);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_entry(|_, _, data| n += data.len());
        n
    }

    /// Flatten into one vector, canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.for_each_entry(|_, _, data| flat.extend_from_slice(data));
        flat
    }

    /// Inverse of `to_flat`.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        self.for_each_entry_mut(|data| {
            data.copy_from_slice(&flat[cursor..cursor + data.len()]);
            cursor += data.len();
        });
        debug_assert_eq!(cursor, flat.len());
    }

    /// self += alpha · other, entry by entry (the gradient-descent update).
    pub fn axpy(&mut self, alpha: f64, other: &HanParams) {
        let flat = other.to_flat();
        let mut cursor = 0;
        self.for_each_entry_mut(|data| {
            for v in data.iter_mut() {
                *v += alpha * flat[cursor];
                cursor += 1;
            }
        });
    }

    /// Reconstruct the config these parameters were built for. Everything
    /// but the spatial extent is encoded in the parameter shapes; height and
    /// width come from the input the caller intends to feed.
    pub fn infer_config(&self, height: usize, width: usize) -> Result<HanConfig> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| HanError::Config("parameter set holds no layers".into()))?;
        let channels = first.cmeu_r2t.norm_scale.len();
        let inner = if first.cmeu_r2t.wq.rank() == 2 { first.cmeu_r2t.wq.dims()[1] } else { 0 };
        let router = first
            .routers
            .first()
            .ok_or_else(|| HanError::Config("layer 0 holds no routers".into()))?;
        let cfg = HanConfig {
            layers: self.layers.len(),
            units: UNITS,
            channels,
            height,
            width,
            groups: first.seu_rgb.gamma.len(),
            kernel: first.ceu_rgb.w.len(),
            attn_channels: Some(inner),
            router_hidden: Some(router.b1.len()),
            seed: 0,
        };
        self.check(&cfg)?;
        Ok(cfg)
    }

    /// Structural compatibility with a config.
    pub fn check(&self, cfg: &HanConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(HanError::Config(format!(
                "params hold {} layers, config wants {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        let (c, inner, hidden) = (cfg.channels, cfg.inner_channels(), cfg.hidden_width());
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.seu_rgb.groups() != cfg.groups || layer.seu_tir.groups() != cfg.groups {
                return Err(HanError::Config(format!("layer {l}: SEU group count mismatch")));
            }
            if layer.ceu_rgb.kernel_len() != cfg.kernel || layer.ceu_tir.kernel_len() != cfg.kernel
            {
                return Err(HanError::Config(format!("layer {l}: CEU kernel length mismatch")));
            }
            for p in [&layer.cmeu_r2t, &layer.cmeu_t2r] {
                if p.channels() != c || p.inner() != inner || p.wo.dims() != [inner, c] {
                    return Err(HanError::Config(format!("layer {l}: CMEU shape mismatch")));
                }
            }
            if layer.routers.len() != UNITS {
                return Err(HanError::Config(format!(
                    "layer {l}: expected {UNITS} routers, found {}",
                    layer.routers.len()
                )));
            }
            for (j, r) in layer.routers.iter().enumerate() {
                if r.w1.dims() != [4 * c, hidden] || r.w2.dims() != [hidden, UNITS] {
                    return Err(HanError::Config(format!("layer {l} router {j}: shape mismatch")));
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ route tensor

/// All gates of one forward pass: gates[l][j][i] weights the edge from unit
/// j of layer l to unit i of layer l+1; the last layer's rows become the
/// final fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTensor {
    pub gates: Vec<[[f64; UNITS]; UNITS]>,
}

impl RouteTensor {
    pub fn ones(layers: usize) -> Self {
        RouteTensor { gates: vec![[[1.0; UNITS]; UNITS]; layers] }
    }

    pub fn zeros(layers: usize) -> Self {
        RouteTensor { gates: vec![[[0.0; UNITS]; UNITS]; layers] }
    }

    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    /// Edges with gate ≥ threshold, in (l, j, i) lexicographic order.
    pub fn active_edges(&self, threshold: f64) -> Vec<[usize; 3]> {
        let mut edges = Vec::new();
        for (l, layer) in self.gates.iter().enumerate() {
            for (j, row) in layer.iter().enumerate() {
                for (i, &g) in row.iter().enumerate() {
                    if g >= threshold {
                        edges.push([l, j, i]);
                    }
                }
            }
        }
        edges
    }
}

/// Input/output L2 norms of one unit in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitNorms {
    pub input: f64,
    pub output: f64,
}

/// Everything a forward pass reveals about routing: the full gate tensor,
/// per-unit activity norms, and the thresholded edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub gates: RouteTensor,
    pub edge_threshold: f64,
    pub active_edges: Vec<[usize; 3]>,
    pub unit_norms: Vec<Vec<UnitNorms>>,
}

impl RoutingTrace {
    pub fn new(gates: RouteTensor, unit_norms: Vec<Vec<UnitNorms>>, threshold: f64) -> Self {
        let active_edges = gates.active_edges(threshold);
        RoutingTrace { gates, edge_threshold: threshold, active_edges, unit_norms }
    }

    /// Same gates, different display threshold.
    pub fn with_threshold(&self, threshold: f64) -> RoutingTrace {
        RoutingTrace::new(self.gates.clone(), self.unit_norms.clone(), threshold)
    }
}

// ------------------------------------------------------------- unit layer

/// Cached intermediates of one unit application.
#[derive(Debug, Clone)]
pub(crate) enum UnitCache {
    Seu { rgb: SeuCache, tir: SeuCache },
    Ceu { rgb: CeuCache, tir: CeuCache },
    CmeuR2t(CmeuCache),
    CmeuT2r(CmeuCache),
}

/// Apply unit `i` of a layer to an input pair.
///
/// i=0: SEU on both streams. i=1: CEU on both streams. i=2: tir enhanced by
/// rgb (rgb passes through). i=3: rgb enhanced by tir (tir passes through).
pub fn unit_dispatch(
    i: usize,
    input: &ModalityPair,
    layer: &LayerParams,
    cfg: &HanConfig,
) -> Result<ModalityPair> {
    unit_dispatch_cached(i, input, layer, cfg).map(|(out, _)| out)
}

pub(crate) fn unit_dispatch_cached(
    i: usize,
    input: &ModalityPair,
    layer: &LayerParams,
    cfg: &HanConfig,
) -> Result<(ModalityPair, UnitCache)> {
    match i {
        0 => {
            let (rgb, rc) = seu_forward_cached(&input.rgb, &layer.seu_rgb, cfg.groups, NORM_EPS)?;
            let (tir, tc) = seu_forward_cached(&input.tir, &layer.seu_tir, cfg.groups, NORM_EPS)?;
            Ok((ModalityPair { rgb, tir }, UnitCache::Seu { rgb: rc, tir: tc }))
        }
        1 => {
            let (rgb, rc) = ceu_forward_cached(&input.rgb, &layer.ceu_rgb)?;
            let (tir, tc) = ceu_forward_cached(&input.tir, &layer.ceu_tir)?;
            Ok((ModalityPair { rgb, tir }, UnitCache::Ceu { rgb: rc, tir: tc }))
        }
        2 => {
            let (tir, cache) = cmeu_forward_cached(&input.tir, &input.rgb, &layer.cmeu_r2t)?;
            Ok((
                ModalityPair { rgb: input.rgb.clone(), tir },
                UnitCache::CmeuR2t(cache),
            ))
        }
        3 => {
            let (rgb, cache) = cmeu_forward_cached(&input.rgb, &input.tir, &layer.cmeu_t2r)?;
            Ok((
                ModalityPair { rgb, tir: input.tir.clone() },
                UnitCache::CmeuT2r(cache),
            ))
        }
        _ => Err(HanError::Config(format!("unit index {i} out of range 0..{UNITS}"))),
    }
}

/// Routed aggregation for a layer boundary: input_i = Σ_j gates[j][i]·O_j.
pub fn aggregate_inputs(
    prev_outputs: &[ModalityPair],
    gates: &[[f64; UNITS]; UNITS],
) -> Vec<ModalityPair> {
    debug_assert_eq!(prev_outputs.len(), UNITS);
    (0..UNITS)
        .map(|i| {
            let mut acc = prev_outputs[0].zeros_like();
            for (j, out) in prev_outputs.iter().enumerate() {
                acc.axpy(gates[j][i], out);
            }
            acc
        })
        .collect()
}

// ----------------------------------------------------------- forward pass

/// Where each boundary's gates come from.
enum GateSource<'a> {
    Routers,
    Ones,
    Replay(&'a RouteTensor),
}

/// Per-layer record kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerRecord {
    pub(crate) unit_caches: Vec<UnitCache>,
    pub(crate) outputs: Vec<ModalityPair>,
    pub(crate) router_caches: Option<Vec<RouterCache>>,
}

/// Forward intermediates of a dynamic pass; consumed by `han_backward`.
#[derive(Debug, Clone)]
pub struct HanCache {
    pub(crate) records: Vec<LayerRecord>,
    pub(crate) gates: RouteTensor,
    pub(crate) gbar: [f64; UNITS],
}

fn forward_impl(
    input: &ModalityPair,
    params: &HanParams,
    cfg: &HanConfig,
    source: GateSource<'_>,
) -> Result<(FeatureMap, RoutingTrace, HanCache)> {
    params.check(cfg)?;
    let want = [cfg.channels, cfg.height, cfg.width];
    if input.rgb.as_tensor().dims() != want {
        return Err(HanError::Config(format!(
            "input dims {:?} do not match config {:?}",
            input.rgb.as_tensor().dims(),
            want
        )));
    }
    if let GateSource::Replay(rt) = &source {
        if rt.layers() != cfg.layers {
            return Err(HanError::Config(format!(
                "replay tensor has {} layers, config wants {}",
                rt.layers(),
                cfg.layers
            )));
        }
    }

    let mut records: Vec<LayerRecord> = Vec::with_capacity(cfg.layers);
    let mut gates = RouteTensor::zeros(cfg.layers);
    let mut norms: Vec<Vec<UnitNorms>> = Vec::with_capacity(cfg.layers);
    let mut inputs: Vec<ModalityPair> = vec![input.clone(); UNITS];

    for l in 0..cfg.layers {
        let layer = &params.layers[l];
        let mut unit_caches = Vec::with_capacity(UNITS);
        let mut outputs = Vec::with_capacity(UNITS);
        let mut layer_norms = Vec::with_capacity(UNITS);
        for i in 0..UNITS {
            let (out, cache) = unit_dispatch_cached(i, &inputs[i], layer, cfg)?;
            layer_norms.push(UnitNorms { input: inputs[i].l2_norm(), output: out.l2_norm() });
            unit_caches.push(cache);
            outputs.push(out);
        }
        let (layer_gates, router_caches) = match &source {
            GateSource::Routers => {
                let (g, caches) = route_layer_cached(&outputs, &layer.routers)?;
                (g, Some(caches))
            }
            GateSource::Ones => ([[1.0; UNITS]; UNITS], None),
            GateSource::Replay(rt) => (rt.gates[l], None),
        };
        gates.gates[l] = layer_gates;
        norms.push(layer_norms);
        if l + 1 < cfg.layers {
            inputs = aggregate_inputs(&outputs, &layer_gates);
        }
        records.push(LayerRecord { unit_caches, outputs, router_caches });
    }

    // Final fusion: ḡ_j = mean of unit j's last gate row; fused = Σ ḡ_j·O_j,
    // streams added.
    let last = &records[cfg.layers - 1];
    let mut gbar = [0.0; UNITS];
    let mut fused_pair = last.outputs[0].zeros_like();
    for j in 0..UNITS {
        gbar[j] = gates.gates[cfg.layers - 1][j].iter().sum::<f64>() / UNITS as f64;
        fused_pair.axpy(gbar[j], &last.outputs[j]);
    }
    let mut fused = fused_pair.rgb;
    for (a, b) in fused.data_mut().iter_mut().zip(fused_pair.tir.data()) {
        *a += b;
    }

    let trace = RoutingTrace::new(gates.clone(), norms, DEFAULT_EDGE_THRESHOLD);
    let cache = HanCache { records, gates, gbar };
    Ok((fused, trace, cache))
}

/// Dynamic forward pass: routers decide the structure per input.
pub fn han_forward(
    input: &ModalityPair,
    params: &HanParams,
    cfg: &HanConfig,
) -> Result<(FeatureMap, RoutingTrace)> {
    forward_impl(input, params, cfg, GateSource::Routers).map(|(f, t, _)| (f, t))
}

/// Dynamic forward pass keeping the intermediates `han_backward` needs.
pub fn han_forward_cached(
    input: &ModalityPair,
    params: &HanParams,
    cfg: &HanConfig,
) -> Result<(FeatureMap, RoutingTrace, HanCache)> {
    forward_impl(input, params, cfg, GateSource::Routers)
}

/// Every gate forced to 1, routers skipped: the fixed dense-fusion variant.
pub fn han_forward_static(
    input: &ModalityPair,
    params: &HanParams,
    cfg: &HanConfig,
) -> Result<FeatureMap> {
    forward_impl(input, params, cfg, GateSource::Ones).map(|(f, _, _)| f)
}

/// Re-run a forward pass with gates injected from a recorded trace; the
/// routers are bypassed, so the result is bit-identical to the original.
pub fn han_forward_replay(
    input: &ModalityPair,
    params: &HanParams,
    cfg: &HanConfig,
    gates: &RouteTensor,
) -> Result<(FeatureMap, RoutingTrace)> {
    forward_impl(input, params, cfg, GateSource::Replay(gates)).map(|(f, t, _)| (f, t))
}

// Router caches are only created on the dynamic path; expose one for the
// backward module.
impl HanCache {
    pub(crate) fn router_caches(&self, l: usize) -> &[RouterCache] {
        self.records[l]
            .router_caches
            .as_ref()
            .expect("dynamic forward always records router caches")
    }

    /// Gate tensor recorded during the forward pass.
    pub fn gates(&self) -> &RouteTensor {
        &self.gates
    }

    pub(crate) fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub(crate) fn gbar(&self) -> &[f64; UNITS] {
        &self.gbar
    }
}
