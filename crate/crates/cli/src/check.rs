//! Self-verification suites behind `hanfuse check`.
//!
//! Each suite prints one pass/fail line; any failure turns the exit code
//! to 1. The fast level stays within seconds; full adds the central
//! finite-difference gradient cross-check at 1e-5.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use han_core::io::{
    params_from_bytes, params_to_bytes, tensor_from_bytes, tensor_to_bytes, trace_from_json,
    trace_to_json,
};
use han_core::{
    cmeu_forward, fd_gradient, flop_count, han_forward, han_forward_cached, han_forward_replay,
    han_forward_static, loss_and_gradients, param_count, param_count_router_free, read_params,
    seu_forward, smoothness_report, CmeuParams, FeatureMap, HanConfig, HanParams, ModalityPair,
    Result, RngState, RouteTensor, RouterParams, SeuParams, TraceFile, NORM_EPS,
};

use crate::CheckLevel;

fn small_cfg() -> HanConfig {
    HanConfig {
        layers: 2,
        channels: 8,
        height: 4,
        width: 4,
        groups: 4,
        kernel: 3,
        ..HanConfig::default()
    }
}

fn random_pair(cfg: &HanConfig, rng: &mut RngState) -> Result<ModalityPair> {
    ModalityPair::new(
        FeatureMap::random(cfg.channels, cfg.height, cfg.width, rng, -1.0, 1.0)?,
        FeatureMap::random(cfg.channels, cfg.height, cfg.width, rng, -1.0, 1.0)?,
    )
}

fn bits_equal(a: &FeatureMap, b: &FeatureMap) -> bool {
    a.same_shape(b)
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ----------------------------------------------------------------- suites

fn config_validation() -> std::result::Result<String, String> {
    HanConfig::default().validate().map_err(|e| e.to_string())?;
    let bad = HanConfig { groups: 7, channels: 16, ..HanConfig::default() };
    match bad.validate() {
        Err(e) if e.to_string().contains("groups") => {}
        other => return Err(format!("groups=7/channels=16 not rejected by name: {other:?}")),
    }
    let bad = HanConfig { kernel: 4, ..HanConfig::default() };
    if bad.validate().is_ok() {
        return Err("even kernel accepted".into());
    }
    Ok("defaults pass, bad fields named".into())
}

fn gate_range() -> std::result::Result<String, String> {
    let cfg = small_cfg();
    let mut rng = RngState::new(31);
    let draws = 1000;
    for _ in 0..draws {
        let params =
            HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5).map_err(|e| e.to_string())?;
        let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let (_, trace) = han_forward(&input, &params, &cfg).map_err(|e| e.to_string())?;
        for layer in &trace.gates.gates {
            for row in layer {
                for &g in row {
                    if !(0.0..1.0).contains(&g) {
                        return Err(format!("gate {g} outside [0,1)"));
                    }
                }
            }
        }
    }

    // Zeroed router MLPs: every gate exactly 0, deeper layers see no input.
    let mut params = HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5)
        .map_err(|e| e.to_string())?;
    for layer in &mut params.layers {
        for r in &mut layer.routers {
            *r = RouterParams::zeros(cfg.channels, cfg.hidden_width())
                .map_err(|e| e.to_string())?;
        }
    }
    let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let (fused, trace) = han_forward(&input, &params, &cfg).map_err(|e| e.to_string())?;
    let live = trace.gates.gates.iter().flatten().flatten().any(|&g| g != 0.0);
    if live {
        return Err("zero-MLP routers emitted a nonzero gate".into());
    }
    for l in 1..cfg.layers {
        for (i, norms) in trace.unit_norms[l].iter().enumerate() {
            if norms.input != 0.0 {
                return Err(format!("layer {l} unit {i} input norm {} under zero gates", norms.input));
            }
        }
    }
    if fused.data().iter().any(|&v| v != 0.0) {
        return Err("zero gates fused to a nonzero output".into());
    }
    Ok(format!("{draws} random draws in range, zero-MLP collapses"))
}

fn unit_identities() -> std::result::Result<String, String> {
    let mut rng = RngState::new(7);
    let x = FeatureMap::random(6, 3, 5, &mut rng, -1.0, 1.0).map_err(|e| e.to_string())?;
    let kv = FeatureMap::random(6, 3, 5, &mut rng, -1.0, 1.0).map_err(|e| e.to_string())?;

    // All-zero CMEU: values vanish, the residual passes the query through.
    let p = CmeuParams::zeros(6, 3).map_err(|e| e.to_string())?;
    let out = cmeu_forward(&x, &kv, &p).map_err(|e| e.to_string())?;
    if !bits_equal(&out, &x) {
        return Err("zero CMEU is not the identity on its query".into());
    }

    // Zero-affine SEU: every gate sits at sigmoid(0), halving the input.
    let p = SeuParams::zeros(3);
    let out = seu_forward(&x, &p, 3, NORM_EPS).map_err(|e| e.to_string())?;
    let mut half = x.clone();
    half.scale(0.5);
    if !bits_equal(&out, &half) {
        return Err("zero-affine SEU does not halve its input".into());
    }
    Ok("zero CMEU = identity, zero SEU = half gate".into())
}

fn replay_bit_exact() -> std::result::Result<String, String> {
    let cfg = small_cfg();
    let mut rng = RngState::new(13);
    let params =
        HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5).map_err(|e| e.to_string())?;
    let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let (fused, trace) = han_forward(&input, &params, &cfg).map_err(|e| e.to_string())?;
    let (again, _) = han_forward(&input, &params, &cfg).map_err(|e| e.to_string())?;
    if !bits_equal(&fused, &again) {
        return Err("dynamic forward is not deterministic".into());
    }
    let (replayed, _) =
        han_forward_replay(&input, &params, &cfg, &trace.gates).map_err(|e| e.to_string())?;
    if !bits_equal(&fused, &replayed) {
        return Err("replayed gates changed the fused output".into());
    }
    Ok("replay reproduces the fused output bit-for-bit".into())
}

fn static_structure() -> std::result::Result<String, String> {
    let cfg = small_cfg();
    let mut rng = RngState::new(17);
    let params =
        HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5).map_err(|e| e.to_string())?;
    let full_edges = RouteTensor::ones(cfg.layers).active_edges(0.1);
    for _ in 0..3 {
        let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let fused = han_forward_static(&input, &params, &cfg).map_err(|e| e.to_string())?;
        let (via_replay, trace) =
            han_forward_replay(&input, &params, &cfg, &RouteTensor::ones(cfg.layers))
                .map_err(|e| e.to_string())?;
        if !bits_equal(&fused, &via_replay) {
            return Err("static forward differs from all-ones replay".into());
        }
        if trace.gates.active_edges(0.1) != full_edges {
            return Err("static active-edge set varied with the input".into());
        }
    }
    Ok("edge set constant, equals all-ones replay".into())
}

fn io_round_trip() -> std::result::Result<String, String> {
    let cfg = small_cfg();
    let mut rng = RngState::new(23);
    let params =
        HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5).map_err(|e| e.to_string())?;
    let bytes = params_to_bytes(&params);
    let back = params_from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back != params || params_to_bytes(&back) != bytes {
        return Err("params round-trip not bit-exact".into());
    }

    let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let t = input.rgb.as_tensor();
    let tb = tensor_to_bytes(t);
    let t2 = tensor_from_bytes(&tb).map_err(|e| e.to_string())?;
    if tensor_to_bytes(&t2) != tb {
        return Err("tensor round-trip not bit-exact".into());
    }

    let (_, trace) = han_forward(&input, &params, &cfg).map_err(|e| e.to_string())?;
    let file = TraceFile { config: cfg, frames: vec![trace] };
    let json = trace_to_json(&file).map_err(|e| e.to_string())?;
    let back = trace_from_json(&json).map_err(|e| e.to_string())?;
    if back != file {
        return Err("trace JSON round-trip changed the trace".into());
    }
    Ok("tensor, params, and trace round-trips bit-exact".into())
}

fn param_linearity() -> std::result::Result<String, String> {
    let base = HanConfig::default();
    let count_at = |l: usize| param_count(&HanConfig { layers: l, ..base.clone() });
    let per_layer = count_at(1);
    for l in 1..=4 {
        if count_at(l) != l * per_layer {
            return Err(format!(
                "param count at depth {l} is {} — not linear with zero intercept",
                count_at(l)
            ));
        }
    }
    let rf1 = param_count_router_free(&HanConfig { layers: 1, ..base.clone() });
    let rf3 = param_count_router_free(&HanConfig { layers: 3, ..base.clone() });
    if rf3 != 3 * rf1 {
        return Err(format!("router-free depth ratio {rf3}:{rf1} is not exactly 3"));
    }
    let instantiated = HanParams::init(&base).map_err(|e| e.to_string())?.num_params();
    if instantiated != count_at(base.layers) {
        return Err("closed-form count disagrees with instantiated parameters".into());
    }
    Ok(format!(
        "linear in depth ({per_layer}/layer), router-free 3-layer:1-layer = 3, flops/frame {}",
        flop_count(&base)
    ))
}

fn params_file(path: &Path) -> std::result::Result<String, String> {
    let params = read_params(path).map_err(|e| e.to_string())?;
    let cfg = params.infer_config(8, 8).map_err(|e| e.to_string())?;
    Ok(format!(
        "loads cleanly: {} layers, {} channels, {} parameters",
        cfg.layers,
        cfg.channels,
        params.num_params()
    ))
}

fn gradient_fd() -> std::result::Result<String, String> {
    let cfg = HanConfig {
        layers: 2,
        channels: 4,
        height: 2,
        width: 3,
        groups: 2,
        kernel: 3,
        attn_channels: Some(2),
        router_hidden: Some(4),
        ..HanConfig::default()
    };

    // Random parameters spread enough to avoid saturation, with router
    // biases lifted so no gate column dies and normalization scales lifted
    // away from zero; seeds are then screened so every activation sits a
    // safe margin from its nearest kink under the finite-difference step.
    let well_spread = |seed: u64| -> Result<HanParams> {
        let mut rng = RngState::new(seed);
        let mut p = HanParams::random_uniform(&cfg, &mut rng, -0.5, 0.5)?;
        for layer in &mut p.layers {
            for r in &mut layer.routers {
                for b in &mut r.b2 {
                    *b += 0.6;
                }
            }
            for u in [&mut layer.cmeu_r2t, &mut layer.cmeu_t2r] {
                for s in &mut u.norm_scale {
                    *s += 1.0;
                }
            }
        }
        Ok(p)
    };

    let mut checked = 0;
    let mut worst_overall = 0.0_f64;
    let mut seed = 0_u64;
    while checked < 2 {
        seed += 1;
        if seed > 64 {
            return Err("no verifiable seed among 64 candidates".into());
        }
        // Inputs and targets are smooth random draws. The synthetic scenario
        // classes are unusable here: their flat regions put max pools on
        // exact ties and normalization slices at zero variance, which no
        // finite-difference comparison can handle.
        let params = well_spread(seed).map_err(|e| e.to_string())?;
        let mut rng = RngState::new(seed ^ 0xABCD_EF01);
        let input = random_pair(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let target = FeatureMap::random(cfg.channels, cfg.height, cfg.width, &mut rng, -1.0, 1.0)
            .map_err(|e| e.to_string())?;
        let (_, _, cache) =
            han_forward_cached(&input, &params, &cfg).map_err(|e| e.to_string())?;
        if !smoothness_report(&cache).clears(1e-3) {
            continue;
        }

        let (_, grads, _) = loss_and_gradients(&input, &target, &params, &cfg)
            .map_err(|e| e.to_string())?;
        let analytic = grads.to_flat();
        // Conditioning screen: a central difference at h=1e-5 carries an
        // irreducible ~1.2e-10 absolute rounding error (loss quantization
        // plus forward-pass noise), so entries below that floor divided by
        // the tolerance cannot be confirmed by any correct implementation.
        // Decided from the analytic side alone, never from the comparison.
        let min_g = analytic
            .iter()
            .map(|g| g.abs())
            .filter(|&g| g > 0.0)
            .fold(f64::INFINITY, f64::min);
        if 1.2e-10 / min_g >= 9e-6 {
            continue;
        }
        checked += 1;

        let fd = fd_gradient(
            |p| loss_and_gradients(&input, &target, p, &cfg).map(|(loss, _, _)| loss),
            &params,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        let mut worst = 0.0_f64;
        for (&a, &f) in analytic.iter().zip(&fd) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        if worst >= 1e-5 {
            return Err(format!("seed {seed}: max relative error {worst:.3e} ≥ 1e-5"));
        }
        worst_overall = worst_overall.max(worst);
    }
    Ok(format!("2 seeds, max relative error {worst_overall:.3e} < 1e-5"))
}

// ------------------------------------------------------------------ runner

pub fn run(level: CheckLevel, params_path: Option<&Path>) -> ExitCode {
    type Suite<'a> = (&'static str, Box<dyn FnOnce() -> std::result::Result<String, String> + 'a>);
    let mut suites: Vec<Suite> = vec![
        ("config-validation", Box::new(config_validation)),
        ("gate-range", Box::new(gate_range)),
        ("unit-identities", Box::new(unit_identities)),
        ("replay-bit-exact", Box::new(replay_bit_exact)),
        ("static-structure", Box::new(static_structure)),
        ("io-round-trip", Box::new(io_round_trip)),
        ("param-linearity", Box::new(param_linearity)),
    ];
    if let Some(path) = params_path {
        suites.push(("params-file", Box::new(move || params_file(path))));
    }
    if level == CheckLevel::Full {
        suites.push(("gradient-fd", Box::new(gradient_fd)));
    }

    let mut failures = 0;
    let total = suites.len();
    for (name, suite) in suites {
        let started = Instant::now();
        match suite() {
            Ok(detail) => {
                println!("check {name:<18} ok      {detail} [{:.2}s]", started.elapsed().as_secs_f64());
            }
            Err(reason) => {
                failures += 1;
                println!("check {name:<18} FAILED  {reason}");
            }
        }
    }
    // Scope note: parameter totals are only comparable as ratios. The
    // absolute counts depend on the host backbone's feature dimensions,
    // which are not fixed by this crate, so no absolute figure is asserted.
    println!(
        "note: absolute parameter totals depend on the host backbone's feature \
         dimensions and are out of scope; depth linearity and the router-free \
         depth ratio are what is verified."
    );
    if failures == 0 {
        println!("all {total} checks passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} of {total} checks failed");
        ExitCode::from(1)
    }
}
