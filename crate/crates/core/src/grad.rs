//! Scalar-loss plumbing over the network gradients: mean-squared error,
//! a central finite-difference oracle for verifying the analytic backward
//! pass, and a plain gradient-descent loop for the synthetic scenarios.

use serde::{Deserialize, Serialize};

use crate::backward::han_backward;
use crate::error::{HanError, Result};
use crate::feature::{FeatureMap, ModalityPair};
use crate::han::{han_forward, han_forward_cached, HanConfig, HanParams, RouteTensor, UNITS};
use crate::synth::{Scenario, ScenarioClass};

/// Mean squared error over all elements.
pub fn mse_loss(output: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if !output.same_shape(target) {
        return Err(HanError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            output.as_tensor().dims(),
            target.as_tensor().dims()
        )));
    }
    // Compensated (Neumaier) accumulation. The loss is the measurand of the
    // finite-difference oracle: at step 1e-5 a difference quotient amplifies
    // the sum's rounding error 5e4×, and the naive running sum's error grows
    // with the partial-sum magnitude — large enough to drown the smallest
    // gradient entries. Compensation keeps the error at final-rounding level.
    let n = output.data().len() as f64;
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for (a, b) in output.data().iter().zip(target.data()) {
        let term = (a - b) * (a - b);
        let next = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - next) + term } else { (term - next) + sum };
        sum = next;
    }
    Ok((sum + comp) / n)
}

/// d mse / d output = 2(output − target)/n.
pub fn mse_loss_grad(output: &FeatureMap, target: &FeatureMap) -> Result<FeatureMap> {
    if !output.same_shape(target) {
        return Err(HanError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            output.as_tensor().dims(),
            target.as_tensor().dims()
        )));
    }
    let n = output.data().len() as f64;
    let mut g = output.zeros_like();
    for ((g, a), b) in g.data_mut().iter_mut().zip(output.data()).zip(target.data()) {
        *g = 2.0 * (a - b) / n;
    }
    Ok(g)
}

/// One forward/backward round under the MSE loss. Returns the loss, the
/// parameter gradients, and the input gradients.
pub fn loss_and_gradients(
    input: &ModalityPair,
    target: &FeatureMap,
    params: &HanParams,
    cfg: &HanConfig,
) -> Result<(f64, HanParams, ModalityPair)> {
    let (fused, _, cache) = han_forward_cached(input, params, cfg)?;
    let loss = mse_loss(&fused, target)?;
    let upstream = mse_loss_grad(&fused, target)?;
    let (grads, d_input) = han_backward(&cache, params, cfg, &upstream)?;
    Ok((loss, grads, d_input))
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters: entry i of the result is (f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h, in
/// the canonical flattening order of `HanParams::to_flat`.
pub fn fd_gradient<F>(mut loss_fn: F, params: &HanParams, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&HanParams) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(HanError::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(flat.len());
    let mut moved = flat.clone();
    for i in 0..flat.len() {
        moved[i] = flat[i] + h;
        probe.assign_from_flat(&moved);
        let up = loss_fn(&probe)?;
        moved[i] = flat[i] - h;
        probe.assign_from_flat(&moved);
        let down = loss_fn(&probe)?;
        moved[i] = flat[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

// --------------------------------------------------------------- training

/// Plain gradient-descent settings for the demonstration loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Gradient-descent step; zero freezes the parameters (the loss curve
    /// stays constant), negative is rejected.
    pub step_size: f64,
    pub steps: usize,
    /// Seeds the parameter initialization, making curves a pure function
    /// of (dataset, config, this).
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Frozen against the default synthetic dataset (generation seed 11):
    /// 200 steps at 0.05 lands the loss near 2% of its initial value and
    /// separates the noisy-tir/noisy-rgb routing by an L1 gap over 4.
    /// Larger steps still converge but erode the gap.
    fn default() -> Self {
        TrainConfig { step_size: 0.05, steps: 200, seed: 7 }
    }
}

/// Mean routing behavior of one scenario class under the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGates {
    pub class: ScenarioClass,
    pub count: usize,
    pub mean_gates: RouteTensor,
}

/// What the training loop hands back for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Raw mean loss per step; entry 0 is the untrained loss, the last
    /// entry the final one (steps+1 entries).
    pub losses: Vec<f64>,
    /// Running minimum of `losses` — the monotone view of progress.
    pub smoothed: Vec<f64>,
    /// One entry per class present in the dataset, in declaration order.
    pub class_gates: Vec<ClassGates>,
    /// Final parameters; carried for callers that want to keep fusing with
    /// them, left out of the JSON report.
    #[serde(skip)]
    pub params: Option<HanParams>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    /// L1 distance between the mean gate tensors of two classes, if both
    /// are present.
    pub fn gate_gap(&self, a: ScenarioClass, b: ScenarioClass) -> Option<f64> {
        let find = |c| {
            self.class_gates
                .iter()
                .find(|cg| cg.class == c)
                .map(|cg| &cg.mean_gates)
        };
        let (ga, gb) = (find(a)?, find(b)?);
        let mut l1 = 0.0;
        for (la, lb) in ga.gates.iter().zip(&gb.gates) {
            for (ra, rb) in la.iter().zip(lb) {
                for (va, vb) in ra.iter().zip(rb) {
                    l1 += (va - vb).abs();
                }
            }
        }
        Some(l1)
    }
}

fn mean_loss_and_grads(
    dataset: &[Scenario],
    params: &HanParams,
    cfg: &HanConfig,
) -> Result<(f64, HanParams)> {
    let scale = 1.0 / dataset.len() as f64;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for s in dataset {
        let (loss, g, _) = loss_and_gradients(&s.input, &s.target, params, cfg)?;
        total += loss;
        grads.axpy(1.0, &g);
    }
    let mut mean = params.zeros_like();
    mean.axpy(scale, &grads);
    Ok((total * scale, mean))
}

/// Gradient descent on the mean MSE across the dataset. Records the loss
/// before every update; a non-finite loss aborts with the step index.
pub fn train_demo(
    dataset: &[Scenario],
    cfg: &HanConfig,
    tcfg: &TrainConfig,
) -> Result<TrainReport> {
    if tcfg.step_size < 0.0 {
        return Err(HanError::Config(format!(
            "step_size must be ≥ 0, got {}",
            tcfg.step_size
        )));
    }
    if dataset.is_empty() {
        return Err(HanError::Config("training dataset is empty".into()));
    }
    let classes: std::collections::HashSet<ScenarioClass> =
        dataset.iter().map(|s| s.class).collect();
    if classes.len() < 2 {
        return Err(HanError::Config(format!(
            "training demonstration needs ≥ 2 scenario classes, got {}",
            classes.len()
        )));
    }

    let init_cfg = HanConfig { seed: tcfg.seed, ..cfg.clone() };
    let mut params = HanParams::init(&init_cfg)?;
    let mut losses = Vec::with_capacity(tcfg.steps + 1);
    for step in 0..=tcfg.steps {
        let (loss, grads) = mean_loss_and_grads(dataset, &params, cfg)?;
        if !loss.is_finite() {
            return Err(HanError::Diverged { step });
        }
        losses.push(loss);
        if step < tcfg.steps {
            params.axpy(-tcfg.step_size, &grads);
        }
    }

    let mut smoothed = Vec::with_capacity(losses.len());
    let mut best = f64::INFINITY;
    for &l in &losses {
        best = best.min(l);
        smoothed.push(best);
    }

    // Mean routing per class under the final parameters.
    let mut class_gates = Vec::new();
    for class in ScenarioClass::ALL {
        let members: Vec<&Scenario> = dataset.iter().filter(|s| s.class == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = RouteTensor::zeros(cfg.layers);
        for s in &members {
            let (_, trace) = han_forward(&s.input, &params, cfg)?;
            for (acc, layer) in mean.gates.iter_mut().zip(&trace.gates.gates) {
                for j in 0..UNITS {
                    for i in 0..UNITS {
                        acc[j][i] += layer[j][i];
                    }
                }
            }
        }
        let scale = 1.0 / members.len() as f64;
        for layer in mean.gates.iter_mut() {
            for row in layer.iter_mut() {
                for g in row.iter_mut() {
                    *g *= scale;
                }
            }
        }
        class_gates.push(ClassGates { class, count: members.len(), mean_gates: mean });
    }

    Ok(TrainReport { config: *tcfg, losses, smoothed, class_gates, params: Some(params) })
}
