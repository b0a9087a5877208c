//! Deterministic synthetic scenario pairs for exercising the router: a
//! smooth base field rendered into two modality streams under different
//! quality regimes, with the clean field as the regression target.

use serde::{Deserialize, Serialize};

use crate::error::{HanError, Result};
use crate::feature::{FeatureMap, ModalityPair};
use crate::han::HanConfig;
use crate::rng::RngState;

/// Quality regime of a generated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioClass {
    /// Both streams carry the clean field.
    CleanBoth,
    /// Thermal stream drowned in noise; rgb clean.
    NoisyTir,
    /// Visible stream drowned in noise; tir clean.
    NoisyRgb,
    /// Each stream carries half the channels, zeros elsewhere.
    Complementary,
    /// Both streams attenuated to a tenth with mild noise.
    LowContrast,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 5] = [
        ScenarioClass::CleanBoth,
        ScenarioClass::NoisyTir,
        ScenarioClass::NoisyRgb,
        ScenarioClass::Complementary,
        ScenarioClass::LowContrast,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioClass::CleanBoth => "clean-both",
            ScenarioClass::NoisyTir => "noisy-tir",
            ScenarioClass::NoisyRgb => "noisy-rgb",
            ScenarioClass::Complementary => "complementary",
            ScenarioClass::LowContrast => "low-contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                HanError::Parse(format!(
                    "unknown scenario class {s:?}; expected one of clean-both, noisy-tir, \
                     noisy-rgb, complementary, low-contrast"
                ))
            })
    }
}

impl std::fmt::Display for ScenarioClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One generated input pair with its ideal fused output.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub class: ScenarioClass,
    pub input: ModalityPair,
    pub target: FeatureMap,
    pub seed: u64,
}

/// Smooth per-channel field: five low-frequency sinusoids with random
/// orientation, phase, and weight, amplitude on the order of one.
fn base_field(cfg: &HanConfig, rng: &mut RngState) -> FeatureMap {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut field = FeatureMap::zeros(c, h, w).expect("validated dims");
    let tau = std::f64::consts::TAU;
    for ch in 0..c {
        for _ in 0..5 {
            let fy = (rng.next_u64() % 3) as f64; // 0, 1 or 2 cycles per height
            let fx = (rng.next_u64() % 3) as f64;
            let phase = rng.uniform(0.0, tau);
            let weight = rng.uniform(-0.5, 0.5);
            let data = field.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let arg = tau * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                    data[ch * h * w + y * w + x] += weight * arg.sin();
                }
            }
        }
    }
    field
}

fn noise_like(f: &FeatureMap, sigma: f64, rng: &mut RngState) -> FeatureMap {
    let mut out = f.zeros_like();
    for v in out.data_mut() {
        *v = sigma * rng.normal();
    }
    out
}

fn add(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    out
}

fn scaled(a: &FeatureMap, s: f64) -> FeatureMap {
    let mut out = a.clone();
    for v in out.data_mut() {
        *v *= s;
    }
    out
}

/// Render one scenario. The random stream is derived from both the seed
/// and the class, so a dataset built from one seed does not repeat base
/// fields across classes.
pub fn generate(class: ScenarioClass, cfg: &HanConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let class_idx = ScenarioClass::ALL.iter().position(|c| *c == class).unwrap() as u64;
    let mut rng = RngState::new(seed.wrapping_add(class_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let base = base_field(cfg, &mut rng);
    let (rgb, tir) = match class {
        ScenarioClass::CleanBoth => (base.clone(), base.clone()),
        ScenarioClass::NoisyTir => {
            let noise = noise_like(&base, 2.0, &mut rng);
            (base.clone(), add(&base, &noise))
        }
        ScenarioClass::NoisyRgb => {
            let noise = noise_like(&base, 2.0, &mut rng);
            (add(&base, &noise), base.clone())
        }
        ScenarioClass::Complementary => {
            let half = cfg.channels / 2;
            let mut rgb = base.clone();
            let mut tir = base.clone();
            let hw = cfg.height * cfg.width;
            rgb.data_mut()[half * hw..].fill(0.0);
            tir.data_mut()[..half * hw].fill(0.0);
            (rgb, tir)
        }
        ScenarioClass::LowContrast => {
            let rgb = add(&scaled(&base, 0.1), &noise_like(&base, 0.05, &mut rng));
            let tir = add(&scaled(&base, 0.1), &noise_like(&base, 0.05, &mut rng));
            (rgb, tir)
        }
    };
    Ok(Scenario { class, input: ModalityPair::new(rgb, tir)?, target: base, seed })
}

/// Concatenate per-class batches in the declared order. Each scenario gets
/// its own seed drawn from one master stream, so the whole dataset is a
/// pure function of `seed`.
pub fn make_dataset(
    counts: &[(ScenarioClass, usize)],
    cfg: &HanConfig,
    seed: u64,
) -> Result<Vec<Scenario>> {
    let mut master = RngState::new(seed);
    let mut out = Vec::new();
    for &(class, n) in counts {
        for _ in 0..n {
            let s = master.next_u64();
            out.push(generate(class, cfg, s)?);
        }
    }
    Ok(out)
}

/// The mix used by the training demonstration: every class present, the
/// quality-imbalanced ones over-represented so the router has something to
/// discriminate.
pub fn default_dataset(cfg: &HanConfig, seed: u64) -> Result<Vec<Scenario>> {
    make_dataset(
        &[
            (ScenarioClass::CleanBoth, 2),
            (ScenarioClass::NoisyTir, 4),
            (ScenarioClass::NoisyRgb, 4),
            (ScenarioClass::Complementary, 2),
            (ScenarioClass::LowContrast, 2),
        ],
        cfg,
        seed,
    )
}
