//! C×H×W feature maps and the two-modality pair the network consumes.

use crate::error::{HanError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// A single modality's feature map: channels × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureMap { tensor: Tensor::new(vec![c, h, w], data)? })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(FeatureMap { tensor: Tensor::zeros(vec![c, h, w])? })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(HanError::Shape(format!(
                "feature map needs a C×H×W tensor, got dims {:?}",
                tensor.dims()
            )));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn random(c: usize, h: usize, w: usize, rng: &mut RngState, lo: f64, hi: f64) -> Result<Self> {
        let data = (0..c * h * w).map(|_| rng.uniform(lo, hi)).collect();
        FeatureMap::new(c, h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// Number of spatial positions H·W.
    pub fn spatial(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Contiguous slice holding channel `c`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.spatial();
        &self.tensor.data()[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.tensor.dims() == other.tensor.dims()
    }

    pub fn zeros_like(&self) -> FeatureMap {
        FeatureMap::zeros(self.channels(), self.height(), self.width())
            .expect("shape already validated")
    }

    /// self += alpha · other (elementwise).
    pub fn axpy(&mut self, alpha: f64, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.tensor.data_mut().iter_mut().zip(other.data()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.tensor.data_mut() {
            *v *= alpha;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }
}

/// The rgb/tir input pair; both maps share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPair {
    pub rgb: FeatureMap,
    pub tir: FeatureMap,
}

impl ModalityPair {
    pub fn new(rgb: FeatureMap, tir: FeatureMap) -> Result<Self> {
        if !rgb.same_shape(&tir) {
            return Err(HanError::Shape(format!(
                "modality shapes differ: rgb {:?} vs tir {:?}",
                rgb.as_tensor().dims(),
                tir.as_tensor().dims()
            )));
        }
        Ok(ModalityPair { rgb, tir })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(ModalityPair { rgb: FeatureMap::zeros(c, h, w)?, tir: FeatureMap::zeros(c, h, w)? })
    }

    pub fn zeros_like(&self) -> ModalityPair {
        ModalityPair { rgb: self.rgb.zeros_like(), tir: self.tir.zeros_like() }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ModalityPair) {
        self.rgb.axpy(alpha, &other.rgb);
        self.tir.axpy(alpha, &other.tir);
    }

    /// Norm of both streams stacked.
    pub fn l2_norm(&self) -> f64 {
        let r = self.rgb.l2_norm();
        let t = self.tir.l2_norm();
        (r * r + t * t).sqrt()
    }
}
