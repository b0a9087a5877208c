//! Two-stream attention fusion with learned routing.
//!
//! The network stacks L layers of four fusion units — spatial enhancement,
//! channel enhancement, and two cross-modal attention directions — over an
//! rgb/tir feature pair. A small router behind every unit emits soft gates
//! that weight the unit's output on each edge to the next layer, so the
//! effective fusion structure is chosen per input. The crate provides the
//! forward pass, hand-derived reverse-mode gradients, routing-trace capture
//! and replay, binary tensor/parameter formats, and synthetic scenario
//! generators for exercising all of it.

pub mod backward;
pub mod count;
pub mod error;
pub mod feature;
pub mod grad;
pub mod han;
pub mod io;
pub mod rng;
pub mod router;
pub mod synth;
pub mod tensor;
pub mod units;

pub use backward::{han_backward, smoothness_report, SmoothnessReport};
pub use count::{flop_count, param_count, param_count_router_free};
pub use error::{HanError, Result};
pub use feature::{FeatureMap, ModalityPair};
pub use grad::{
    fd_gradient, loss_and_gradients, mse_loss, mse_loss_grad, train_demo, ClassGates, TrainConfig,
    TrainReport,
};
pub use han::{
    aggregate_inputs, han_forward, han_forward_cached, han_forward_replay, han_forward_static,
    unit_dispatch, HanCache, HanConfig, HanParams, LayerParams, RouteTensor, RoutingTrace,
    UnitNorms, DEFAULT_EDGE_THRESHOLD, UNITS,
};
pub use io::{
    export_dot, read_params, read_tensor, read_trace, write_params, write_tensor, write_trace,
    TraceFile,
};
pub use rng::RngState;
pub use router::{route_layer, router_forward, RouterParams};
pub use synth::{default_dataset, generate, make_dataset, Scenario, ScenarioClass};
pub use tensor::{PoolMode, Tensor, NORM_EPS};
pub use units::{
    ceu_forward, cmeu_forward, seu_forward, CeuParams, CmeuParams, SeuParams,
};
