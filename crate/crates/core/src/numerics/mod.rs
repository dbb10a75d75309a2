//! Minimal differentiable-computation core: dense tensors, the layers the
//! network needs with hand-written backward passes, AdamW, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, GradCheckable};
pub use optim::{LrSchedule, OptimizerState, StepInfo};
pub use rng::{seeded, substream, DetRng, RngState};
pub use tensor::{Param, Tensor2D};
