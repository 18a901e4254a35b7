//! Expert denoisers: a residual CNN with hand-written forward and backward
//! passes, Adam training, and freeze-all-but-last fine-tuning.

pub mod conv;
pub mod gradcheck;
pub mod net;
pub mod train;

pub use conv::{Conv2d, Real};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use net::{BatchNorm, ExpertNet, Layer, LayerGrads, Mode, NetConfig};
pub use train::{
    fine_tune, loss_and_gradients, train_epochs, train_step, Adam, FineTuned, TrainConfig,
    TrainSample,
};
