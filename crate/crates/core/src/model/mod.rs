pub mod checkpoint;
pub mod config;
pub mod network;
pub mod optim;

pub use config::{ExpansionSchedule, ModelConfig};
pub use network::{
    backward, forward, forward_train, l1_loss, loss_and_grads, ForwardOptions, ForwardOutput, IetParams, LayerTrace,
    RGB_MEAN,
};
pub use optim::{Adam, TrainState};
