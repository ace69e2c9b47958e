//! Toy Mixture-of-Experts network with top-1 routing and a hand-written
//! backward pass.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod lora;
pub mod loss;
pub mod memory;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, OptimizerKind, TrainConfig};
pub use forward::{forward, ForwardOutput, TokenBatch};
pub use lora::{attach_lora, merge_lora};
pub use loss::{loss, LossBreakdown};
pub use memory::{full_mask, mem_bytes, model_mem_bytes, ExpertMask, MemoryMode};
pub use params::{Expert, MoeLayer, MoeModel};
pub use train::{backward, loss_and_grad, Trainer};
