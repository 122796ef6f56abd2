//! Desk-scale reproduction of block structure in a deep ReLU MLP.

pub mod data;
pub mod error;
pub mod evolution;
pub mod net;
pub mod reg;
pub mod train;

pub use data::{make_synth_dataset, Split, SynthDataset, SynthDatasetConfig};
pub use error::{Result, ToyError};
pub use evolution::{evolution_report, CheckpointEvolution, EvolutionReport};
pub use net::{Activation, LrSchedule, Mlp, ToyNetConfig};
pub use reg::{pc_reg_grad, pc_reg_loss, RegConfig};
pub use train::{train, Checkpoint, EpochRecord, TrainingRun, TrainingTrace};
