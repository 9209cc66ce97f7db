//! Time-conditioned affine-coupling normalizing flow.

mod checkpoint;
mod coupling;
mod mlp;
mod model;

pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_VERSION};
pub use coupling::{mask_complement, CouplingCache, CouplingLayer, MU_CLAMP};
pub use mlp::{Mlp, MlpCache};
pub use model::{log_normal, FlowModel, MaskSchedule, NetShape};
