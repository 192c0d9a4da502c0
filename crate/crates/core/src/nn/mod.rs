//! Networks, encodings, optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod encoding;
pub mod mlp;
pub mod rbn;
pub mod sdf_net;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, GeometryRecord, NetworkRecord};
pub use encoding::FourierEncoding;
pub use mlp::{Activation, LayerSpec, Mlp};
pub use rbn::{RayBendingNet, RbnConfig, RbnOutput};
pub use sdf_net::{NeuralSdf, SdfNetConfig};
