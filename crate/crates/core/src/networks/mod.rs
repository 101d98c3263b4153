//! Time-conditioned U-Net and ConvLSTM backbones with Monte Carlo dropout.

mod checkpoint;
mod convlstm;
mod dropout;
mod layers;
mod params;
mod unet;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, restore_checkpoint, save_checkpoint, CheckpointMeta,
};
pub use convlstm::{ConvLSTMConfig, ConvLstm};
pub use dropout::Dropout;
pub use params::ParamStore;
pub use unet::{UNet, UNetConfig};
