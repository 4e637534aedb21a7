pub mod codec;
pub mod coding;
pub mod container;
pub mod entropy_model;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod range_coder;
pub mod packet;
pub mod schedule;
pub mod session;
pub mod sim;
pub mod split;
pub mod train;
pub mod video;

pub use error::{MdvcError, Result};
