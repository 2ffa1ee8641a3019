//! Key-routed low-rank adapter watermarking for frozen image generators.
//!
//! A binary key selects one low-rank adapter per routed generator block;
//! the resulting parameter perturbation embeds the key into generated
//! images, and a jointly trained extractor recovers it. The crate covers
//! the full pipeline: key/routing codec, a small reverse-mode tensor
//! engine, the routed generator and extractor, joint training, exact
//! binomial detection and attribution, and a robustness attack battery.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod distort;
pub mod extractor;
pub mod features;
pub mod generator;
pub mod gradcheck;
pub mod imageio;
pub mod key;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod shapes;
pub mod system;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use key::{RoutingPath, WatermarkKey};
pub use tensor::Tensor;
