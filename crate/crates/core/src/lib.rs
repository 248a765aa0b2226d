//! Accelerated T2 mapping toolkit.
//!
//! The crate covers the whole experimental loop for multi-echo T2 mapping from
//! undersampled Cartesian k-space:
//!
//! * [`phantom`] builds knee-like synthetic ground truth and multi-echo series,
//! * [`sampling`] draws ky-t variable-density mask-sets,
//! * [`encoding`] applies the masked Fourier encoding operator and its adjoint,
//! * [`model`] and [`fit`] hold the mono-exponential decay model and the
//!   pixelwise Levenberg-Marquardt fit,
//! * [`lowrank`] implements the global and local low-rank ISTA baselines,
//! * [`net`] is a small encoder-decoder network with hand-written reverse mode,
//! * [`train`] trains it with the joint data-consistency + supervised objective,
//! * [`metrics`] and [`report`] evaluate and tabulate results,
//! * [`pipeline`] wires everything into a single reproducible comparison run.
//!
//! Heavy inner loops (pixel fits, LLR blocks, per-sample network passes) run on
//! rayon when the `parallel` feature is enabled and sequentially otherwise.
//! Results are identical either way.

pub mod container;
pub mod data;
pub mod encoding;
pub mod error;
pub mod exec;
pub mod fft;
pub mod fit;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod train;

pub use data::{normalize_dataset, EchoSeries, KSpaceSet, ParamMaps, T2_MAX_MS, T2_MIN_MS};
pub use error::{Error, ErrorKind, Result};
pub use num_complex::Complex64;
