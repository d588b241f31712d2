//! Container format, metrics, BD computation, RD sweeps and image I/O.

pub mod ablation;
pub mod bd;
pub mod container;
pub mod metrics;
pub mod ppm;
pub mod sweep;

pub use bd::{bd_metric, RDCurve, RDPoint};
pub use container::{bpp, Header, HscBitstream};
pub use metrics::distortion_suite;
pub use sweep::{evaluate_codec, rd_sweep, EvalSummary, SweepConfig, SweepRow};
