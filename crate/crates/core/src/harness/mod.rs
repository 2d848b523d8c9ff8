//! Configuration, sweeps, persistence, tail statistics, and rendering.

pub mod config;
pub mod record;
pub mod render;
pub mod sweep;
pub mod tail;

pub use config::{ExperimentConfig, Mode, ProbeBudget, RenderToggles};
pub use record::{HSummary, SampleRecord};
pub use render::{render_svg, RenderSummary, SlabProjection};
pub use sweep::{run_sweep, SweepSummary};
pub use tail::{estimate_tail, TailEstimate};
