//! Example systems, fits and scenario runs.

pub mod examples;
pub mod fit;
pub mod scenario;

pub use examples::{build_system, ExampleId, ExampleParams};
pub use fit::{fit_exponential, ExpFit};
pub use scenario::{run_scenario, Check, Query, ScenarioReport, ScenarioSpec, StageReport, StageStatus};
