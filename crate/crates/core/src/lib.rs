//! Trace-driven simulator for categorized AI inference serving on edge
//! GPU clusters.
//!
//! Modules follow the serving pipeline: [`allocator`] picks operator
//! settings per service, [`placement`] decides which servers host which
//! services, [`handler`] routes each request, [`sync`] keeps server views
//! fresh, and [`engine`] ties them together on a virtual clock.

pub mod allocator;
pub mod cli;
pub mod engine;
pub mod handler;
pub mod model;
pub mod placement;
pub mod sync;

pub use engine::{emit_metrics, run, run_baseline, run_strategy, simulate_fixed, EngineError, Strategy};
pub use model::{load_scenario, load_scenario_with_overrides, Metrics, Scenario};
pub use placement::{approximation_p, place, sssp, PlacementContext};
