//! Scenario configuration, experiment execution and results aggregation.

mod scenario;
mod stats;
mod sweep;
mod world;

pub use scenario::{
    BackgroundConfig, CoapConfig, Mode, Scenario, ScenarioError, SensorsPerSite, TcpConfig, WanConfig,
    SCENARIO_SCHEMA_VERSION,
};
pub use stats::{percentile, FlowStats};
pub use sweep::{
    check, check_coap_success, check_ratio, check_reduction, check_steady, check_wan_ordering, check_ws_above_coap,
    read_results_csv, result_rows, run_parallel, sweep, write_results_csv, Cell, CheckOutcome, ResultRow, Summary,
    SweepKind, DEFAULT_LEVELS, RESULTS_HEADER,
};
pub use world::{run_replication, run_scenario, superframes, RunOptions, RunReport};
