//! JSON documents, report rendering and the `potflow` command line.

pub mod commands;
pub mod document;
pub mod report;

pub use commands::{run_command, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_OK};
pub use document::{
    load_network, load_scenario, network_from_document, network_to_document, parse_document, InputError,
    NetworkDocument, ScenarioDocument,
};
pub use report::{render, write_report, Format, Report};
