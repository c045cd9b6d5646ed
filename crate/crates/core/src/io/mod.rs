//! Configuration, CSV/JSON output and the command implementations behind the binary.

mod commands;
mod config;
mod manifest;
mod table;

pub use commands::{cmd_assimilate, cmd_forward, cmd_hvp_check, cmd_kappa, cmd_sensitivity, Invocation};
pub use config::{
    GridConfig, KappaConfig, ObservationConfig, OutputConfig, Recipe, RunConfig, SensitivityConfig, TruthConfig,
};
pub use manifest::{sha256_hex, RunManifest, MANIFEST_FILE};
pub use table::{format_real, Cell, Table};
