//! The lottery-ticket loop: train, prune globally by magnitude, rewind to the
//! initial weights, retrain, evaluate, and persist every level.

mod config;
mod ledger;
mod run;
mod seeds;

pub use config::{config_drift, DataSource, ExperimentConfig, KEYS};
pub use ledger::{write_reports, EvalSample, LevelRecord, RunLedger};
pub use run::{
    evaluate_checkpoint, prepare_data, resume, run_lth, run_lth_with, NoObserver, Observer, PreparedData,
    RunOptions,
};
pub use seeds::{seed_streams, SeedStreams, Stream};
