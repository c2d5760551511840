//! Training orchestration: run configuration, the optimization loop,
//! gradient checks and the command implementations behind the CLI.

mod config;
pub mod gradcheck;
mod run;
pub mod trainer;

pub use config::{Precision, RunConfig};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GradcheckRow};
pub use run::{
    best_checkpoint, cmd_eval, cmd_generate, cmd_train, eval_store, load_model, prepare_out_dir, split_file,
    write_eval_outputs, Dataset, DatasetManifest, RunManifest, SampleDump, SplitCounts, TrainRun, CONFIG_FILE,
    deviations, DEVIATIONS, MANIFEST_FILE,
};
pub use trainer::{TrainOptions, TrainOutcome, TrainState};
