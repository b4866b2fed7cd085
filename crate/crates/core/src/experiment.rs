//! Experiment drivers: configuration, runners and CSV output.

mod config;
mod results;
mod runners;

pub use config::{parse_config_text, ConfigMap, ExperimentConfig, Task};
pub use results::{write_csv, write_csv_to, ResultRow, CSV_HEADER};
pub use runners::{
    load_image_task, run, run_compress_bench, run_few_shot, run_local_steps_sweep, run_one_shot,
    run_width_sweep, ImageTask,
};
