//! Desk-scale self-training simulator.
//!
//! The detector is parametric: four numbers describe how it misses,
//! mislocalizes and scores objects, and training moves those numbers
//! according to [`TrainingDynamics`]. The simulator shows how label-curation
//! choices play out inside that model. It is not evidence about neural
//! detectors.

mod config;
mod detector;
mod dynamics;
mod pipeline;
mod report;
mod scene;

pub use config::{
    config_hash, parse_configs, preset, AugmentConfig, DataConfig, ExperimentConfig, SceneConfig, PRESETS,
};
pub use detector::{simulate_detections, DetectorParams, DetectorState};
pub use dynamics::{train_step, TrainingDynamics};
pub use pipeline::{
    build_world, distill_student, label_records, run_self_training, run_suite, Batch, SimRecord, World,
};
pub use report::{
    metrics_json, report_csv_bytes, write_outputs, write_records_csv, write_report_csv, EpochRow, ExperimentReport,
    RecordRow,
};
pub use scene::{generate_scene, render_scene, ObjectTraits, Scene};
