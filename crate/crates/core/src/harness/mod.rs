//! Experiment configuration, orchestration and artifacts.

mod artifacts;
mod compare;
mod config;
mod record;
mod run;

pub use artifacts::{blob_hash, field_dump, parse_field_dump, score_field_dump, FieldDump, Manifest, ManifestEntry};
pub use compare::{compare_runs, format_ranking, Aggregation, Metric, RankRow};
pub use config::{
    emit_config, parse_config, parse_config_for, CfgSection, DataSection, EngineSection, EvalSection, ExperimentKind,
    FieldSection, FlowSection, GradCheckSection, LangevinSection, ModelSection, NatsSection, RunConfig, RunSection,
    ScheduleSpec, Scheme, TargetSpec,
};
pub use record::{read_records, write_records, MetricsRecord, CSV_COLUMNS};
pub use run::{
    read_manifest, run_experiment, verify_manifest, GeneratorSnapshot, RunOutcome, MANIFEST_FILE, METRICS_FILE,
    THREADS_ENV,
};
