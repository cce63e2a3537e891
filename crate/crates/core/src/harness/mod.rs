//! Synthetic data, experiment driver, metrics and reporting.

mod baseline;
mod dataset;
mod eval;
mod experiment;
mod report;
mod stream_io;

pub use baseline::{baseline_ft, baseline_ft_like};
pub use dataset::{
    default_relations, detokenize, gen_dataset, relations, tokenize, DatasetConfig, EditStream, Fact,
    Relation, SyntheticWorld, TemplateLayout, DEFAULT_OBJECTS,
};
pub use eval::{activation_histogram, evaluate, evaluate_with, LocalityReference, MetricsReport, pre_edit_rel};
pub use experiment::{
    load_edited, merge_ablate, prepare, run_edits, run_experiment, save_edited, sweep, DataSection,
    ExperimentConfig, ExperimentResult, SweepCell, SweepGrid, SweepResult, Workbench,
};
pub use report::{histogram_csv, metrics_csv, report, summary_text, write_artifacts, CSV_HEADER};
pub use stream_io::{
    load_stream, read_lines, save_stream, save_world, stream_from_jsonl, stream_to_jsonl,
    IRRELEVANT_FILE,
};
