//! Evaluation, configuration, the experiment matrix and run persistence.

mod config;
mod metrics;
mod report;
mod rundir;
mod stages;

pub use config::{RunConfig, Technique};
pub use metrics::{
    aggregate_records, answer_well_formed, covered_aspects, eval_policy, outline_well_formed, record_for, Judge,
    MetricsRow, OracleJudge, RemoteJudge, SampleRecord,
};
pub use report::{
    collect_rows, render_csv, render_markdown, summarize, write_report, MatrixRow, Outcome, SummaryRow, REPORT_CSV,
    REPORT_MD,
};
pub use rundir::{digest, Manifest, RunDir, CONFIG, MANIFEST};
pub use stages::{
    ensure_data, eval_stage, gen_data, load_policy, load_samples, policy_path, rlhf_stage, rm_data_stage, rm_stage,
    row_path, run_matrix, seed_dir, sft_answers, sft_stage, technique_stage, EVAL_DATA, RL_DATA, SFT_DATA,
};
