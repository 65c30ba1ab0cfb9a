//! Orchestration behind the `dppo` binary: TOML run configs, the six
//! commands, the SVG plotter and multi-seed reports.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

pub use commands::{
    cmd_eval, cmd_finetune, cmd_gen_demos, cmd_plot, cmd_pretrain, cmd_report, dispatch,
    load_policy, variants, Command, DemoManifest, EvalReport, FinetuneOutcome, LoadedPolicy,
    PretrainEval, PretrainOutcome, Variant, PRETRAIN_EVAL_HEADER, PRETRAIN_LOSS_HEADER,
};
pub use config::{
    parse_seed_list, sha256_hex, AblationSection, DemoSection, EvalSection, FinetuneSection,
    Method, PlotSection, PolicyKind, PolicySection, PretrainSection, ReportSection, RunConfig,
    RunSection, OUT_ENV, SEED_ENV,
};
pub use plot::{event_color, render_svg};
pub use report::{mean_std, CurvePoint, ExperimentReport, GroupReport, RunInfo, RUN_FILE};
