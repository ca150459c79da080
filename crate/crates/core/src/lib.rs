//! Group-relative policy optimisation for a toy counting policy.
//!
//! A small recurrent policy reads a scene's feature vector and emits an
//! answer such as `<ans>42</ans><eos>`. It can be trained three ways:
//! teacher-forced supervised fine-tuning, GRPO with a binary accuracy
//! reward, or GRPO with a fuzzy reward combining answer format and graded
//! counting precision. Evaluation reports MAE, RMSE, R², MAPE, Pearson and
//! Spearman correlations, overall, per domain and per count range.

pub mod error;
pub mod format_lang;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod runner;
pub mod scenes;
pub mod seeding;

pub use error::{Error, Result};
pub use format_lang::{encode_count, extract_count, is_compliant, FormatGrammar, Token, VOCAB_SIZE};
pub use grpo::{
    apply_update, compute_advantages, grpo_objective, sft_update, token_kl, AdvantageSet, GrpoConfig, OptimizerKind,
};
pub use metrics::{bucketed_report, EvalReport, MetricSet, RangeReport};
pub use policy::{PolicyDims, PolicyParams, Rollout};
pub use rewards::{
    binary_accuracy_reward, fgrpr_reward, format_reward, precision_reward, Memberships, RewardBreakdown,
};
pub use runner::{compare, evaluate_checkpoint, run_experiment, smooth, ExperimentConfig, Regime, RewardCurve};
pub use scenes::{generate_domain, generate_suite, load_jsonl, save_jsonl, summarize, DomainSpec, Scene, SuiteSpec};
