//! Experiment orchestration: training regimes, logging, evaluation and
//! run comparison.
//!
//! Every run first warm-starts the policy with teacher-forced updates and
//! freezes the result as the reference policy. The regime then decides
//! what happens for `steps` further updates:
//!
//! * `sft` keeps doing teacher-forced updates,
//! * `grpo_binary` runs group-relative policy optimisation with the binary
//!   accuracy reward,
//! * `fgrpr` does the same with the fuzzy format + precision reward.
//!
//! All randomness is derived from the config seed, and parallel work is
//! reduced in a fixed order, so identical configs give bit-identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_lang::{encode_count, extract_count, FormatGrammar, Token};
use crate::grpo::{compute_advantages, grpo_objective, sft_loss_and_grad, token_kl, GrpoConfig, Optimizer};
use crate::metrics::{bucketed_report, EvalReport, MetricSet};
use crate::policy::{greedy_decode, sample_rollout, PolicyDims, PolicyParams, Rollout};
use crate::rewards::{binary_accuracy_reward, fgrpr_reward, Memberships, RewardBreakdown};
use crate::scenes::{generate_suite, Scene, SuiteSpec, FEATURE_DIM};
use crate::seeding;

pub const CURVE_FILE: &str = "curve.csv";
pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const WARMSTART_LOG_FILE: &str = "warmstart.log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval.log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const COMPARISON_FILE: &str = "comparison.txt";
pub const STATE_DUMP_FILE: &str = "state_dump.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sft,
    GrpoBinary,
    Fgrpr,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Sft => "sft",
            Regime::GrpoBinary => "grpo_binary",
            Regime::Fgrpr => "fgrpr",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub steps: usize,
    /// Evaluate on the test split every this many steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub seed: u64,
    pub grpo: GrpoConfig,
    pub suite: SuiteSpec,
    pub sft_warmstart_steps: usize,
    pub smoothing_window: usize,
    pub output_dir: PathBuf,
    pub hidden: usize,
    pub init_scale: f64,
    pub max_len: usize,
    pub memberships: Memberships,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            regime: Regime::Fgrpr,
            steps: 600,
            eval_every: 100,
            seed: 0,
            grpo: GrpoConfig::default(),
            suite: SuiteSpec::default(),
            sft_warmstart_steps: 200,
            smoothing_window: 20,
            output_dir: PathBuf::from("runs/experiment"),
            hidden: 32,
            init_scale: 0.1,
            max_len: FormatGrammar::default().max_len,
            memberships: Memberships::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.smoothing_window < 1 {
            return Err(Error::Config("smoothing_window must be >= 1".into()));
        }
        if self.hidden < 1 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must allow at least one digit (>= 4)".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        self.grpo.validate()?;
        self.memberships.validate()?;
        self.suite.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn grammar(&self) -> FormatGrammar {
        FormatGrammar { max_len: self.max_len }
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            feature_dim: FEATURE_DIM,
            hidden: self.hidden,
            ..PolicyDims::default()
        }
    }
}

/// Trailing moving average; the first `window - 1` points average over what is available.
pub fn smooth(raw: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..raw.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            raw[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Per-step mean precision and format rewards, raw and smoothed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub precision_raw: Vec<f64>,
    pub format_raw: Vec<f64>,
    pub precision_smooth: Vec<f64>,
    pub format_smooth: Vec<f64>,
}

impl RewardCurve {
    pub fn from_raw(precision_raw: Vec<f64>, format_raw: Vec<f64>, window: usize) -> Self {
        RewardCurve {
            precision_smooth: smooth(&precision_raw, window),
            format_smooth: smooth(&format_raw, window),
            precision_raw,
            format_raw,
        }
    }

    pub fn len(&self) -> usize {
        self.precision_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.precision_raw.is_empty()
    }

    /// CSV with header `step,precision_raw,format_raw,precision_smooth,format_smooth`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,precision_raw,format_raw,precision_smooth,format_smooth\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                self.precision_raw[i],
                self.format_raw[i],
                self.precision_smooth[i],
                self.format_smooth[i]
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut p = Vec::new();
        let mut f = Vec::new();
        let mut ps = Vec::new();
        let mut fs_ = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: PathBuf::from(CURVE_FILE),
                    line: i + 1,
                    message: e.to_string(),
                })
            };
            if cols.len() != 5 {
                return Err(Error::Parse {
                    path: PathBuf::from(CURVE_FILE),
                    line: i + 1,
                    message: format!("expected 5 columns, got {}", cols.len()),
                });
            }
            p.push(parse(cols[1])?);
            f.push(parse(cols[2])?);
            ps.push(parse(cols[3])?);
            fs_.push(parse(cols[4])?);
        }
        Ok(RewardCurve {
            precision_raw: p,
            format_raw: f,
            precision_smooth: ps,
            format_smooth: fs_,
        })
    }
}

/// One sampled output in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub rollout_index: usize,
    pub scene_index: usize,
    pub tokens: Vec<Token>,
    pub r_f: f64,
    pub r_p: f64,
    pub total: f64,
}

/// Aggregate line written once per training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_f: f64,
    pub mean_r_p: f64,
    pub objective: f64,
    pub kl_mean: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Rollout(RolloutRecord),
    Step(StepRecord),
}

/// Cycles through a dataset in freshly shuffled epochs.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher { order, cursor: 0, rng }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// What a single scene contributes to a training step.
struct SceneStep {
    rollouts: Vec<Rollout>,
    breakdowns: Vec<RewardBreakdown>,
    rewards: Vec<f64>,
    objective: f64,
    grad: PolicyParams,
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    grammar: FormatGrammar,
    train: &'a [Scene],
}

impl Trainer<'_> {
    fn sft_batch(&self, params: &PolicyParams, batch: &[usize]) -> Result<(f64, PolicyParams)> {
        let parts: Vec<(f64, PolicyParams)> = batch
            .par_iter()
            .map(|&i| {
                let s = &self.train[i];
                sft_loss_and_grad(params, &s.features, &encode_count(s.truth))
            })
            .collect::<Result<_>>()?;
        let n = parts.len() as f64;
        let mut grad = PolicyParams::zeros(params.dims());
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l / n;
            // ascend on -loss
            grad.add_scaled(-1.0 / n, g);
        }
        Ok((loss, grad))
    }

    fn reward(&self, regime: Regime, b: &RewardBreakdown, tokens: &[Token], truth: u64) -> Result<f64> {
        match regime {
            Regime::GrpoBinary => binary_accuracy_reward(extract_count(tokens), truth),
            Regime::Fgrpr | Regime::Sft => Ok(b.total),
        }
    }

    fn scene_step(
        &self,
        params: &PolicyParams,
        reference: &PolicyParams,
        scene: &Scene,
        seed: u64,
        with_objective: bool,
    ) -> Result<SceneStep> {
        let g = self.cfg.grpo.group_size;
        let mut rollouts = Vec::with_capacity(g);
        let mut breakdowns = Vec::with_capacity(g);
        let mut rewards = Vec::with_capacity(g);
        for i in 0..g {
            let ro = sample_rollout(
                params,
                reference,
                &scene.features,
                self.grammar,
                seeding::derive_indexed(seed, &[i as u64]),
            )?;
            let b = fgrpr_reward(&ro.tokens, scene.truth, self.cfg.memberships)?;
            rewards.push(self.reward(self.cfg.regime, &b, &ro.tokens, scene.truth)?);
            breakdowns.push(b);
            rollouts.push(ro);
        }
        let (objective, grad) = if with_objective {
            let adv = compute_advantages(&rewards, &self.cfg.grpo)?;
            let obj = grpo_objective(params, &scene.features, &rollouts, &adv, &self.cfg.grpo)?;
            (obj.value, obj.grad)
        } else {
            (0.0, PolicyParams::zeros(params.dims()))
        };
        Ok(SceneStep {
            rollouts,
            breakdowns,
            rewards,
            objective,
            grad,
        })
    }
}

struct LogSink {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl LogSink {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(LogSink {
            writer: BufWriter::new(file),
            path,
        })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Everything a completed run produced.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub curve: RewardCurve,
    pub report: EvalReport,
    pub steps: Vec<StepRecord>,
    pub output_dir: PathBuf,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs one experiment end to end and writes its artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;

    let data = generate_suite(&cfg.suite, cfg.seed)?;
    let ood_tags = cfg.suite.test_only_tags();
    let trainer = Trainer {
        cfg,
        grammar: cfg.grammar(),
        train: &data.train,
    };
    let gcfg = &cfg.grpo;
    let per_step = gcfg.batch_size * gcfg.grad_accum_steps;
    let mut batcher = Batcher::new(data.train.len(), seeding::derive("batches", cfg.seed));
    let mut params = PolicyParams::init_uniform(cfg.dims(), cfg.init_scale, seeding::derive("init", cfg.seed));

    // Warm start: teacher forcing, shared by every regime.
    let mut warm_log = LogSink::create(out.join(WARMSTART_LOG_FILE))?;
    let mut opt = Optimizer::new(gcfg.optimizer);
    for step in 1..=cfg.sft_warmstart_steps {
        let batch = batcher.next(per_step);
        let mut grad = PolicyParams::zeros(params.dims());
        let mut loss = 0.0;
        for micro in batch.chunks(gcfg.batch_size) {
            let (l, g) = trainer.sft_batch(&params, micro)?;
            loss += l / gcfg.grad_accum_steps as f64;
            grad.add_scaled(1.0, &g);
        }
        if !loss.is_finite() {
            return Err(abort(&out, &params, step, "warm-start loss is not finite"));
        }
        params = opt.ascend(&params, &grad, gcfg)?;
        warm_log.write(&serde_json::json!({ "step": step, "loss": loss }))?;
    }
    warm_log.finish()?;
    let reference = params.snapshot();

    let mut log = LogSink::create(out.join(TRAIN_LOG_FILE))?;
    let mut eval_log = LogSink::create(out.join(EVAL_LOG_FILE))?;
    let mut opt = Optimizer::new(gcfg.optimizer);
    let rollout_seed = seeding::derive("rollouts", cfg.seed);
    let mut precision_raw = Vec::with_capacity(cfg.steps);
    let mut format_raw = Vec::with_capacity(cfg.steps);
    let mut step_records = Vec::with_capacity(cfg.steps);
    let is_rl = cfg.regime != Regime::Sft;

    for step in 1..=cfg.steps {
        let batch = batcher.next(per_step);
        let mut grad = PolicyParams::zeros(params.dims());
        let mut objective = 0.0;
        let mut breakdowns: Vec<RewardBreakdown> = Vec::with_capacity(per_step * gcfg.group_size);
        let mut rewards: Vec<f64> = Vec::with_capacity(per_step * gcfg.group_size);
        let mut kl_sum = 0.0;
        let mut kl_n = 0usize;
        let mut rollout_index = 0;

        for (m, micro) in batch.chunks(gcfg.batch_size).enumerate() {
            let frozen = &params;
            let parts: Vec<SceneStep> = micro
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = seeding::derive_indexed(rollout_seed, &[step as u64, m as u64, k as u64]);
                    trainer.scene_step(frozen, &reference, &data.train[i], seed, is_rl)
                })
                .collect::<Result<_>>()?;
            let n = micro.len() as f64;
            if is_rl {
                for p in &parts {
                    objective += p.objective / n;
                    grad.add_scaled(1.0 / n, &p.grad);
                }
            } else {
                let (loss, g) = trainer.sft_batch(frozen, micro)?;
                objective -= loss;
                grad.add_scaled(1.0, &g);
            }
            for (k, p) in parts.into_iter().enumerate() {
                for ((ro, b), r) in p.rollouts.iter().zip(&p.breakdowns).zip(&p.rewards) {
                    for (dc, dr) in ro.dist_cur.iter().zip(&ro.dist_ref) {
                        kl_sum += token_kl(dc, dr)?;
                        kl_n += 1;
                    }
                    log.write(&LogRecord::Rollout(RolloutRecord {
                        step,
                        rollout_index,
                        scene_index: m * gcfg.batch_size + k,
                        tokens: ro.tokens.clone(),
                        r_f: b.r_f,
                        r_p: b.r_p,
                        total: *r,
                    }))?;
                    rollout_index += 1;
                }
                breakdowns.extend(p.breakdowns);
                rewards.extend(p.rewards);
            }
        }
        objective /= gcfg.grad_accum_steps as f64;
        if !objective.is_finite() {
            return Err(abort(&out, &params, step, "objective is not finite"));
        }
        let n = breakdowns.len() as f64;
        let record = StepRecord {
            step,
            mean_reward: rewards.iter().sum::<f64>() / n,
            mean_r_f: breakdowns.iter().map(|b| b.r_f).sum::<f64>() / n,
            mean_r_p: breakdowns.iter().map(|b| b.r_p).sum::<f64>() / n,
            objective,
            kl_mean: if kl_n > 0 { kl_sum / kl_n as f64 } else { 0.0 },
            grad_norm: grad.norm() / gcfg.grad_accum_steps as f64,
        };
        precision_raw.push(record.mean_r_p);
        format_raw.push(record.mean_r_f);
        log.write(&LogRecord::Step(record.clone()))?;
        step_records.push(record);

        let next = opt.ascend(&params, &grad, gcfg)?;
        if !next.is_finite() {
            return Err(abort(&out, &params, step, "update produced non-finite parameters"));
        }
        params = next;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            let report = evaluate_checkpoint(&params, &data.test, trainer.grammar, &ood_tags)?;
            eval_log.write(&serde_json::json!({ "step": step, "report": report }))?;
        }
    }
    log.finish()?;

    let curve = RewardCurve::from_raw(precision_raw, format_raw, cfg.smoothing_window);
    let report = evaluate_checkpoint(&params, &data.test, trainer.grammar, &ood_tags)?;
    eval_log.write(&serde_json::json!({ "step": cfg.steps, "report": report }))?;
    eval_log.finish()?;

    params.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(CURVE_FILE), curve.to_csv().as_bytes())?;
    write_file(&out.join(REPORT_FILE), report.to_json()?.as_bytes())?;

    Ok(RunArtifacts {
        params,
        reference,
        curve,
        report,
        steps: step_records,
        output_dir: out,
    })
}

fn abort(out: &Path, params: &PolicyParams, step: usize, what: &str) -> Error {
    let dump = out.join(STATE_DUMP_FILE);
    match params.save(&dump) {
        Ok(()) => Error::Numerical(format!("step {step}: {what}; state dumped to {}", dump.display())),
        Err(e) => Error::Numerical(format!("step {step}: {what}; state dump failed: {e}")),
    }
}

/// Greedy-decodes every test scene and scores the predictions.
///
/// Scenes whose tag is in `ood_tags` are reported separately as out-of-domain.
/// Outputs without any digit count as prediction 0 and as parse failures.
pub fn evaluate_checkpoint(
    params: &PolicyParams,
    scenes: &[Scene],
    grammar: FormatGrammar,
    ood_tags: &[String],
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty test set".into()));
    }
    let preds: Vec<Option<u64>> = scenes
        .par_iter()
        .map(|s| greedy_decode(params, &s.features, grammar).map(|seq| extract_count(&seq)))
        .collect::<Result<_>>()?;

    let mut by_domain: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    let mut in_domain = (Vec::new(), Vec::new());
    let mut out_domain = (Vec::new(), Vec::new());
    let mut failures = 0;
    for (s, p) in scenes.iter().zip(&preds) {
        let entry = by_domain.entry(s.domain_tag.clone()).or_default();
        if p.is_none() {
            failures += 1;
            entry.2 += 1;
        }
        let (y, yhat) = (s.truth as f64, p.unwrap_or(0) as f64);
        entry.0.push(y);
        entry.1.push(yhat);
        let target = if ood_tags.contains(&s.domain_tag) {
            &mut out_domain
        } else {
            &mut in_domain
        };
        target.0.push(y);
        target.1.push(yhat);
    }
    let range = |(y, p): &(Vec<f64>, Vec<f64>)| -> Result<Option<_>> {
        if y.is_empty() {
            Ok(None)
        } else {
            bucketed_report(y, p).map(Some)
        }
    };
    Ok(EvalReport {
        parse_failure_count: failures,
        in_domain: range(&in_domain)?,
        out_of_domain: range(&out_domain)?,
        per_domain: by_domain
            .iter()
            .map(|(k, (y, p, _))| Ok((k.clone(), MetricSet::compute(y, p)?)))
            .collect::<Result<_>>()?,
        per_domain_parse_failures: by_domain.iter().map(|(k, v)| (k.clone(), v.2)).collect(),
    })
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Marks for the lowest and second-lowest distinct values of a column.
pub fn rank_marks(column: &[Option<f64>]) -> Vec<&'static str> {
    let mut distinct: Vec<f64> = column.iter().flatten().copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    column
        .iter()
        .map(|v| match v {
            Some(x) if distinct.first() == Some(x) => "*",
            Some(x) if distinct.get(1) == Some(x) => "+",
            _ => "",
        })
        .collect()
}

/// Domain-wise and range-wise error table across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Comparison {
    pub fn from_reports(runs: &[(String, EvalReport)]) -> Self {
        let mut domains: Vec<String> = Vec::new();
        for (_, r) in runs {
            for k in r.per_domain.keys() {
                if !domains.contains(k) {
                    domains.push(k.clone());
                }
            }
        }
        domains.sort();
        let mut columns = Vec::new();
        for d in &domains {
            columns.push(format!("{d} MAE"));
            columns.push(format!("{d} RMSE"));
        }
        columns.extend(["in-domain MAE".to_string(), "in-domain RMSE".to_string()]);
        let range_labels: Vec<String> = crate::metrics::BUCKETS
            .iter()
            .map(|&(lo, hi)| crate::metrics::bucket_label(lo, hi))
            .collect();
        for scope in ["in", "out"] {
            for l in &range_labels {
                columns.push(format!("{scope} {l} MAE"));
                columns.push(format!("{scope} {l} RMSE"));
            }
        }
        let rows = runs
            .iter()
            .map(|(name, r)| {
                let mut vals = Vec::with_capacity(columns.len());
                for d in &domains {
                    let m = r.per_domain.get(d);
                    vals.push(m.map(|m| m.mae));
                    vals.push(m.map(|m| m.rmse));
                }
                vals.push(r.in_domain.as_ref().map(|x| x.metrics.mae));
                vals.push(r.in_domain.as_ref().map(|x| x.metrics.rmse));
                for scope in [&r.in_domain, &r.out_of_domain] {
                    for b in 0..range_labels.len() {
                        let s = scope.as_ref().and_then(|x| x.bucket(b));
                        vals.push(s.map(|s| s.mae));
                        vals.push(s.map(|s| s.rmse));
                    }
                }
                (name.clone(), vals)
            })
            .collect();
        Comparison { columns, rows }
    }

    /// Aligned text, one line per column and one column per run; `*` marks
    /// the best (lowest) value in a column and `+` the second best.
    pub fn render(&self) -> String {
        let label_w = self.columns.iter().map(String::len).max().unwrap_or(6).max(6);
        let cell_w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(8).max(12);
        let mut out = format!("{:<label_w$}", "metric");
        for (name, _) in &self.rows {
            let _ = write!(out, "  {name:>cell_w$}");
        }
        out.push('\n');
        for (c, label) in self.columns.iter().enumerate() {
            let col: Vec<Option<f64>> = self.rows.iter().map(|r| r.1[c]).collect();
            let marks = rank_marks(&col);
            let _ = write!(out, "{label:<label_w$}");
            for (v, m) in col.iter().zip(marks) {
                let cell = v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}{m}"));
                let _ = write!(out, "  {cell:>cell_w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the comparison table for completed run directories.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let report_path = dir.join(REPORT_FILE);
        if !report_path.exists() {
            return Err(Error::MissingArtifact(report_path));
        }
        let report = load_report(&report_path)?;
        let name = match ExperimentConfig::from_json_file(&dir.join(CONFIG_FILE)) {
            Ok(cfg) => format!(
                "{} ({})",
                dir.file_name()
                    .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
                cfg.regime
            ),
            Err(_) => dir.display().to_string(),
        };
        runs.push((name, report));
    }
    Ok(Comparison::from_reports(&runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_examples() {
        let raw = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(smooth(&raw, 1), raw.to_vec());
        assert_eq!(smooth(&raw, 2), vec![0.0, 0.5, 1.5, 2.5]);
        assert!(smooth(&[0.7; 50], 20).iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(smooth(&[], 5).is_empty());
    }

    #[test]
    fn smoothing_matches_window_definition() {
        let raw: Vec<f64> = (0..300).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        let s = smooth(&raw, 20);
        for i in 0..raw.len() {
            let lo = i.saturating_sub(19);
            let oracle = raw[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
            assert!((s[i] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn marks_best_and_second() {
        assert_eq!(rank_marks(&[Some(3.0), Some(2.0), Some(4.0)]), vec!["+", "*", ""]);
        assert_eq!(rank_marks(&[Some(1.0), Some(1.0), None]), vec!["*", "*", ""]);
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, 3);
        let mut first: Vec<usize> = b.next(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next(25).len(), 25);
    }

    #[test]
    fn config_defaults_roundtrip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"regime":"sft","steps":3}"#).unwrap();
        assert_eq!(partial.regime, Regime::Sft);
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.grpo, GrpoConfig::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"stepz":3}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig {
            steps: 0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.steps = 1;
        cfg.smoothing_window = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn curve_csv_roundtrip() {
        let c = RewardCurve::from_raw(vec![0.1, 0.25, 1.3], vec![0.0, 0.5, 1.0], 2);
        let back = RewardCurve::from_csv(&c.to_csv()).unwrap();
        assert_eq!(c, back);
    }
}
