//! Run configuration and the commands behind the `moe-lab` binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, align_experts, category_summary, path_token_report, record_trace, Categories, PathHistogram, RoutingTrace,
};
use crate::error::{Error, Result};
use crate::gradsuite::gradient_suite;
use crate::model::{Checkpoint, ForwardOptions, Model, ModelConfig};
use crate::router::{RoutingStrategy, StrategyKind};
use crate::trainer::{identify_top_paths, restrict_to_paths, synthetic_text, Corpus, MetricsLog, StepStats, TrainConfig, Trainer};

pub const ANALYZE_FORMAT: &str = "moe-lab-analyze";
pub const SUMMARY_FORMAT: &str = "moe-lab-summary";
pub const OUTPUT_VERSION: u32 = 1;

/// Environment variable holding the worker count for parallel work.
pub const WORKERS_ENV: &str = "MOE_LAB_WORKERS";

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Plain-text corpus, byte tokenized.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Generate a templated English-like corpus of this many bytes instead
    /// of reading `corpus`.
    #[serde(default)]
    pub synthetic_corpus_bytes: Option<usize>,
    #[serde(default = "default_synthetic_seed")]
    pub synthetic_seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_synthetic_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            corpus: None,
            synthetic_corpus_bytes: None,
            synthetic_seed: default_synthetic_seed(),
            out: default_out(),
        }
    }
}

/// Command-line values that win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub block_size: Option<usize>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(name) = &o.strategy {
            let kind = StrategyKind::from_short_name(name)
                .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{name}` (indep, path, mono, lowrank, xmoe, rand)")))?;
            let prev = &self.model.strategy;
            let blocked = matches!(kind, StrategyKind::PathShared | StrategyKind::MonoShared);
            self.model.strategy = RoutingStrategy {
                kind,
                block_size: if blocked { prev.block_size } else { 1 },
                compose_xmoe: prev.compose_xmoe && kind == StrategyKind::PathShared,
                ..prev.clone()
            };
        }
        if let Some(b) = o.block_size {
            self.model.strategy.block_size = b;
        }
        if let Some(k) = o.top_k {
            self.model.top_k = k;
        }
        if let Some(a) = o.alpha {
            self.model.alpha = a;
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        Ok(())
    }

    /// Checks every cross-field constraint before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, msg } if !field.starts_with("model.") => Error::config(format!("model.{field}"), msg),
            other => other,
        })?;
        if self.model.n_layers == 0 {
            return Err(Error::config("model.n_layers", "must be positive"));
        }
        self.train.validate()?;
        if self.corpus.is_none() && self.synthetic_corpus_bytes.is_none() {
            return Err(Error::config("corpus", "missing; set `corpus` to a text file or `synthetic_corpus_bytes`"));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match (&self.corpus, self.synthetic_corpus_bytes) {
            (Some(p), _) => Corpus::from_file(p),
            (None, Some(n)) => Corpus::from_bytes(synthetic_text(n, self.synthetic_seed).as_bytes()),
            (None, None) => Err(Error::config("corpus", "missing")),
        }
    }

    /// Short hex digest of the effective configuration. The output
    /// directory is left out, so reruns elsewhere carry the same hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        hash_json(&v)
    }
}

pub fn hash_json(v: &Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Process exit code for an error: 1 usage/config, 2 data or I/O,
/// 3 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Invalid(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Rayon pool sized by [`WORKERS_ENV`] (default: available cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Error::config(WORKERS_ENV, format!("not a positive integer: `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::invalid(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Outcome of a training command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub strategy: String,
    pub steps: usize,
    pub final_ce: f64,
    pub eval_ce: f64,
    pub eval_ppl: f64,
    /// Set for restricted runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restriction: Option<RestrictionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestrictionSummary {
    pub k: usize,
    pub observed_paths: usize,
    pub kept_paths: usize,
    /// Fewer distinct paths were observed than requested.
    pub short_warning: bool,
    pub identification_coverage: f64,
    /// Smallest per-step fraction of tokens on an allowed path.
    pub min_compliance: f64,
}

/// Evaluation stream cap, so summaries stay cheap on large corpora.
pub const EVAL_TOKENS: usize = 65_536;

fn eval_stream(corpus: &Corpus) -> &[usize] {
    &corpus.eval[..corpus.eval.len().min(EVAL_TOKENS)]
}

/// Drives `trainer` to its configured step count, writing metrics and
/// checkpoints under `out`. `on_step` sees every step.
fn drive(trainer: &mut Trainer, corpus: &Corpus, out: &Path, hash: &str, mut on_step: impl FnMut(&StepStats)) -> Result<f64> {
    fs::create_dir_all(out)?;
    let restricted = trainer.restrict.is_some();
    let mut log = MetricsLog::new(create(&out.join("metrics.csv"))?, hash, trainer.model.config().n_layers, trainer.config.record_throughput, restricted)?;
    let early = trainer.config.early_step();
    let every = trainer.config.checkpoint_every;
    let mut last_ce = f64::NAN;
    while !trainer.is_done() {
        let s = trainer.step(corpus)?;
        log.write(&s)?;
        on_step(&s);
        last_ce = s.ce;
        if s.step == early && !restricted {
            trainer.to_checkpoint().save(&out.join("early.pmlb"))?;
        }
        if every > 0 && s.step % every == 0 {
            trainer.to_checkpoint().save(&out.join(format!("step-{:06}.pmlb", s.step)))?;
        }
    }
    log.into_inner().flush()?;
    trainer.to_checkpoint().save(&out.join("checkpoint.pmlb"))?;
    Ok(last_ce)
}

fn finish(trainer: &Trainer, corpus: &Corpus, out: &Path, hash: &str, final_ce: f64, restriction: Option<RestrictionSummary>) -> Result<TrainSummary> {
    let opts = ForwardOptions { restrict: trainer.restrict.as_ref(), dispatch: None };
    let ev = trainer.model.evaluate(eval_stream(corpus), trainer.config.eval_rows, opts)?;
    let summary = TrainSummary {
        config_hash: hash.into(),
        strategy: trainer.model.config().strategy.label(),
        steps: trainer.step,
        final_ce,
        eval_ce: ev.ce,
        eval_ppl: ev.ppl,
        restriction,
    };
    let mut v = json!({ "format": SUMMARY_FORMAT, "version": OUTPUT_VERSION });
    v.as_object_mut().expect("object").extend(serde_json::to_value(&summary)?.as_object().expect("object").clone());
    write_json(&out.join("summary.json"), &v)?;
    Ok(summary)
}

/// `train`: fresh run (or resume from `resume`) to `run.train.steps`.
pub fn cmd_train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    run.validate()?;
    let corpus = run.load_corpus()?;
    let hash = run.hash();
    let mut trainer = match resume {
        None => Trainer::new(run.model.clone(), run.train.clone(), run.seed)?,
        Some(p) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(p)?)?;
            t.config.steps = run.train.steps;
            t
        }
    };
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("config.json"), &json!({ "config_hash": hash, "run": run }))?;
    let ce = drive(&mut trainer, &corpus, &run.out, &hash, |_| {})?;
    finish(&trainer, &corpus, &run.out, &hash, ce, None)
}

/// `restrict`: identifies the `k` most frequent paths of the checkpoint on
/// `data` (default: the held-out split) and continues training with top-1
/// routing confined to them.
pub fn cmd_restrict(run: &RunConfig, checkpoint: &Path, k: usize, data: Option<&Path>) -> Result<TrainSummary> {
    run.validate()?;
    let corpus = run.load_corpus()?;
    let mut trainer = Trainer::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    trainer.config.steps = run.train.steps;
    let probe: Vec<usize> = match data {
        Some(p) => read_tokens(p)?,
        None => eval_stream(&corpus).to_vec(),
    };
    let top = identify_top_paths(&trainer.model, &probe, trainer.config.eval_rows, k)?;
    if top.short() {
        log::warn!("only {} distinct paths observed, fewer than K = {k}; keeping all of them", top.observed);
    }
    restrict_to_paths(&mut trainer, top.trie.clone())?;
    let hash = hash_json(&json!({ "run": run.hash(), "restrict_k": k, "from_step": trainer.step }));
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("paths.json"), &json!({ "format": "moe-lab-paths", "version": OUTPUT_VERSION, "config_hash": hash, "k": k, "paths": top.paths }))?;
    let mut min_compliance = 1.0f64;
    let ce = drive(&mut trainer, &corpus, &run.out, &hash, |s| min_compliance = min_compliance.min(s.compliance.unwrap_or(1.0)))?;
    let restriction = RestrictionSummary {
        k,
        observed_paths: top.observed,
        kept_paths: top.paths.len(),
        short_warning: top.short(),
        identification_coverage: top.coverage,
        min_compliance,
    };
    finish(&trainer, &corpus, &run.out, &hash, ce, Some(restriction))
}

/// Byte tokens of a file; empty files are an error.
pub fn read_tokens(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

fn checkpoint_hash(ck: &Checkpoint) -> String {
    hash_json(&ck.config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub tokens: usize,
    pub unique_paths: usize,
    pub entropy_bits: f64,
}

/// `trace`: routes `tokens` through the checkpointed model and writes the
/// JSONL trace to `out`.
pub fn cmd_trace(checkpoint: &Path, tokens: &[usize], rows: usize, out: &Path) -> Result<TraceSummary> {
    if tokens.is_empty() {
        return Err(Error::Data("no tokens to trace".into()));
    }
    let mut ck = Checkpoint::load(checkpoint)?;
    let hash = checkpoint_hash(&ck);
    let model = Model::<f32>::from_checkpoint(&mut ck)?;
    let trace = record_trace(&model, tokens, rows, ForwardOptions::default())?;
    let mut w = create(out)?;
    trace.write_jsonl(&mut w, &hash)?;
    w.flush()?;
    let hist = PathHistogram::from_trace(&trace);
    Ok(TraceSummary { tokens: trace.len(), unique_paths: hist.unique(), entropy_bits: hist.routing_entropy()?.bits })
}

pub fn load_trace(path: &Path) -> Result<(RoutingTrace, String)> {
    let f = File::open(path).map_err(|e| Error::Data(format!("cannot open trace {}: {e}", path.display())))?;
    RoutingTrace::read_jsonl(BufReader::new(f))
}

pub const SUBMETRICS: &[&str] =
    &["entropy", "markov", "mi", "coverage", "align", "consistency", "engagement", "specialize", "robustness", "categories", "report"];

/// Flags shared by the `analyze` submetrics.
#[derive(Clone, Debug)]
pub struct AnalyzeArgs {
    pub windows: Option<Vec<usize>>,
    pub thresholds: Option<Vec<usize>>,
    pub ks: Option<Vec<usize>>,
    pub paths: usize,
    pub tokens: usize,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub p: f64,
    pub seeds: usize,
    pub rows: usize,
}

impl Default for AnalyzeArgs {
    fn default() -> Self {
        Self { windows: None, thresholds: None, ks: None, paths: 10, tokens: 20, checkpoint: None, data: None, p: 1.0, seeds: 5, rows: 16 }
    }
}

/// Parses `a..b` (inclusive), `a,b,c`, or a single number.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| Error::config("list", format!("`{t}` is not a non-negative integer")));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(Error::config("list", format!("empty range `{s}`")));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

/// Result of an `analyze` submetric: CSV rows or a JSON value.
pub enum Artifact {
    Csv { columns: Vec<String>, rows: Vec<Vec<String>> },
    Json(Value),
}

impl Artifact {
    fn csv(columns: &[&str], rows: Vec<Vec<String>>) -> Self {
        Artifact::Csv { columns: columns.iter().map(|c| c.to_string()).collect(), rows }
    }

    /// Serializes with the version header and config hash.
    pub fn render(&self, metric: &str, hash: &str) -> Result<String> {
        Ok(match self {
            Artifact::Csv { columns, rows } => {
                let mut s = format!("# {ANALYZE_FORMAT} v{OUTPUT_VERSION} metric={metric} config={hash}\n{}\n", columns.join(","));
                for r in rows {
                    s.push_str(&r.join(","));
                    s.push('\n');
                }
                s
            }
            Artifact::Json(v) => {
                let doc = json!({ "format": ANALYZE_FORMAT, "version": OUTPUT_VERSION, "metric": metric, "config_hash": hash, "result": v });
                serde_json::to_string_pretty(&doc)? + "\n"
            }
        })
    }
}

fn f(v: f64) -> String {
    format!("{v:.12}")
}

fn path_str(p: &[usize]) -> String {
    p.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// `analyze <metric>` on a parsed trace.
pub fn analyze(metric: &str, trace: &RoutingTrace, args: &AnalyzeArgs) -> Result<Artifact> {
    let n_layers = trace.n_layers;
    Ok(match metric {
        "entropy" => {
            let h = PathHistogram::from_trace(trace).routing_entropy()?;
            Artifact::csv(&["bits", "effective_paths", "unique_paths", "tokens"], vec![vec![f(h.bits), f(h.effective), h.unique.to_string(), trace.len().to_string()]])
        }
        "markov" => {
            let h = PathHistogram::from_trace(trace).routing_entropy()?;
            let m = analysis::markov_entropy(trace)?;
            let bound = n_layers as f64 * (trace.n_experts as f64).log2();
            Artifact::csv(&["routing_bits", "markov_bits", "max_bits"], vec![vec![f(h.bits), f(m), f(bound)]])
        }
        "mi" => {
            let rows = (1..n_layers).map(|l| Ok(vec![l.to_string(), (l + 1).to_string(), f(analysis::adjacent_mi(trace, l)?)])).collect::<Result<_>>()?;
            Artifact::csv(&["layer_lower", "layer_upper", "mi_bits"], rows)
        }
        "coverage" => {
            let hist = PathHistogram::from_trace(trace);
            let ks = args.ks.clone().unwrap_or_else(|| {
                let mut v = vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000];
                v.retain(|&k| k < hist.unique());
                v.push(hist.unique());
                v
            });
            let rows = ks.iter().map(|&k| Ok(vec![k.to_string(), f(hist.cumulative_coverage(k)?)])).collect::<Result<_>>()?;
            Artifact::csv(&["k", "coverage"], rows)
        }
        "align" => {
            let a = align_experts(trace)?;
            let agreement = if n_layers >= 2 { Some(analysis::adjacent_agreement(trace, &a)?) } else { None };
            Artifact::Json(json!({ "perms": a.perms, "adjacent_agreement": agreement }))
        }
        "consistency" => {
            let a = align_experts(trace)?;
            let ws = args.windows.clone().unwrap_or_else(|| (2..=n_layers).collect());
            let rows = ws.iter().map(|&w| Ok(vec![w.to_string(), f(analysis::path_consistency(trace, &a, w)?)])).collect::<Result<_>>()?;
            Artifact::csv(&["window", "consistency"], rows)
        }
        "engagement" => {
            let a = align_experts(trace)?;
            let xs = args.thresholds.clone().unwrap_or_else(|| (1..=n_layers).collect());
            let rows = xs.iter().map(|&x| Ok(vec![x.to_string(), f(analysis::sustained_engagement(trace, &a, x)?)])).collect::<Result<_>>()?;
            Artifact::csv(&["threshold", "fraction"], rows)
        }
        "specialize" => {
            let a = align_experts(trace)?;
            let prof = analysis::token_entropy_profile(trace, &a)?;
            Artifact::csv(&["layer", "token_entropy_bits"], prof.iter().enumerate().map(|(l, v)| vec![(l + 1).to_string(), f(*v)]).collect())
        }
        "robustness" => {
            let ck = args.checkpoint.as_ref().ok_or_else(|| Error::config("--checkpoint", "robustness needs a checkpoint"))?;
            let model = Model::<f32>::from_checkpoint(&mut Checkpoint::load(ck)?)?;
            let stream = match &args.data {
                Some(p) => read_tokens(p)?,
                None => trace.records.iter().map(|r| r.token).collect(),
            };
            let base = model.evaluate(&stream, args.rows, ForwardOptions::default())?;
            let pool = worker_pool()?;
            let results: Vec<_> = pool.install(|| {
                use rayon::prelude::*;
                (0..args.seeds as u64)
                    .into_par_iter()
                    .map(|s| analysis::perturb_against(&model, &base, args.p, &stream, args.rows, s))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| vec![r.seed.to_string(), f(r.p), f(r.base_ppl), f(r.perturbed_ppl), f(r.delta_pct), r.permuted_layers.len().to_string()])
                .collect();
            let mean = results.iter().map(|r| r.delta_pct).sum::<f64>() / results.len().max(1) as f64;
            rows.push(vec!["mean".into(), f(args.p), String::new(), String::new(), f(mean), String::new()]);
            Artifact::csv(&["seed", "p", "base_ppl", "perturbed_ppl", "delta_ppl_pct", "permuted_layers"], rows)
        }
        "categories" => {
            let rows = category_summary(trace, &Categories::bundled())
                .into_iter()
                .map(|r| vec![r.category, r.count.to_string(), f(r.fraction), path_str(&r.top_path), f(r.top_path_share)])
                .collect();
            Artifact::csv(&["category", "count", "fraction", "top_path", "top_path_share"], rows)
        }
        "report" => {
            let hist = PathHistogram::from_trace(trace);
            let rep = path_token_report(trace, &hist, &Categories::bundled(), args.paths, args.tokens);
            Artifact::Json(json!({ "mean_concentration": analysis::mean_concentration(&rep), "paths": rep }))
        }
        other => return Err(Error::config("submetric", format!("unknown submetric `{other}`; expected one of {}", SUBMETRICS.join(", ")))),
    })
}

/// `grad-check`: CSV of the gradient suite; fails with a numerical error
/// if any check exceeds the tolerance.
pub fn cmd_grad_check(eps: f64) -> Result<(String, bool)> {
    let rows = gradient_suite(eps)?;
    let mut s = format!("# moe-lab-gradcheck v{OUTPUT_VERSION} eps={eps:e}\ncheck,max_rel_error,pass\n");
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        s.push_str(&format!("{},{:e},{}\n", r.name, r.max_rel_error, r.passed()));
    }
    Ok((s, ok))
}

/// Writes `text` to `out`, or to stdout when `out` is `None`.
pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(dir: &Path) -> RunConfig {
        RunConfig {
            model: ModelConfig { n_layers: 2, n_experts: 4, top_k: 2, d_model: 16, n_heads: 2, d_ffn: 16, seq_len: 16, ..ModelConfig::default() },
            train: TrainConfig { steps: 6, batch_size: 2, warmup: 2, eval_rows: 4, ..TrainConfig::default() },
            seed: 3,
            synthetic_corpus_bytes: Some(20_000),
            out: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn missing_corpus_names_the_field() {
        let run = RunConfig::default();
        match run.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "corpus"),
            other => panic!("{other:?}"),
        }
        assert_eq!(exit_code(&run.validate().unwrap_err()), 1);
    }

    #[test]
    fn overrides_win() {
        let mut run = RunConfig::default();
        run.apply(&Overrides { strategy: Some("path".into()), block_size: Some(4), top_k: Some(1), alpha: Some(0.01), steps: Some(7), seed: Some(9), out: None })
            .unwrap();
        assert_eq!(run.model.strategy, RoutingStrategy::path_shared(4));
        assert_eq!((run.model.top_k, run.model.alpha, run.train.steps, run.seed), (1, 0.01, 7, 9));
        assert!(run.apply(&Overrides { strategy: Some("nope".into()), ..Overrides::default() }).is_err());
        run.apply(&Overrides { strategy: Some("indep".into()), ..Overrides::default() }).unwrap();
        assert_eq!(run.model.strategy, RoutingStrategy::independent());
        let bad = RunConfig { model: ModelConfig { top_k: 9, ..ModelConfig::default() }, synthetic_corpus_bytes: Some(100), ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "model.top_k"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite("loss")), 3);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list("2..5").unwrap(), [2, 3, 4, 5]);
        assert_eq!(parse_list("1,10,100").unwrap(), [1, 10, 100]);
        assert_eq!(parse_list("3").unwrap(), [3]);
        assert!(parse_list("5..2").is_err());
        assert!(parse_list("a").is_err());
    }

    #[test]
    fn train_trace_analyze_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("a"));
        let s = cmd_train(&run, None).unwrap();
        assert_eq!(s.steps, 6);
        let metrics = fs::read_to_string(run.out.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(&format!("# moe-lab-metrics v1 config={}", run.hash())));
        assert_eq!(metrics.lines().count(), 2 + 6);
        assert!(run.out.join("early.pmlb").exists());

        // same config and seed, byte-identical metrics
        let again = RunConfig { out: dir.path().join("b"), ..run.clone() };
        cmd_train(&again, None).unwrap();
        let a = metrics.lines().skip(1).collect::<Vec<_>>();
        let b_text = fs::read_to_string(again.out.join("metrics.csv")).unwrap();
        assert_eq!(a, b_text.lines().skip(1).collect::<Vec<_>>());

        let data = dir.path().join("data.txt");
        fs::write(&data, "The minister said on Monday that 3 players left.").unwrap();
        let tokens = read_tokens(&data).unwrap();
        let tpath = dir.path().join("t.jsonl");
        let ts = cmd_trace(&run.out.join("checkpoint.pmlb"), &tokens, 4, &tpath).unwrap();
        assert_eq!(ts.tokens, tokens.len());
        assert!(ts.unique_paths <= ts.tokens);
        assert_eq!(fs::read_to_string(&tpath).unwrap().lines().count(), tokens.len() + 1);

        let (trace, hash) = load_trace(&tpath).unwrap();
        for m in SUBMETRICS {
            let args = AnalyzeArgs { checkpoint: Some(run.out.join("checkpoint.pmlb")), seeds: 2, ..AnalyzeArgs::default() };
            let text = analyze(m, &trace, &args).unwrap().render(m, &hash).unwrap();
            assert!(text.contains(&hash), "{m}");
        }
        assert!(analyze("bogus", &trace, &AnalyzeArgs::default()).is_err());
        let cons = analyze("consistency", &trace, &AnalyzeArgs { windows: Some(vec![2]), ..AnalyzeArgs::default() }).unwrap();
        assert!(matches!(cons, Artifact::Csv { ref rows, .. } if rows.len() == 1));

        fs::write(&data, "").unwrap();
        assert!(read_tokens(&data).is_err());

        let restricted = RunConfig { out: dir.path().join("r"), train: TrainConfig { steps: 9, ..run.train.clone() }, ..run.clone() };
        let r = cmd_restrict(&restricted, &run.out.join("early.pmlb"), 2, None).unwrap();
        let info = r.restriction.unwrap();
        assert_eq!(info.min_compliance, 1.0);
        assert_eq!(r.steps, 9);
    }
}
