//! `damper`: command-line front end for the privacy rewriting pipeline.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, config or
//! input files), 2 stage failure.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use damper_core::chunker::{segment_ngrams, Chunk};
use damper_core::corpus::{load_corpus, save_corpus, Corpus};
use damper_core::dp_sampler::{audit_ratio, calibrate, dp_rewrite, save_rewrites, PrivacyBudget};
use damper_core::encoder::{load_encoder, save_encoder, train_encoder, EncoderParams};
use damper_core::localizer::detect;
use damper_core::pipeline::{
    build_vocab, default_n_sp_max, evaluate, prepare_corpora, reference_examples, run, save_report, ChunkerVariant,
    ModelBundle, PipelineConfig, PipelineError,
};
use damper_core::policy::{load_policy, pretrain_reference, save_policy, train_dpo, DpoExample, PolicyParams};
use damper_core::preference::{build_preferences, load_preferences, save_preferences, PreferencePair};
use damper_core::prototypes::{build_prototypes, load_prototypes, save_prototypes, ClusterMethod, PrototypeMap};
use damper_core::{artifact, Encoder, Policy, PrototypeMap as Protos};

#[derive(Debug, Parser)]
#[command(name = "damper", version, about = "Domain-aware private span rewriting")]
struct Cli {
    /// Pipeline config (TOML); missing keys fall back to the bundled defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic annotated corpus (JSONL).
    GenCorpus(GenCorpusArgs),
    /// Segment text into candidate chunks.
    Chunk(ChunkArgs),
    /// Train the contrastive span encoder.
    TrainEncoder(CorpusArg),
    /// Cluster training embeddings into per-domain prototypes.
    BuildPrototypes(BuildPrototypesArgs),
    /// Pretrain the reference replacement policy.
    PretrainRef(CorpusArg),
    /// Score sampled candidates and write preference pairs.
    BuildPreferences(BuildPreferencesArgs),
    /// Align the policy to preference pairs.
    TrainDpo(TrainDpoArgs),
    /// Localize private chunks in every document of a corpus.
    Detect(DetectArgs),
    /// Localize and rewrite every document of a corpus under the DP budget.
    Rewrite(RewriteArgs),
    /// Evaluate a trained bundle on a test corpus and emit the JSON report.
    Evaluate(EvaluateArgs),
    /// Empirically check the exponential-mechanism probability ratio bound.
    AuditDp(AuditArgs),
    /// Run every stage (corpus, training, evaluation) into the --out directory.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    /// Also write the train/test split next to the output file.
    #[arg(long)]
    split: bool,
}

#[derive(Debug, Args)]
struct ChunkArgs {
    /// Text file; each non-empty line is segmented separately.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "rule")]
    variant: String,
    /// Longest n-gram for the `ngram` variant.
    #[arg(long, default_value_t = 4)]
    max_len: usize,
}

#[derive(Debug, Args)]
struct CorpusArg {
    /// Annotated training corpus (JSONL).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct BuildPrototypesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// finch | kmeans | mean (default from config).
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct BuildPreferencesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    protos: PathBuf,
    /// Reference policy that proposes candidates.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    /// Candidates sampled per document.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainDpoArgs {
    /// Preference pairs (JSONL).
    #[arg(long)]
    prefs: PathBuf,
    /// Reference policy (also the starting point).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    protos: PathBuf,
    /// Corpus to scan (JSONL); domain labels and spans are ignored.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct RewriteArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    protos: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    eps_text: Option<f64>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long = "nsp-max")]
    nsp_max: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory written by `damper train` (or one holding all stage artifacts).
    #[arg(long)]
    bundle: PathBuf,
    /// Test corpus (default: the bundle's held-out split).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Training corpus, needed only for the alpha sweep.
    #[arg(long)]
    train: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long, default_value_t = 5.0)]
    r1: f64,
    #[arg(long, default_value_t = 20.0)]
    r2: f64,
    #[arg(long, default_value_t = 10.4)]
    tau2: f64,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Skip evaluation; only train and persist artifacts.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Stage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Stage(m) => write!(f, "stage failed: {m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Stage(e.to_string())
        }
    }
}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn failed(stage: &str) -> impl Fn(String) -> CliError + '_ {
    move |m| CliError::Stage(format!("{stage}: {m}"))
}

type CliResult = Result<(), CliError>;

struct Ctx {
    cfg: PipelineConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, what: &str) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| invalid(format!("--out <path> is required for {what}")))
    }

    /// Write a JSON document to --out, or stdout when absent.
    fn emit(&self, v: &Value) -> CliResult {
        match &self.out {
            Some(p) => artifact::write_json(p, v).map_err(|e| CliError::Stage(e.to_string())),
            None => {
                let s = serde_json::to_string_pretty(v).expect("json serializes");
                writeln!(std::io::stdout(), "{s}").map_err(|e| CliError::Stage(e.to_string()))
            }
        }
    }

    /// Write JSONL lines to --out, or stdout when absent.
    fn emit_lines(&self, lines: &[Value]) -> CliResult {
        match &self.out {
            Some(p) => artifact::write_jsonl(p, lines).map_err(|e| CliError::Stage(e.to_string())),
            None => {
                let mut w = std::io::stdout().lock();
                for l in lines {
                    writeln!(w, "{l}").map_err(|e| CliError::Stage(e.to_string()))?;
                }
                Ok(())
            }
        }
    }
}

fn corpus(path: &Path) -> Result<Corpus, CliError> {
    load_corpus(path).map_err(invalid)
}

fn encoder(path: &Path) -> Result<Encoder, CliError> {
    load_encoder(path).map_err(invalid)
}

fn protos(path: &Path) -> Result<Protos, CliError> {
    load_prototypes(path).map_err(invalid)
}

fn policy(path: &Path) -> Result<Policy, CliError> {
    load_policy(path).map_err(invalid)
}

fn gen_corpus(ctx: &Ctx, args: &GenCorpusArgs) -> CliResult {
    let out = ctx.out("gen-corpus")?;
    let full = damper_core::corpus::synth_corpus(&ctx.cfg.synth_spec()).map_err(invalid)?;
    save_corpus(&full, out).map_err(|e| CliError::Stage(e.to_string()))?;
    if args.split {
        let (train, test) = prepare_corpora(&ctx.cfg)?;
        let stem = out.with_extension("");
        save_corpus(&train, stem.with_extension("train.jsonl")).map_err(|e| CliError::Stage(e.to_string()))?;
        save_corpus(&test, stem.with_extension("test.jsonl")).map_err(|e| CliError::Stage(e.to_string()))?;
    }
    log::info!("wrote {} documents to {}", full.len(), out.display());
    Ok(())
}

fn chunk(ctx: &Ctx, args: &ChunkArgs) -> CliResult {
    let variant: ChunkerVariant = serde_json::from_value(json!(args.variant))
        .map_err(|_| invalid(format!("unknown chunker variant {:?} (rule | ngram)", args.variant)))?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| invalid(format!("{}: {e}", args.input.display())))?;
    let chunker = ctx.cfg.chunker()?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let chunks: Vec<Chunk> = match variant {
            ChunkerVariant::Rule => chunker.segment(line),
            ChunkerVariant::Ngram => segment_ngrams(line, args.max_len),
        }
        .map_err(invalid)?;
        lines.push(json!({"line": i + 1, "chunks": chunks}));
    }
    ctx.emit_lines(&lines)
}

fn train_encoder_cmd(ctx: &Ctx, args: &CorpusArg) -> CliResult {
    let out = ctx.out("train-encoder")?;
    let c = corpus(&args.corpus)?;
    let p0 = EncoderParams::<f64>::init(ctx.cfg.encoder_config()).map_err(invalid)?;
    let t = train_encoder(&c, &p0).map_err(|e| failed("encoder")(e.to_string()))?;
    log::info!("encoder loss {:.4} -> {:.4}", t.initial_loss, t.final_loss);
    save_encoder(&t.params, out).map_err(|e| failed("encoder")(e.to_string()))
}

fn build_prototypes_cmd(ctx: &Ctx, args: &BuildPrototypesArgs) -> CliResult {
    let out = ctx.out("build-prototypes")?;
    let mut opts = ctx.cfg.prototype_options();
    if let Some(m) = &args.method {
        opts.method = m.parse::<ClusterMethod>().map_err(invalid)?;
    }
    let enc = encoder(&args.model)?;
    let map: PrototypeMap<f64> =
        build_prototypes(&corpus(&args.corpus)?, &enc, &opts).map_err(|e| failed("prototypes")(e.to_string()))?;
    save_prototypes(&map, out).map_err(|e| failed("prototypes")(e.to_string()))
}

fn pretrain_ref(ctx: &Ctx, args: &CorpusArg) -> CliResult {
    let out = ctx.out("pretrain-ref")?;
    let c = corpus(&args.corpus)?;
    let pc = ctx.cfg.policy_config();
    let vocab = build_vocab(&c, &ctx.cfg.policy.extra_tokens);
    let p0 = PolicyParams::<f64>::new(vocab, pc.clone()).map_err(invalid)?;
    let examples = reference_examples(&c, ctx.cfg.policy.siblings, pc.max_len, pc.seed);
    let t = pretrain_reference(&p0, &examples).map_err(|e| failed("reference")(e.to_string()))?;
    log::info!("reference NLL {:.4} -> {:.4}", t.initial_loss, t.final_loss);
    save_policy(&t.params, out).map_err(|e| failed("reference")(e.to_string()))
}

fn build_preferences_cmd(ctx: &Ctx, args: &BuildPreferencesArgs) -> CliResult {
    let out = ctx.out("build-preferences")?;
    let mut cfg = ctx.cfg.preference_config();
    if let Some(a) = args.alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(invalid(format!("--alpha {a} outside [0, 1]")));
        }
        cfg.alpha = a;
    }
    if let Some(n) = args.n {
        if n < 2 {
            return Err(invalid("--n must be at least 2"));
        }
        cfg.candidates = n;
    }
    let (c, enc, pr, pol) = (corpus(&args.corpus)?, encoder(&args.model)?, protos(&args.protos)?, policy(&args.policy)?);
    let built = build_preferences(&c, &pol, &enc, &pr, &cfg).map_err(|e| failed("preferences")(e.to_string()))?;
    for (id, why) in &built.skipped {
        log::info!("skipped {id}: {why}");
    }
    save_preferences(&built.pairs, out).map_err(|e| failed("preferences")(e.to_string()))
}

fn train_dpo_cmd(ctx: &Ctx, args: &TrainDpoArgs) -> CliResult {
    let out = ctx.out("train-dpo")?;
    let mut cfg = ctx.cfg.dpo_config();
    if let Some(b) = args.beta {
        cfg.beta = b;
    }
    cfg.validate().map_err(invalid)?;
    let pairs: Vec<PreferencePair<f64>> = load_preferences(&args.prefs).map_err(invalid)?;
    let reference = policy(&args.reference)?;
    let examples: Vec<DpoExample> = pairs.iter().map(PreferencePair::to_dpo).collect();
    let t = train_dpo(&examples, &reference, &cfg).map_err(|e| failed("dpo")(e.to_string()))?;
    log::info!("DPO loss {:.4} -> {:.4}", t.initial_loss, t.final_loss);
    save_policy(&t.params, out).map_err(|e| failed("dpo")(e.to_string()))
}

fn detect_cmd(ctx: &Ctx, args: &DetectArgs) -> CliResult {
    let (c, enc, pr) = (corpus(&args.input)?, encoder(&args.model)?, protos(&args.protos)?);
    let chunker = ctx.cfg.chunker()?;
    let mut lines = Vec::new();
    for doc in &c.docs {
        let d = detect(&doc.text, &chunker, &enc, &pr).map_err(|e| failed("detect")(format!("{}: {e}", doc.id)))?;
        lines.push(d.to_value(&doc.id));
    }
    ctx.emit_lines(&lines)
}

fn budget_from(ctx: &Ctx, args: &RewriteArgs, default_cap: usize) -> Result<PrivacyBudget, CliError> {
    let b = &ctx.cfg.budget;
    let budget = PrivacyBudget {
        eps_text: args.eps_text.unwrap_or(b.eps_text),
        r1: args.r1.unwrap_or(b.r1),
        r2: args.r2.unwrap_or(b.r2),
        n_sp_max: args.nsp_max.or(b.n_sp_max).unwrap_or(default_cap),
        eps_hyper: if args.eps_text.is_some() { None } else { b.eps_hyper },
    };
    budget.validate().map_err(invalid)?;
    Ok(budget)
}

fn rewrite_cmd(ctx: &Ctx, args: &RewriteArgs) -> CliResult {
    let (c, enc, pr, pol) = (corpus(&args.input)?, encoder(&args.model)?, protos(&args.protos)?, policy(&args.policy)?);
    let budget = budget_from(ctx, args, default_n_sp_max(&c, pol.max_len()))?;
    let chunker = ctx.cfg.chunker()?;
    let seed = ctx.cfg.stage_seed("rewrite");
    let mut results = Vec::new();
    for doc in &c.docs {
        let d = detect(&doc.text, &chunker, &enc, &pr).map_err(|e| failed("detect")(format!("{}: {e}", doc.id)))?;
        let s = damper_core::rng::derive_seed(seed, &doc.id);
        let r = dp_rewrite(&doc.text, &d, &pol, &budget, s).map_err(|e| failed("rewrite")(format!("{}: {e}", doc.id)))?;
        results.push((doc.id.clone(), r));
    }
    match &ctx.out {
        Some(p) => save_rewrites(&results, p).map_err(|e| CliError::Stage(e.to_string())),
        None => ctx.emit_lines(&results.iter().map(|(id, r)| r.to_value(id)).collect::<Vec<_>>()),
    }
}

fn evaluate_cmd(ctx: &Ctx, args: &EvaluateArgs) -> CliResult {
    let bundle = ModelBundle::<f64>::load(&args.bundle, &ctx.cfg)?;
    let test_path = args.test.clone().unwrap_or_else(|| args.bundle.join(damper_core::pipeline::TEST_CORPUS_FILE));
    let test = corpus(&test_path)?;
    let train_path = args.train.clone().or_else(|| {
        let p = args.bundle.join(damper_core::pipeline::TRAIN_CORPUS_FILE);
        p.exists().then_some(p)
    });
    let train = train_path.as_deref().map(corpus).transpose()?;
    let report = evaluate(&bundle, train.as_ref(), &test, &ctx.cfg)?;
    match &ctx.out {
        Some(p) => Ok(save_report(&report, p)?),
        None => ctx.emit(&report.to_value()),
    }
}

fn audit_dp(ctx: &Ctx, args: &AuditArgs) -> CliResult {
    let rep = audit_ratio(args.r1, args.r2, args.tau2, args.vocab, args.trials, ctx.cfg.stage_seed("audit"))
        .map_err(invalid)?;
    ctx.emit(&json!({
        "r1": args.r1,
        "r2": args.r2,
        "tau2": args.tau2,
        "vocab": args.vocab,
        "max_log_ratio": rep.max_log_ratio,
        "bound": rep.bound,
        "corner_pairs": rep.corner_pairs,
        "random_pairs": rep.random_pairs,
        "holds": rep.holds(),
    }))?;
    if rep.holds() {
        Ok(())
    } else {
        Err(CliError::Stage(format!("ratio {} exceeds bound {}", rep.max_log_ratio, rep.bound)))
    }
}

fn train(ctx: &Ctx, args: &TrainArgs) -> CliResult {
    let out = ctx.out("train")?;
    if args.no_eval {
        let (train, test) = prepare_corpora(&ctx.cfg)?;
        std::fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
        save_corpus(&train, out.join(damper_core::pipeline::TRAIN_CORPUS_FILE)).map_err(|e| CliError::Stage(e.to_string()))?;
        save_corpus(&test, out.join(damper_core::pipeline::TEST_CORPUS_FILE)).map_err(|e| CliError::Stage(e.to_string()))?;
        let o = damper_core::pipeline::train_offline::<f64>(&train, &ctx.cfg, out)?;
        for (s, st) in o.stages {
            log::info!("{s}: {st:?}");
        }
        return Ok(());
    }
    let (outcome, report) = run::<f64>(&ctx.cfg, out)?;
    for (s, st) in outcome.stages {
        log::info!("{s}: {st:?}");
    }
    let cal = calibrate(&outcome.bundle.budget(&ctx.cfg)?).map_err(invalid)?;
    let a = &report.aggregate;
    println!(
        "documents {}  pf1 {:.4}  domain_acc {:.4}  soi {}  dfs {}  rouge_l {}  preserved {:.4}  tau2 {:.4}  eps_token {:.4}",
        a.documents,
        a.pf1,
        a.domain_accuracy,
        fmt_opt(a.soi),
        fmt_opt(a.dfs),
        fmt_opt(a.rouge_l),
        a.preserved_fraction,
        cal.tau2,
        cal.eps_token
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn dispatch(cli: Cli) -> CliResult {
    let mut cfg = PipelineConfig::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx { cfg, out: cli.out };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::Chunk(a) => chunk(&ctx, a),
        Command::TrainEncoder(a) => train_encoder_cmd(&ctx, a),
        Command::BuildPrototypes(a) => build_prototypes_cmd(&ctx, a),
        Command::PretrainRef(a) => pretrain_ref(&ctx, a),
        Command::BuildPreferences(a) => build_preferences_cmd(&ctx, a),
        Command::TrainDpo(a) => train_dpo_cmd(&ctx, a),
        Command::Detect(a) => detect_cmd(&ctx, a),
        Command::Rewrite(a) => rewrite_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::AuditDp(a) => audit_dp(&ctx, a),
        Command::Train(a) => train(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Stage(_) => 2,
            })
        }
    }
}
