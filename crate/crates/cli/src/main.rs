use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use slidenav::archive::{slide_embedding, ArchiveIndex};
use slidenav::format::{load_features, read_patch_embeddings, read_question_embedding, read_scores_csv, save_features, write_scores_csv};
use slidenav::harness::{ablation_grid, generate, SyntheticSpec};
use slidenav::pipeline::{Navigator, PoolConstructor, ReadoutVariant, RunOptions};
use slidenav::router::KeywordTable;
use slidenav::scan::{write_field_csv, write_field_pgm};
use slidenav::search::{RelevanceMode, RelevanceSource};
use slidenav::{Category, EngineConfig, NavError, QuestionSpec};

#[derive(Parser)]
#[command(name = "slidenav", version, about = "Surprise-guided navigation over whole-slide tile features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a low-magnification feature file and export the surprise field.
    Scan(ScanArgs),
    /// Run the full pipeline and write trajectory reports.
    Run(RunArgs),
    /// Generate a synthetic slide with planted anomalies.
    Gen(GenArgs),
    /// Run the policy ablation over a range of seeds.
    Ablate(AblateArgs),
    /// Build or query a reference archive.
    #[command(subcommand)]
    Archive(ArchiveCommand),
}

/// Engine settings. A `--config` JSON file is applied first, then flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    alpha_f: Option<f64>,
    #[arg(long)]
    t_w: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long)]
    pool_floor: Option<usize>,
    #[arg(long)]
    t_per_roi: Option<usize>,
    #[arg(long)]
    v_max: Option<usize>,
    #[arg(long)]
    archive_k: Option<usize>,
    #[arg(long)]
    epsilon_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    neighborhood_scale: Option<f64>,
}

#[derive(Args)]
struct ScanArgs {
    /// Low-magnification feature file.
    features: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Per-tile surprise CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Grayscale heatmap (binary PGM).
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Surprise,
    Relevance,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReadoutArg {
    FreshLocal,
    GlobalMemory,
    Random,
    LowOnly,
}

#[derive(Args)]
struct RunArgs {
    /// Low-magnification feature file.
    #[arg(long)]
    low: PathBuf,
    /// High-magnification feature file; without it evidence falls back to low tiles.
    #[arg(long)]
    high: Option<PathBuf>,
    /// Question text. Repeat to batch questions over one shared scan.
    #[arg(long = "question", required = true)]
    questions: Vec<String>,
    /// Skip keyword routing and use this category for every question.
    #[arg(long)]
    category: Option<Category>,
    /// Keyword table replacing the bundled one.
    #[arg(long)]
    keywords: Option<PathBuf>,
    /// Scores CSV, or a patch embedding file in embeddings mode.
    #[arg(long)]
    relevance: PathBuf,
    #[arg(long, default_value = "scores")]
    relevance_mode: RelevanceMode,
    /// Question embedding file; one per `--question` in embeddings mode.
    #[arg(long = "question-embedding")]
    question_embeddings: Vec<PathBuf>,
    /// Reference archive for retrieval.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "surprise")]
    pool: PoolArg,
    #[arg(long, value_enum, default_value = "fresh-local")]
    readout: ReadoutArg,
    /// Record per-stage wall-clock times in the report.
    #[arg(long)]
    timings: bool,
    /// Output file; stdout when absent. Several questions produce a JSON array.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GenArgs {
    /// SyntheticSpec JSON; the built-in default when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand)]
enum ArchiveCommand {
    /// Add a slide (mean-pooled features) to an index, creating it if needed.
    Add {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "")]
        summary: String,
        /// Case id; the feature file stem when absent.
        #[arg(long)]
        id: Option<String>,
    },
    /// Nearest cases to a slide.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Keep a case whose id equals the query slide id.
        #[arg(long)]
        include_self: bool,
    },
}

type CliResult<T> = Result<T, NavError>;

impl ConfigArgs {
    /// Resolves the config. Unless `d` is set explicitly it follows the
    /// stream width, and `hidden` then follows `d`.
    fn resolve(&self, stream_d: Option<usize>) -> CliResult<EngineConfig> {
        let file: Value = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => json!({}),
        };
        let mut cfg: EngineConfig = serde_json::from_value(file.clone())?;
        let has = |key: &str| file.get(key).is_some();
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        apply!(d, hidden, lr, clip, alpha_f, t_w, lambda, huber_delta, alpha, k0, r_max, pool_floor, t_per_roi, v_max, archive_k, epsilon_norm, seed, rounds, neighborhood_scale);
        if let Some(d) = stream_d {
            if self.d.is_none() && !has("d") {
                cfg.d = d;
                if self.hidden.is_none() && !has("hidden") {
                    cfg.hidden = d;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn scan(args: ScanArgs) -> CliResult<()> {
    let low = load_features(&args.features)?;
    let cfg = args.cfg.resolve(Some(low.d))?;
    let field = Navigator::new(cfg).scan(&low)?;
    if let Some(p) = &args.csv {
        write_field_csv(&field, create(p)?)?;
    }
    if let Some(p) = &args.pgm {
        write_field_pgm(&field, create(p)?)?;
    }
    let stats = field.memory_final.summary_stats()?;
    let summary = json!({
        "slide_id": low.slide_id,
        "tiles": field.len(),
        "threshold": field.threshold,
        "threshold_degenerate": field.degenerate,
        "summary": stats,
        "memory_digest": field.memory_final.digest(),
    });
    write_output(None, &serde_json::to_string_pretty(&summary)?)
}

fn relevance_sources(args: &RunArgs) -> CliResult<Vec<RelevanceSource>> {
    match args.relevance_mode {
        RelevanceMode::Scores => {
            let scores = read_scores_csv(File::open(&args.relevance)?)?;
            Ok(vec![RelevanceSource::from_scores(scores); args.questions.len()])
        }
        RelevanceMode::Embeddings => {
            if args.question_embeddings.len() != args.questions.len() {
                return Err(NavError::InvalidArgument(format!(
                    "embeddings mode needs one --question-embedding per --question ({} vs {})",
                    args.question_embeddings.len(),
                    args.questions.len()
                )));
            }
            let patches = read_patch_embeddings(File::open(&args.relevance)?)?;
            args.question_embeddings
                .iter()
                .map(|p| Ok(RelevanceSource::from_embeddings(read_question_embedding(File::open(p)?)?, patches.clone())))
                .collect()
        }
    }
}

fn run(args: RunArgs) -> CliResult<()> {
    let low = load_features(&args.low)?;
    let high = args.high.as_ref().map(load_features).transpose()?;
    let cfg = args.cfg.resolve(Some(low.d))?;
    let keywords = match &args.keywords {
        Some(p) => KeywordTable::load(p)?,
        None => KeywordTable::default(),
    };
    let archive = args.archive.as_ref().map(ArchiveIndex::load).transpose()?;
    let sources = relevance_sources(&args)?;
    let options = RunOptions {
        pool: match args.pool {
            PoolArg::Surprise => PoolConstructor::Surprise,
            PoolArg::Relevance => PoolConstructor::Relevance,
            PoolArg::Random => PoolConstructor::Random,
        },
        readout: match args.readout {
            ReadoutArg::FreshLocal => ReadoutVariant::FreshLocal,
            ReadoutArg::GlobalMemory => ReadoutVariant::GlobalMemory,
            ReadoutArg::Random => ReadoutVariant::Random,
            ReadoutArg::LowOnly => ReadoutVariant::LowOnly,
        },
        timings: args.timings,
    };
    let nav = Navigator::new(cfg).with_keywords(keywords).with_options(options);

    // The scan is question independent: one field serves every question.
    let field = nav.scan(&low)?;
    let mut reports = Vec::with_capacity(args.questions.len());
    for (text, source) in args.questions.iter().zip(&sources) {
        let mut question = QuestionSpec::new(text.clone());
        if let Some(c) = args.category {
            question = question.with_category(c);
        }
        reports.push(nav.run_with_field(&field, &low, high.as_ref(), &question, source, archive.as_ref())?);
    }
    let text = if reports.len() == 1 {
        reports[0].to_json()?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    write_output(args.out.as_deref(), &text)
}

fn load_spec(path: Option<&Path>) -> CliResult<SyntheticSpec> {
    match path {
        Some(p) => SyntheticSpec::from_json_file(p),
        None => Ok(SyntheticSpec::default()),
    }
}

fn gen(args: GenArgs) -> CliResult<()> {
    let mut spec = load_spec(args.spec.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let slide = generate(&spec)?;
    let id = &slide.low.slide_id;
    let low_dir = args.out_dir.join("low");
    let high_dir = args.out_dir.join("high");
    std::fs::create_dir_all(&low_dir)?;
    std::fs::create_dir_all(&high_dir)?;
    let low_path = low_dir.join(format!("{id}.pnav"));
    let high_path = high_dir.join(format!("{id}.pnav"));
    let scores_path = args.out_dir.join(format!("{id}.scores.csv"));
    let truth_path = args.out_dir.join(format!("{id}.truth.json"));
    save_features(&slide.low, &low_path)?;
    save_features(&slide.high, &high_path)?;
    if let Some(scores) = &slide.relevance.scores {
        write_scores_csv(scores, create(&scores_path)?)?;
    }
    std::fs::write(&truth_path, serde_json::to_string_pretty(&slide.truth)?)?;
    let summary = json!({
        "slide_id": id,
        "question": slide.question,
        "low": low_path,
        "high": high_path,
        "scores": scores_path,
        "truth": truth_path,
        "anomaly_fraction": slide.truth.anomaly_fraction,
    });
    write_output(None, &serde_json::to_string_pretty(&summary)?)
}

fn ablate(args: AblateArgs) -> CliResult<bool> {
    let spec = load_spec(args.spec.as_deref())?;
    let cfg = args.cfg.resolve(Some(spec.d))?;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let table = ablation_grid(&spec, &cfg, &seeds)?;
    match &args.csv {
        Some(p) => table.write_csv(create(p)?)?,
        None => table.write_csv(std::io::stdout().lock())?,
    }
    let check = &table.check;
    if !check.applicable {
        eprintln!("ordering check skipped: spec has no anomalies");
        return Ok(true);
    }
    for c in &check.comparisons {
        eprintln!(
            "{} > {}: gap {:+.4}, wins {} losses {} ties {}, p = {:.4}",
            c.better, c.worse, c.mean_gap, c.wins, c.losses, c.ties, c.p_value
        );
    }
    let verdict = if check.significant { "PASS" } else { "FAIL" };
    eprintln!("ordering {verdict} (directional: {})", check.passed);
    Ok(check.significant)
}

fn archive(cmd: ArchiveCommand) -> CliResult<()> {
    match cmd {
        ArchiveCommand::Add { index, features, summary, id } => {
            let stream = load_features(&features)?;
            let emb = slide_embedding(&stream)?;
            let mut idx = if index.exists() { ArchiveIndex::load(&index)? } else { ArchiveIndex::new(stream.d)? };
            let id = id.unwrap_or_else(|| stream.slide_id.clone());
            idx.add_case(&id, &emb, &summary)?;
            idx.save(&index)?;
            write_output(None, &json!({ "added": id, "cases": idx.len() }).to_string())
        }
        ArchiveCommand::Query { index, features, k, include_self } => {
            let idx = ArchiveIndex::load(&index)?;
            let stream = load_features(&features)?;
            let exclude = (!include_self).then_some(stream.slide_id.as_str());
            let hits = idx.retrieve(&slide_embedding(&stream)?, k, exclude)?;
            let rows: Vec<Value> = hits
                .into_iter()
                .map(|(id, sim)| {
                    let summary = idx.get(&id).map(|c| c.summary_text.as_str()).unwrap_or_default();
                    json!({ "slide_id": id, "similarity": sim, "summary_text": summary })
                })
                .collect();
            write_output(None, &serde_json::to_string_pretty(&rows)?)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Scan(a) => scan(a).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Ablate(a) => ablate(a),
        Command::Archive(c) => archive(c).map(|_| true),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
