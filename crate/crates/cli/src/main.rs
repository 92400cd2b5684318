//! `fairadapt` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime or
//! numeric error.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairadapt::data::{synth_corpus, write_corpus, Corpus, Domain, EmotionCategory, SynthSpec};
use fairadapt::evalreport::{evaluate, export_embeddings, gender_probe, render_table};
use fairadapt::experiment::{load_records, run_matrix, summarize, write_summary, ExperimentConfig};
use fairadapt::metrics::build_report;
use fairadapt::network::CfaModel;
use fairadapt::optim::DecayMode;
use fairadapt::selftest::{self, SelftestOptions};
use fairadapt::train::Mode;
use fairadapt::{Error, Result};

const SEED_ENV: &str = "FAIRADAPT_SEED";

#[derive(Parser, Debug)]
#[command(name = "fairadapt", version, about = "Fairness-aware cross-corpus classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a source and a target corpus from a SynthSpec file.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every (mode, emotion, seed) cell of the matrix.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        emotion: Vec<String>,
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        emotion: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit linear gender probes on frozen embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write embeddings of both corpora to CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate trained cells into summary.json and table.txt.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Baseline and candidate mode; repeatable.
        #[arg(long, num_args = 2, value_names = ["BASELINE", "CANDIDATE"], action = clap::ArgAction::Append)]
        compare: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in gradient, metric and loss checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_grl_sign: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    decay_mode: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<Option<u64>> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

impl Common {
    /// Config file (or defaults) with flag overrides applied.
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.decay_mode {
            cfg.train.decay_mode = d.parse::<DecayMode>()?;
        }
        if let Some(t) = self.threshold {
            cfg.train.threshold = t;
        }
        if let Some(s) = seed_or_env(self.seed)? {
            cfg.matrix.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of a single-run command: flag, then env, then the first
    /// matrix seed.
    fn run_seed(&self, cfg: &ExperimentConfig) -> u64 {
        cfg.matrix.seeds[0]
    }
}

fn parse_all<T: std::str::FromStr<Err = Error>>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|v| v.parse()).collect()
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| io_err(p, e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save_corpus_with_header(corpus: &Corpus, path: &Path, echo: &serde_json::Value) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let compact = serde_json::to_string(echo)?;
    writeln!(file, "# config {compact}").map_err(|e| io_err(path, e))?;
    write_corpus(corpus, std::io::BufWriter::new(file))
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed_or_env(seed)? {
        spec.seed = s;
    }
    spec.validate()?;
    let (source, target) = synth_corpus(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let echo = serde_json::to_value(&spec)?;
    save_corpus_with_header(&source, &out.join("source.csv"), &echo)?;
    save_corpus_with_header(&target, &out.join("target.csv"), &echo)?;
    let manifest = serde_json::json!({
        "config": echo,
        "files": { "source": "source.csv", "target": "target.csv" },
        "samples": { "source": source.len(), "target": target.len() },
        "feature_dim": spec.feature_dim,
    });
    write_json(Some(&out.join("manifest.json")), &manifest)?;
    eprintln!("wrote {} and {} samples to {}", source.len(), target.len(), out.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    modes: &[String],
    emotions: &[String],
    seeds: &[u64],
    out: &Path,
    jobs: Option<usize>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if !modes.is_empty() {
        cfg.matrix.modes = parse_all::<Mode>(modes)?;
    }
    if !emotions.is_empty() {
        cfg.matrix.emotions = parse_all::<EmotionCategory>(emotions)?;
    }
    if !seeds.is_empty() {
        cfg.matrix.seeds = seeds.to_vec();
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if cfg.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    let outcomes = run_matrix(&cfg, Some(out), cfg.jobs)?;
    let runtime: f64 = outcomes.iter().map(|o| o.log.wall_time_s).sum();
    for o in &outcomes {
        let c = o.record.cell;
        eprintln!(
            "{} {} seed {}: stage1 best {}, stage2 best {:?}",
            c.mode,
            c.emotion,
            c.seed,
            o.log.stage1_best_epoch,
            o.log.stage2_best_epoch
        );
    }
    eprintln!("{} cells, {runtime:.1} s training time, results in {}", outcomes.len(), out.display());
    Ok(())
}

fn eval_emotions(flags: &[String], cfg: &ExperimentConfig) -> Result<Vec<EmotionCategory>> {
    if flags.is_empty() {
        Ok(cfg.matrix.emotions.clone())
    } else {
        parse_all(flags)
    }
}

fn cmd_eval(common: &Common, model: &Path, emotions: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.run_seed(&cfg);
    let emotions = eval_emotions(emotions, &cfg)?;
    let m = CfaModel::load(model)?;
    let (source, target) = cfg.data.corpora(seed)?;
    let mut preds = BTreeMap::new();
    for e in &emotions {
        preds.insert(*e, evaluate(&m, &[&source, &target], *e, cfg.train.threshold)?);
    }
    let report = build_report(&preds)?;
    write_json(
        out,
        &serde_json::json!({
            "model": model.display().to_string(),
            "seed": seed,
            "report": report,
            "config": cfg.echo(),
        }),
    )
}

fn cmd_probe(common: &Common, model: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.run_seed(&cfg);
    let m = CfaModel::load(model)?;
    let (source, target) = cfg.data.corpora(seed)?;
    let probe = gender_probe(&m, &[&source, &target], &cfg.probe)?;
    write_json(
        out,
        &serde_json::json!({
            "model": model.display().to_string(),
            "seed": seed,
            "probe": probe,
            "config": cfg.echo(),
        }),
    )
}

fn cmd_export(common: &Common, model: &Path, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.run_seed(&cfg);
    let m = CfaModel::load(model)?;
    let (source, target) = cfg.data.corpora(seed)?;
    let header = vec![
        format!("config {}", serde_json::to_string(&cfg.echo())?),
        format!("model {} seed {seed}", model.display()),
    ];
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    export_embeddings(&m, &[&source, &target], out, &header)?;
    eprintln!(
        "wrote {} embeddings ({} {}, {} {}) to {}",
        source.len() + target.len(),
        source.len(),
        Domain::Source.name(),
        target.len(),
        Domain::Target.name(),
        out.display()
    );
    Ok(())
}

fn cmd_report(runs: &Path, compare: &[String], out: Option<&Path>) -> Result<()> {
    let records = load_records(runs)?;
    let echo = records[0].config.clone();
    let cfg: ExperimentConfig = serde_json::from_value(echo.clone())?;
    let pairs: Vec<[Mode; 2]> = if compare.is_empty() {
        cfg.compare.clone()
    } else {
        compare
            .chunks(2)
            .map(|c| Ok([c[0].parse()?, c[1].parse()?]))
            .collect::<Result<_>>()?
    };
    let summary = summarize(&records, echo, &pairs, cfg.n_resamples, cfg.significance_seed)?;
    let dir = out.unwrap_or(runs);
    write_summary(dir, &summary)?;
    print!("{}", render_table(&summary));
    Ok(())
}

fn cmd_selftest(seed: u64, corrupt: bool) -> Result<bool> {
    let report = selftest::run(&SelftestOptions {
        seed,
        corrupt_grl_sign: corrupt,
        ..SelftestOptions::default()
    });
    print!("{}", report.render());
    if !report.passed() {
        eprintln!("failing checks: {}", report.failures().join(", "));
    }
    Ok(report.passed())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), &out, seed).map(|_| true),
        Command::Train {
            common,
            mode,
            emotion,
            seeds,
            out,
            jobs,
        } => cmd_train(&common, &mode, &emotion, &seeds, &out, jobs).map(|_| true),
        Command::Eval {
            common,
            model,
            emotion,
            out,
        } => cmd_eval(&common, &model, &emotion, out.as_deref()).map(|_| true),
        Command::Probe { common, model, out } => {
            cmd_probe(&common, &model, out.as_deref()).map(|_| true)
        }
        Command::ExportEmbeddings { common, model, out } => {
            cmd_export(&common, &model, &out).map(|_| true)
        }
        Command::Report { runs, compare, out } => {
            cmd_report(&runs, &compare, out.as_deref()).map(|_| true)
        }
        Command::Selftest {
            seed,
            corrupt_grl_sign,
        } => cmd_selftest(seed, corrupt_grl_sign),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
