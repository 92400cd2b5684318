//! Experiment matrix: one config expands into (mode, emotion, seed) cells,
//! each trained, evaluated and probed independently; results aggregate into
//! an [`ExperimentSummary`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, synth_corpus, Corpus, EmotionCategory, SynthSpec};
use crate::error::{Error, Result};
use crate::evalreport::{
    evaluate, gender_probe, ExperimentSummary, ModeSummary, ProbeConfig, ProbeResult,
    DEFAULT_RESAMPLES,
};
use crate::metrics::{build_report, FairnessReport};
use crate::network::CfaModel;
use crate::train::{train_mode_dispatch, Mode, RunLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated corpora; the run seed is added to `seed` when
    /// `vary_with_seed` is set.
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default = "default_true")]
        vary_with_seed: bool,
    },
    Files { source: PathBuf, target: PathBuf },
}

fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            spec: SynthSpec::default(),
            vary_with_seed: true,
        }
    }
}

impl DataConfig {
    /// Source and target corpora for one run seed.
    pub fn corpora(&self, seed: u64) -> Result<(Corpus, Corpus)> {
        match self {
            DataConfig::Synth {
                spec,
                vary_with_seed,
            } => {
                let mut spec = spec.clone();
                if *vary_with_seed {
                    spec.seed = spec.seed.wrapping_add(seed);
                }
                synth_corpus(&spec)
            }
            DataConfig::Files { source, target } => {
                let s = load_corpus(source)?;
                let t = load_corpus(target)?;
                if s.feature_dim() != t.feature_dim() {
                    return Err(Error::Config(format!(
                        "feature dims differ: {} in {} vs {} in {}",
                        s.feature_dim(),
                        source.display(),
                        t.feature_dim(),
                        target.display()
                    )));
                }
                Ok((s, t))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub emotions: Vec<EmotionCategory>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            emotions: EmotionCategory::ALL.to_vec(),
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub matrix: MatrixConfig,
    pub probe: ProbeConfig,
    /// `[baseline, candidate]` pairs tested for fairness differences.
    pub compare: Vec<[Mode; 2]>,
    pub n_resamples: usize,
    pub significance_seed: u64,
    /// Parallel cells; not part of the echoed config.
    #[serde(skip_serializing)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            matrix: MatrixConfig::default(),
            probe: ProbeConfig::default(),
            compare: vec![[Mode::BaselineReweigh, Mode::Cfa]],
            n_resamples: DEFAULT_RESAMPLES,
            significance_seed: 0,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative corpus paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if let DataConfig::Files { source, target } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [source, target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataConfig::Synth { spec, .. } = &self.data {
            spec.validate()?;
        }
        let m = &self.matrix;
        if m.emotions.is_empty() || m.modes.is_empty() || m.seeds.is_empty() {
            return Err(Error::Config("matrix needs at least one emotion, mode and seed".into()));
        }
        let mut seeds = m.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != m.seeds.len() {
            return Err(Error::Config("matrix seeds must be distinct".into()));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe epochs, batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    /// Cells in canonical order: mode, emotion, seed as listed.
    pub fn cells(&self) -> Vec<Cell> {
        let m = &self.matrix;
        let mut out = Vec::new();
        for &mode in &m.modes {
            for &emotion in &m.emotions {
                for &seed in &m.seeds {
                    out.push(Cell {
                        mode,
                        emotion,
                        seed,
                    });
                }
            }
        }
        out
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub emotion: EmotionCategory,
    pub seed: u64,
}

impl Cell {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.mode.name())
            .join(self.emotion.name())
            .join(format!("seed-{}", self.seed))
    }
}

/// Evaluation record of one cell, stored as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub report: FairnessReport,
    pub probe: ProbeResult,
    pub config: serde_json::Value,
}

/// A finished cell with its model and log.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub record: CellRecord,
    pub model: CfaModel,
    pub log: RunLog,
}

/// Trains, evaluates and probes one cell.
pub fn run_cell(cfg: &ExperimentConfig, cell: Cell) -> Result<CellOutcome> {
    let (source, target) = cfg.data.corpora(cell.seed)?;
    let out = train_mode_dispatch(
        &cfg.train,
        cell.mode,
        cell.emotion,
        cell.seed,
        &source,
        Some(&target),
    )?;
    let preds = evaluate(&out.model, &[&source, &target], cell.emotion, cfg.train.threshold)?;
    let report = build_report(&BTreeMap::from([(cell.emotion, preds)]))?;
    let probe = gender_probe(&out.model, &[&source, &target], &cfg.probe)?;
    Ok(CellOutcome {
        record: CellRecord {
            cell,
            report,
            probe,
            config: cfg.echo(),
        },
        model: out.model,
        log: out.log,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `model.json`, `runlog.jsonl`, `report.json` and `probe.json`.
pub fn write_cell(root: &Path, outcome: &CellOutcome) -> Result<()> {
    let dir = outcome.record.cell.dir(root);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    outcome.model.save(&dir.join("model.json"))?;
    let log_path = dir.join("runlog.jsonl");
    std::fs::write(&log_path, outcome.log.to_jsonl()?).map_err(|e| Error::io(&log_path, e))?;
    write_json(&dir.join("report.json"), &outcome.record)?;
    write_json(
        &dir.join("probe.json"),
        &serde_json::json!({
            "cell": outcome.record.cell,
            "probe": outcome.record.probe,
            "config": outcome.record.config,
        }),
    )
}

/// Runs every cell (in parallel when `jobs > 1`), writing results under
/// `out` if given. Outcomes come back in canonical cell order.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let work = |cell: &Cell| -> Result<CellOutcome> {
        let o = run_cell(cfg, *cell)?;
        if let Some(root) = out {
            write_cell(root, &o)?;
        }
        Ok(o)
    };
    if jobs <= 1 {
        return cells.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(work).collect())
}

/// Recursively collects every `report.json` under `root`, sorted by cell.
pub fn load_records(root: &Path) -> Result<Vec<CellRecord>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        paths.sort();
        for p in paths {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(root, &mut paths)?;
    let mut records = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        records.push(serde_json::from_str::<CellRecord>(&text)?);
    }
    if records.is_empty() {
        return Err(Error::Config(format!("no report.json under {}", root.display())));
    }
    records.sort_by_key(|r| r.cell);
    Ok(records)
}

/// Aggregates cell records per mode. Each seed's per-emotion reports are
/// merged; averages are taken over seeds. Comparisons run for every pair in
/// `compare` whose modes are present.
pub fn summarize(
    records: &[CellRecord],
    config: serde_json::Value,
    compare: &[[Mode; 2]],
    n_resamples: usize,
    significance_seed: u64,
) -> Result<ExperimentSummary> {
    let mut by_mode: BTreeMap<Mode, BTreeMap<u64, Vec<&CellRecord>>> = BTreeMap::new();
    for r in records {
        by_mode
            .entry(r.cell.mode)
            .or_default()
            .entry(r.cell.seed)
            .or_default()
            .push(r);
    }
    let mut modes = Vec::new();
    for (mode, seeds) in by_mode {
        let mut seed_list = Vec::new();
        let mut reports = Vec::new();
        let mut probes: BTreeMap<String, Vec<ProbeResult>> = BTreeMap::new();
        for (seed, recs) in seeds {
            seed_list.push(seed);
            reports.push(FairnessReport::merge(recs.iter().map(|r| r.report.clone()))?);
            for r in recs {
                probes
                    .entry(r.cell.emotion.name().to_string())
                    .or_default()
                    .push(r.probe.clone());
            }
        }
        let mut ms = ModeSummary::new(mode, seed_list, reports)?;
        ms.probes = probes;
        modes.push(ms);
    }
    let mut summary = ExperimentSummary {
        config,
        modes,
        comparisons: Vec::new(),
    };
    for &[baseline, candidate] in compare {
        if summary.mode(baseline).is_none() || summary.mode(candidate).is_none() {
            continue;
        }
        summary.compare(baseline, candidate, n_resamples, significance_seed)?;
    }
    Ok(summary)
}

/// Writes `summary.json` and `table.txt` into `dir`.
pub fn write_summary(dir: &Path, summary: &ExperimentSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("summary.json");
    std::fs::write(&p, summary.to_json()?).map_err(|e| Error::io(&p, e))?;
    let t = dir.join("table.txt");
    std::fs::write(&t, crate::evalreport::render_table(summary)).map_err(|e| Error::io(&t, e))
}
