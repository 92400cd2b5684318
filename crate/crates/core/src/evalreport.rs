//! Cross-test evaluation, the linear gender probe on frozen embeddings,
//! embedding export, seed-paired significance and the multi-seed summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Corpus, Domain, EmotionCategory, Gender, Split};
use crate::error::{Error, Result};
use crate::losses::bce;
use crate::metrics::{average_reports, FairnessReport, GroupedPredictions, Prediction};
use crate::network::CfaModel;
use crate::numcore::{Matrix, Tape};
use crate::optim::{AdamConfig, AdamState};
use crate::train::{predict, Mode};
use crate::util::derive_seed;

/// Test-split predictions of the emotion head on each given corpus. Gender is
/// attached for grouping only; the model never sees it.
pub fn evaluate(
    model: &CfaModel,
    corpora: &[&Corpus],
    task: EmotionCategory,
    threshold: f64,
) -> Result<GroupedPredictions> {
    let mut records = Vec::new();
    for corpus in corpora {
        let idx = corpus.split_indices(Split::Test);
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "{} test split is empty",
                corpus.domain().name()
            )));
        }
        let predicted = predict(model, &corpus.features(&idx), threshold)?;
        records.extend(idx.iter().zip(predicted).map(|(&i, predicted)| {
            let s = &corpus.samples()[i];
            Prediction {
                predicted,
                label: s.label(task) == 1.0,
                gender: s.gender,
                corpus: s.corpus,
            }
        }));
    }
    Ok(GroupedPredictions::new(records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Z-score embeddings with train-split statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 64,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusProbe {
    pub corpus: Domain,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub corpora: Vec<CorpusProbe>,
    pub config: ProbeConfig,
}

impl ProbeResult {
    pub fn accuracy(&self, corpus: Domain) -> Option<f64> {
        self.corpora
            .iter()
            .find(|c| c.corpus == corpus)
            .map(|c| c.accuracy)
    }
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in sd.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    (mean, sd)
}

fn standardized(x: &Matrix, mean: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols();
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = (*v - mean[k % d]) / sd[k % d];
    }
    out
}

/// Fits a logistic classifier (one linear unit + sigmoid) to predict gender
/// from rows of `train_x`, and returns its accuracy on `test_x`.
pub fn linear_probe_accuracy(
    train_x: &Matrix,
    train_g: &[Gender],
    test_x: &Matrix,
    test_g: &[Gender],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let has_both = |g: &[Gender]| g.contains(&Gender::Male) && g.contains(&Gender::Female);
    if !has_both(train_g) || test_g.is_empty() {
        return Err(Error::UndefinedMetric(
            "gender probe needs both genders in the train split and a nonempty test split".into(),
        ));
    }
    if train_x.rows() != train_g.len() || test_x.rows() != test_g.len() {
        return Err(Error::Shape {
            op: "linear_probe",
            left: train_x.shape(),
            right: (train_g.len(), 1),
        });
    }
    let (train_x, test_x) = if cfg.standardize {
        let (mean, sd) = column_stats(train_x);
        (
            standardized(train_x, &mean, &sd),
            standardized(test_x, &mean, &sd),
        )
    } else {
        (train_x.clone(), test_x.clone())
    };
    let d = train_x.cols();
    let mut weight = Matrix::zeros(d, 1);
    let mut bias = Matrix::zeros(1, 1);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let all: Vec<usize> = (0..train_x.rows()).collect();
    let y: Vec<f64> = train_g.iter().map(|g| g.label()).collect();
    for epoch in 1..=cfg.epochs {
        for batch in shuffled_batches(&all, cfg.batch_size, cfg.seed, epoch)? {
            let mut tape = Tape::new();
            let w = tape.leaf(weight.clone());
            let b = tape.leaf(bias.clone());
            let x = tape.leaf(train_x.select_rows(&batch)?);
            let h = tape.matmul(x, w)?;
            let h = tape.add_bias(h, b)?;
            let p = tape.sigmoid(h);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let loss = bce(&mut tape, p, &yb, None)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut [&mut weight, &mut bias], &[grads.wrt(w), grads.wrt(b)])?;
        }
    }
    let logits = test_x.matmul(&weight)?;
    let b = bias.item()?;
    let correct = logits
        .as_slice()
        .iter()
        .zip(test_g)
        .filter(|(&l, g)| (l + b >= 0.0) == (**g == Gender::Female))
        .count();
    Ok(correct as f64 / test_g.len() as f64)
}

/// Gender-detection accuracy of a fresh linear probe on frozen embeddings,
/// trained on each corpus's train split and scored on its test split.
pub fn gender_probe(model: &CfaModel, corpora: &[&Corpus], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut out = Vec::new();
    for corpus in corpora {
        let train = corpus.split_indices(Split::Train);
        let test = corpus.split_indices(Split::Test);
        let zt = model.embed(&corpus.features(&train))?;
        let ze = model.embed(&corpus.features(&test))?;
        let probe_cfg = ProbeConfig {
            seed: derive_seed(cfg.seed, corpus.domain() as u64),
            ..cfg.clone()
        };
        let accuracy = linear_probe_accuracy(
            &zt,
            &corpus.genders(&train),
            &ze,
            &corpus.genders(&test),
            &probe_cfg,
        )
        .map_err(|e| match e {
            Error::UndefinedMetric(m) => {
                Error::UndefinedMetric(format!("{} corpus: {m}", corpus.domain().name()))
            }
            other => other,
        })?;
        out.push(CorpusProbe {
            corpus: corpus.domain(),
            accuracy,
            n_train: train.len(),
            n_test: test.len(),
        });
    }
    Ok(ProbeResult {
        corpora: out,
        config: cfg.clone(),
    })
}

/// Writes `id,corpus,gender,emotion,z0..` for every sample of each corpus.
/// `header` lines are emitted first as `#` comments.
pub fn export_embeddings(
    model: &CfaModel,
    corpora: &[&Corpus],
    path: &Path,
    header: &[String],
) -> Result<()> {
    let mut text = String::new();
    for h in header {
        for line in h.lines() {
            let _ = writeln!(text, "# {line}");
        }
    }
    text.push_str("id,corpus,gender,emotion");
    for k in 0..model.spec().embedding_dim() {
        let _ = write!(text, ",z{k}");
    }
    text.push('\n');
    for corpus in corpora {
        let all: Vec<usize> = (0..corpus.len()).collect();
        let z = model.embed(&corpus.features(&all))?;
        for (r, s) in corpus.samples().iter().enumerate() {
            let _ = write!(
                text,
                "{},{},{},{}",
                s.id,
                s.corpus.name(),
                s.gender.token(),
                s.emotion.name()
            );
            for v in z.row(r) {
                // Shortest round-trip representation.
                let _ = write!(text, ",{v:?}");
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row of an exported embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub corpus: Domain,
    pub gender: Gender,
    pub emotion: EmotionCategory,
    pub z: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let perr = |message: String| Error::Parse { row, message };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let z = (4..rec.len())
            .map(|k| {
                get(k)
                    .parse::<f64>()
                    .map_err(|_| perr(format!("bad embedding value {:?}", get(k))))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRow {
            id: get(0).to_string(),
            corpus: get(1).parse().map_err(|e: Error| perr(e.to_string()))?,
            gender: get(2).parse().map_err(|e: Error| perr(e.to_string()))?,
            emotion: get(3).parse().map_err(|e: Error| perr(e.to_string()))?,
            z,
        });
    }
    Ok(out)
}

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Two-sided paired sign-flip permutation test on `|a_i| − |b_i|`.
///
/// The statistic is the absolute mean difference. All `2^n` sign vectors are
/// enumerated when that count is at most `n_resamples`; otherwise
/// `n_resamples` random flips are drawn and `p = (1 + hits) / (1 + n)`.
pub fn significance(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired test needs equal seed counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::Contract(format!(
            "paired test needs at least 5 seeds, got {}",
            a.len()
        )));
    }
    if n_resamples == 0 {
        return Err(Error::Config("n_resamples must be positive".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.abs() - y.abs()).collect();
    let n = d.len();
    let stat = |signs: &mut dyn FnMut(usize) -> bool| {
        let s: f64 = d
            .iter()
            .enumerate()
            .map(|(i, v)| if signs(i) { -v } else { *v })
            .sum();
        (s / n as f64).abs()
    };
    let observed = stat(&mut |_| false);
    let tol = 1e-12 * (1.0 + observed);
    if n < 64 && (1u64 << n) <= n_resamples as u64 {
        let total = 1u64 << n;
        let hits = (0..total)
            .filter(|&mask| stat(&mut |i| mask >> i & 1 == 1) >= observed - tol)
            .count();
        return Ok(hits as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_resamples {
        let flips: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if stat(&mut |i| flips[i]) >= observed - tol {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_resamples) as f64)
}

/// Significance mark: `**` for p < 0.05, `*` for p < 0.1.
pub fn mark(p: f64) -> &'static str {
    if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSignificance {
    pub emotion: EmotionCategory,
    pub corpus: Domain,
    pub p_delta_sp: f64,
    pub p_delta_eo: f64,
}

/// Per-cell p-values for the fairness gaps of two modes over paired seeds.
pub fn significance_reports(
    reports_a: &[FairnessReport],
    reports_b: &[FairnessReport],
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<CellSignificance>> {
    if reports_a.len() != reports_b.len() {
        return Err(Error::Contract("mismatched seed sets".into()));
    }
    let first = reports_a
        .first()
        .ok_or_else(|| Error::Contract("no reports to compare".into()))?;
    let mut out = Vec::new();
    for cell in &first.cells {
        let pick = |rs: &[FairnessReport], f: fn(&crate::metrics::CellReport) -> f64| {
            rs.iter()
                .map(|r| {
                    r.cell(cell.emotion, cell.corpus).map(f).ok_or_else(|| {
                        Error::Contract(format!(
                            "report lacks cell {} / {}",
                            cell.emotion.name(),
                            cell.corpus.name()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        };
        let sp_a = pick(reports_a, |c| c.delta_sp_signed)?;
        let sp_b = pick(reports_b, |c| c.delta_sp_signed)?;
        let eo_a = pick(reports_a, |c| c.delta_eo_signed)?;
        let eo_b = pick(reports_b, |c| c.delta_eo_signed)?;
        out.push(CellSignificance {
            emotion: cell.emotion,
            corpus: cell.corpus,
            p_delta_sp: significance(&sp_a, &sp_b, n_resamples, seed)?,
            p_delta_eo: significance(&eo_a, &eo_b, n_resamples, seed)?,
        });
    }
    Ok(out)
}

/// Results of one mode over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub average: FairnessReport,
    pub per_seed: Vec<FairnessReport>,
    #[serde(default)]
    pub probes: BTreeMap<String, Vec<ProbeResult>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Mode,
    pub candidate: Mode,
    pub test: String,
    pub n_resamples: usize,
    pub seed: u64,
    pub cells: Vec<CellSignificance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: serde_json::Value,
    pub modes: Vec<ModeSummary>,
    pub comparisons: Vec<Comparison>,
}

impl ModeSummary {
    pub fn new(mode: Mode, seeds: Vec<u64>, per_seed: Vec<FairnessReport>) -> Result<Self> {
        if seeds.len() != per_seed.len() {
            return Err(Error::Contract("one report per seed required".into()));
        }
        Ok(Self {
            mode,
            seeds,
            average: average_reports(&per_seed)?,
            per_seed,
            probes: BTreeMap::new(),
        })
    }
}

impl ExperimentSummary {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Adds a seed-paired comparison of `candidate` against `baseline`.
    pub fn compare(
        &mut self,
        baseline: Mode,
        candidate: Mode,
        n_resamples: usize,
        seed: u64,
    ) -> Result<()> {
        let get = |m: Mode| {
            self.mode(m)
                .ok_or_else(|| Error::Config(format!("mode {m} has no runs to compare")))
        };
        let (a, b) = (get(baseline)?, get(candidate)?);
        if a.seeds != b.seeds {
            return Err(Error::Contract(format!(
                "mismatched seed sets for {baseline} and {candidate}"
            )));
        }
        let cells = significance_reports(&a.per_seed, &b.per_seed, n_resamples, seed)?;
        self.comparisons.push(Comparison {
            baseline,
            candidate,
            test: "paired sign-flip permutation over seeds, two-sided, |delta| differences".into(),
            n_resamples,
            seed,
            cells,
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Plain-text table: per (mode, corpus) row, gender UAR (M, F) for every
/// emotion, then |ΔSP| and |ΔEO| for every emotion. Marks come from the
/// comparisons whose candidate is the row's mode.
pub fn render_table(summary: &ExperimentSummary) -> String {
    let mut emotions: Vec<EmotionCategory> = summary
        .modes
        .iter()
        .flat_map(|m| m.average.cells.iter().map(|c| c.emotion))
        .collect();
    emotions.sort();
    emotions.dedup();

    let mut header = vec!["mode".to_string(), "corpus".to_string()];
    for e in &emotions {
        header.push(format!("{}:M", e.name()));
        header.push(format!("{}:F", e.name()));
    }
    for e in &emotions {
        header.push(format!("{}:dSP", e.name()));
        header.push(format!("{}:dEO", e.name()));
    }

    let mut rows = vec![header];
    for m in &summary.modes {
        for corpus in [Domain::Source, Domain::Target] {
            if !m.average.cells.iter().any(|c| c.corpus == corpus) {
                continue;
            }
            let mut row = vec![m.mode.name().to_string(), corpus.name().to_string()];
            let cell = |e: EmotionCategory| m.average.cell(e, corpus);
            for &e in &emotions {
                match cell(e) {
                    Some(c) => {
                        row.push(format!("{:.3}", c.uar_male));
                        row.push(format!("{:.3}", c.uar_female));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            for &e in &emotions {
                let sig = summary
                    .comparisons
                    .iter()
                    .filter(|cmp| cmp.candidate == m.mode)
                    .flat_map(|cmp| cmp.cells.iter())
                    .find(|s| s.emotion == e && s.corpus == corpus);
                match cell(e) {
                    Some(c) => {
                        let (ms, me) = sig.map_or(("", ""), |s| (mark(s.p_delta_sp), mark(s.p_delta_eo)));
                        row.push(format!("{:.3}{ms}", c.delta_sp_abs));
                        row.push(format!("{:.3}{me}", c.delta_eo_abs));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            rows.push(row);
        }
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if let Ok(cfg) = serde_json::to_string(&summary.config) {
        let _ = writeln!(out, "# config: {cfg}");
    }
    for cmp in &summary.comparisons {
        let _ = writeln!(
            out,
            "# marks on {} vs {}: * p < 0.1, ** p < 0.05 ({})",
            cmp.candidate, cmp.baseline, cmp.test
        );
    }
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (s, w))| if k < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significance_examples() {
        let a = [0.3, 0.2, 0.25, 0.4, 0.1];
        assert_eq!(significance(&a, &a, DEFAULT_RESAMPLES, 1).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|v| v - 0.05).collect();
        assert_eq!(significance(&a, &b, DEFAULT_RESAMPLES, 1).unwrap(), 2.0 / 32.0);
        assert!(significance(&a, &a[..4], DEFAULT_RESAMPLES, 1).is_err());
        assert!(significance(&a[..4], &a[..4], DEFAULT_RESAMPLES, 1).is_err());
    }

    #[test]
    fn monte_carlo_branch_is_stable() {
        let a: Vec<f64> = (0..20).map(|i| 0.1 + i as f64 * 0.01).collect();
        let b: Vec<f64> = (0..20).map(|i| 0.1 + (i % 3) as f64 * 0.01).collect();
        let p1 = significance(&a, &b, 1000, 9).unwrap();
        assert_eq!(p1, significance(&a, &b, 1000, 9).unwrap());
        assert!(p1 > 0.0 && p1 <= 1.0);
        assert_eq!(significance(&a, &a, 1000, 9).unwrap(), 1.0);
    }

    #[test]
    fn marks() {
        assert_eq!(mark(0.04), "**");
        assert_eq!(mark(0.0625), "*");
        assert_eq!(mark(0.5), "");
    }

    #[test]
    fn noise_probe_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = |n: usize| {
            let x = Matrix::new(n, 8, (0..n * 8).map(|_| rng.random::<f64>() - 0.5).collect())
                .unwrap();
            let g: Vec<Gender> = (0..n)
                .map(|i| if i % 2 == 0 { Gender::Male } else { Gender::Female })
                .collect();
            (x, g)
        };
        let (xt, gt) = draw(2000);
        let (xe, ge) = draw(2000);
        let acc = linear_probe_accuracy(&xt, &gt, &xe, &ge, &ProbeConfig::default()).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
        let single = vec![Gender::Male; 2000];
        assert!(matches!(
            linear_probe_accuracy(&xt, &single, &xe, &ge, &ProbeConfig::default()),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
