//! Recognition and group-fairness metrics: UAR, statistical parity
//! difference and equal-odds difference, plus the per-task report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, EmotionCategory, Gender};
use crate::error::{Error, Result};

/// One evaluated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: bool,
    pub label: bool,
    pub gender: Gender,
    pub corpus: Domain,
}

/// Predictions for one (task, corpus) evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedPredictions {
    pub records: Vec<Prediction>,
}

/// Confusion counts for one group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, label: bool) {
        match (label, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

impl GroupedPredictions {
    pub fn new(records: Vec<Prediction>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subset belonging to one corpus.
    pub fn for_corpus(&self, corpus: Domain) -> GroupedPredictions {
        GroupedPredictions::new(
            self.records
                .iter()
                .copied()
                .filter(|r| r.corpus == corpus)
                .collect(),
        )
    }

    pub fn confusion(&self, gender: Option<Gender>) -> Confusion {
        let mut c = Confusion::default();
        for r in &self.records {
            if gender.is_none_or(|g| g == r.gender) {
                c.add(r.predicted, r.label);
            }
        }
        c
    }

    /// Copy with every gender label flipped.
    pub fn gender_swapped(&self) -> GroupedPredictions {
        GroupedPredictions::new(
            self.records
                .iter()
                .map(|r| Prediction {
                    gender: r.gender.other(),
                    ..*r
                })
                .collect(),
        )
    }
}

fn group_name(g: Option<Gender>) -> &'static str {
    match g {
        None => "all",
        Some(Gender::Male) => "male",
        Some(Gender::Female) => "female",
    }
}

/// Unweighted average recall, optionally restricted to one gender.
pub fn uar(preds: &GroupedPredictions, filter: Option<Gender>) -> Result<f64> {
    let c = preds.confusion(filter);
    let who = group_name(filter);
    if c.positives() == 0 {
        return Err(Error::UndefinedMetric(format!(
            "uar: positive class is empty for group {who}"
        )));
    }
    if c.negatives() == 0 {
        return Err(Error::UndefinedMetric(format!(
            "uar: negative class is empty for group {who}"
        )));
    }
    Ok(0.5 * (ratio(c.tp, c.positives()) + ratio(c.tn, c.negatives())))
}

/// `P(ŷ=1 | male) − P(ŷ=1 | female)`.
pub fn delta_sp(preds: &GroupedPredictions) -> Result<f64> {
    let mut rates = [0.0; 2];
    for (slot, g) in rates.iter_mut().zip([Gender::Male, Gender::Female]) {
        let c = preds.confusion(Some(g));
        if c.total() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "delta_sp: no {} samples",
                group_name(Some(g))
            )));
        }
        *slot = ratio(c.tp + c.fp, c.total());
    }
    Ok(rates[0] - rates[1])
}

/// Per-gender (TPR, FPR), erroring on empty group-class cells.
fn rates(preds: &GroupedPredictions, metric: &str) -> Result<[(f64, f64); 2]> {
    let mut out = [(0.0, 0.0); 2];
    for (slot, g) in out.iter_mut().zip([Gender::Male, Gender::Female]) {
        let c = preds.confusion(Some(g));
        if c.positives() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{metric}: cell ({}, positive) is empty",
                group_name(Some(g))
            )));
        }
        if c.negatives() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{metric}: cell ({}, negative) is empty",
                group_name(Some(g))
            )));
        }
        *slot = (ratio(c.tp, c.positives()), ratio(c.fp, c.negatives()));
    }
    Ok(out)
}

/// Signed mean of the TPR and FPR gaps (male minus female).
pub fn delta_eo(preds: &GroupedPredictions) -> Result<f64> {
    let [(tpr_m, fpr_m), (tpr_f, fpr_f)] = rates(preds, "delta_eo")?;
    Ok(0.5 * ((tpr_m - tpr_f) + (fpr_m - fpr_f)))
}

/// The larger-magnitude of the TPR and FPR gaps, keeping its sign.
pub fn delta_eo_max(preds: &GroupedPredictions) -> Result<f64> {
    let [(tpr_m, fpr_m), (tpr_f, fpr_f)] = rates(preds, "delta_eo_max")?;
    let (a, b) = (tpr_m - tpr_f, fpr_m - fpr_f);
    Ok(if a.abs() >= b.abs() { a } else { b })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub male: usize,
    pub female: usize,
    pub male_positive: usize,
    pub female_positive: usize,
}

/// Metrics for one (emotion task, corpus) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub emotion: EmotionCategory,
    pub corpus: Domain,
    pub uar_overall: f64,
    pub uar_male: f64,
    pub uar_female: f64,
    pub delta_sp_signed: f64,
    pub delta_eo_signed: f64,
    pub delta_sp_abs: f64,
    pub delta_eo_abs: f64,
    pub delta_eo_max: f64,
    pub counts: GroupCounts,
}

impl CellReport {
    pub fn from_predictions(
        emotion: EmotionCategory,
        corpus: Domain,
        preds: &GroupedPredictions,
    ) -> Result<Self> {
        let at = |e: Error| match e {
            Error::UndefinedMetric(m) => {
                Error::UndefinedMetric(format!("[{} / {}] {m}", emotion.name(), corpus.name()))
            }
            other => other,
        };
        let sp = delta_sp(preds).map_err(at)?;
        let eo = delta_eo(preds).map_err(at)?;
        let m = preds.confusion(Some(Gender::Male));
        let f = preds.confusion(Some(Gender::Female));
        Ok(Self {
            emotion,
            corpus,
            uar_overall: uar(preds, None).map_err(at)?,
            uar_male: uar(preds, Some(Gender::Male)).map_err(at)?,
            uar_female: uar(preds, Some(Gender::Female)).map_err(at)?,
            delta_sp_signed: sp,
            delta_eo_signed: eo,
            delta_sp_abs: sp.abs(),
            delta_eo_abs: eo.abs(),
            delta_eo_max: delta_eo_max(preds).map_err(at)?,
            counts: GroupCounts {
                male: m.total(),
                female: f.total(),
                male_positive: m.positives(),
                female_positive: f.positives(),
            },
        })
    }
}

/// All evaluated cells, sorted by (emotion, corpus).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub cells: Vec<CellReport>,
}

impl FairnessReport {
    pub fn cell(&self, emotion: EmotionCategory, corpus: Domain) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.emotion == emotion && c.corpus == corpus)
    }

    fn sort(&mut self) {
        self.cells.sort_by_key(|c| (c.emotion, c.corpus));
    }

    /// Merges the cells of several reports (e.g. one per emotion task).
    pub fn merge(reports: impl IntoIterator<Item = FairnessReport>) -> Result<FairnessReport> {
        let mut out = FairnessReport::default();
        for r in reports {
            for c in r.cells {
                if out.cell(c.emotion, c.corpus).is_some() {
                    return Err(Error::Contract(format!(
                        "duplicate report cell {} / {}",
                        c.emotion.name(),
                        c.corpus.name()
                    )));
                }
                out.cells.push(c);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Builds a report from predictions keyed by emotion task; each prediction
/// set may hold both corpora.
pub fn build_report(
    preds: &BTreeMap<EmotionCategory, GroupedPredictions>,
) -> Result<FairnessReport> {
    let mut cells = Vec::new();
    for (&emotion, p) in preds {
        for corpus in [Domain::Source, Domain::Target] {
            let sub = p.for_corpus(corpus);
            if sub.is_empty() {
                continue;
            }
            cells.push(CellReport::from_predictions(emotion, corpus, &sub)?);
        }
    }
    let mut report = FairnessReport { cells };
    report.sort();
    Ok(report)
}

/// Field-wise arithmetic mean over runs with identical cell layout.
pub fn average_reports(reports: &[FairnessReport]) -> Result<FairnessReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("cannot average zero reports".into()))?;
    let n = reports.len() as f64;
    let mut cells = Vec::with_capacity(first.cells.len());
    for (i, proto) in first.cells.iter().enumerate() {
        let mut acc = [0.0f64; 8];
        for r in reports {
            let c = r
                .cells
                .get(i)
                .filter(|c| c.emotion == proto.emotion && c.corpus == proto.corpus)
                .ok_or_else(|| Error::Contract("reports have different cell layouts".into()))?;
            for (a, v) in acc.iter_mut().zip([
                c.uar_overall,
                c.uar_male,
                c.uar_female,
                c.delta_sp_signed,
                c.delta_eo_signed,
                c.delta_sp_abs,
                c.delta_eo_abs,
                c.delta_eo_max,
            ]) {
                *a += v;
            }
        }
        let [uo, um, uf, sp, eo, spa, eoa, eom] = acc.map(|v| v / n);
        cells.push(CellReport {
            emotion: proto.emotion,
            corpus: proto.corpus,
            uar_overall: uo,
            uar_male: um,
            uar_female: uf,
            delta_sp_signed: sp,
            delta_eo_signed: eo,
            delta_sp_abs: spa,
            delta_eo_abs: eoa,
            delta_eo_max: eom,
            counts: proto.counts,
        });
    }
    if reports.iter().any(|r| r.cells.len() != first.cells.len()) {
        return Err(Error::Contract("reports have different cell layouts".into()));
    }
    Ok(FairnessReport { cells })
}
