//! Helpers shared by the integration suites: random instances, a
//! counting oracle for the metrics and finite-difference checks.
#![allow(dead_code)]

use fairadapt::data::{Corpus, Domain, EmotionCategory, Gender, Sample, Split};
use fairadapt::losses::{bce, gsim, LossWeights};
use fairadapt::metrics::Prediction;
use fairadapt::network::{CfaModel, ModelSpec, Part, ALL_PARTS};
use fairadapt::numcore::{grad_check, Matrix, Tape};
use fairadapt::train::{stage2_gradients, BatchLosses};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Relative finite-difference error of BCE through a random 2-layer net,
/// with random per-sample weights.
pub fn bce_net_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h) = (7, 4, 5);
    let x = normal(&mut r, n, d, 1.0);
    let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5) as u8)).collect();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
    let params = [
        normal(&mut r, d, h, 0.7),
        normal(&mut r, 1, h, 0.3),
        normal(&mut r, h, 1, 0.7),
        normal(&mut r, 1, 1, 0.3),
    ];
    grad_check(
        |t, v| {
            let xv = t.leaf(x.clone());
            let a = t.matmul(xv, v[0])?;
            let a = t.add_bias(a, v[1])?;
            let a = t.relu(a);
            let o = t.matmul(a, v[2])?;
            let o = t.add_bias(o, v[3])?;
            let p = t.sigmoid(o);
            bce(t, p, &y, Some(&w))
        },
        &params,
        H,
    )
    .unwrap()
}

/// Relative finite-difference error of the contrastive loss on random pairs.
pub fn gsim_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 6;
    let z = [normal(&mut r, n, 3, 0.6), normal(&mut r, n, 3, 0.6)];
    let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5) as u8)).collect();
    let margin = r.random_range(0.5..2.0);
    grad_check(|t, v| gsim(t, v[0], v[1], &y, margin), &z, H).unwrap()
}

pub fn tiny_corpus(domain: Domain, n: usize, dim: usize, seed: u64) -> Corpus {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| Sample {
            id: format!("{}-{i:04}", domain.name()),
            corpus: domain,
            split: Split::Train,
            gender: if r.random_bool(0.5) { Gender::Male } else { Gender::Female },
            emotion: EmotionCategory::ALL[r.random_range(0..4)],
            features: (0..dim).map(|_| r.sample(StandardNormal)).collect(),
        })
        .collect();
    Corpus::new(domain, dim, samples).unwrap()
}

/// Random small CFA network with nonzero biases (zero biases put ReLU
/// inputs on the kink whenever a whole upstream row is inactive).
pub fn random_model(r: &mut ChaCha8Rng, dim: usize, grl_scale: f64) -> CfaModel {
    let mut model = CfaModel::init(ModelSpec::with_widths(dim, &[5, 3], 3, grl_scale), r.random()).unwrap();
    for p in model.parameters_mut(&ALL_PARTS) {
        if p.rows() == 1 {
            for v in p.as_mut_slice() {
                *v = 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    model
}

/// Tape gradients of the full stage-2 objective against finite differences
/// of the function each parameter group descends: encoder
/// `L_EC + α·L_GSim − s·L_GC`, emotion head `L_EC`, gender head `L_GC`.
pub fn cfa_objective_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = 4;
    let source = tiny_corpus(Domain::Source, 8, dim, r.random());
    let target = tiny_corpus(Domain::Target, 8, dim, r.random());
    let scale = r.random_range(0.1..1.5);
    let lw = LossWeights {
        alpha: r.random_range(0.1..1.0),
        beta: scale,
        margin: 1.0,
    };
    let model = random_model(&mut r, dim, scale);
    let idx: Vec<usize> = (0..8).collect();
    let task = EmotionCategory::ALL[r.random_range(0..4)];
    let pair_seed = r.random();
    let run = |m: &CfaModel| stage2_gradients(m, &source, &target, &idx, &idx, task, &lw, pair_seed).unwrap();
    let (grads, _) = run(&model);

    let mut parts = Vec::new();
    for p in ALL_PARTS {
        parts.extend(model.parameters(&[p]).iter().map(|_| p));
    }
    let objective = |part: Part, b: BatchLosses| match part {
        Part::Encoder => b.l_ec + lw.alpha * b.l_gsim - scale * b.l_gc,
        Part::EmotionHead => b.l_ec,
        Part::GenderHead => b.l_gc,
    };
    let mut work = model.clone();
    let mut worst = 0.0_f64;
    for (k, &part) in parts.iter().enumerate() {
        for j in 0..grads[k].len() {
            let orig = work.parameters(&ALL_PARTS)[k].as_slice()[j];
            work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig + H;
            let plus = objective(part, run(&work).1);
            work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig - H;
            let minus = objective(part, run(&work).1);
            work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = grads[k].as_slice()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

pub fn random_predictions(r: &mut ChaCha8Rng, max_len: usize) -> Vec<Prediction> {
    let n = r.random_range(1..=max_len);
    let (pp, pl, pm) = (r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95));
    (0..n)
        .map(|_| Prediction {
            predicted: r.random_bool(pp),
            label: r.random_bool(pl),
            gender: if r.random_bool(pm) { Gender::Male } else { Gender::Female },
            corpus: Domain::Target,
        })
        .collect()
}

/// Metric values by explicit enumeration; `None` when undefined.
pub struct Oracle {
    pub uar: Option<f64>,
    pub delta_sp: Option<f64>,
    pub delta_eo: Option<f64>,
}

pub fn oracle(records: &[Prediction]) -> Oracle {
    let mut n = [[[0usize; 2]; 2]; 2]; // [gender][label][predicted]
    for r in records {
        let g = usize::from(r.gender == Gender::Female);
        n[g][usize::from(r.label)][usize::from(r.predicted)] += 1;
    }
    let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let tp = n[0][1][1] + n[1][1][1];
    let fn_ = n[0][1][0] + n[1][1][0];
    let tn = n[0][0][0] + n[1][0][0];
    let fp = n[0][0][1] + n[1][0][1];
    let uar = match (frac(tp, tp + fn_), frac(tn, tn + fp)) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    let pos_rate = |g: usize| frac(n[g][0][1] + n[g][1][1], n[g][0][0] + n[g][0][1] + n[g][1][0] + n[g][1][1]);
    let delta_sp = match (pos_rate(0), pos_rate(1)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let tpr = |g: usize| frac(n[g][1][1], n[g][1][0] + n[g][1][1]);
    let fpr = |g: usize| frac(n[g][0][1], n[g][0][0] + n[g][0][1]);
    let delta_eo = match (tpr(0), tpr(1), fpr(0), fpr(1)) {
        (Some(a), Some(b), Some(c), Some(d)) => Some(0.5 * ((a - b) + (c - d))),
        _ => None,
    };
    Oracle { uar, delta_sp, delta_eo }
}

/// Exact agreement: equal bits when defined, error when undefined.
pub fn agrees(got: fairadapt::Result<f64>, want: Option<f64>) -> bool {
    match (got, want) {
        (Ok(a), Some(b)) => a.to_bits() == b.to_bits(),
        (Err(fairadapt::Error::UndefinedMetric(_)), None) => true,
        _ => false,
    }
}

pub fn tape_value(t: &Tape, v: fairadapt::numcore::Var) -> f64 {
    t.value(v).item().unwrap()
}
