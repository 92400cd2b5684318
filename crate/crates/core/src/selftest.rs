//! Built-in checks: gradient checks, the reversal-junction contract,
//! loss hand values, metric counting oracles, reweighing identities and
//! optimizer rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{
    reweigh_from_pairs, Corpus, Domain, EmotionCategory, Gender, Sample, Split,
};
use crate::error::Result;
use crate::losses::{bce, bce_value, gsim, gsim_pair, total_loss, LossWeights};
use crate::metrics::{delta_eo, delta_sp, uar, GroupedPredictions, Prediction};
use crate::network::{CfaModel, ModelSpec, Part, ALL_PARTS};
use crate::numcore::{self, grad_check, Matrix, Tape};
use crate::optim::{AdamConfig, AdamState, EarlyStopping, StopDecision};
use crate::train::stage2_gradients;
use crate::util::derive_seed;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    pub grad_instances: usize,
    pub oracle_datasets: usize,
    pub seed: u64,
    /// Flips the reversal-junction sign while the checks run.
    pub corrupt_grl_sign: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            grad_instances: 100,
            oracle_datasets: 1000,
            seed: 0,
            corrupt_grl_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        let n_ok = self.checks.iter().filter(|c| c.passed).count();
        s.push_str(&format!("{n_ok}/{} checks passed\n", self.checks.len()));
        s
    }
}

type Outcome = Result<(bool, String)>;

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    numcore::corrupt_grl_sign(opts.corrupt_grl_sign);
    let checks: [(&'static str, Box<dyn Fn() -> Outcome>); 10] = [
        ("autodiff_hand_values", Box::new(autodiff_hand_values)),
        ("grad_check_bce_network", Box::new(|| grad_check_bce_network(opts.grad_instances, opts.seed))),
        ("grad_check_gsim", Box::new(|| grad_check_gsim(opts.grad_instances, opts.seed))),
        ("grad_check_cfa_objective", Box::new(|| grad_check_cfa_objective(opts.grad_instances, opts.seed))),
        ("grl_invariant", Box::new(|| grl_invariant(opts.seed))),
        ("loss_hand_values", Box::new(loss_hand_values)),
        ("metric_oracle", Box::new(|| metric_oracle(opts.oracle_datasets, opts.seed))),
        ("reweigh_identity", Box::new(|| reweigh_identity(opts.seed))),
        ("adam_hand_values", Box::new(adam_hand_values)),
        ("early_stopping_sequences", Box::new(early_stopping_sequences)),
    ];
    let mut report = SelftestReport::default();
    for (name, f) in checks {
        let (passed, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        report.checks.push(Check { name, passed, detail });
    }
    numcore::corrupt_grl_sign(false);
    report
}

fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("shape")
}

fn autodiff_hand_values() -> Outcome {
    let grad_of = |x0: f64, f: &dyn Fn(&mut Tape, numcore::Var) -> Result<numcore::Var>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(x0));
        let y = f(&mut tape, x)?;
        tape.backward(y)?.wrt(x).item()
    };
    let identity = grad_of(3.0, &|_, x| Ok(x))?;
    let square = grad_of(3.0, &|t, x| t.mul(x, x))?;
    let dead = grad_of(2.5, &|t, w| {
        let zero = t.leaf(Matrix::scalar(0.0));
        let p = t.mul(w, zero)?;
        Ok(t.sigmoid(p))
    })?;
    let ok = identity == 1.0 && square == 6.0 && dead == 0.0;
    Ok((ok, format!("d x = {identity}, d x^2 = {square}, d sigmoid(w*0) = {dead}")))
}

fn grad_check_bce_network(instances: usize, seed: u64) -> Outcome {
    let mut worst = 0.0_f64;
    for i in 0..instances as u64 {
        let mut r = rng(seed, 0x100 + i);
        let (n, d, h) = (6, 4, 5);
        let x = normal_matrix(&mut r, n, d, 1.0);
        let y: Vec<f64> = (0..n).map(|k| (k % 2) as f64).collect();
        let params = [
            normal_matrix(&mut r, d, h, 0.7),
            normal_matrix(&mut r, 1, h, 0.3),
            normal_matrix(&mut r, h, 1, 0.7),
            normal_matrix(&mut r, 1, 1, 0.3),
        ];
        let err = grad_check(
            |t, v| {
                let xv = t.leaf(x.clone());
                let a = t.matmul(xv, v[0])?;
                let a = t.add_bias(a, v[1])?;
                let a = t.relu(a);
                let o = t.matmul(a, v[2])?;
                let o = t.add_bias(o, v[3])?;
                let p = t.sigmoid(o);
                bce(t, p, &y, None)
            },
            &params,
            GRAD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok((worst <= GRAD_TOL, format!("max rel err {worst:.2e} over {instances} instances")))
}

fn grad_check_gsim(instances: usize, seed: u64) -> Outcome {
    let mut worst = 0.0_f64;
    for i in 0..instances as u64 {
        let mut r = rng(seed, 0x200 + i);
        let n = 5;
        let z = [normal_matrix(&mut r, n, 3, 0.5), normal_matrix(&mut r, n, 3, 0.5)];
        let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5) as u8)).collect();
        let err = grad_check(|t, v| gsim(t, v[0], v[1], &y, 1.0), &z, GRAD_STEP)?;
        worst = worst.max(err);
    }
    Ok((worst <= GRAD_TOL, format!("max rel err {worst:.2e} over {instances} instances")))
}

/// Small corpus with alternating genders and cycling emotions, all train.
pub fn tiny_corpus(domain: Domain, n: usize, dim: usize, seed: u64) -> Result<Corpus> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| Sample {
            id: format!("{}-{i:04}", domain.name()),
            corpus: domain,
            split: Split::Train,
            gender: if i % 2 == 0 { Gender::Male } else { Gender::Female },
            emotion: EmotionCategory::ALL[(i / 2) % 4],
            features: (0..dim).map(|_| r.sample(StandardNormal)).collect(),
        })
        .collect();
    Corpus::new(domain, dim, samples)
}

/// Gradient of the stage-2 objective through the full network, compared
/// per parameter group against finite differences of the function each
/// group is meant to descend: the encoder sees `L_EC + α·L_GSim − s·L_GC`
/// (s the reversal scale), the emotion head `L_EC`, the gender head `L_GC`.
fn grad_check_cfa_objective(instances: usize, seed: u64) -> Outcome {
    let mut worst = 0.0_f64;
    let task = EmotionCategory::Anger;
    for i in 0..instances as u64 {
        let mut r = rng(seed, 0x300 + i);
        let dim = 4;
        let source = tiny_corpus(Domain::Source, 8, dim, r.random())?;
        let target = tiny_corpus(Domain::Target, 8, dim, r.random())?;
        let scale = r.random_range(0.1..1.5);
        let lw = LossWeights {
            alpha: r.random_range(0.1..1.0),
            beta: scale,
            margin: 1.0,
        };
        let mut model = CfaModel::init(ModelSpec::with_widths(dim, &[5, 3], 3, scale), r.random())?;
        // zero biases put ReLU inputs exactly on the kink for all-dead rows
        for p in model.parameters_mut(&ALL_PARTS) {
            if p.rows() == 1 {
                for v in p.as_mut_slice() {
                    *v = 0.3 * r.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let idx: Vec<usize> = (0..8).collect();
        let pair_seed = r.random();
        let (grads, _) = stage2_gradients(&model, &source, &target, &idx, &idx, task, &lw, pair_seed)?;

        let losses = |m: &CfaModel| stage2_gradients(m, &source, &target, &idx, &idx, task, &lw, pair_seed).map(|o| o.1);
        let sizes: Vec<(Part, usize)> = ALL_PARTS
            .iter()
            .flat_map(|&p| model.parameters(&[p]).into_iter().map(move |_| p))
            .zip(model.parameters(&ALL_PARTS).iter().map(|m| m.len()))
            .collect();
        let mut work = model.clone();
        for (k, &(part, len)) in sizes.iter().enumerate() {
            for j in 0..len {
                let objective = |b: crate::train::BatchLosses| match part {
                    Part::Encoder => b.l_ec + lw.alpha * b.l_gsim - scale * b.l_gc,
                    Part::EmotionHead => b.l_ec,
                    Part::GenderHead => b.l_gc,
                };
                let orig = work.parameters(&ALL_PARTS)[k].as_slice()[j];
                work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig + GRAD_STEP;
                let plus = objective(losses(&work)?);
                work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig - GRAD_STEP;
                let minus = objective(losses(&work)?);
                work.parameters_mut(&ALL_PARTS)[k].as_mut_slice()[j] = orig;
                let numeric = (plus - minus) / (2.0 * GRAD_STEP);
                let a = grads[k].as_slice()[j];
                let e = (a - numeric).abs() / a.abs().max(1.0);
                worst = worst.max(e);
            }
        }
    }
    Ok((worst <= GRAD_TOL, format!("max rel err {worst:.2e} over {instances} instances")))
}

/// Forward identity, backward `−scale·upstream`, and a gender-only step at
/// scale 0 leaving the encoder untouched.
fn grl_invariant(seed: u64) -> Outcome {
    let mut r = rng(seed, 0x400);
    let mut problems = Vec::new();
    for scale in [0.0, 0.5, 1.0, 2.0] {
        let x0 = normal_matrix(&mut r, 3, 4, 1.0);
        let w = normal_matrix(&mut r, 3, 4, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let rev = tape.reverse_gradient(x, scale);
        if tape.value(rev) != &x0 {
            problems.push(format!("forward not identity at scale {scale}"));
        }
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(rev, wv)?;
        let s = tape.sum(prod);
        let got = tape.backward(s)?.wrt(x);
        let want = Matrix::new(3, 4, crate::network::grl(w.as_slice(), scale))?;
        if got != want {
            problems.push(format!("backward != -{scale}*upstream"));
        }
    }

    let source = tiny_corpus(Domain::Source, 8, 4, r.random())?;
    let target = tiny_corpus(Domain::Target, 8, 4, r.random())?;
    let mut model = CfaModel::init(ModelSpec::with_widths(4, &[5, 3], 3, 0.0), r.random())?;
    let gc_grads = gender_only_grads(&model, &source, &target)?;
    let snapshot = |m: &CfaModel, part| m.parameters(&[part]).into_iter().cloned().collect::<Vec<Matrix>>();
    let (enc_before, head_before) = (snapshot(&model, Part::Encoder), snapshot(&model, Part::GenderHead));
    let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    adam.step(&mut model.parameters_mut(&ALL_PARTS), &gc_grads)?;
    if snapshot(&model, Part::Encoder) != enc_before {
        problems.push("scale-0 gender step moved the encoder".into());
    }
    if snapshot(&model, Part::GenderHead) == head_before {
        problems.push("gender head received no gradient".into());
    }
    let ok = problems.is_empty();
    let detail = if ok {
        "forward identity, backward -scale*g, scale 0 isolates the encoder".to_string()
    } else {
        problems.join("; ")
    };
    Ok((ok, detail))
}

/// Gradients of `L_GC` alone through the reversed gender branch, ordered
/// like `model.parameters(&ALL_PARTS)`.
pub fn gender_only_grads(model: &CfaModel, source: &Corpus, target: &Corpus) -> Result<Vec<Matrix>> {
    let s_idx: Vec<usize> = (0..source.len()).collect();
    let t_idx: Vec<usize> = (0..target.len()).collect();
    let mut rows = source.features(&s_idx).into_vec();
    rows.extend(target.features(&t_idx).into_vec());
    let x = Matrix::new(s_idx.len() + t_idx.len(), source.feature_dim(), rows)?;
    let g: Vec<f64> = source
        .genders(&s_idx)
        .iter()
        .chain(&target.genders(&t_idx))
        .map(|g| g.label())
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let z = bound.encode(&mut tape, xv)?;
    let p = bound.gender_prob_reversed(&mut tape, z)?;
    let l = bce(&mut tape, p, &g, None)?;
    let grads = tape.backward(l)?;
    Ok(bound.parameter_vars(&ALL_PARTS).into_iter().map(|v| grads.wrt(v)).collect())
}

fn loss_hand_values() -> Outcome {
    let w = LossWeights { alpha: 0.5, beta: 0.5, margin: 1.0 };
    let b = bce_value(&[0.5], &[1.0])?;
    let c = gsim_pair(&[0.5], &[0.0], true, 1.0)?;
    let c_far = gsim_pair(&[2.0], &[0.0], true, 1.0)?;
    let c_same = gsim_pair(&[0.3], &[0.0], false, 1.0)?;
    let t = total_loss(0.9, 0.2, 0.7, &w)?;
    let ok = (b - 0.693_147_2).abs() <= 1e-6
        && (c - 0.125).abs() <= 1e-9
        && c_far == 0.0
        && (c_same - 0.045).abs() <= 1e-9
        && (t - 0.65).abs() <= 1e-12;
    Ok((ok, format!("bce {b:.7}, gsim {c}, gsim(D>=m) {c_far}, gsim(same) {c_same:.6}, total {t}")))
}

/// Brute-force counting oracle, independent of the confusion helper.
/// `None` marks an undefined metric.
pub fn oracle_metrics(records: &[Prediction]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let count = |f: &dyn Fn(&Prediction) -> bool| records.iter().filter(|r| f(r)).count();
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let tpr_all = rate(count(&|r| r.label && r.predicted), count(&|r| r.label));
    let tnr_all = rate(count(&|r| !r.label && !r.predicted), count(&|r| !r.label));
    let uar = match (tpr_all, tnr_all) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    let per = |g: Gender| {
        let pos = rate(count(&|r| r.gender == g && r.predicted), count(&|r| r.gender == g));
        let tpr = rate(
            count(&|r| r.gender == g && r.label && r.predicted),
            count(&|r| r.gender == g && r.label),
        );
        let fpr = rate(
            count(&|r| r.gender == g && !r.label && r.predicted),
            count(&|r| r.gender == g && !r.label),
        );
        (pos, tpr, fpr)
    };
    let (pm, tm, fm) = per(Gender::Male);
    let (pf, tf, ff) = per(Gender::Female);
    let sp = pm.zip(pf).map(|(a, b)| a - b);
    let eo = match (tm, tf, fm, ff) {
        (Some(a), Some(b), Some(c), Some(d)) => Some(0.5 * ((a - b) + (c - d))),
        _ => None,
    };
    (uar, sp, eo)
}

pub fn random_predictions(r: &mut ChaCha8Rng, max_len: usize) -> Vec<Prediction> {
    let n = r.random_range(1..=max_len);
    (0..n)
        .map(|_| Prediction {
            predicted: r.random_bool(0.5),
            label: r.random_bool(0.5),
            gender: if r.random_bool(0.5) { Gender::Male } else { Gender::Female },
            corpus: Domain::Source,
        })
        .collect()
}

fn metric_oracle(datasets: usize, seed: u64) -> Outcome {
    let mut bad = Vec::new();
    let mut r = rng(seed, 0x500);
    for i in 0..datasets {
        let recs = random_predictions(&mut r, 100);
        let (ou, os, oe) = oracle_metrics(&recs);
        let p = GroupedPredictions::new(recs);
        let swapped = p.gender_swapped();
        let same = |got: Result<f64>, want: Option<f64>| match (got, want) {
            (Ok(a), Some(b)) => a.to_bits() == b.to_bits(),
            (Err(_), None) => true,
            _ => false,
        };
        let sp_anti = match (delta_sp(&p), delta_sp(&swapped)) {
            (Ok(a), Ok(b)) => a == -b,
            (Err(_), Err(_)) => true,
            _ => false,
        };
        let eo_anti = match (delta_eo(&p), delta_eo(&swapped)) {
            (Ok(a), Ok(b)) => a == -b,
            (Err(_), Err(_)) => true,
            _ => false,
        };
        if !(same(uar(&p, None), ou) && same(delta_sp(&p), os) && same(delta_eo(&p), oe) && sp_anti && eo_anti) {
            bad.push(i);
        }
    }
    let ok = bad.is_empty();
    let detail = if ok {
        format!("{datasets} random datasets match the counting oracle")
    } else {
        format!("{} of {datasets} datasets disagree, first #{}", bad.len(), bad[0])
    };
    Ok((ok, detail))
}

fn reweigh_identity(seed: u64) -> Outcome {
    let mut obs = Vec::new();
    obs.extend(std::iter::repeat_n((Gender::Male, 1.0), 30));
    obs.extend(std::iter::repeat_n((Gender::Male, 0.0), 20));
    obs.extend(std::iter::repeat_n((Gender::Female, 1.0), 10));
    obs.extend(std::iter::repeat_n((Gender::Female, 0.0), 40));
    let w = reweigh_from_pairs(obs.iter().copied())?;
    let hand = (w.weight(Gender::Male, 1.0) - 2000.0 / 3000.0).abs() <= 1e-12;

    let mut r = rng(seed, 0x600);
    let mut worst_sum = 0.0_f64;
    let mut worst_indep = 0.0_f64;
    for _ in 0..200 {
        let n = r.random_range(8..200);
        let mut obs: Vec<(Gender, f64)> = (0..n)
            .map(|_| {
                let g = if r.random_bool(0.4) { Gender::Male } else { Gender::Female };
                (g, f64::from(r.random_bool(0.3) as u8))
            })
            .collect();
        obs.extend([(Gender::Male, 0.0), (Gender::Male, 1.0), (Gender::Female, 0.0), (Gender::Female, 1.0)]);
        let w = reweigh_from_pairs(obs.iter().copied())?;
        let total: f64 = obs.iter().map(|&(g, y)| w.weight(g, y)).sum();
        let n = obs.len() as f64;
        worst_sum = worst_sum.max((total - n).abs());
        for g in [Gender::Male, Gender::Female] {
            for y in [0.0, 1.0] {
                let joint: f64 = obs.iter().filter(|o| o.0 == g && o.1 == y).map(|&(g, y)| w.weight(g, y)).sum();
                let pg = obs.iter().filter(|o| o.0 == g).count() as f64;
                let py = obs.iter().filter(|o| o.1 == y).count() as f64;
                worst_indep = worst_indep.max((joint / total - (pg / n) * (py / n)).abs());
            }
        }
    }
    let balanced = reweigh_from_pairs([(Gender::Male, 0.0), (Gender::Male, 1.0), (Gender::Female, 0.0), (Gender::Female, 1.0)])?;
    let ones = balanced.cells.iter().flatten().all(|&v| v == 1.0);
    let ok = hand && ones && worst_sum <= 1e-9 && worst_indep <= 1e-12;
    Ok((ok, format!("w(M,1) {:.4}, max |sum-N| {worst_sum:.1e}, max joint gap {worst_indep:.1e}", w.weight(Gender::Male, 1.0))))
}

fn adam_hand_values() -> Outcome {
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut theta = Matrix::scalar(0.0);
    AdamState::new(cfg).step(&mut [&mut theta], &[Matrix::scalar(0.5)])?;
    let first = theta.item()?;

    let mut still = Matrix::scalar(0.7);
    let mut adam = AdamState::new(cfg);
    for _ in 0..10 {
        adam.step(&mut [&mut still], &[Matrix::scalar(0.0)])?;
    }
    let mut decayed = Matrix::scalar(1.0);
    AdamState::new(AdamConfig { weight_decay: 1e-3, ..AdamConfig::default() })
        .step(&mut [&mut decayed], &[Matrix::scalar(0.0)])?;
    let d = decayed.item()?;
    let ok = (first + 1e-4).abs() <= 1e-7 && still.item()? == 0.7 && d == 1.0 - 1e-4 * 1e-3;
    Ok((ok, format!("first step {first:.3e}, decay-only step {d}")))
}

/// Runs a metric sequence through the tracker; snapshots are the epoch
/// numbers. Returns (stop epoch, best epoch, restored snapshot).
pub fn replay_early_stopping(metrics: &[f64], patience: usize, max_epochs: usize) -> (usize, usize, Option<usize>) {
    let mut es = EarlyStopping::new(patience, max_epochs);
    let mut stop = 0;
    for (i, &m) in metrics.iter().enumerate() {
        stop = i + 1;
        if es.update(i + 1, m, &(i + 1)) == StopDecision::Stop {
            break;
        }
    }
    (stop, es.best_epoch(), es.into_best())
}

fn early_stopping_sequences() -> Outcome {
    let a = replay_early_stopping(&[0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7], 5, 50);
    let rising: Vec<f64> = (0..60).map(|i| i as f64 / 100.0).collect();
    let b = replay_early_stopping(&rising, 5, 50);
    let c = replay_early_stopping(&[0.6, 0.5], 1, 50);
    let ok = a == (7, 2, Some(2)) && b == (50, 50, Some(50)) && c == (2, 1, Some(1));
    Ok((ok, format!("plateau {a:?}, rising {b:?}, drop {c:?}")))
}
