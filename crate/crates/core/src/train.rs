//! Two-stage training: source-only emotion training, then mixed-batch
//! adversarial adaptation with the gender head behind the reversal junction
//! and the cross-corpus similarity loss.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    mixed_batches, reweigh_weights, sample_pairs, shuffled_batches, Corpus, EmotionCategory,
    ReweighWeights, Split,
};
use crate::error::{Error, Result};
use crate::losses::{bce, gsim, total_loss, LossWeights};
use crate::metrics::{uar, GroupedPredictions, Prediction};
use crate::network::{CfaModel, ModelSpec, Part, ALL_PARTS, EMOTION_PARTS};
use crate::numcore::{Matrix, Tape};
use crate::optim::{AdamConfig, AdamState, DecayMode, EarlyStopping, StopDecision};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineSrc,
    BaselineReweigh,
    Cfa,
    AdvOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BaselineSrc, Mode::BaselineReweigh, Mode::Cfa, Mode::AdvOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineSrc => "baseline_src",
            Mode::BaselineReweigh => "baseline_reweigh",
            Mode::Cfa => "cfa",
            Mode::AdvOnly => "adv_only",
        }
    }

    pub fn uses_target(self) -> bool {
        matches!(self, Mode::Cfa | Mode::AdvOnly)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?} (expected baseline_src, baseline_reweigh, cfa or adv_only)"
                ))
            })
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    /// Reversal scale; `None` uses `beta`.
    pub grl_scale: Option<f64>,
    /// Epoch budget of stage 1; `None` runs to early stop.
    pub stage1_epochs: Option<usize>,
    /// Epoch budget of stage 2; `None` runs to early stop.
    pub stage2_epochs: Option<usize>,
    pub encoder_widths: Vec<usize>,
    pub gender_hidden: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            decay_mode: adam.decay_mode,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            alpha: 0.5,
            beta: 0.5,
            margin: 1.0,
            grl_scale: None,
            stage1_epochs: None,
            stage2_epochs: None,
            encoder_widths: crate::network::DEFAULT_ENCODER_WIDTHS.to_vec(),
            gender_hidden: 16,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("adam_eps", self.adam_eps)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be >= 1".into()));
        }
        self.loss_weights().validate()?;
        let g = self.effective_grl_scale();
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::Config(format!("grl_scale must be >= 0, got {g}")));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder_widths must be nonempty and positive".into()));
        }
        if self.gender_hidden == 0 {
            return Err(Error::Config("gender_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
        }
    }

    pub fn effective_grl_scale(&self) -> f64 {
        self.grl_scale.unwrap_or(self.beta)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec::with_widths(
            input_dim,
            &self.encoder_widths,
            self.gender_hidden,
            self.effective_grl_scale(),
        )
    }
}

/// Per-epoch log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub l_ec: f64,
    pub l_gsim: f64,
    pub l_gc: f64,
    pub l_total: f64,
    pub valid_uar: f64,
}

/// Identity of a run, echoed into its log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub mode: Mode,
    pub emotion: EmotionCategory,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub info: RunInfo,
    pub epochs: Vec<EpochRecord>,
    pub stage1_best_epoch: usize,
    pub stage2_best_epoch: Option<usize>,
    pub wall_time_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Epoch(EpochRecord),
    Final {
        info: RunInfo,
        stage1_best_epoch: usize,
        stage2_best_epoch: Option<usize>,
        wall_time_s: f64,
    },
}

impl RunLog {
    /// One JSON object per epoch, then a closing record with the run summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e.clone()))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&LogLine::Final {
            info: self.info.clone(),
            stage1_best_epoch: self.stage1_best_epoch,
            stage2_best_epoch: self.stage2_best_epoch,
            wall_time_s: self.wall_time_s,
        })?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<LogLine>(line)? {
                LogLine::Epoch(e) => epochs.push(e),
                LogLine::Final {
                    info,
                    stage1_best_epoch,
                    stage2_best_epoch,
                    wall_time_s,
                } => {
                    return Ok(RunLog {
                        info,
                        epochs,
                        stage1_best_epoch,
                        stage2_best_epoch,
                        wall_time_s,
                    })
                }
            }
        }
        Err(Error::Config("run log has no closing record".into()))
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

/// Emotion predictions at `threshold` (ties count as positive).
pub fn predict(model: &CfaModel, x: &Matrix, threshold: f64) -> Result<Vec<bool>> {
    let (_, p) = model.forward_ec(x)?;
    Ok(p.as_slice().iter().map(|&v| v >= threshold).collect())
}

/// UAR of the emotion head on one split.
pub fn split_uar(
    model: &CfaModel,
    corpus: &Corpus,
    split: Split,
    task: EmotionCategory,
    threshold: f64,
) -> Result<f64> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!(
            "{} {} split is empty",
            corpus.domain().name(),
            split.name()
        )));
    }
    let predicted = predict(model, &corpus.features(&idx), threshold)?;
    let records = idx
        .iter()
        .zip(predicted)
        .map(|(&i, predicted)| {
            let s = &corpus.samples()[i];
            Prediction {
                predicted,
                label: s.label(task) == 1.0,
                gender: s.gender,
                corpus: s.corpus,
            }
        })
        .collect();
    uar(&GroupedPredictions::new(records), None).map_err(|e| {
        Error::Config(format!(
            "validation metric undefined on {} {}: {e}",
            corpus.domain().name(),
            split.name()
        ))
    })
}

fn apply_step(
    model: &mut CfaModel,
    adam: &mut AdamState,
    parts: &[Part],
    grads: &[Matrix],
) -> Result<()> {
    let mut params = model.parameters_mut(parts);
    adam.step(&mut params, grads)
}

/// Stage 1: encoder and emotion head trained on the source corpus with the
/// emotion loss only, optionally reweighed. Returns the best checkpoint by
/// source validation UAR.
pub fn train_stage1(
    model: CfaModel,
    source: &Corpus,
    task: EmotionCategory,
    cfg: &TrainConfig,
    weights: Option<&ReweighWeights>,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<(CfaModel, usize)> {
    cfg.validate()?;
    let train = source.split_indices(Split::Train);
    if train.is_empty() || source.split_indices(Split::Valid).is_empty() {
        return Err(Error::Config("source train and valid splits must be nonempty".into()));
    }
    let budget = cfg.stage1_epochs.unwrap_or(cfg.max_epochs).min(cfg.max_epochs);
    if budget == 0 {
        return Ok((model, 0));
    }
    let mut model = model;
    let mut adam = AdamState::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience, budget);
    let lw = cfg.loss_weights();
    let batch_seed = derive_seed(seed, 0x51);

    for epoch in 1..=budget {
        let mut sum_ec = 0.0;
        let mut count = 0usize;
        for batch in shuffled_batches(&train, cfg.batch_size, batch_seed, epoch)? {
            let x = source.features(&batch);
            let y = source.labels(&batch, task);
            let w: Option<Vec<f64>> = weights.map(|rw| {
                batch
                    .iter()
                    .zip(&y)
                    .map(|(&i, &yi)| rw.weight(source.samples()[i].gender, yi))
                    .collect()
            });
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.leaf(x);
            let z = bound.encode(&mut tape, xv)?;
            let p = bound.emotion_prob(&mut tape, z)?;
            let loss = bce(&mut tape, p, &y, w.as_deref())?;
            let grads = tape.backward(loss)?;
            let g: Vec<Matrix> = bound
                .parameter_vars(&EMOTION_PARTS)
                .into_iter()
                .map(|v| grads.wrt(v))
                .collect();
            apply_step(&mut model, &mut adam, &EMOTION_PARTS, &g)?;
            sum_ec += tape.value(loss).item()? * batch.len() as f64;
            count += batch.len();
        }
        let l_ec = sum_ec / count as f64;
        let valid_uar = split_uar(&model, source, Split::Valid, task, cfg.threshold)?;
        log.push(EpochRecord {
            stage: 1,
            epoch,
            l_ec,
            l_gsim: 0.0,
            l_gc: 0.0,
            l_total: total_loss(l_ec, 0.0, 0.0, &lw)?,
            valid_uar,
        });
        if stopper.update(epoch, valid_uar, &model) == StopDecision::Stop {
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    let best = stopper.into_best().expect("at least one epoch recorded");
    Ok((best, best_epoch))
}

/// Mean losses of one mixed batch, before the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLosses {
    pub l_ec: f64,
    pub l_gsim: f64,
    pub l_gc: f64,
}

/// Gradients of `L_EC + α·L_GSim + L_GC` (gender head behind the reversal
/// junction) for one mixed batch, ordered like `model.parameters(&ALL_PARTS)`.
pub fn stage2_gradients(
    model: &CfaModel,
    source: &Corpus,
    target: &Corpus,
    src_idx: &[usize],
    tgt_idx: &[usize],
    task: EmotionCategory,
    lw: &LossWeights,
    pair_seed: u64,
) -> Result<(Vec<Matrix>, BatchLosses)> {
    let (ns, nt) = (src_idx.len(), tgt_idx.len());
    let mut rows = source.features(src_idx).into_vec();
    rows.extend(target.features(tgt_idx).into_vec());
    let x = Matrix::new(ns + nt, source.feature_dim(), rows)?;
    let y_src = source.labels(src_idx, task);
    let src_genders = source.genders(src_idx);
    let tgt_genders = target.genders(tgt_idx);
    let g_all: Vec<f64> = src_genders
        .iter()
        .chain(&tgt_genders)
        .map(|g| g.label())
        .collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let z = bound.encode(&mut tape, xv)?;

    let src_rows: Vec<usize> = (0..ns).collect();
    let z_src = tape.select_rows(z, &src_rows)?;
    let p_e = bound.emotion_prob(&mut tape, z_src)?;
    let l_ec = bce(&mut tape, p_e, &y_src, None)?;

    let p_g = bound.gender_prob_reversed(&mut tape, z)?;
    let l_gc = bce(&mut tape, p_g, &g_all, None)?;
    let mut objective = tape.add(l_ec, l_gc)?;

    let mut l_gsim_value = 0.0;
    if lw.alpha > 0.0 {
        let pairs = sample_pairs(&src_genders, &tgt_genders, pair_seed)?;
        let a: Vec<usize> = pairs.pairs.iter().map(|p| p.source_pos).collect();
        let b: Vec<usize> = pairs.pairs.iter().map(|p| ns + p.target_pos).collect();
        let y: Vec<f64> = pairs.pairs.iter().map(|p| f64::from(p.y_pair)).collect();
        let z1 = tape.select_rows(z, &a)?;
        let z2 = tape.select_rows(z, &b)?;
        let l_gsim = gsim(&mut tape, z1, z2, &y, lw.margin)?;
        l_gsim_value = tape.value(l_gsim).item()?;
        let weighted = tape.scale(l_gsim, lw.alpha)?;
        objective = tape.add(objective, weighted)?;
    }

    let grads = tape.backward(objective)?;
    let g = bound
        .parameter_vars(&ALL_PARTS)
        .into_iter()
        .map(|v| grads.wrt(v))
        .collect();
    Ok((
        g,
        BatchLosses {
            l_ec: tape.value(l_ec).item()?,
            l_gsim: l_gsim_value,
            l_gc: tape.value(l_gc).item()?,
        },
    ))
}

/// Stage 2: mixed source/target batches, one optimizer step over all
/// parameters per batch, fresh optimizer state, early stopping on source
/// validation UAR. Target emotion labels are never read.
pub fn train_stage2_cfa(
    model: CfaModel,
    source: &Corpus,
    target: &Corpus,
    task: EmotionCategory,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<(CfaModel, usize)> {
    cfg.validate()?;
    if source.feature_dim() != target.feature_dim() {
        return Err(Error::Config(format!(
            "source has {} features but target has {}",
            source.feature_dim(),
            target.feature_dim()
        )));
    }
    let src_train = source.split_indices(Split::Train);
    let tgt_train = target.split_indices(Split::Train);
    if tgt_train.is_empty() {
        return Err(Error::Config("target train split is empty".into()));
    }
    let budget = cfg.stage2_epochs.unwrap_or(cfg.max_epochs).min(cfg.max_epochs);
    if budget == 0 {
        return Ok((model, 0));
    }
    let mut model = model;
    model.set_grl_scale(cfg.effective_grl_scale())?;
    let lw = cfg.loss_weights();
    let mut adam = AdamState::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience, budget);
    let batch_seed = derive_seed(seed, 0x52);
    let pair_seed = derive_seed(seed, 0x53);

    for epoch in 1..=budget {
        let (mut s_ec, mut s_gsim, mut s_gc) = (0.0, 0.0, 0.0);
        let mut count = 0usize;
        let batches = mixed_batches(&src_train, &tgt_train, cfg.batch_size, batch_seed, epoch)?;
        for (b, batch) in batches.iter().enumerate() {
            let ps = derive_seed(pair_seed, ((epoch as u64) << 32) | b as u64);
            let (grads, losses) = stage2_gradients(
                &model,
                source,
                target,
                &batch.source,
                &batch.target,
                task,
                &lw,
                ps,
            )?;
            apply_step(&mut model, &mut adam, &ALL_PARTS, &grads)?;
            let n = batch.source.len() as f64;
            s_ec += losses.l_ec * n;
            s_gsim += losses.l_gsim * n;
            s_gc += losses.l_gc * n;
            count += batch.source.len();
        }
        let c = count as f64;
        let (l_ec, l_gsim, l_gc) = (s_ec / c, s_gsim / c, s_gc / c);
        let valid_uar = split_uar(&model, source, Split::Valid, task, cfg.threshold)?;
        log.push(EpochRecord {
            stage: 2,
            epoch,
            l_ec,
            l_gsim,
            l_gc,
            l_total: total_loss(l_ec, l_gsim, l_gc, &lw)?,
            valid_uar,
        });
        if stopper.update(epoch, valid_uar, &model) == StopDecision::Stop {
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    let best = stopper.into_best().expect("at least one epoch recorded");
    Ok((best, best_epoch))
}

/// A trained model and its log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CfaModel,
    pub log: RunLog,
}

/// Runs one mode end to end. The target corpus is required by `cfa` and
/// `adv_only` and ignored otherwise.
pub fn train_mode_dispatch(
    cfg: &TrainConfig,
    mode: Mode,
    task: EmotionCategory,
    seed: u64,
    source: &Corpus,
    target: Option<&Corpus>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut cfg = cfg.clone();
    if mode == Mode::AdvOnly {
        cfg.alpha = 0.0;
    }
    let target = if mode.uses_target() {
        Some(target.ok_or_else(|| {
            Error::Config(format!("mode {mode} needs a target corpus"))
        })?)
    } else {
        None
    };
    let model = CfaModel::init(cfg.model_spec(source.feature_dim()), derive_seed(seed, 0x50))?;
    let weights = match mode {
        Mode::BaselineReweigh => Some(reweigh_weights(source, task)?),
        _ => None,
    };
    let mut epochs = Vec::new();
    let (mut model, stage1_best) =
        train_stage1(model, source, task, &cfg, weights.as_ref(), seed, &mut epochs)?;
    let mut stage2_best = None;
    if let Some(target) = target {
        let (m, best) = train_stage2_cfa(model, source, target, task, &cfg, seed, &mut epochs)?;
        model = m;
        stage2_best = Some(best);
    }
    Ok(TrainOutcome {
        model,
        log: RunLog {
            info: RunInfo {
                mode,
                emotion: task,
                seed,
                config: cfg,
            },
            epochs,
            stage1_best_epoch: stage1_best,
            stage2_best_epoch: stage2_best,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};

    fn tiny() -> (Corpus, Corpus) {
        synth_corpus(&SynthSpec {
            n_per_corpus: 300,
            feature_dim: 6,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            encoder_widths: vec![8, 4],
            gender_hidden: 4,
            lr: 1e-3,
            max_epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(matches!("pa".parse::<Mode>(), Err(Error::Config(_))));
    }

    #[test]
    fn stage1_zero_epochs_returns_initial_model() {
        let (src, _) = tiny();
        let cfg = TrainConfig {
            stage1_epochs: Some(0),
            ..small_cfg()
        };
        let init = CfaModel::init(cfg.model_spec(6), 1).unwrap();
        let mut log = Vec::new();
        let (m, best) =
            train_stage1(init.clone(), &src, EmotionCategory::Anger, &cfg, None, 1, &mut log)
                .unwrap();
        assert_eq!(m, init);
        assert_eq!(best, 0);
        assert!(log.is_empty());
    }

    #[test]
    fn adv_only_logs_zero_similarity_and_bookkeeping_is_exact() {
        let (src, tgt) = tiny();
        let out = train_mode_dispatch(
            &small_cfg(),
            Mode::AdvOnly,
            EmotionCategory::Anger,
            4,
            &src,
            Some(&tgt),
        )
        .unwrap();
        let stage2: Vec<_> = out.log.stage(2).collect();
        assert!(!stage2.is_empty());
        assert!(stage2.iter().all(|e| e.l_gsim == 0.0));
        let w = out.log.info.config.loss_weights();
        for e in &out.log.epochs {
            assert_eq!(e.l_total, e.l_ec + w.alpha * e.l_gsim - w.beta * e.l_gc);
        }
    }

    #[test]
    fn cfa_requires_target() {
        let (src, _) = tiny();
        let err = train_mode_dispatch(&small_cfg(), Mode::Cfa, EmotionCategory::Anger, 1, &src, None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn runlog_jsonl_round_trip() {
        let (src, _) = tiny();
        let out = train_mode_dispatch(
            &small_cfg(),
            Mode::BaselineSrc,
            EmotionCategory::Sadness,
            2,
            &src,
            None,
        )
        .unwrap();
        let text = out.log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), out.log.epochs.len() + 1);
        assert_eq!(RunLog::from_jsonl(&text).unwrap(), out.log);
    }
}
