//! Reduction cases and invariants of the training pipeline.

use fairadapt::data::{mixed_batches, synth_corpus, Corpus, EmotionCategory, Gender, Split, SynthSpec};
use fairadapt::evalreport::evaluate;
use fairadapt::losses::bce;
use fairadapt::network::{CfaModel, Part, ALL_PARTS, EMOTION_PARTS};
use fairadapt::numcore::{Matrix, Tape};
use fairadapt::optim::{AdamState, DecayMode};
use fairadapt::train::{
    predict, split_uar, train_mode_dispatch, train_stage1, train_stage2_cfa, Mode, TrainConfig,
};
use fairadapt::util::derive_seed;

const TASK: EmotionCategory = EmotionCategory::Anger;

fn corpora(n: usize, bias: f64, shift: f64, seed: u64) -> (Corpus, Corpus) {
    synth_corpus(&SynthSpec {
        n_per_corpus: n,
        feature_dim: 12,
        bias_strength: bias,
        domain_shift: shift,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        encoder_widths: vec![24, 12],
        gender_hidden: 8,
        lr: 1e-3,
        max_epochs: 6,
        ..TrainConfig::default()
    }
}

fn params(m: &CfaModel, parts: &[Part]) -> Vec<Matrix> {
    m.parameters(parts).into_iter().cloned().collect()
}

/// Stage 2 with α = 0 and reversal scale 0 moves the encoder and emotion
/// head exactly as plain emotion-loss steps on the same source halves.
#[test]
fn no_similarity_no_reversal_reduces_to_emotion_training() {
    for decay_mode in [DecayMode::Weight, DecayMode::Lr] {
        let (src, tgt) = corpora(500, 1.5, 0.5, 4);
        let cfg = TrainConfig {
            alpha: 0.0,
            grl_scale: Some(0.0),
            stage2_epochs: Some(3),
            decay_mode,
            ..small_cfg()
        };
        let seed = 17;
        let m0 = CfaModel::init(cfg.model_spec(12), 5).unwrap();
        let (m2, best) = train_stage2_cfa(m0.clone(), &src, &tgt, TASK, &cfg, seed, &mut Vec::new()).unwrap();

        let mut reference = m0.clone();
        let mut adam = AdamState::new(cfg.adam());
        let (s_tr, t_tr) = (src.split_indices(Split::Train), tgt.split_indices(Split::Train));
        let mut snapshots = Vec::new();
        for epoch in 1..=3 {
            for b in mixed_batches(&s_tr, &t_tr, cfg.batch_size, derive_seed(seed, 0x52), epoch).unwrap() {
                let mut t = Tape::new();
                let bound = reference.bind(&mut t);
                let x = t.leaf(src.features(&b.source));
                let z = bound.encode(&mut t, x).unwrap();
                let p = bound.emotion_prob(&mut t, z).unwrap();
                let l = bce(&mut t, p, &src.labels(&b.source, TASK), None).unwrap();
                let g = t.backward(l).unwrap();
                let grads: Vec<Matrix> = bound.parameter_vars(&EMOTION_PARTS).into_iter().map(|v| g.wrt(v)).collect();
                adam.step(&mut reference.parameters_mut(&EMOTION_PARTS), &grads).unwrap();
            }
            snapshots.push(params(&reference, &EMOTION_PARTS));
        }
        assert!(best >= 1);
        assert_eq!(params(&m2, &EMOTION_PARTS), snapshots[best - 1], "{decay_mode:?}");
    }
}

#[test]
fn gender_step_at_zero_scale_leaves_encoder_untouched() {
    let (src, tgt) = corpora(300, 1.5, 0.5, 2);
    let cfg = TrainConfig { weight_decay: 0.0, ..small_cfg() };
    let mut model = CfaModel::init(cfg.model_spec(12), 3).unwrap();
    model.set_grl_scale(0.0).unwrap();
    let idx_s = src.split_indices(Split::Train);
    let idx_t = tgt.split_indices(Split::Train);
    let mut rows = src.features(&idx_s[..32]).into_vec();
    rows.extend(tgt.features(&idx_t[..32]).into_vec());
    let x = Matrix::new(64, 12, rows).unwrap();
    let g: Vec<f64> = src.genders(&idx_s[..32]).iter().chain(&tgt.genders(&idx_t[..32])).map(|g| g.label()).collect();

    let mut t = Tape::new();
    let bound = model.bind(&mut t);
    let xv = t.leaf(x);
    let z = bound.encode(&mut t, xv).unwrap();
    let p = bound.gender_prob_reversed(&mut t, z).unwrap();
    let l = bce(&mut t, p, &g, None).unwrap();
    let grads = t.backward(l).unwrap();
    let gv: Vec<Matrix> = bound.parameter_vars(&ALL_PARTS).into_iter().map(|v| grads.wrt(v)).collect();

    let enc = params(&model, &[Part::Encoder]);
    let head = params(&model, &[Part::GenderHead]);
    AdamState::new(cfg.adam()).step(&mut model.parameters_mut(&ALL_PARTS), &gv).unwrap();
    assert_eq!(params(&model, &[Part::Encoder]), enc);
    assert_ne!(params(&model, &[Part::GenderHead]), head);
}

#[test]
fn source_only_modes_ignore_the_target() {
    let (src, tgt) = corpora(400, 1.5, 0.5, 1);
    for mode in [Mode::BaselineSrc, Mode::BaselineReweigh] {
        let a = train_mode_dispatch(&small_cfg(), mode, TASK, 3, &src, Some(&tgt)).unwrap();
        let b = train_mode_dispatch(&small_cfg(), mode, TASK, 3, &src, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.epochs, b.log.epochs);
        assert_eq!(a.log.stage2_best_epoch, None);
    }
}

#[test]
fn cfa_without_stage_two_is_the_source_baseline() {
    let (src, tgt) = corpora(400, 1.5, 0.5, 1);
    let cfg = TrainConfig { stage2_epochs: Some(0), ..small_cfg() };
    let cfa = train_mode_dispatch(&cfg, Mode::Cfa, TASK, 8, &src, Some(&tgt)).unwrap();
    let base = train_mode_dispatch(&cfg, Mode::BaselineSrc, TASK, 8, &src, None).unwrap();
    assert_eq!(cfa.model, base.model);
    assert_eq!(cfa.log.epochs, base.log.epochs);
}

#[test]
fn runs_are_deterministic() {
    let (src, tgt) = corpora(400, 1.5, 0.5, 6);
    for mode in Mode::ALL {
        let a = train_mode_dispatch(&small_cfg(), mode, TASK, 21, &src, Some(&tgt)).unwrap();
        let b = train_mode_dispatch(&small_cfg(), mode, TASK, 21, &src, Some(&tgt)).unwrap();
        assert_eq!(a.model, b.model, "{mode}");
        assert_eq!(a.log.epochs, b.log.epochs, "{mode}");
        assert_eq!(a.log.stage1_best_epoch, b.log.stage1_best_epoch);
        assert_eq!(a.log.stage2_best_epoch, b.log.stage2_best_epoch);
    }
}

#[test]
fn predictions_never_depend_on_the_gender_column() {
    let (src, tgt) = corpora(400, 1.5, 0.5, 2);
    let flip = |c: &Corpus| c.with_genders(|i, g| if i % 3 == 0 { g.other() } else { g });
    let out = train_mode_dispatch(&small_cfg(), Mode::Cfa, TASK, 1, &src, Some(&tgt)).unwrap();
    let a = evaluate(&out.model, &[&src, &tgt], TASK, 0.5).unwrap();
    let b = evaluate(&out.model, &[&flip(&src), &flip(&tgt)], TASK, 0.5).unwrap();
    let pa: Vec<bool> = a.records.iter().map(|r| r.predicted).collect();
    let pb: Vec<bool> = b.records.iter().map(|r| r.predicted).collect();
    assert_eq!(pa, pb);
    assert_ne!(a, b);

    // the source baseline never reads gender during training either
    let m1 = train_mode_dispatch(&small_cfg(), Mode::BaselineSrc, TASK, 1, &src, None).unwrap();
    let m2 = train_mode_dispatch(&small_cfg(), Mode::BaselineSrc, TASK, 1, &flip(&src), None).unwrap();
    assert_eq!(m1.model, m2.model);
}

#[test]
fn zero_weights_predict_positive_at_the_tie() {
    let mut model = CfaModel::init(small_cfg().model_spec(12), 0).unwrap();
    for part in ALL_PARTS {
        model.zero_part(part);
    }
    let x = Matrix::filled(5, 12, 0.7);
    let (_, p) = model.forward_ec(&x).unwrap();
    assert!(p.as_slice().iter().all(|&v| v == 0.5));
    assert_eq!(predict(&model, &x, 0.5).unwrap(), vec![true; 5]);
}

#[test]
fn separable_source_is_learned() {
    let (src, _) = corpora(2000, 0.0, 0.0, 3);
    let cfg = TrainConfig { max_epochs: 15, ..small_cfg() };
    let (m, best) = train_stage1(
        CfaModel::init(cfg.model_spec(12), 1).unwrap(),
        &src,
        TASK,
        &cfg,
        None,
        1,
        &mut Vec::new(),
    )
    .unwrap();
    assert!(best >= 1);
    let u = split_uar(&m, &src, Split::Valid, TASK, 0.5).unwrap();
    assert!(u >= 0.9, "valid uar {u}");
    let test = evaluate(&m, &[&src], TASK, 0.5).unwrap();
    let u_test = fairadapt::metrics::uar(&test, None).unwrap();
    assert!(u_test >= 0.9, "test uar {u_test}");
}

#[test]
fn adversary_stays_at_chance_without_bias() {
    let (src, tgt) = corpora(2000, 0.0, 0.0, 5);
    let out = train_mode_dispatch(&small_cfg(), Mode::Cfa, TASK, 2, &src, Some(&tgt)).unwrap();
    let mut correct = 0;
    let mut total = 0;
    for c in [&src, &tgt] {
        let idx = c.split_indices(Split::Test);
        let z = out.model.embed(&c.features(&idx)).unwrap();
        let p = out.model.forward_gc(&z).unwrap();
        for (pi, g) in p.as_slice().iter().zip(c.genders(&idx)) {
            correct += usize::from((*pi >= 0.5) == (g == Gender::Female));
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!((acc - 0.5).abs() <= 0.05, "gender head accuracy {acc}");
}
