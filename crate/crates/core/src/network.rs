//! Encoder, emotion head and adversarial gender head.
//!
//! The gender head is attached to the encoder output through a
//! gradient-reversal junction: identity on the way forward, `-grl_scale`
//! times the adjoint on the way back. The junction is the only place the
//! adversarial sign enters; the scalar training objective adds `L_GC` with
//! a positive sign so the gender head itself minimizes it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Layer stacks for the three sub-networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: Vec<LayerSpec>,
    pub emotion_head: Vec<LayerSpec>,
    pub gender_head: Vec<LayerSpec>,
    pub grl_scale: f64,
}

/// Default encoder widths after the input layer.
pub const DEFAULT_ENCODER_WIDTHS: [usize; 4] = [256, 128, 64, 32];

impl ModelSpec {
    /// Four ReLU layers `d→256→128→64→32`, emotion head `32→1`, gender head
    /// `32→16→1`.
    pub fn default_for(input_dim: usize, grl_scale: f64) -> Self {
        Self::with_widths(input_dim, &DEFAULT_ENCODER_WIDTHS, 16, grl_scale)
    }

    pub fn with_widths(
        input_dim: usize,
        encoder_widths: &[usize],
        gender_hidden: usize,
        grl_scale: f64,
    ) -> Self {
        let mut encoder = Vec::new();
        let mut prev = input_dim;
        for &w in encoder_widths {
            encoder.push(LayerSpec::new(prev, w, Activation::Relu));
            prev = w;
        }
        Self {
            encoder,
            emotion_head: vec![LayerSpec::new(prev, 1, Activation::Sigmoid)],
            gender_head: vec![
                LayerSpec::new(prev, gender_hidden, Activation::Relu),
                LayerSpec::new(gender_hidden, 1, Activation::Sigmoid),
            ],
            grl_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(0, |l| l.input_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(self.grl_scale >= 0.0 && self.grl_scale.is_finite()) {
            return Err(Error::Config(format!(
                "grl_scale must be a finite nonnegative number, got {}",
                self.grl_scale
            )));
        }
        let emb = self.embedding_dim();
        for (name, stack, start) in [
            ("encoder", &self.encoder, self.input_dim()),
            ("emotion_head", &self.emotion_head, emb),
            ("gender_head", &self.gender_head, emb),
        ] {
            let mut prev = start;
            for (i, l) in stack.iter().enumerate() {
                if l.input_dim == 0 || l.output_dim == 0 {
                    return Err(Error::Config(format!("{name} layer {i} has a zero dimension")));
                }
                if l.input_dim != prev {
                    return Err(Error::Config(format!(
                        "{name} layer {i} expects input {} but receives {prev}",
                        l.input_dim
                    )));
                }
                prev = l.output_dim;
            }
        }
        for (name, stack) in [("emotion_head", &self.emotion_head), ("gender_head", &self.gender_head)] {
            match stack.last() {
                Some(l) if l.output_dim == 1 && l.activation == Activation::Sigmoid => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{name} must end in a single sigmoid unit"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// One fully-connected layer: `weight` is `input×output`, `bias` is `1×output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Sub-network selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    EmotionHead,
    GenderHead,
}

pub const ALL_PARTS: [Part; 3] = [Part::Encoder, Part::EmotionHead, Part::GenderHead];
pub const EMOTION_PARTS: [Part; 2] = [Part::Encoder, Part::EmotionHead];

#[derive(Clone, Debug, PartialEq)]
pub struct CfaModel {
    spec: ModelSpec,
    encoder: Vec<Dense>,
    emotion_head: Vec<Dense>,
    gender_head: Vec<Dense>,
}

/// Glorot-uniform bound for a layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_stack(stack: &[LayerSpec], rng: &mut ChaCha8Rng) -> Vec<Dense> {
    stack
        .iter()
        .map(|l| {
            let bound = glorot_bound(l.input_dim, l.output_dim);
            let data = (0..l.input_dim * l.output_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Dense {
                weight: Matrix::new(l.input_dim, l.output_dim, data)
                    .expect("finite glorot draw"),
                bias: Matrix::zeros(1, l.output_dim),
            }
        })
        .collect()
}

impl CfaModel {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = init_stack(&spec.encoder, &mut rng);
        let emotion_head = init_stack(&spec.emotion_head, &mut rng);
        let gender_head = init_stack(&spec.gender_head, &mut rng);
        Ok(Self {
            spec,
            encoder,
            emotion_head,
            gender_head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn grl_scale(&self) -> f64 {
        self.spec.grl_scale
    }

    pub fn set_grl_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("grl_scale must be >= 0, got {scale}")));
        }
        self.spec.grl_scale = scale;
        Ok(())
    }

    fn stack(&self, part: Part) -> &[Dense] {
        match part {
            Part::Encoder => &self.encoder,
            Part::EmotionHead => &self.emotion_head,
            Part::GenderHead => &self.gender_head,
        }
    }

    fn stack_mut(&mut self, part: Part) -> &mut Vec<Dense> {
        match part {
            Part::Encoder => &mut self.encoder,
            Part::EmotionHead => &mut self.emotion_head,
            Part::GenderHead => &mut self.gender_head,
        }
    }

    /// Parameter matrices of the given parts, weight then bias per layer.
    pub fn parameters(&self, parts: &[Part]) -> Vec<&Matrix> {
        parts
            .iter()
            .flat_map(|&p| self.stack(p).iter().flat_map(|d| [&d.weight, &d.bias]))
            .collect()
    }

    pub fn parameters_mut(&mut self, parts: &[Part]) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        // Each part is borrowed once; parts are distinct fields.
        let (enc, emo, gen) = (
            &mut self.encoder,
            &mut self.emotion_head,
            &mut self.gender_head,
        );
        let mut enc = Some(enc);
        let mut emo = Some(emo);
        let mut gen = Some(gen);
        for &p in parts {
            let stack = match p {
                Part::Encoder => enc.take(),
                Part::EmotionHead => emo.take(),
                Part::GenderHead => gen.take(),
            };
            if let Some(stack) = stack {
                for d in stack.iter_mut() {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters(&ALL_PARTS).iter().map(|m| m.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut bind_stack = |stack: &[Dense], specs: &[LayerSpec]| {
            stack
                .iter()
                .zip(specs)
                .map(|(d, s)| BoundLayer {
                    weight: tape.leaf(d.weight.clone()),
                    bias: tape.leaf(d.bias.clone()),
                    activation: s.activation,
                })
                .collect::<Vec<_>>()
        };
        BoundModel {
            encoder: bind_stack(&self.encoder, &self.spec.encoder),
            emotion_head: bind_stack(&self.emotion_head, &self.spec.emotion_head),
            gender_head: bind_stack(&self.gender_head, &self.spec.gender_head),
            grl_scale: self.spec.grl_scale,
        }
    }

    fn check_input(&self, x: &Matrix, expected: usize, op: &'static str) -> Result<()> {
        if x.cols() != expected {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: (x.rows(), expected),
            });
        }
        Ok(())
    }

    /// Embeddings `z` and emotion probabilities for a batch of features.
    pub fn forward_ec(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x, self.spec.input_dim(), "forward_ec")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let z = bound.encode(&mut tape, xv)?;
        let p = bound.emotion_prob(&mut tape, z)?;
        Ok((tape.value(z).clone(), tape.value(p).clone()))
    }

    /// Gender probabilities for a batch of embeddings.
    pub fn forward_gc(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input(z, self.spec.embedding_dim(), "forward_gc")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let p = bound.gender_prob(&mut tape, zv)?;
        Ok(tape.value(p).clone())
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_ec(x)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            parameters: self
                .parameters(&ALL_PARTS)
                .into_iter()
                .map(|m| m.as_slice().to_vec())
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let mut model = CfaModel::init(ckpt.spec, 0)?;
        let slots = model.parameters_mut(&ALL_PARTS);
        if slots.len() != ckpt.parameters.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameter arrays, spec needs {}",
                ckpt.parameters.len(),
                slots.len()
            )));
        }
        for (i, (slot, values)) in slots.into_iter().zip(ckpt.parameters).enumerate() {
            let (r, c) = slot.shape();
            *slot = Matrix::new(r, c, values).map_err(|e| {
                Error::Config(format!("checkpoint parameter array {i}: {e}"))
            })?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "fairadapt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: spec plus flat parameter arrays in
/// encoder / emotion head / gender head order, weight then bias per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub parameters: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// Model parameters living on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<BoundLayer>,
    pub emotion_head: Vec<BoundLayer>,
    pub gender_head: Vec<BoundLayer>,
    pub grl_scale: f64,
}

fn apply_stack(tape: &mut Tape, layers: &[BoundLayer], mut x: Var) -> Result<Var> {
    for l in layers {
        let h = tape.matmul(x, l.weight)?;
        let h = tape.add_bias(h, l.bias)?;
        x = match l.activation {
            Activation::Relu => tape.relu(h),
            Activation::Sigmoid => tape.sigmoid(h),
            Activation::None => h,
        };
    }
    Ok(x)
}

impl BoundModel {
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        apply_stack(tape, &self.encoder, x)
    }

    pub fn emotion_prob(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        apply_stack(tape, &self.emotion_head, z)
    }

    /// Gender head without the reversal junction.
    pub fn gender_prob(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        apply_stack(tape, &self.gender_head, z)
    }

    /// Gender head behind the reversal junction.
    pub fn gender_prob_reversed(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let r = tape.reverse_gradient(z, self.grl_scale);
        apply_stack(tape, &self.gender_head, r)
    }

    /// Tape variables in the same order as [`CfaModel::parameters`].
    pub fn parameter_vars(&self, parts: &[Part]) -> Vec<Var> {
        parts
            .iter()
            .flat_map(|&p| {
                let stack = match p {
                    Part::Encoder => &self.encoder,
                    Part::EmotionHead => &self.emotion_head,
                    Part::GenderHead => &self.gender_head,
                };
                stack.iter().flat_map(|l| [l.weight, l.bias])
            })
            .collect()
    }
}

/// Backward rule of the reversal junction applied to a raw adjoint vector.
pub fn grl(upstream: &[f64], scale: f64) -> Vec<f64> {
    upstream.iter().map(|g| -scale * g).collect()
}

impl CfaModel {
    /// Replaces every parameter of `part` with zeros (test and probe helper).
    pub fn zero_part(&mut self, part: Part) {
        for d in self.stack_mut(part).iter_mut() {
            d.weight = Matrix::zeros(d.weight.rows(), d.weight.cols());
            d.bias = Matrix::zeros(1, d.bias.cols());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::with_widths(3, &[4, 2], 3, 0.5)
    }

    #[test]
    fn default_spec_matches_declared_widths() {
        let s = ModelSpec::default_for(32, 0.5);
        let dims: Vec<_> = s.encoder.iter().map(|l| (l.input_dim, l.output_dim)).collect();
        assert_eq!(dims, vec![(32, 256), (256, 128), (128, 64), (64, 32)]);
        assert_eq!(s.emotion_head, vec![LayerSpec::new(32, 1, Activation::Sigmoid)]);
        assert_eq!(s.gender_head[0], LayerSpec::new(32, 16, Activation::Relu));
        s.validate().unwrap();
    }

    #[test]
    fn glorot_bound_hand_value() {
        assert_eq!(glorot_bound(3, 3), 1.0);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = CfaModel::init(tiny_spec(), 11).unwrap();
        let b = CfaModel::init(tiny_spec(), 11).unwrap();
        let c = CfaModel::init(tiny_spec(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for d in a.parameters(&ALL_PARTS) {
            assert!(d.is_finite());
        }
        assert!(a.encoder.iter().all(|d| d.bias.as_slice().iter().all(|&v| v == 0.0)));
        let bound = glorot_bound(3, 4);
        assert!(a.encoder[0].weight.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let mut m = CfaModel::init(tiny_spec(), 3).unwrap();
        for p in ALL_PARTS {
            m.zero_part(p);
        }
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]]).unwrap();
        let (z, p) = m.forward_ec(&x).unwrap();
        assert_eq!(z.shape(), (2, 2));
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        assert_eq!(m.forward_gc(&z).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn single_layer_hand_evaluation() {
        let spec = ModelSpec {
            encoder: vec![LayerSpec::new(2, 2, Activation::None)],
            emotion_head: vec![LayerSpec::new(2, 1, Activation::Sigmoid)],
            gender_head: vec![LayerSpec::new(2, 1, Activation::Sigmoid)],
            grl_scale: 1.0,
        };
        let mut m = CfaModel::init(spec, 0).unwrap();
        {
            let mut p = m.parameters_mut(&ALL_PARTS);
            *p[0] = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
            *p[2] = Matrix::from_rows(&[[0.5], [-1.0]]).unwrap();
            *p[3] = Matrix::scalar(0.25);
            *p[4] = Matrix::from_rows(&[[2.0], [0.0]]).unwrap();
        }
        let x = Matrix::from_rows(&[[2.0, 1.0]]).unwrap();
        let (z, p) = m.forward_ec(&x).unwrap();
        assert_eq!(z, x);
        // logit = 0.5*2 - 1*1 + 0.25
        let expected = 1.0 / (1.0 + (-0.25f64).exp());
        assert!((p.item().unwrap() - expected).abs() < 1e-15);
        let g = m.forward_gc(&z).unwrap().item().unwrap();
        assert!((g - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = CfaModel::init(tiny_spec(), 0).unwrap();
        assert!(matches!(
            m.forward_ec(&Matrix::zeros(2, 5)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            m.forward_gc(&Matrix::zeros(2, 5)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn grl_hand_values() {
        assert_eq!(grl(&[0.2, -0.1], 1.0), vec![-0.2, 0.1]);
        assert!(grl(&[0.2, -0.1], 0.0).iter().all(|v| *v == 0.0));
        assert_eq!(grl(&[1.0, -4.0], 0.5), vec![-0.5, 2.0]);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut s = tiny_spec();
        s.grl_scale = -1.0;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.emotion_head[0].output_dim = 2;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.gender_head[0].input_dim = 7;
        assert!(s.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = CfaModel::init(ModelSpec::default_for(7, 0.5), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = CfaModel::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
