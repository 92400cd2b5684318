//! Corpus schema, CSV ingestion, the synthetic biased-corpus generator,
//! reweighing weights and the batch/pair samplers used in training.
//!
//! Corpus files are headered CSV with columns
//! `id,corpus,split,gender,emotion,f0..f{D-1}`. Emotion is stored as the
//! four-way category and binarized per task (named emotion = positive).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown corpus {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Gender {
    /// Binary target for the gender head: 0 male, 1 female.
    pub fn label(self) -> f64 {
        match self {
            Gender::Male => 0.0,
            Gender::Female => 1.0,
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" | "male" => Ok(Gender::Male),
            "F" | "f" | "female" => Ok(Gender::Female),
            other => Err(Error::Config(format!("unknown gender token {other:?}"))),
        }
    }
}

/// Four-way emotion category; each binary task uses one as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Neutral,
    Happiness,
    Anger,
    Sadness,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; 4] = [
        EmotionCategory::Neutral,
        EmotionCategory::Happiness,
        EmotionCategory::Anger,
        EmotionCategory::Sadness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmotionCategory::Neutral => "neutral",
            EmotionCategory::Happiness => "happiness",
            EmotionCategory::Anger => "anger",
            EmotionCategory::Sadness => "sadness",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmotionCategory::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown emotion {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub corpus: Domain,
    pub split: Split,
    pub gender: Gender,
    pub emotion: EmotionCategory,
    pub features: Vec<f64>,
}

impl Sample {
    /// Binary label for the task whose positive class is `task`.
    pub fn label(&self, task: EmotionCategory) -> f64 {
        if self.emotion == task {
            1.0
        } else {
            0.0
        }
    }
}

/// Validated sample set of one corpus, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    domain: Domain,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(domain: Domain, feature_dim: usize, mut samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parse {
                row: 0,
                message: "no samples".into(),
            });
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!(
                        "sample {} has {} features, expected {feature_dim}",
                        s.id,
                        s.features.len()
                    ),
                });
            }
            if s.corpus != domain {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("sample {} belongs to the {} corpus", s.id, s.corpus.name()),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("sample {} has a non-finite feature", s.id),
                });
            }
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate sample id {}", w[0].id)));
        }
        Ok(Self {
            domain,
            feature_dim,
            samples,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Matrix::new(indices.len(), self.feature_dim, data).expect("validated features")
    }

    pub fn labels(&self, indices: &[usize], task: EmotionCategory) -> Vec<f64> {
        indices.iter().map(|&i| self.samples[i].label(task)).collect()
    }

    pub fn genders(&self, indices: &[usize]) -> Vec<Gender> {
        indices.iter().map(|&i| self.samples[i].gender).collect()
    }

    /// Copy with gender fields replaced by `f(index, gender)`.
    pub fn with_genders(&self, mut f: impl FnMut(usize, Gender) -> Gender) -> Corpus {
        let mut out = self.clone();
        for (i, s) in out.samples.iter_mut().enumerate() {
            s.gender = f(i, s.gender);
        }
        out
    }
}

const FIXED_COLUMNS: [&str; 5] = ["id", "corpus", "split", "gender", "emotion"];

/// Reads a corpus CSV. Rows are validated individually; errors carry the
/// 1-based data row number.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(file)
}

pub fn read_corpus<R: std::io::Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header_err = |message: String| Error::Parse { row: 0, message };
    let headers = rdr
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(header_err("no samples".into()));
    }
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(header_err(format!("missing column {name:?} at position {i}")));
        }
    }
    let feature_dim = headers.len() - FIXED_COLUMNS.len();
    for (k, h) in headers.iter().skip(FIXED_COLUMNS.len()).enumerate() {
        if h != format!("f{k}") {
            return Err(header_err(format!("expected feature column f{k}, found {h:?}")));
        }
    }
    if feature_dim == 0 {
        return Err(header_err("header declares no feature columns".into()));
    }

    let mut samples = Vec::new();
    let mut domain = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let perr = |message: String| Error::Parse { row, message };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(perr(format!(
                "expected {} fields ({feature_dim} features), found {}",
                headers.len(),
                rec.len()
            )));
        }
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(perr("empty id".into()));
        }
        let corpus: Domain = field(1).parse().map_err(|e: Error| perr(e.to_string()))?;
        let split: Split = field(2).parse().map_err(|e: Error| perr(e.to_string()))?;
        let gender: Gender = field(3).parse().map_err(|e: Error| perr(e.to_string()))?;
        let emotion: EmotionCategory =
            field(4).parse().map_err(|e: Error| perr(e.to_string()))?;
        let mut features = Vec::with_capacity(feature_dim);
        for k in 0..feature_dim {
            let raw = field(FIXED_COLUMNS.len() + k);
            let v: f64 = raw
                .parse()
                .map_err(|_| perr(format!("feature f{k} is not a number: {raw:?}")))?;
            if !v.is_finite() {
                return Err(perr(format!("feature f{k} is not finite")));
            }
            features.push(v);
        }
        match domain {
            None => domain = Some(corpus),
            Some(d) if d != corpus => {
                return Err(perr(format!(
                    "mixed corpora in one file ({} and {})",
                    d.name(),
                    corpus.name()
                )))
            }
            _ => {}
        }
        samples.push(Sample {
            id,
            corpus,
            split,
            gender,
            emotion,
            features,
        });
    }
    let domain = domain.ok_or_else(|| header_err("no samples".into()))?;
    Corpus::new(domain, feature_dim, samples)
}

pub fn write_corpus<W: std::io::Write>(corpus: &Corpus, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Config(format!("csv write: {e}"));
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..corpus.feature_dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(to_err)?;
    for s in &corpus.samples {
        let mut rec = vec![
            s.id.clone(),
            s.corpus.name().to_string(),
            s.split.name().to_string(),
            s.gender.token().to_string(),
            s.emotion.name().to_string(),
        ];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv write: {e}")))?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, std::io::BufWriter::new(file))
}

/// Parameters of the synthetic source/target generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_corpus: usize,
    pub feature_dim: usize,
    /// Fraction of samples carrying a non-neutral emotion; those are split
    /// evenly across happiness, anger and sadness.
    pub emotion_prevalence: f64,
    /// Fraction of male speakers.
    pub gender_balance: f64,
    pub bias_strength: f64,
    pub domain_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_corpus: 4000,
            feature_dim: 32,
            emotion_prevalence: 0.75,
            gender_balance: 0.5,
            bias_strength: 1.5,
            domain_shift: 0.5,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("emotion_prevalence", self.emotion_prevalence)?;
        open_unit("gender_balance", self.gender_balance)?;
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.n_per_corpus < 2 {
            return Err(Error::Config("n_per_corpus must be >= 2".into()));
        }
        for (name, v) in [
            ("bias_strength", self.bias_strength),
            ("domain_shift", self.domain_shift),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distance of each emotion cluster mean from the origin along its own axis.
pub const LABEL_SEPARATION: f64 = 0.9;
/// Rotation angle (radians) applied to the target per unit of `domain_shift`.
pub const SHIFT_ANGLE_PER_UNIT: f64 = std::f64::consts::PI;
/// Share of the rotation partner of the gender axis lying in the arousal
/// direction of the emotion subspace.
pub const AROUSAL_COUPLING: f64 = 0.8;
/// Length of the target offset per unit of `domain_shift`.
pub const OFFSET_PER_UNIT: f64 = 2.0;

/// Geometry shared by both corpora of one generator seed.
struct Frame {
    emotion_axes: [Vec<f64>; 4],
    gender_axis: Vec<f64>,
    /// Unit vector the gender axis is rotated toward in the target.
    partner: Vec<f64>,
    offset: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl Frame {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF4A3));
        // Orthonormal while the dimension allows, plain random unit vectors after.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..6 {
            let mut v = gaussian_vec(&mut rng, dim);
            if basis.len() < dim {
                for b in &basis {
                    let p = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            normalize(&mut v);
            basis.push(v);
        }
        let emotion_axes = [
            basis[0].clone(),
            basis[1].clone(),
            basis[2].clone(),
            basis[3].clone(),
        ];
        // Arousal direction: happiness and anger up, neutral and sadness down.
        let mut arousal: Vec<f64> = (0..dim)
            .map(|k| 0.5 * (-basis[0][k] + basis[1][k] + basis[2][k] - basis[3][k]))
            .collect();
        normalize(&mut arousal);
        let c = AROUSAL_COUPLING;
        let mut partner: Vec<f64> = arousal
            .iter()
            .zip(&basis[5])
            .map(|(a, v)| c * a + (1.0 - c * c).sqrt() * v)
            .collect();
        // Keep the partner orthogonal to the gender axis so the rotation is proper.
        let p = dot(&partner, &basis[4]);
        partner.iter_mut().zip(&basis[4]).for_each(|(x, g)| *x -= p * g);
        normalize(&mut partner);
        let mut offset = gaussian_vec(&mut rng, dim);
        normalize(&mut offset);
        Self {
            emotion_axes,
            gender_axis: basis[4].clone(),
            partner,
            offset,
        }
    }

    /// Rotates `x` by `angle` in the plane spanned by the gender axis and its
    /// partner.
    fn rotate(&self, x: &mut [f64], angle: f64) {
        if angle == 0.0 {
            return;
        }
        let (g, q) = (&self.gender_axis, &self.partner);
        let (xg, xq) = (dot(x, g), dot(x, q));
        let (s, c) = angle.sin_cos();
        let (ng, nq) = (c * xg - s * xq, s * xg + c * xq);
        for k in 0..x.len() {
            x[k] += (ng - xg) * g[k] + (nq - xq) * q[k];
        }
    }
}

/// Generates a (source, target) corpus pair.
///
/// Each emotion category has its own axis with cluster mean
/// `LABEL_SEPARATION` along it; every sample is shifted by
/// `±bias_strength/2` along a gender axis (male +, female −); isotropic noise
/// has standard deviation `noise_sigma`. The target corpus applies a fixed
/// rotation that tilts the gender axis toward the arousal direction of the
/// emotion subspace (angle `domain_shift·π`), then an offset of length
/// `2·domain_shift` along a random direction. Splits are 70/15/15, stratified
/// by (gender, category).
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    let frame = Frame::new(spec.feature_dim, spec.seed);
    let source = synth_one(spec, &frame, Domain::Source)?;
    let target = synth_one(spec, &frame, Domain::Target)?;
    Ok((source, target))
}

fn synth_one(spec: &SynthSpec, frame: &Frame, domain: Domain) -> Result<Corpus> {
    let tag = match domain {
        Domain::Source => 0x5A,
        Domain::Target => 0x7B,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag));
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    let width = spec.n_per_corpus.to_string().len().max(5);
    let angle = match domain {
        Domain::Source => 0.0,
        Domain::Target => spec.domain_shift * SHIFT_ANGLE_PER_UNIT,
    };
    let offset_len = match domain {
        Domain::Source => 0.0,
        Domain::Target => spec.domain_shift * OFFSET_PER_UNIT,
    };

    let mut samples = Vec::with_capacity(spec.n_per_corpus);
    for i in 0..spec.n_per_corpus {
        let gender = if rng.random::<f64>() < spec.gender_balance {
            Gender::Male
        } else {
            Gender::Female
        };
        let emotion = if rng.random::<f64>() < spec.emotion_prevalence {
            EmotionCategory::ALL[1 + rng.random_range(0..3)]
        } else {
            EmotionCategory::Neutral
        };
        let sign = match gender {
            Gender::Male => 0.5,
            Gender::Female => -0.5,
        };
        let axis = &frame.emotion_axes[emotion.index()];
        let mut x: Vec<f64> = (0..spec.feature_dim)
            .map(|k| {
                let noise: f64 = rng.sample(StandardNormal);
                LABEL_SEPARATION * axis[k]
                    + sign * spec.bias_strength * frame.gender_axis[k]
                    + spec.noise_sigma * noise
            })
            .collect();
        frame.rotate(&mut x, angle);
        x.iter_mut()
            .zip(&frame.offset)
            .for_each(|(v, o)| *v += offset_len * o);
        samples.push(Sample {
            id: format!("{prefix}-{i:0width$}"),
            corpus: domain,
            split: Split::Train,
            gender,
            emotion,
            features: x,
        });
    }
    assign_stratified_splits(&mut samples, &mut rng);
    Corpus::new(domain, spec.feature_dim, samples)
}

fn assign_stratified_splits(samples: &mut [Sample], rng: &mut ChaCha8Rng) {
    for gender in [Gender::Male, Gender::Female] {
        for emotion in EmotionCategory::ALL {
            let mut members: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].gender == gender && samples[i].emotion == emotion)
                .collect();
            members.shuffle(rng);
            let n = members.len();
            let n_train = (0.70 * n as f64).round() as usize;
            let n_valid = ((0.15 * n as f64).round() as usize).min(n - n_train);
            for (k, &i) in members.iter().enumerate() {
                samples[i].split = if k < n_train {
                    Split::Train
                } else if k < n_train + n_valid {
                    Split::Valid
                } else {
                    Split::Test
                };
            }
        }
    }
}

/// Reweighing multipliers per (gender, label) cell of the train split:
/// `w(a, y) = N(a)·N(y) / (N·N(a, y))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweighWeights {
    /// Indexed `[gender][label]` with male = 0, negative = 0.
    pub cells: [[f64; 2]; 2],
}

impl ReweighWeights {
    pub fn weight(&self, gender: Gender, label: f64) -> f64 {
        self.cells[gender.label() as usize][label as usize]
    }
}

pub fn reweigh_weights(corpus: &Corpus, task: EmotionCategory) -> Result<ReweighWeights> {
    let train = corpus.split_indices(Split::Train);
    reweigh_from_pairs(
        train
            .iter()
            .map(|&i| (corpus.samples[i].gender, corpus.samples[i].label(task))),
    )
}

/// Reweighing from raw (gender, label) observations.
pub fn reweigh_from_pairs(
    obs: impl IntoIterator<Item = (Gender, f64)>,
) -> Result<ReweighWeights> {
    let mut joint = [[0usize; 2]; 2];
    for (g, y) in obs {
        joint[g.label() as usize][y as usize] += 1;
    }
    let n: usize = joint.iter().flatten().sum();
    let mut cells = [[0.0; 2]; 2];
    for a in 0..2 {
        for y in 0..2 {
            if joint[a][y] == 0 {
                let g = if a == 0 { "M" } else { "F" };
                return Err(Error::Contract(format!(
                    "reweighing cell (gender={g}, label={y}) is empty"
                )));
            }
            let n_a = (joint[a][0] + joint[a][1]) as f64;
            let n_y = (joint[0][y] + joint[1][y]) as f64;
            cells[a][y] = n_a * n_y / (n as f64 * joint[a][y] as f64);
        }
    }
    Ok(ReweighWeights { cells })
}

/// Half source, half target positions into the train index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Shuffled single-corpus batches covering `indices` once.
pub fn shuffled_batches(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if indices.is_empty() {
        return Err(Error::Contract("cannot batch an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + epoch as u64));
    let order = permutation(indices.len(), &mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&k| indices[k]).collect())
        .collect())
}

/// One epoch of mixed batches: a full pass over the larger index list, with
/// the smaller one reshuffled and cycled to match.
pub fn mixed_batches(
    source: &[usize],
    target: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<MixedBatch>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "mixed batches need a positive even batch_size, got {batch_size}"
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("mixed batches need both corpora".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2000 + epoch as u64));
    let half = batch_size / 2;
    let len = source.len().max(target.len());
    let stream = |list: &[usize], rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            out.extend(permutation(list.len(), rng).into_iter().map(|k| list[k]));
        }
        out.truncate(len);
        out
    };
    let src = stream(source, &mut rng);
    let tgt = stream(target, &mut rng);
    Ok(src
        .chunks(half)
        .zip(tgt.chunks(half))
        .map(|(s, t)| MixedBatch {
            source: s.to_vec(),
            target: t.to_vec(),
        })
        .collect())
}

/// A cross-corpus pair: positions within a batch's source and target halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source_pos: usize,
    pub target_pos: usize,
    /// 0 when the two speakers share a gender, 1 otherwise.
    pub y_pair: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

/// Pairs every source sample with a uniformly drawn target sample.
pub fn sample_pairs(
    source_genders: &[Gender],
    target_genders: &[Gender],
    seed: u64,
) -> Result<PairBatch> {
    if target_genders.is_empty() && !source_genders.is_empty() {
        return Err(Error::Contract("pair sampling needs target samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = source_genders
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let j = rng.random_range(0..target_genders.len());
            Pair {
                source_pos: i,
                target_pos: j,
                y_pair: u8::from(*g != target_genders[j]),
            }
        })
        .collect();
    Ok(PairBatch { pairs })
}
