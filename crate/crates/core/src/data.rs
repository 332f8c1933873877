//! Synthetic multimodal emotion corpus with planted gender, emotion and
//! speaker structure, plus speaker-independent fold and membership splits.
//!
//! Acoustic frames carry activation as the energy of fluctuations in a small
//! subspace, and gender scales that energy. The fluctuations fill only part
//! of each dimension's variance, so per-speaker normalization keeps the cue.
//! Gender also adds a constant offset partly aligned with activation, which
//! normalization removes from acoustics but not from the lexical stream. A
//! speaker contributes a constant offset and per-frame "texture" noise along a
//! private direction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, tag, Rng};
use crate::tensor::Tensor;

/// Width of an acoustic (filterbank-like) frame.
pub const ACOUSTIC_DIM: usize = 40;
/// Width of a lexical (word-embedding-like) vector.
pub const LEXICAL_DIM: usize = 300;

/// Norm of the gender offset per unit of gender signal.
const OFFSET_GAIN: f64 = 1.0;
/// Cosine-like overlap between the gender offset and activation.
const GENDER_EMOTION_OVERLAP: f64 = 1.0;
/// Dimension of the subspace carrying acoustic fluctuations.
const FLUCTUATION_DIM: usize = 4;
const FLUCTUATION_GAIN: f64 = 2.0;
/// Log-amplitude of the fluctuations per unit of activation latent and
/// emotion signal.
const ENERGY_GAIN: f64 = 1.0;
/// Log-amplitude offset of the fluctuations per unit of gender signal,
/// positive for male speakers.
const GENDER_ENERGY: f64 = 1.2;
/// Norm of a speaker's constant offset per unit of speaker variance.
const SPEAKER_OFFSET_GAIN: f64 = 3.0;
/// Per-frame gain of the texture part of the speaker attribute.
const SPEAKER_TEXTURE_GAIN: f64 = 1.5;
/// Gain of the utterance-level emotion mean shift.
const EMOTION_GAIN: f64 = 1.0;
/// Per-dimension noise of acoustic frames and of lexical vectors.
const ACOUSTIC_NOISE: f64 = 1.0;
const LEXICAL_NOISE: f64 = 0.5;
/// z-score of the upper edge of the middle rating band when the latent rating
/// is standard normal; places a third of the mass in each class.
const MID_BAND_Z: f64 = 0.430_727_299_295_457_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Low,
    Mid,
    High,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 3] = [EmotionClass::Low, EmotionClass::Mid, EmotionClass::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Activation,
    Valence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingScale {
    #[serde(rename = "5pt")]
    FivePoint,
    #[serde(rename = "7pt")]
    SevenPoint,
    #[serde(rename = "9pt")]
    NinePoint,
}

impl RatingScale {
    pub fn range(self) -> (f64, f64) {
        match self {
            RatingScale::FivePoint => (1.0, 5.0),
            RatingScale::SevenPoint => (1.0, 7.0),
            RatingScale::NinePoint => (1.0, 9.0),
        }
    }

    /// Upper edges of the low and mid bands.
    fn edges(self) -> (f64, f64) {
        match self {
            RatingScale::FivePoint => (2.75, 3.25),
            RatingScale::SevenPoint => (3.75, 4.25),
            RatingScale::NinePoint => (4.5, 5.5),
        }
    }
}

/// Maps a mean rating onto low / mid / high. Bands are closed on their upper
/// edge: 9-point `[min, 4.5]`, `(4.5, 5.5]`, `(5.5, max]`; 5-point at 2.75 and
/// 3.25; 7-point at 3.75 and 4.25.
pub fn bin_rating(mean_rating: f64, scale: RatingScale) -> Result<EmotionClass> {
    let (lo, hi) = scale.range();
    if !(mean_rating >= lo && mean_rating <= hi) {
        return Err(Error::Domain(format!(
            "rating {mean_rating} outside [{lo}, {hi}] for {scale:?}"
        )));
    }
    let (low_edge, mid_edge) = scale.edges();
    Ok(if mean_rating <= low_edge {
        EmotionClass::Low
    } else if mean_rating <= mid_edge {
        EmotionClass::Mid
    } else {
        EmotionClass::High
    })
}

/// One utterance. `acoustic` is `[T_a, 40]`, `lexical` is `[T_l, 300]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSample {
    pub utterance_id: u32,
    pub speaker_id: u32,
    pub gender: Gender,
    pub activation: EmotionClass,
    pub valence: EmotionClass,
    pub activation_rating: f64,
    pub valence_rating: f64,
    pub acoustic: Tensor,
    pub lexical: Tensor,
}

impl UtteranceSample {
    pub fn emotion(&self, task: Task) -> EmotionClass {
        match task {
            Task::Activation => self.activation,
            Task::Valence => self.valence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub gender_signal_acoustic: f64,
    pub gender_signal_lexical: f64,
    pub emotion_signal: f64,
    pub speaker_variance: f64,
    pub rating_scale: RatingScale,
    /// Utterance duration range in units; lexical length is the duration,
    /// acoustic length is `duration * frames_per_unit`.
    pub seq_len_range: [usize; 2],
    pub frames_per_unit: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            utterances_per_speaker: 60,
            gender_signal_acoustic: 0.6,
            gender_signal_lexical: 0.3,
            emotion_signal: 0.5,
            speaker_variance: 0.5,
            rating_scale: RatingScale::NinePoint,
            seq_len_range: [3, 8],
            frames_per_unit: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("gender_signal_acoustic", self.gender_signal_acoustic)?;
        unit("gender_signal_lexical", self.gender_signal_lexical)?;
        unit("emotion_signal", self.emotion_signal)?;
        if !(self.speaker_variance >= 0.0 && self.speaker_variance.is_finite()) {
            return Err(Error::Config("speaker_variance must be finite and >= 0".into()));
        }
        if self.n_speakers < 2 || !self.n_speakers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_speakers = {} must be even and >= 2 for balanced genders",
                self.n_speakers
            )));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::Config("utterances_per_speaker must be >= 1".into()));
        }
        let [lo, hi] = self.seq_len_range;
        if lo < 3 || hi > 25 || lo > hi {
            return Err(Error::Config(format!(
                "seq_len_range [{lo}, {hi}] must satisfy 3 <= min <= max <= 25"
            )));
        }
        if self.frames_per_unit == 0 {
            return Err(Error::Config("frames_per_unit must be >= 1".into()));
        }
        Ok(())
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn unit_vector(r: &mut Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / norm).collect()
}

/// Planted directions for one modality.
struct Directions {
    /// Activation and valence.
    emotion: [Vec<f64>; 2],
    /// Unit vector tilted towards the activation direction.
    gender_offset: Vec<f64>,
    /// Orthonormal basis of the subspace carrying frame fluctuations.
    fluctuation: Vec<Vec<f64>>,
}

impl Directions {
    fn draw(r: &mut Rng, dim: usize) -> Self {
        let emotion = [unit_vector(r, dim), unit_vector(r, dim)];
        let own = unit_vector(r, dim);
        let gender_offset = normalize(
            emotion[0]
                .iter()
                .zip(&own)
                .map(|(u, o)| GENDER_EMOTION_OVERLAP * u + o)
                .collect(),
        );
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(FLUCTUATION_DIM);
        while basis.len() < FLUCTUATION_DIM {
            let mut v = unit_vector(r, dim);
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            basis.push(normalize(v));
        }
        Self {
            emotion,
            gender_offset,
            fluctuation: basis,
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / norm).collect()
}

struct SpeakerTraits {
    offset: Vec<f64>,
    texture: Vec<f64>,
}

impl SpeakerTraits {
    fn draw(r: &mut Rng, dim: usize) -> Self {
        Self {
            offset: unit_vector(r, dim),
            texture: unit_vector(r, dim),
        }
    }
}

/// Everything that shapes one utterance in one modality.
struct Planted<'a> {
    dirs: &'a Directions,
    speaker: &'a SpeakerTraits,
    sign: f64,
    gender_signal: f64,
    speaker_variance: f64,
    emotion_signal: f64,
    latent: [f64; 2],
}

impl Planted<'_> {
    /// Constant part of every frame. `activation_gain` scales how much of
    /// activation is carried by a mean shift.
    fn base(&self, dim: usize, activation_gain: f64) -> Vec<f64> {
        let e = self.emotion_signal * EMOTION_GAIN;
        (0..dim)
            .map(|i| {
                self.gender_signal * OFFSET_GAIN * self.sign * self.dirs.gender_offset[i]
                    + self.speaker_variance * SPEAKER_OFFSET_GAIN * self.speaker.offset[i]
                    + e * activation_gain * self.latent[0] * self.dirs.emotion[0][i]
                    + e * self.latent[1] * self.dirs.emotion[1][i]
            })
            .collect()
    }

    fn push_frame(&self, r: &mut Rng, base: &[f64], noise: f64, data: &mut Vec<f64>) {
        let texture = self.speaker_variance * SPEAKER_TEXTURE_GAIN * normal(r);
        for (b, t) in base.iter().zip(&self.speaker.texture) {
            data.push(b + texture * t + noise * normal(r));
        }
    }

    /// Acoustic frames express activation as the energy of white
    /// fluctuations in a small subspace; gender scales that energy too.
    fn acoustic(&self, r: &mut Rng, t_len: usize) -> Tensor {
        let base = self.base(ACOUSTIC_DIM, 0.0);
        let amp = FLUCTUATION_GAIN
            * math::exp(
                self.emotion_signal * ENERGY_GAIN * self.latent[0] + self.sign * self.gender_signal * GENDER_ENERGY,
            );
        let mut data = Vec::with_capacity(t_len * ACOUSTIC_DIM);
        for _ in 0..t_len {
            let start = data.len();
            self.push_frame(r, &base, ACOUSTIC_NOISE, &mut data);
            for axis in &self.dirs.fluctuation {
                let c = amp * normal(r);
                for (x, a) in data[start..].iter_mut().zip(axis) {
                    *x += c * a;
                }
            }
        }
        Tensor::from_parts(vec![t_len, ACOUSTIC_DIM], data)
    }

    fn lexical(&self, r: &mut Rng, t_len: usize) -> Tensor {
        let base = self.base(LEXICAL_DIM, 1.0);
        let mut data = Vec::with_capacity(t_len * LEXICAL_DIM);
        for _ in 0..t_len {
            self.push_frame(r, &base, LEXICAL_NOISE, &mut data);
        }
        Tensor::from_parts(vec![t_len, LEXICAL_DIM], data)
    }
}

/// Maps a standard-normal latent onto the scale so each band holds about a
/// third of the mass, clamped to the scale's range.
fn latent_to_rating(z: f64, scale: RatingScale) -> f64 {
    let (lo, hi) = scale.range();
    let (low_edge, mid_edge) = scale.edges();
    let centre = 0.5 * (low_edge + mid_edge);
    let half = 0.5 * (mid_edge - low_edge);
    (centre + z * half / MID_BAND_Z).clamp(lo, hi)
}

/// Generates the corpus. Speakers with even ids are male, odd ids female.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<UtteranceSample>> {
    cfg.validate()?;
    let mut dir_rng = rng::stream(cfg.seed, &[tag::CORPUS, 0]);
    let acoustic_dirs = Directions::draw(&mut dir_rng, ACOUSTIC_DIM);
    let lexical_dirs = Directions::draw(&mut dir_rng, LEXICAL_DIM);
    let mut out = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    let mut next_id = 0u32;
    for spk in 0..cfg.n_speakers {
        let mut r = rng::stream(cfg.seed, &[tag::CORPUS, 1, spk as u64]);
        let gender = if spk % 2 == 0 { Gender::M } else { Gender::F };
        let acoustic_traits = SpeakerTraits::draw(&mut r, ACOUSTIC_DIM);
        let lexical_traits = SpeakerTraits::draw(&mut r, LEXICAL_DIM);
        for _ in 0..cfg.utterances_per_speaker {
            let sign = if gender == Gender::M { 1.0 } else { -1.0 };
            let latent = [normal(&mut r), normal(&mut r)];
            let duration = r.random_range(cfg.seq_len_range[0]..=cfg.seq_len_range[1]);
            let activation_rating = latent_to_rating(latent[0], cfg.rating_scale);
            let valence_rating = latent_to_rating(latent[1], cfg.rating_scale);
            let planted = |dirs, speaker, gender_signal| Planted {
                dirs,
                speaker,
                sign,
                gender_signal,
                speaker_variance: cfg.speaker_variance,
                emotion_signal: cfg.emotion_signal,
                latent,
            };
            let acoustic = planted(&acoustic_dirs, &acoustic_traits, cfg.gender_signal_acoustic)
                .acoustic(&mut r, duration * cfg.frames_per_unit);
            let lexical = planted(&lexical_dirs, &lexical_traits, cfg.gender_signal_lexical).lexical(&mut r, duration);
            out.push(UtteranceSample {
                utterance_id: next_id,
                speaker_id: spk as u32,
                gender,
                activation: bin_rating(activation_rating, cfg.rating_scale)?,
                valence: bin_rating(valence_rating, cfg.rating_scale)?,
                activation_rating,
                valence_rating,
                acoustic,
                lexical,
            });
            next_id += 1;
        }
    }
    Ok(out)
}

/// Speaker and acoustic dimension whose variance was zero during normalization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZNormReport {
    pub flagged: Vec<(u32, usize)>,
}

/// Z-normalizes acoustic features per speaker and per dimension over all of
/// that speaker's frames. Lexical features are left untouched. A dimension
/// with zero variance is only centred and reported in the returned flags.
pub fn znorm_by_speaker(corpus: &mut [UtteranceSample]) -> Result<ZNormReport> {
    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        if s.acoustic.rank() != 2 || s.acoustic.cols() != ACOUSTIC_DIM {
            return Err(Error::Dimension(format!(
                "utterance {} has acoustic shape {:?}",
                s.utterance_id,
                s.acoustic.shape()
            )));
        }
        by_speaker.entry(s.speaker_id).or_default().push(i);
    }
    let mut report = ZNormReport::default();
    for (speaker, idx) in by_speaker {
        let frames: usize = idx.iter().map(|&i| corpus[i].acoustic.rows()).sum();
        if frames < 2 {
            return Err(Error::Data(format!("speaker {speaker} has {frames} acoustic frames, need >= 2")));
        }
        let mut mean = [0.0; ACOUSTIC_DIM];
        for &i in &idx {
            for row in corpus[i].acoustic.data().chunks_exact(ACOUSTIC_DIM) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames as f64);
        let mut var = [0.0; ACOUSTIC_DIM];
        for &i in &idx {
            for row in corpus[i].acoustic.data().chunks_exact(ACOUSTIC_DIM) {
                for d in 0..ACOUSTIC_DIM {
                    let c = row[d] - mean[d];
                    var[d] += c * c;
                }
            }
        }
        let mut scale = [1.0; ACOUSTIC_DIM];
        for d in 0..ACOUSTIC_DIM {
            let sd = math::sqrt(var[d] / frames as f64);
            if sd > 0.0 {
                scale[d] = 1.0 / sd;
            } else {
                report.flagged.push((speaker, d));
            }
        }
        for &i in &idx {
            for row in corpus[i].acoustic.data_mut().chunks_exact_mut(ACOUSTIC_DIM) {
                for d in 0..ACOUSTIC_DIM {
                    row[d] = (row[d] - mean[d]) * scale[d];
                }
            }
        }
    }
    Ok(report)
}

/// Role a fold plays in one experiment rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldRole {
    /// Main-network training data (D1).
    Train,
    /// Early stopping and model selection.
    Validation,
    /// Held-out fold: emotion test set and the attacker's own data (D2).
    Attacker,
    /// Membership fold whose split the attacker knows (s4).
    MembershipKnown,
    /// Membership fold the attacker is evaluated on (s5).
    MembershipTarget,
}

/// Speaker-independent partition into `k` folds plus a role per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub fold_of: BTreeMap<u32, usize>,
    pub roles: Vec<FoldRole>,
}

impl SplitPlan {
    /// Speakers of fold `f`, ascending.
    pub fn fold_speakers(&self, f: usize) -> Vec<u32> {
        self.fold_of
            .iter()
            .filter(|(_, &fold)| fold == f)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn speakers_with_role(&self, role: FoldRole) -> BTreeSet<u32> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| self.roles[f] == role)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn folds_with_role(&self, role: FoldRole) -> Vec<usize> {
        (0..self.k).filter(|&f| self.roles[f] == role).collect()
    }

    pub fn samples_with_role<'a>(&self, corpus: &'a [UtteranceSample], role: FoldRole) -> Vec<&'a UtteranceSample> {
        let speakers = self.speakers_with_role(role);
        corpus.iter().filter(|s| speakers.contains(&s.speaker_id)).collect()
    }

    /// Rotation `r` of the standard protocol: fold `r` is held out for testing
    /// and as the attacker's data, fold `r + 1` validates, the rest train.
    pub fn with_standard_roles(mut self, rotation: usize) -> Self {
        let k = self.k;
        self.roles = (0..k)
            .map(|f| match (f + k - rotation % k) % k {
                0 => FoldRole::Attacker,
                1 => FoldRole::Validation,
                _ => FoldRole::Train,
            })
            .collect();
        self
    }

    /// Rotation `r` of the membership protocol: folds `r..r+3` train, fold
    /// `r + 3` is s4 and fold `r + 4` is s5.
    pub fn with_membership_roles(mut self, rotation: usize) -> Self {
        let k = self.k;
        self.roles = (0..k)
            .map(|f| match (f + k - rotation % k) % k {
                3 => FoldRole::MembershipKnown,
                4 => FoldRole::MembershipTarget,
                _ => FoldRole::Train,
            })
            .collect();
        self
    }
}

/// Shuffles the speakers of each gender with `seed` and deals males, then
/// females, round-robin into `k` folds, so folds are gender-balanced.
/// Roles start as rotation 0 of the standard protocol.
pub fn make_folds(corpus: &[UtteranceSample], k: usize, seed: u64) -> Result<SplitPlan> {
    let genders: BTreeMap<u32, Gender> = corpus.iter().map(|s| (s.speaker_id, s.gender)).collect();
    if k < 2 || genders.len() < k {
        return Err(Error::Config(format!(
            "{} speakers cannot fill {k} speaker-independent folds",
            genders.len()
        )));
    }
    let mut r = rng::stream(seed, &[tag::FOLDS]);
    let mut order = Vec::with_capacity(genders.len());
    for g in [Gender::M, Gender::F] {
        let mut group: Vec<u32> = genders.iter().filter(|(_, &x)| x == g).map(|(&s, _)| s).collect();
        group.shuffle(&mut r);
        order.extend(group);
    }
    let fold_of = order.iter().enumerate().map(|(i, &s)| (s, i % k)).collect();
    let plan = SplitPlan {
        k,
        fold_of,
        roles: vec![FoldRole::Train; k],
    };
    Ok(plan.with_standard_roles(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    Yes,
    No,
}

/// Membership-identification roles layered on a [`SplitPlan`] with
/// membership roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSplit {
    pub known_fold: usize,
    pub target_fold: usize,
    /// All speakers per membership fold, ascending.
    pub fold_speakers: BTreeMap<usize, Vec<u32>>,
    /// Selected speakers per membership fold.
    pub selected: BTreeMap<usize, Vec<u32>>,
    /// Samples of selected speakers injected into the training set.
    pub moved: BTreeSet<u32>,
    /// Samples of selected speakers kept out of training.
    pub held_out: BTreeSet<u32>,
    pub membership: BTreeMap<u32, Membership>,
    /// s4 speakers kept aside to validate the attacker, one per label.
    pub reserved_yes: u32,
    pub reserved_no: u32,
    /// Training-fold speakers set aside for early stopping of the main network.
    pub early_stop_speakers: BTreeSet<u32>,
    pub train_speakers: BTreeSet<u32>,
}

/// Share of training-fold speakers held back for early stopping in the
/// membership protocol.
pub const MI_EARLY_STOP_FRACTION: f64 = 0.2;

impl MiSplit {
    /// Every sample the main network is trained on (D1).
    pub fn training_samples<'a>(&self, corpus: &'a [UtteranceSample]) -> Vec<&'a UtteranceSample> {
        corpus
            .iter()
            .filter(|s| self.train_speakers.contains(&s.speaker_id) || self.moved.contains(&s.utterance_id))
            .collect()
    }

    pub fn early_stop_samples<'a>(&self, corpus: &'a [UtteranceSample]) -> Vec<&'a UtteranceSample> {
        corpus
            .iter()
            .filter(|s| self.early_stop_speakers.contains(&s.speaker_id))
            .collect()
    }

    pub fn is_selected(&self, fold: usize, speaker: u32) -> bool {
        self.selected.get(&fold).is_some_and(|v| v.contains(&speaker))
    }
}

/// Builds membership roles: in each of s4 and s5, `⌈select_fraction·n⌉`
/// speakers are selected and `move_fraction` of each selected speaker's
/// samples are moved into training.
pub fn make_mi_splits(
    plan: &SplitPlan,
    corpus: &[UtteranceSample],
    select_fraction: f64,
    move_fraction: f64,
    seed: u64,
) -> Result<MiSplit> {
    if !(select_fraction > 0.0 && select_fraction < 1.0) || !(move_fraction > 0.0 && move_fraction < 1.0) {
        return Err(Error::Config("select_fraction and move_fraction must lie in (0, 1)".into()));
    }
    let single = |role| match plan.folds_with_role(role).as_slice() {
        [f] => Ok(*f),
        other => Err(Error::Config(format!("plan needs exactly one {role:?} fold, has {}", other.len()))),
    };
    let known_fold = single(FoldRole::MembershipKnown)?;
    let target_fold = single(FoldRole::MembershipTarget)?;
    let mut r = rng::stream(seed, &[tag::MI_SPLIT]);

    let mut by_speaker: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for s in corpus {
        by_speaker.entry(s.speaker_id).or_default().push(s.utterance_id);
    }

    let mut selected = BTreeMap::new();
    let mut fold_speakers = BTreeMap::new();
    let mut moved = BTreeSet::new();
    let mut held_out = BTreeSet::new();
    let mut membership = BTreeMap::new();
    let mut reserved = (0, 0);
    for fold in [known_fold, target_fold] {
        let mut speakers = plan.fold_speakers(fold);
        fold_speakers.insert(fold, speakers.clone());
        if fold == known_fold && speakers.len() < 4 {
            return Err(Error::Config(format!(
                "s4 fold has {} speakers; at least 4 are needed to reserve validation speakers",
                speakers.len()
            )));
        }
        speakers.shuffle(&mut r);
        let n_sel = math::ceil(select_fraction * speakers.len() as f64) as usize;
        if n_sel == 0 || n_sel >= speakers.len() {
            return Err(Error::Config(format!(
                "select_fraction {select_fraction} leaves fold {fold} without both member and non-member speakers"
            )));
        }
        let (chosen, rest) = speakers.split_at(n_sel);
        for &spk in chosen {
            let mut utts = by_speaker.get(&spk).cloned().unwrap_or_default();
            if utts.len() < 2 {
                return Err(Error::Data(format!(
                    "selected speaker {spk} has {} samples; cannot split into moved and held-out",
                    utts.len()
                )));
            }
            utts.shuffle(&mut r);
            let n_move = (math::round(move_fraction * utts.len() as f64) as usize).clamp(1, utts.len() - 1);
            moved.extend(utts[..n_move].iter().copied());
            held_out.extend(utts[n_move..].iter().copied());
            membership.insert(spk, Membership::Yes);
        }
        for &spk in rest {
            membership.insert(spk, Membership::No);
        }
        if fold == known_fold {
            reserved = (chosen[0], rest[0]);
        }
        let mut sorted = chosen.to_vec();
        sorted.sort_unstable();
        selected.insert(fold, sorted);
    }

    let mut train: Vec<u32> = plan.speakers_with_role(FoldRole::Train).into_iter().collect();
    if train.len() < 2 {
        return Err(Error::Config("membership protocol needs at least 2 training speakers".into()));
    }
    train.shuffle(&mut r);
    let n_stop = (math::ceil(MI_EARLY_STOP_FRACTION * train.len() as f64) as usize).clamp(1, train.len() - 1);
    let early_stop_speakers = train[..n_stop].iter().copied().collect();
    let train_speakers = train[n_stop..].iter().copied().collect();

    Ok(MiSplit {
        known_fold,
        target_fold,
        fold_speakers,
        selected,
        moved,
        held_out,
        membership,
        reserved_yes: reserved.0,
        reserved_no: reserved.1,
        early_stop_speakers,
        train_speakers,
    })
}
