//! The emotion network: per-modality encoders, mean pooling, an emotion head
//! on the shared representation, and adversary heads behind gradient reversal.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Task, UtteranceSample, ACOUSTIC_DIM, LEXICAL_DIM};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Value};
use crate::math;
use crate::rng::{self, tag, Rng};
use crate::tensor::Tensor;

/// Number of emotion classes (low, mid, high).
pub const EMOTION_CLASSES: usize = 3;
/// λ values allowed for adversaries in Priv mode.
pub const LAMBDA_GRID: [f64; 4] = [0.3, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Acoustic,
    Lexical,
    Multimodal,
}

impl Modality {
    pub fn has_acoustic(self) -> bool {
        matches!(self, Modality::Acoustic | Modality::Multimodal)
    }

    pub fn has_lexical(self) -> bool {
        matches!(self, Modality::Lexical | Modality::Multimodal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Gen,
    Priv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryTarget {
    Gender,
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub target: AdversaryTarget,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrlPlacement {
    PostConcat,
    PerStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub conv_layers: usize,
    pub kernel_width: usize,
    pub kernels: usize,
    pub gru_layers: usize,
    pub gru_width: usize,
    pub dense_layers: usize,
    pub dense_width: usize,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            conv_layers: 3,
            kernel_width: 2,
            kernels: 32,
            gru_layers: 2,
            gru_width: 32,
            dense_layers: 1,
            dense_width: 32,
        }
    }
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, allowed: &[usize]| {
            if allowed.contains(&v) {
                Ok(())
            } else {
                Err(Error::Spec(format!("{name} = {v} not in {allowed:?}")))
            }
        };
        check("conv_layers", self.conv_layers, &[3, 4])?;
        check("kernel_width", self.kernel_width, &[2, 3])?;
        check("kernels", self.kernels, &[32, 64, 128])?;
        check("gru_layers", self.gru_layers, &[2, 3])?;
        check("gru_width", self.gru_width, &[32])?;
        check("dense_layers", self.dense_layers, &[1, 2])?;
        check("dense_width", self.dense_width, &[32, 64])
    }

    /// Shortest acoustic sequence the convolution stack accepts.
    pub fn min_acoustic_frames(&self) -> usize {
        self.conv_layers * (self.kernel_width - 1) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modality: Modality,
    pub task: Task,
    pub mode: Mode,
    #[serde(default)]
    pub adversaries: Vec<Adversary>,
    pub grl_placement: GrlPlacement,
    #[serde(default)]
    pub layers: LayerSpec,
}

impl ModelSpec {
    /// Gen-mode spec with a gradient-stopped gender head.
    pub fn gen(modality: Modality, task: Task) -> Self {
        Self {
            modality,
            task,
            mode: Mode::Gen,
            adversaries: vec![Adversary {
                target: AdversaryTarget::Gender,
                lambda: 0.0,
            }],
            grl_placement: GrlPlacement::PostConcat,
            layers: LayerSpec::default(),
        }
    }

    /// Priv-mode spec with one adversary per `(target, λ)`.
    pub fn private(modality: Modality, task: Task, adversaries: &[(AdversaryTarget, f64)]) -> Self {
        Self {
            mode: Mode::Priv,
            adversaries: adversaries
                .iter()
                .map(|&(target, lambda)| Adversary { target, lambda })
                .collect(),
            ..Self::gen(modality, task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layers.validate()?;
        if self.grl_placement == GrlPlacement::PerStream && self.modality != Modality::Multimodal {
            return Err(Error::Spec("per-stream GRL placement needs the multimodal network".into()));
        }
        for (i, a) in self.adversaries.iter().enumerate() {
            if self.adversaries[..i].iter().any(|b| b.target == a.target) {
                return Err(Error::Spec(format!("duplicate {:?} adversary", a.target)));
            }
            if self.mode == Mode::Priv && !LAMBDA_GRID.contains(&a.lambda) {
                return Err(Error::Spec(format!(
                    "Priv adversary λ = {} not in {LAMBDA_GRID:?}",
                    a.lambda
                )));
            }
        }
        if self.mode == Mode::Priv && self.adversaries.is_empty() {
            return Err(Error::Spec("Priv mode needs at least one adversary".into()));
        }
        Ok(())
    }

    /// λ actually applied by the GRL of adversary `i`: zero in Gen mode.
    pub fn effective_lambda(&self, i: usize) -> f64 {
        match self.mode {
            Mode::Gen => 0.0,
            Mode::Priv => self.adversaries[i].lambda,
        }
    }

    pub fn adversary_index(&self, target: AdversaryTarget) -> Option<usize> {
        self.adversaries.iter().position(|a| a.target == target)
    }

    /// Width of the representation `h` (or `h_a` / `h_l` for one modality).
    pub fn representation_dim(&self) -> usize {
        let streams = usize::from(self.modality.has_acoustic()) + usize::from(self.modality.has_lexical());
        streams * self.layers.gru_width
    }
}

/// Owner of a parameter tensor; determines its init stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Emotion,
    Adversary(usize),
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    /// Glorot fans; `None` marks a bias.
    fans: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct GruLayout {
    w_in: usize,
    w_hid: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct StreamLayout {
    conv: Vec<usize>,
    gru: Vec<GruLayout>,
}

#[derive(Debug, Clone)]
struct HeadLayout {
    /// `(W, b)` per layer; all but the last use `hidden`.
    layers: Vec<(usize, usize)>,
    hidden: Activation,
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<Entry>,
    acoustic: Option<StreamLayout>,
    lexical: Option<StreamLayout>,
    emotion: HeadLayout,
    /// One head per adversary, or one per stream under per-stream placement.
    adversaries: Vec<Vec<HeadLayout>>,
}

struct LayoutBuilder {
    entries: Vec<Entry>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, fans: Option<(usize, usize)>) -> usize {
        self.entries.push(Entry { name, shape, group, fans });
        self.entries.len() - 1
    }

    fn stream(&mut self, prefix: &str, input_dim: usize, conv: bool, l: &LayerSpec) -> StreamLayout {
        let g = ParamGroup::Encoder;
        let mut d = input_dim;
        let mut conv_idx = Vec::new();
        if conv {
            for i in 0..l.conv_layers {
                let fans = (l.kernel_width * d, l.kernel_width * l.kernels);
                conv_idx.push(self.push(
                    format!("{prefix}.conv{i}"),
                    vec![l.kernels, l.kernel_width, d],
                    g,
                    Some(fans),
                ));
                d = l.kernels;
            }
        }
        let w = l.gru_width;
        let mut gru = Vec::new();
        for i in 0..l.gru_layers {
            gru.push(GruLayout {
                w_in: self.push(format!("{prefix}.gru{i}.w_in"), vec![3 * w, d], g, Some((d, 3 * w))),
                w_hid: self.push(format!("{prefix}.gru{i}.w_hid"), vec![3 * w, w], g, Some((w, 3 * w))),
                bias: self.push(format!("{prefix}.gru{i}.bias"), vec![3 * w], g, None),
            });
            d = w;
        }
        StreamLayout { conv: conv_idx, gru }
    }

    fn head(&mut self, prefix: &str, input_dim: usize, out: usize, l: &LayerSpec, group: ParamGroup) -> HeadLayout {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for i in 0..=l.dense_layers {
            let (name, m) = if i == l.dense_layers {
                (format!("{prefix}.out"), out)
            } else {
                (format!("{prefix}.dense{i}"), l.dense_width)
            };
            let w = self.push(format!("{name}.w"), vec![m, d], group, Some((d, m)));
            let b = self.push(format!("{name}.b"), vec![m], group, None);
            layers.push((w, b));
            d = m;
        }
        let hidden = match group {
            ParamGroup::Adversary(_) => Activation::Tanh,
            _ => Activation::Relu,
        };
        HeadLayout { layers, hidden }
    }
}

impl Layout {
    fn new(spec: &ModelSpec, n_speakers: usize) -> Self {
        let l = &spec.layers;
        let mut b = LayoutBuilder { entries: Vec::new() };
        let acoustic = spec
            .modality
            .has_acoustic()
            .then(|| b.stream("acoustic", ACOUSTIC_DIM, true, l));
        let lexical = spec
            .modality
            .has_lexical()
            .then(|| b.stream("lexical", LEXICAL_DIM, false, l));
        let emotion = b.head("emotion", spec.representation_dim(), EMOTION_CLASSES, l, ParamGroup::Emotion);
        let mut adversaries = Vec::new();
        for (i, a) in spec.adversaries.iter().enumerate() {
            let out = match a.target {
                AdversaryTarget::Gender => 2,
                AdversaryTarget::Speaker => n_speakers,
            };
            let target = match a.target {
                AdversaryTarget::Gender => "gender",
                AdversaryTarget::Speaker => "speaker",
            };
            let group = ParamGroup::Adversary(i);
            let heads = match spec.grl_placement {
                GrlPlacement::PostConcat => {
                    vec![b.head(&format!("adv{i}.{target}"), spec.representation_dim(), out, l, group)]
                }
                GrlPlacement::PerStream => ["acoustic", "lexical"]
                    .iter()
                    .map(|s| b.head(&format!("adv{i}.{target}.{s}"), l.gru_width, out, l, group))
                    .collect(),
            };
            adversaries.push(heads);
        }
        Self {
            entries: b.entries,
            acoustic,
            lexical,
            emotion,
            adversaries,
        }
    }
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Output head of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Emotion,
    Adversary(usize),
}

/// What the adversary branches put between the representation and the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    /// Gradient reversal with the spec's effective λ.
    Reversed,
    /// Gradient reversal with the effective λ times a factor in `[0, 1]`.
    Ramped(f64),
    /// Plain identity, for comparing against unreversed gradients.
    Plain,
}

/// Logit nodes of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Stacked representations `[B, D]`.
    pub representation: Value,
    pub emotion_logits: Value,
    /// Per adversary, one logit node per head.
    pub adversary_logits: Vec<Vec<Value>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    /// Sorted training speakers; class order of a speaker adversary.
    speakers: Vec<u32>,
    params: ModelParams,
    /// Utterances the model was trained on.
    pub train_utterances: Vec<u32>,
    layout: Layout,
}

fn glorot(r: &mut Rng, shape: &[usize], fans: (usize, usize)) -> Tensor {
    let limit = math::sqrt(6.0 / (fans.0 + fans.1) as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builds and initializes a model. `speakers` are the training speakers and
/// only matter for a speaker adversary.
pub fn build_model(spec: &ModelSpec, speakers: &[u32], seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut speakers = speakers.to_vec();
    speakers.sort_unstable();
    speakers.dedup();
    if spec.adversary_index(AdversaryTarget::Speaker).is_some() && speakers.len() < 2 {
        return Err(Error::Spec("speaker adversary needs at least 2 training speakers".into()));
    }
    let layout = Layout::new(spec, speakers.len());
    let mut encoder = rng::stream(seed, &[tag::INIT_ENCODER]);
    let mut emotion = rng::stream(seed, &[tag::INIT_EMOTION]);
    let mut adversary: Vec<Rng> = (0..spec.adversaries.len())
        .map(|i| rng::stream(seed, &[tag::INIT_ADVERSARY, i as u64]))
        .collect();
    let mut tensors = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let r = match e.group {
            ParamGroup::Encoder => &mut encoder,
            ParamGroup::Emotion => &mut emotion,
            ParamGroup::Adversary(i) => &mut adversary[i],
        };
        tensors.push(match e.fans {
            Some(f) => glorot(r, &e.shape, f),
            None => Tensor::zeros(&e.shape),
        });
    }
    let names = layout.entries.iter().map(|e| e.name.clone()).collect();
    Ok(Model {
        spec: spec.clone(),
        speakers,
        params: ModelParams { names, tensors },
        train_utterances: Vec::new(),
        layout,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| math::exp(v - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Rows processed per graph during inference.
const INFERENCE_CHUNK: usize = 64;

impl Model {
    /// Reassembles a model from stored parameters; names and shapes must
    /// match the layout implied by `spec` and `speakers`.
    pub fn from_params(spec: ModelSpec, speakers: Vec<u32>, params: ModelParams, train_utterances: Vec<u32>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec, speakers.len());
        if params.names.len() != layout.entries.len() || params.tensors.len() != layout.entries.len() {
            return Err(Error::Dimension(format!(
                "spec needs {} tensors, got {} names and {} tensors",
                layout.entries.len(),
                params.names.len(),
                params.tensors.len()
            )));
        }
        for ((e, name), t) in layout.entries.iter().zip(&params.names).zip(&params.tensors) {
            if &e.name != name || e.shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    e.name,
                    e.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(Self {
            spec,
            speakers,
            params,
            train_utterances,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn speakers(&self) -> &[u32] {
        &self.speakers
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.params.tensors
    }

    pub fn param_group(&self, i: usize) -> ParamGroup {
        self.layout.entries[i].group
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.params.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn n_classes(&self, head: Head) -> Result<usize> {
        match head {
            Head::Emotion => Ok(EMOTION_CLASSES),
            Head::Adversary(i) => match self.spec.adversaries.get(i) {
                Some(a) => Ok(match a.target {
                    AdversaryTarget::Gender => 2,
                    AdversaryTarget::Speaker => self.speakers.len(),
                }),
                None => Err(Error::Spec(format!("model has no adversary head {i}"))),
            },
        }
    }

    /// Class index of `sample` for `head`.
    pub fn label(&self, head: Head, sample: &UtteranceSample) -> Result<usize> {
        match head {
            Head::Emotion => Ok(sample.emotion(self.spec.task).index()),
            Head::Adversary(i) => match self.spec.adversaries.get(i).map(|a| a.target) {
                Some(AdversaryTarget::Gender) => Ok(sample.gender.index()),
                Some(AdversaryTarget::Speaker) => self.speakers.binary_search(&sample.speaker_id).map_err(|_| {
                    Error::Data(format!("speaker {} has no speaker-adversary class", sample.speaker_id))
                }),
                None => Err(Error::Spec(format!("model has no adversary head {i}"))),
            },
        }
    }

    /// Adds every parameter to `g`; `trainable` decides whether they collect
    /// gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Value> {
        self.params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    fn stream(&self, g: &mut Graph, vals: &[Value], s: &StreamLayout, x: &Tensor) -> Result<Value> {
        let mut h = g.input(x.clone());
        for &k in &s.conv {
            h = g.conv1d(h, vals[k])?;
        }
        for gru in &s.gru {
            let h0 = g.input(Tensor::zeros(&[self.spec.layers.gru_width]));
            h = g.gru_sequence(h, vals[gru.w_in], vals[gru.w_hid], vals[gru.bias], h0)?;
        }
        g.mean_pool_time(h)
    }

    /// Per-stream pooled representations of one sample, acoustic first.
    fn streams(&self, g: &mut Graph, vals: &[Value], sample: &UtteranceSample) -> Result<Vec<Value>> {
        let mut out = Vec::with_capacity(2);
        if let Some(s) = &self.layout.acoustic {
            if sample.acoustic.rows() < self.spec.layers.min_acoustic_frames() {
                return Err(Error::DegenerateInput(format!(
                    "utterance {} has {} acoustic frames, receptive field needs {}",
                    sample.utterance_id,
                    sample.acoustic.rows(),
                    self.spec.layers.min_acoustic_frames()
                )));
            }
            out.push(self.stream(g, vals, s, &sample.acoustic)?);
        }
        if let Some(s) = &self.layout.lexical {
            out.push(self.stream(g, vals, s, &sample.lexical)?);
        }
        Ok(out)
    }

    fn head(g: &mut Graph, vals: &[Value], h: &HeadLayout, x: Value) -> Result<Value> {
        let last = h.layers.len() - 1;
        let mut y = x;
        for (i, &(w, b)) in h.layers.iter().enumerate() {
            let act = if i == last { Activation::Identity } else { h.hidden };
            y = g.dense(y, vals[w], vals[b], act)?;
        }
        Ok(y)
    }

    /// Batched forward pass over `samples` with parameters `vals` from
    /// [`Model::bind`].
    pub fn forward(&self, g: &mut Graph, vals: &[Value], samples: &[&UtteranceSample], branch: Branch) -> Result<Forward> {
        if samples.is_empty() {
            return Err(Error::DegenerateInput("forward pass over an empty batch".into()));
        }
        let mut per_stream: Vec<Vec<Value>> = Vec::new();
        let mut reps = Vec::with_capacity(samples.len());
        for s in samples {
            let streams = self.streams(g, vals, s)?;
            if per_stream.is_empty() {
                per_stream = vec![Vec::with_capacity(samples.len()); streams.len()];
            }
            for (acc, &v) in per_stream.iter_mut().zip(&streams) {
                acc.push(v);
            }
            reps.push(if streams.len() == 1 { streams[0] } else { g.concat(&streams)? });
        }
        let representation = g.stack_rows(&reps)?;
        let emotion_logits = Self::head(g, vals, &self.layout.emotion, representation)?;
        let stream_reps = if self.spec.grl_placement == GrlPlacement::PerStream {
            per_stream
                .iter()
                .map(|rows| g.stack_rows(rows))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut adversary_logits = Vec::with_capacity(self.layout.adversaries.len());
        for (i, heads) in self.layout.adversaries.iter().enumerate() {
            let inputs: Vec<Value> = match self.spec.grl_placement {
                GrlPlacement::PostConcat => vec![representation],
                GrlPlacement::PerStream => stream_reps.clone(),
            };
            let mut logits = Vec::with_capacity(heads.len());
            for (h, x) in heads.iter().zip(inputs) {
                let gate = match branch {
                    Branch::Reversed => g.grl(x, self.spec.effective_lambda(i))?,
                    Branch::Ramped(f) => g.grl(x, self.spec.effective_lambda(i) * f)?,
                    Branch::Plain => g.identity(x)?,
                };
                logits.push(Self::head(g, vals, h, gate)?);
            }
            adversary_logits.push(logits);
        }
        Ok(Forward {
            representation,
            emotion_logits,
            adversary_logits,
        })
    }

    /// Fixed-length representation `h` (or `h_a` / `h_l`) of one sample.
    pub fn embed(&self, sample: &UtteranceSample) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[sample])?.pop().unwrap_or_default())
    }

    pub fn embed_batch(&self, samples: &[&UtteranceSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let vals = self.bind(&mut g, false);
            for s in chunk {
                let streams = self.streams(&mut g, &vals, s)?;
                let mut h = Vec::with_capacity(self.spec.representation_dim());
                for v in streams {
                    h.extend_from_slice(g.value(v).data());
                }
                out.push(h);
            }
        }
        Ok(out)
    }

    /// Class probabilities of `head`; a per-stream adversary averages its
    /// stream heads.
    pub fn predict(&self, sample: &UtteranceSample, head: Head) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[sample], head)?.pop().unwrap_or_default())
    }

    pub fn predict_batch(&self, samples: &[&UtteranceSample], head: Head) -> Result<Vec<Vec<f64>>> {
        self.n_classes(head)?;
        let idx = match head {
            Head::Emotion => 0,
            Head::Adversary(i) => i + 1,
        };
        Ok(self.predict_heads(samples)?.swap_remove(idx))
    }

    /// Probabilities of every head from one forward pass, indexed
    /// `[head][sample][class]` in [`Model::heads`] order.
    pub fn predict_heads(&self, samples: &[&UtteranceSample]) -> Result<Vec<Vec<Vec<f64>>>> {
        let heads = self.heads();
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(samples.len()); heads.len()];
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let vals = self.bind(&mut g, false);
            let f = self.forward(&mut g, &vals, chunk, Branch::Reversed)?;
            for (h, acc) in heads.iter().zip(out.iter_mut()) {
                let logits = match *h {
                    Head::Emotion => vec![f.emotion_logits],
                    Head::Adversary(i) => f.adversary_logits[i].clone(),
                };
                for r in 0..chunk.len() {
                    let mut probs = softmax(g.value(logits[0]).row(r));
                    for &l in &logits[1..] {
                        for (p, q) in probs.iter_mut().zip(softmax(g.value(l).row(r))) {
                            *p += q;
                        }
                    }
                    let n = logits.len() as f64;
                    probs.iter_mut().for_each(|p| *p /= n);
                    acc.push(probs);
                }
            }
        }
        Ok(out)
    }

    /// Heads in order: emotion, then adversaries.
    pub fn heads(&self) -> Vec<Head> {
        let mut h = vec![Head::Emotion];
        h.extend((0..self.spec.adversaries.len()).map(Head::Adversary));
        h
    }

    pub fn head_name(&self, head: Head) -> String {
        match head {
            Head::Emotion => "emotion".to_string(),
            Head::Adversary(i) => match self.spec.adversaries[i].target {
                AdversaryTarget::Gender => "gender".to_string(),
                AdversaryTarget::Speaker => "speaker".to_string(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenConfig};

    fn corpus() -> Vec<UtteranceSample> {
        generate_corpus(&GenConfig {
            n_speakers: 4,
            utterances_per_speaker: 3,
            seed: 5,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn multimodal_representation_is_64_wide() {
        let c = corpus();
        let m = build_model(&ModelSpec::gen(Modality::Multimodal, Task::Activation), &[], 1).unwrap();
        for s in &c {
            assert_eq!(m.embed(s).unwrap().len(), 64);
        }
        let a = build_model(&ModelSpec::gen(Modality::Acoustic, Task::Activation), &[], 1).unwrap();
        assert_eq!(a.embed(&c[0]).unwrap().len(), 32);
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::gen(Modality::Acoustic, Task::Valence);
        s.grl_placement = GrlPlacement::PerStream;
        assert!(matches!(build_model(&s, &[], 0), Err(Error::Spec(_))));
        let p = ModelSpec::private(Modality::Lexical, Task::Valence, &[(AdversaryTarget::Gender, 0.4)]);
        assert!(matches!(p.validate(), Err(Error::Spec(_))));
        let mut l = ModelSpec::gen(Modality::Lexical, Task::Valence);
        l.layers.kernels = 16;
        assert!(matches!(l.validate(), Err(Error::Spec(_))));
        let sp = ModelSpec::private(Modality::Lexical, Task::Valence, &[(AdversaryTarget::Speaker, 1.0)]);
        assert!(matches!(build_model(&sp, &[3], 0), Err(Error::Spec(_))));
    }

    #[test]
    fn probabilities_and_class_counts() {
        let c = corpus();
        let spec = ModelSpec::private(
            Modality::Multimodal,
            Task::Activation,
            &[(AdversaryTarget::Gender, 0.5), (AdversaryTarget::Speaker, 0.5)],
        );
        let m = build_model(&spec, &[0, 1, 2, 3], 2).unwrap();
        let e = m.predict(&c[0], Head::Emotion).unwrap();
        let g = m.predict(&c[0], Head::Adversary(0)).unwrap();
        let s = m.predict(&c[0], Head::Adversary(1)).unwrap();
        assert_eq!((e.len(), g.len(), s.len()), (3, 2, 4));
        for p in [e, g, s] {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(m.predict(&c[0], Head::Adversary(2)), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_heads_are_uniform() {
        let c = corpus();
        let mut m = build_model(&ModelSpec::gen(Modality::Lexical, Task::Activation), &[], 3).unwrap();
        for i in 0..m.params.tensors.len() {
            if m.param_group(i) != ParamGroup::Encoder {
                m.params.tensors[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for p in m.predict(&c[1], Head::Emotion).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        for p in m.predict(&c[1], Head::Adversary(0)).unwrap() {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn placement_and_lambda_do_not_change_forward() {
        let c = corpus();
        let refs: Vec<&UtteranceSample> = c.iter().collect();
        let base = ModelSpec::private(Modality::Multimodal, Task::Valence, &[(AdversaryTarget::Gender, 0.3)]);
        let a = build_model(&base, &[], 9).unwrap();
        let mut other = base.clone();
        other.adversaries[0].lambda = 1.0;
        let b = build_model(&other, &[], 9).unwrap();
        let gen = build_model(&ModelSpec::gen(Modality::Multimodal, Task::Valence), &[], 9).unwrap();
        let mut ps = base.clone();
        ps.grl_placement = GrlPlacement::PerStream;
        let p = build_model(&ps, &[], 9).unwrap();
        let reference = a.predict_batch(&refs, Head::Emotion).unwrap();
        for m in [&b, &gen, &p] {
            let got = m.predict_batch(&refs, Head::Emotion).unwrap();
            for (x, y) in reference.iter().flatten().zip(got.iter().flatten()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn embedding_is_deterministic_and_pools_constants() {
        let c = corpus();
        let m = build_model(&ModelSpec::gen(Modality::Acoustic, Task::Activation), &[], 4).unwrap();
        assert_eq!(m.embed(&c[2]).unwrap(), m.embed(&c[2]).unwrap());
        let mut s = c[2].clone();
        let row: Vec<f64> = s.acoustic.row(0).to_vec();
        for r in s.acoustic.data_mut().chunks_exact_mut(ACOUSTIC_DIM) {
            r.copy_from_slice(&row);
        }
        let mut flipped = s.clone();
        let n = flipped.acoustic.rows();
        let mut data = Vec::new();
        for t in (0..n).rev() {
            data.extend_from_slice(s.acoustic.row(t));
        }
        flipped.acoustic = Tensor::matrix(n, ACOUSTIC_DIM, data).unwrap();
        assert_eq!(m.embed(&s).unwrap(), m.embed(&flipped).unwrap());

        let mut short = c[2].clone();
        short.acoustic = Tensor::zeros(&[3, ACOUSTIC_DIM]);
        assert!(matches!(m.embed(&short), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn init_streams_are_isolated_from_adversaries() {
        let plain = ModelSpec {
            adversaries: Vec::new(),
            ..ModelSpec::gen(Modality::Multimodal, Task::Activation)
        };
        let a = build_model(&plain, &[], 12).unwrap();
        let b = build_model(&ModelSpec::gen(Modality::Multimodal, Task::Activation), &[], 12).unwrap();
        for (i, t) in a.params.tensors.iter().enumerate() {
            assert_eq!(t, &b.params.tensors[i]);
            assert_eq!(a.params.names[i], b.params.names[i]);
        }
        assert!(b.params.tensors.len() > a.params.tensors.len());
    }
}
