//! RMSProp training of the joint emotion / adversary objective with early
//! stopping, chance-constrained model selection, seed ensembles and grid
//! search.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::UtteranceSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::math;
use crate::model::{build_model, AdversaryTarget, Branch, Head, LayerSpec, Mode, Model, ModelSpec, LAMBDA_GRID};
use crate::rng::{self, tag};
use crate::stats::{argmax, uar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeightMode {
    /// `n / (K · n_k)`, which has sample mean 1.
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub class_weights: ClassWeightMode,
    /// Allowed distance of the validation adversary UAR from 0.5.
    pub chance_band: f64,
    pub seeds: Vec<u64>,
    /// Scale every GRL by `2/(1+e^(-10p)) - 1`, where `p` is the share of
    /// this many epochs completed, so adversary heads fit before the encoder
    /// is pushed against them. Zero disables the ramp.
    pub lambda_ramp_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            class_weights: ClassWeightMode::InverseFrequency,
            chance_band: 0.05,
            seeds: vec![0, 1, 2],
            lambda_ramp_epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must lie in [1, max_epochs = {})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.chance_band > 0.0 && self.chance_band <= 0.1) {
            return Err(Error::Config(format!("chance_band {} outside (0, 0.1]", self.chance_band)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::Config("need learning_rate > 0, decay in [0, 1), epsilon > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cache: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            cache: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One RMSProp update. Nothing changes if any gradient is non-finite.
pub fn rmsprop_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.cache.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} cache buffers",
            params.len(),
            grads.len(),
            state.cache.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.cache[i].len() != g.len() {
            return Err(Error::Dimension(format!("gradient {i} does not match its parameter")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {i}")));
        }
    }
    for ((p, g), c) in params.iter_mut().zip(grads).zip(state.cache.iter_mut()) {
        for ((w, &gi), ci) in p.data_mut().iter_mut().zip(g).zip(c.iter_mut()) {
            *ci = decay * *ci + (1.0 - decay) * gi * gi;
            *w -= lr * gi / (math::sqrt(*ci) + eps);
        }
    }
    Ok(())
}

/// Per-class weights for `labels` over `k` classes.
pub fn class_weights(labels: &[usize], k: usize, mode: ClassWeightMode) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::Index(format!("label {y} for {k} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} is empty in the training partition")));
    }
    Ok(match mode {
        ClassWeightMode::Uniform => vec![1.0; k],
        ClassWeightMode::InverseFrequency => {
            let n = labels.len() as f64;
            counts.iter().map(|&c| n / (k as f64 * c as f64)).collect()
        }
    })
}

/// Class weights of every head of `model`, in [`Model::heads`] order.
pub fn head_weights(model: &Model, train: &[&UtteranceSample], mode: ClassWeightMode) -> Result<Vec<Vec<f64>>> {
    model
        .heads()
        .into_iter()
        .map(|h| {
            let labels = train.iter().map(|s| model.label(h, s)).collect::<Result<Vec<_>>>()?;
            class_weights(&labels, model.n_classes(h)?, mode)
                .map_err(|e| Error::Data(format!("{} head: {e}", model.head_name(h))))
        })
        .collect()
}

/// Scalar nodes of the joint objective.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Value,
    /// One term per head in [`Model::heads`] order.
    pub heads: Vec<Value>,
}

/// `χ_emotion + Σ χ_adv_i` on one batch; the reversal of the adversary terms
/// happens inside the graph at each GRL.
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    vals: &[Value],
    batch: &[&UtteranceSample],
    weights: &[Vec<f64>],
    branch: Branch,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("joint loss over an empty batch".into()));
    }
    let f = model.forward(g, vals, batch, branch)?;
    let mut heads = Vec::with_capacity(1 + f.adversary_logits.len());
    let labels = |h| batch.iter().map(|s| model.label(h, s)).collect::<Result<Vec<_>>>();
    heads.push(g.batch_weighted_cross_entropy(f.emotion_logits, &labels(Head::Emotion)?, &weights[0])?);
    for (i, logits) in f.adversary_logits.iter().enumerate() {
        let y = labels(Head::Adversary(i))?;
        let terms = logits
            .iter()
            .map(|&l| g.batch_weighted_cross_entropy(l, &y, &weights[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        heads.push(if terms.len() == 1 { terms[0] } else { g.add_n(&terms)? });
    }
    let total = if heads.len() == 1 { heads[0] } else { g.add_n(&heads)? };
    Ok(JointLoss { total, heads })
}

/// Tracks the best validation loss; a new best must be strictly lower.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records `loss` for 1-based `epoch`; returns true on a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: BTreeMap<String, f64>,
    pub val_loss: BTreeMap<String, f64>,
    /// Heads whose classes occur in validation; a speaker head never does.
    pub val_uar: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Training and validation samples of one run.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub train: Vec<&'a UtteranceSample>,
    pub val: Vec<&'a UtteranceSample>,
}

/// Validation losses and UARs per head name.
fn evaluate(
    model: &Model,
    samples: &[&UtteranceSample],
    weights: &[Vec<f64>],
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let probs = model.predict_heads(samples)?;
    let mut losses = BTreeMap::new();
    let mut uars = BTreeMap::new();
    for (hi, h) in model.heads().into_iter().enumerate() {
        let labels: Option<Vec<usize>> = samples.iter().map(|s| model.label(h, s).ok()).collect();
        let Some(labels) = labels else { continue };
        let mut loss = 0.0;
        for (p, &y) in probs[hi].iter().zip(&labels) {
            loss -= weights[hi][y] * math::ln(p[y].max(1e-300));
        }
        losses.insert(model.head_name(h), loss / labels.len() as f64);
        let preds: Vec<usize> = probs[hi].iter().map(|p| argmax(p)).collect();
        if let Ok(u) = uar(&preds, &labels, model.n_classes(h)?) {
            uars.insert(model.head_name(h), u);
        }
    }
    Ok((losses, uars))
}

/// Trains one model: seeded shuffling, RMSProp on the joint loss, early
/// stopping on the validation emotion loss and restore of the best weights.
/// GRL scale after a share `progress` of training.
pub fn lambda_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + math::exp(-10.0 * progress.min(1.0))) - 1.0
}

pub fn train(spec: &ModelSpec, data: &TrainData<'_>, cfg: &TrainConfig, seed: u64) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation partitions must be non-empty".into()));
    }
    let train_speakers: BTreeSet<u32> = data.train.iter().map(|s| s.speaker_id).collect();
    if let Some(s) = data.val.iter().find(|s| train_speakers.contains(&s.speaker_id)) {
        return Err(Error::Data(format!("speaker {} is in both training and validation", s.speaker_id)));
    }
    let speakers: Vec<u32> = train_speakers.into_iter().collect();
    let mut model = build_model(spec, &speakers, seed)?;
    let weights = head_weights(&model, &data.train, cfg.class_weights)?;
    let mut state = OptimizerState::new(&model.params().tensors);
    let mut shuffle = rng::stream(seed, &[tag::SHUFFLE]);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().tensors.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let names: Vec<String> = model.heads().into_iter().map(|h| model.head_name(h)).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let branch = if cfg.lambda_ramp_epochs > 0 {
            Branch::Ramped(lambda_ramp((epoch - 1) as f64 / cfg.lambda_ramp_epochs as f64))
        } else {
            Branch::Reversed
        };
        let mut sums = vec![0.0; names.len()];
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&UtteranceSample> = idx.iter().map(|&i| data.train[i]).collect();
            let mut g = Graph::new();
            let vals = model.bind(&mut g, true);
            let loss = joint_loss(&mut g, &model, &vals, &batch, &weights, branch)?;
            for (s, &h) in sums.iter_mut().zip(&loss.heads) {
                *s += g.value(h).data()[0] * batch.len() as f64;
            }
            g.backward(loss.total)?;
            let grads: Vec<Vec<f64>> = vals.iter().map(|&v| g.grad_or_zeros(v)).collect();
            rmsprop_step(
                model.tensors_mut(),
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.rmsprop_decay,
                cfg.rmsprop_epsilon,
            )?;
        }
        let n = data.train.len() as f64;
        let train_loss = names.iter().cloned().zip(sums.iter().map(|s| s / n)).collect();
        let (val_loss, val_uar) = evaluate(&model, &data.val, &weights)?;
        let emotion = val_loss["emotion"];
        if !emotion.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged at epoch {epoch}")));
        }
        if stopper.observe(epoch, emotion) {
            best.clone_from(&model.params().tensors);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_uar,
        });
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.tensors_mut().clone_from_slice(&best);
    let mut ids: Vec<u32> = data.train.iter().map(|s| s.utterance_id).collect();
    ids.sort_unstable();
    model.train_utterances = ids;
    Ok((
        model,
        TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            stop_reason,
        },
    ))
}

fn adversary_uar(model: &Model, history: &TrainHistory) -> Option<f64> {
    model
        .spec()
        .adversary_index(AdversaryTarget::Gender)
        .and_then(|_| history.best().val_uar.get("gender").copied())
}

/// Index of the selected candidate. Priv models whose validation gender UAR
/// lies outside `0.5 ± chance_band` are discarded first; the lowest
/// validation emotion loss wins.
pub fn select_model(candidates: &[(Model, TrainHistory)], cfg: &TrainConfig) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidates".into()));
    }
    let loss = |h: &TrainHistory| h.best().val_loss["emotion"];
    let mut nearest: Option<(usize, f64)> = None;
    let mut best: Option<usize> = None;
    for (i, (m, h)) in candidates.iter().enumerate() {
        if m.spec().mode == Mode::Priv {
            if let Some(u) = adversary_uar(m, h) {
                let dist = (u - 0.5).abs();
                if dist > cfg.chance_band {
                    if nearest.is_none_or(|(_, d)| dist < d) {
                        nearest = Some((i, dist));
                    }
                    continue;
                }
            }
        }
        if best.is_none_or(|b| loss(h) < loss(&candidates[b].1)) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| {
        let (i, d) = nearest.unwrap_or((0, f64::NAN));
        Error::Selection(format!(
            "no candidate has adversary UAR within 0.5 ± {}; nearest is candidate {i} at distance {d:.4}",
            cfg.chance_band
        ))
    })
}

/// Element-wise mean of per-run probability rows, with the argmax class.
pub fn average_probabilities(runs: &[Vec<Vec<f64>>]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let Some(first) = runs.first() else {
        return Err(Error::DegenerateInput("no runs to average".into()));
    };
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Dimension("runs cover different sample counts".into()));
    }
    let mut mean = first.clone();
    for r in &runs[1..] {
        for (acc, row) in mean.iter_mut().zip(r) {
            for (a, b) in acc.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    let n = runs.len() as f64;
    for row in mean.iter_mut() {
        row.iter_mut().for_each(|v| *v /= n);
    }
    let preds = mean.iter().map(|p| argmax(p)).collect();
    Ok((mean, preds))
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub runs: Vec<(Model, TrainHistory)>,
    /// Mean emotion probabilities on the test samples.
    pub probs: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
}

impl Ensemble {
    /// Averaged probabilities of `head` across the runs.
    pub fn predict(&self, samples: &[&UtteranceSample], head: Head) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let runs = self
            .runs
            .iter()
            .map(|(m, _)| m.predict_batch(samples, head))
            .collect::<Result<Vec<_>>>()?;
        average_probabilities(&runs)
    }
}

/// Trains once per `cfg.seeds` entry and averages the emotion probabilities
/// on `test`. Run seeds are derived from `master_seed`.
pub fn seed_ensemble(
    spec: &ModelSpec,
    data: &TrainData<'_>,
    test: &[&UtteranceSample],
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<Ensemble> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut probs = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let wrap = |e| Error::Ensemble {
            seed: s,
            source: alloc::boxed::Box::new(e),
        };
        let (model, history) = train(spec, data, cfg, rng::derive_seed(master_seed, &[s])).map_err(wrap)?;
        probs.push(model.predict_batch(test, Head::Emotion).map_err(wrap)?);
        runs.push((model, history));
    }
    let (probs, preds) = average_probabilities(&probs)?;
    Ok(Ensemble { runs, probs, preds })
}

/// Value lists searched by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub conv_layers: Vec<usize>,
    pub kernel_width: Vec<usize>,
    pub kernels: Vec<usize>,
    pub gru_layers: Vec<usize>,
    pub gru_width: Vec<usize>,
    pub dense_layers: Vec<usize>,
    pub dense_width: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            conv_layers: vec![3, 4],
            kernel_width: vec![2, 3],
            kernels: vec![32, 64, 128],
            gru_layers: vec![2, 3],
            gru_width: vec![32],
            dense_layers: vec![1, 2],
            dense_width: vec![32, 64],
            lambdas: LAMBDA_GRID.to_vec(),
        }
    }
}

impl Grid {
    /// Every spec obtained by varying `base` over the grid. λ applies to all
    /// adversaries at once and is only varied in Priv mode.
    pub fn enumerate(&self, base: &ModelSpec) -> Vec<ModelSpec> {
        let lambdas: Vec<Option<f64>> = match base.mode {
            Mode::Priv => self.lambdas.iter().copied().map(Some).collect(),
            Mode::Gen => vec![None],
        };
        let mut out = Vec::new();
        for &conv_layers in &self.conv_layers {
            for &kernel_width in &self.kernel_width {
                for &kernels in &self.kernels {
                    for &gru_layers in &self.gru_layers {
                        for &gru_width in &self.gru_width {
                            for &dense_layers in &self.dense_layers {
                                for &dense_width in &self.dense_width {
                                    for &lambda in &lambdas {
                                        let mut s = base.clone();
                                        s.layers = LayerSpec {
                                            conv_layers,
                                            kernel_width,
                                            kernels,
                                            gru_layers,
                                            gru_width,
                                            dense_layers,
                                            dense_width,
                                        };
                                        if let Some(l) = lambda {
                                            s.adversaries.iter_mut().for_each(|a| a.lambda = l);
                                        }
                                        out.push(s);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn size(&self, mode: Mode) -> usize {
        let l = match mode {
            Mode::Priv => self.lambdas.len(),
            Mode::Gen => 1,
        };
        self.conv_layers.len()
            * self.kernel_width.len()
            * self.kernels.len()
            * self.gru_layers.len()
            * self.gru_width.len()
            * self.dense_layers.len()
            * self.dense_width.len()
            * l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub spec: ModelSpec,
    pub param_count: usize,
    pub emotion_uar: f64,
    pub adversary_uar: Option<f64>,
    pub score: f64,
}

impl GridScore {
    pub fn new(spec: ModelSpec, param_count: usize, emotion_uar: f64, adversary_uar: Option<f64>) -> Self {
        let score = match (spec.mode, adversary_uar) {
            (Mode::Priv, Some(a)) => emotion_uar - (a - 0.5).abs(),
            _ => emotion_uar,
        };
        Self {
            spec,
            param_count,
            emotion_uar,
            adversary_uar,
            score,
        }
    }
}

fn spec_order(a: &ModelSpec, b: &ModelSpec) -> Ordering {
    a.layers.cmp(&b.layers).then_with(|| {
        let la = a.adversaries.iter().map(|x| x.lambda);
        let lb = b.adversaries.iter().map(|x| x.lambda);
        la.zip(lb)
            .map(|(x, y)| x.total_cmp(&y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Best first: higher score, then fewer parameters, then layer/λ order.
pub fn rank_candidates(scores: &mut [GridScore]) {
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.param_count.cmp(&b.param_count))
            .then_with(|| spec_order(&a.spec, &b.spec))
    });
}

/// Trains every grid point once on `data` and ranks them on validation.
pub fn grid_search(
    grid: &Grid,
    base: &ModelSpec,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<GridScore>> {
    let specs = grid.enumerate(base);
    if specs.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut scores = Vec::with_capacity(specs.len());
    for spec in specs {
        let (model, history) = train(&spec, data, cfg, seed)?;
        let best = history.best();
        let emotion = best.val_uar.get("emotion").copied().unwrap_or(0.0);
        let adv = adversary_uar(&model, &history);
        scores.push(GridScore::new(spec, model.param_count(), emotion, adv));
    }
    rank_candidates(&mut scores);
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_hand_computed_steps() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut st = OptimizerState::new(&p);
        rmsprop_step(&mut p, &[vec![1.0]], &mut st, 1e-3, 0.9, 1e-8).unwrap();
        let want = -1e-3 / (libm::sqrt(0.1) + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
        assert!((p[0].data()[0] + 0.0031623).abs() < 1e-7);
        rmsprop_step(&mut p, &[vec![1.0]], &mut st, 1e-3, 0.9, 1e-8).unwrap();
        assert!((st.cache[0][0] - 0.19).abs() < 1e-15);

        let before = p.clone();
        rmsprop_step(&mut p, &[vec![0.0]], &mut st, 1e-3, 0.9, 1e-8).unwrap();
        assert_eq!(p, before);
        assert!(matches!(
            rmsprop_step(&mut p, &[vec![f64::NAN]], &mut st, 1e-3, 0.9, 1e-8),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p, before);
    }

    #[test]
    fn inverse_frequency_weights() {
        let labels: Vec<usize> = [vec![0; 100], vec![1; 200], vec![2; 100]].concat();
        let w = class_weights(&labels, 3, ClassWeightMode::InverseFrequency).unwrap();
        for (a, b) in w.iter().zip([4.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            class_weights(&[0, 0, 2], 3, ClassWeightMode::Uniform),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn patience_path() {
        let mut es = EarlyStopping::new(5);
        let mut stopped = None;
        for (i, l) in [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 0.5].iter().enumerate() {
            es.observe(i + 1, *l);
            if es.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn ensemble_hand_average() {
        let runs = vec![vec![vec![0.6, 0.4]], vec![vec![0.4, 0.6]], vec![vec![0.55, 0.45]]];
        let (p, c) = average_probabilities(&runs).unwrap();
        assert!((p[0][0] - 0.516_666_666_666_666_7).abs() < 1e-12);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // the first class (index 0) carries the larger mean
        assert_eq!(c, vec![0]);
    }

    #[test]
    fn grid_size_matches_enumeration() {
        let g = Grid::default();
        let base = ModelSpec::private(
            crate::model::Modality::Multimodal,
            crate::data::Task::Activation,
            &[(AdversaryTarget::Gender, 0.5)],
        );
        let specs = g.enumerate(&base);
        assert_eq!(specs.len(), g.size(Mode::Priv));
        assert_eq!(specs.len(), 384);
        assert!(specs.iter().all(|s| s.validate().is_ok()));
        let single = Grid {
            conv_layers: vec![3],
            kernel_width: vec![2],
            kernels: vec![32],
            gru_layers: vec![2],
            gru_width: vec![32],
            dense_layers: vec![1],
            dense_width: vec![32],
            lambdas: vec![0.5],
        };
        assert_eq!(single.enumerate(&base), vec![base.clone()]);
    }

    #[test]
    fn ranking_rule() {
        let base = ModelSpec::private(
            crate::model::Modality::Lexical,
            crate::data::Task::Valence,
            &[(AdversaryTarget::Gender, 0.5)],
        );
        let mut other = base.clone();
        other.layers.dense_width = 64;
        let mut s = vec![
            GridScore::new(other.clone(), 100, 0.6, Some(0.60)),
            GridScore::new(base.clone(), 100, 0.6, Some(0.50)),
        ];
        rank_candidates(&mut s);
        assert_eq!(s[0].spec, base);
        let mut tie = vec![
            GridScore::new(other.clone(), 100, 0.6, Some(0.5)),
            GridScore::new(base.clone(), 100, 0.6, Some(0.5)),
        ];
        rank_candidates(&mut tie);
        assert_eq!(tie[0].spec, base);
        let mut fewer = vec![
            GridScore::new(base.clone(), 200, 0.6, Some(0.5)),
            GridScore::new(other.clone(), 100, 0.6, Some(0.5)),
        ];
        rank_candidates(&mut fewer);
        assert_eq!(fewer[0].spec, other);
    }
}
