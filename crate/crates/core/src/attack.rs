//! Attacker probes on frozen representations, the demographic privacy metric
//! and membership identification.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Membership, MiSplit, UtteranceSample};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph};
use crate::math;
use crate::model::Model;
use crate::rng::{self, tag};
use crate::stats::{argmax, uar};
use crate::tensor::Tensor;
use crate::train::{class_weights, rmsprop_step, ClassWeightMode, EarlyStopping, OptimizerState};

/// Hidden dense layers and their width; a 2-way output layer follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub grid: Vec<ProbeSpec>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// Share of the attacker's data held out for probe selection.
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let grid = [2, 3, 4]
            .iter()
            .flat_map(|&layers| [32, 64].map(|width| ProbeSpec { layers, width }))
            .collect();
        Self {
            grid,
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            val_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|p| !(2..=4).contains(&p.layers) || p.width == 0) {
            return Err(Error::Config("probe grid needs entries with 2-4 dense layers".into()));
        }
        if self.patience == 0 || self.patience >= self.max_epochs || self.batch_size == 0 {
            return Err(Error::Config("probe patience must lie in [1, max_epochs) and batch_size >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("probe val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A trained feed-forward attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerProbe {
    pub spec: ProbeSpec,
    pub layers: Vec<(Tensor, Tensor)>,
    pub val_uar: f64,
}

fn forward(g: &mut Graph, layers: &[(crate::graph::Value, crate::graph::Value)], x: crate::graph::Value) -> Result<crate::graph::Value> {
    let last = layers.len() - 1;
    let mut y = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let act = if i == last { Activation::Identity } else { Activation::Relu };
        y = g.dense(y, w, b, act)?;
    }
    Ok(y)
}

fn batch_tensor(reps: &[&[f64]]) -> Tensor {
    let d = reps.first().map_or(0, |r| r.len());
    let data = reps.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::from_parts(vec![reps.len(), d], data)
}

impl AttackerProbe {
    /// Class probabilities per representation.
    pub fn predict(&self, reps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let d = self.layers[0].0.cols();
        if let Some(r) = reps.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension(format!("probe expects {d}-dim inputs, got {}", r.len())));
        }
        let mut out = Vec::with_capacity(reps.len());
        for chunk in reps.chunks(256) {
            let mut g = Graph::new();
            let layers: Vec<_> = self
                .layers
                .iter()
                .map(|(w, b)| (g.input(w.clone()), g.input(b.clone())))
                .collect();
            let rows: Vec<&[f64]> = chunk.iter().map(|r| r.as_slice()).collect();
            let x = g.input(batch_tensor(&rows));
            let logits = forward(&mut g, &layers, x)?;
            let lt = g.value(logits);
            for r in 0..chunk.len() {
                let row = lt.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| math::exp(v - max)).collect();
                let z: f64 = e.iter().sum();
                out.push(e.into_iter().map(|v| v / z).collect());
            }
        }
        Ok(out)
    }

    pub fn classify(&self, reps: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.predict(reps)?.iter().map(|p| argmax(p)).collect())
    }
}

fn check_inputs(reps: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if reps.len() != labels.len() {
        return Err(Error::Dimension(format!("{} representations for {} labels", reps.len(), labels.len())));
    }
    let d = reps.first().map_or(0, |r| r.len());
    if d == 0 || reps.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("representations must share one non-zero dimension".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Index(format!("probe label {y} is not binary")));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data("probe labels contain a single class".into()));
    }
    Ok(d)
}

fn fit_one(
    spec: ProbeSpec,
    d: usize,
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackerProbe> {
    let mut init = rng::stream(seed, &[tag::PROBE, 0]);
    let mut shuffle = rng::stream(seed, &[tag::PROBE, 1]);
    let mut params = Vec::new();
    let mut fan_in = d;
    for i in 0..=spec.layers {
        let m = if i == spec.layers { 2 } else { spec.width };
        let limit = math::sqrt(6.0 / (fan_in + m) as f64);
        let w = (0..m * fan_in).map(|_| init.random_range(-limit..limit)).collect();
        params.push(Tensor::from_parts(vec![m, fan_in], w));
        params.push(Tensor::zeros(&[m]));
        fan_in = m;
    }
    let weights = class_weights(train.1, 2, ClassWeightMode::InverseFrequency)?;
    let val_weights = class_weights(val.1, 2, ClassWeightMode::InverseFrequency)?;
    let mut state = OptimizerState::new(&params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..train.0.len()).collect();
    let val_rows: Vec<&[f64]> = val.0.iter().map(|r| r.as_slice()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vals: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
            let layers: Vec<_> = vals.chunks(2).map(|p| (p[0], p[1])).collect();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| train.0[i].as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
            let x = g.input(batch_tensor(&rows));
            let logits = forward(&mut g, &layers, x)?;
            let loss = g.batch_weighted_cross_entropy(logits, &labels, &weights)?;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vals.iter().map(|&v| g.grad_or_zeros(v)).collect();
            rmsprop_step(
                &mut params,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.rmsprop_decay,
                cfg.rmsprop_epsilon,
            )?;
        }
        let mut g = Graph::new();
        let vals: Vec<_> = params.iter().map(|t| g.input(t.clone())).collect();
        let layers: Vec<_> = vals.chunks(2).map(|p| (p[0], p[1])).collect();
        let x = g.input(batch_tensor(&val_rows));
        let logits = forward(&mut g, &layers, x)?;
        let loss = g.batch_weighted_cross_entropy(logits, val.1, &val_weights)?;
        if stopper.observe(epoch, g.value(loss).data()[0]) {
            best.clone_from(&params);
        }
        if stopper.should_stop() {
            break;
        }
    }
    let layers = best.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
    let mut probe = AttackerProbe {
        spec,
        layers,
        val_uar: 0.0,
    };
    probe.val_uar = uar(&probe.classify(val.0)?, val.1, 2)?;
    Ok(probe)
}

/// Trains every grid probe on `train` and keeps the best validation UAR;
/// ties go to the earlier grid entry.
pub fn train_probe_with_validation(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackerProbe> {
    cfg.validate()?;
    let d = check_inputs(train.0, train.1)?;
    let dv = check_inputs(val.0, val.1)?;
    if d != dv {
        return Err(Error::Dimension(format!("training reps are {d}-dim, validation reps {dv}-dim")));
    }
    let mut best: Option<AttackerProbe> = None;
    for (i, &spec) in cfg.grid.iter().enumerate() {
        let p = fit_one(spec, d, train, val, cfg, rng::derive_seed(seed, &[i as u64]))?;
        if best.as_ref().is_none_or(|b| p.val_uar > b.val_uar) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::Config("empty probe grid".into()))
}

/// Splits `(reps, labels)` into stratified train/validation parts and trains
/// the probe grid.
pub fn train_probe(reps: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<AttackerProbe> {
    check_inputs(reps, labels)?;
    let mut r = rng::stream(seed, &[tag::PROBE_SPLIT]);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in 0..2 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {class} has fewer than 2 attacker samples")));
        }
        idx.shuffle(&mut r);
        let n_val = (math::round(cfg.val_fraction * idx.len() as f64) as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| reps[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (tr, ty) = pick(&train_idx);
    let (vr, vy) = pick(&val_idx);
    train_probe_with_validation((&tr, &ty), (&vr, &vy), cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Gender,
    Membership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    /// Probe UAR on the target set.
    pub uar: f64,
    /// `1 - UAR` for gender, `UAR` for membership.
    pub metric: f64,
    /// Set when the metric falls outside its nominal range; never clamped.
    pub flagged: bool,
    pub probe: ProbeSpec,
    pub probe_val_uar: f64,
}

impl AttackResult {
    fn new(kind: AttackKind, uar: f64, probe: &AttackerProbe) -> Self {
        let (metric, range) = match kind {
            AttackKind::Gender => (1.0 - uar, (0.0, 0.5)),
            AttackKind::Membership => (uar, (0.5, 1.0)),
        };
        Self {
            kind,
            uar,
            metric,
            flagged: !(range.0..=range.1).contains(&metric),
            probe: probe.spec,
            probe_val_uar: probe.val_uar,
        }
    }
}

/// Privacy metric from representations already extracted: the probe learns
/// gender on the attacker's data and is scored on the target set.
pub fn privacy_from_representations(
    attacker: (&[Vec<f64>], &[usize]),
    target: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackResult> {
    let probe = train_probe(attacker.0, attacker.1, cfg, seed)?;
    let preds = probe.classify(target.0)?;
    Ok(AttackResult::new(AttackKind::Gender, uar(&preds, target.1, 2)?, &probe))
}

/// Demographic privacy metric `P = 1 - UAR`: embed the main network's data
/// (D1) and the attacker's data (D2) with the frozen encoder, train a gender
/// probe on D2 and evaluate it on D1.
pub fn privacy_metric(
    model: &Model,
    d1: &[&UtteranceSample],
    d2: &[&UtteranceSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackResult> {
    let s1: BTreeSet<u32> = d1.iter().map(|s| s.speaker_id).collect();
    if let Some(s) = d2.iter().find(|s| s1.contains(&s.speaker_id)) {
        return Err(Error::Protocol(format!("speaker {} is in both D1 and D2", s.speaker_id)));
    }
    let r1 = model.embed_batch(d1)?;
    let r2 = model.embed_batch(d2)?;
    let y1: Vec<usize> = d1.iter().map(|s| s.gender.index()).collect();
    let y2: Vec<usize> = d2.iter().map(|s| s.gender.index()).collect();
    privacy_from_representations((&r2, &y2), (&r1, &y1), cfg, seed)
}

/// Binary label used by the membership probe: 1 = Yes (seen in training).
fn membership_label(m: Membership) -> usize {
    match m {
        Membership::Yes => 1,
        Membership::No => 0,
    }
}

/// Sample ids and labels of the three membership-probe sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipSets {
    pub train: Vec<(u32, usize)>,
    pub val: Vec<(u32, usize)>,
    pub test: Vec<(u32, usize)>,
}

/// Builds the probe's training, validation and test sets. Yes training
/// samples are subsampled to the number of No samples.
pub fn membership_sets(corpus: &[UtteranceSample], mi: &MiSplit, seed: u64) -> Result<MembershipSets> {
    let by_speaker = |spk: u32| corpus.iter().filter(move |s| s.speaker_id == spk);
    let s4 = mi
        .fold_speakers
        .get(&mi.known_fold)
        .ok_or_else(|| Error::Protocol("split has no s4 speakers".into()))?;
    let s5 = mi
        .fold_speakers
        .get(&mi.target_fold)
        .ok_or_else(|| Error::Protocol("split has no s5 speakers".into()))?;

    let mut yes: Vec<u32> = mi.training_samples(corpus).iter().map(|s| s.utterance_id).collect();
    let mut no = Vec::new();
    let mut val = Vec::new();
    for &spk in s4 {
        let label = mi.membership[&spk];
        let reserved = spk == mi.reserved_yes || spk == mi.reserved_no;
        for s in by_speaker(spk) {
            if mi.moved.contains(&s.utterance_id) {
                continue;
            }
            if reserved {
                val.push((s.utterance_id, membership_label(label)));
            } else if label == Membership::Yes {
                yes.push(s.utterance_id);
            } else {
                no.push(s.utterance_id);
            }
        }
    }
    if no.is_empty() || yes.is_empty() {
        return Err(Error::Protocol("membership probe needs both Yes and No training samples".into()));
    }
    yes.sort_unstable();
    if yes.len() > no.len() {
        let mut r = rng::stream(seed, &[tag::MI_BALANCE]);
        yes = yes.choose_multiple(&mut r, no.len()).copied().collect();
        yes.sort_unstable();
    }
    let mut train: Vec<(u32, usize)> = yes.into_iter().map(|u| (u, 1)).collect();
    train.extend(no.into_iter().map(|u| (u, 0)));
    let mut test = Vec::new();
    for &spk in s5 {
        let label = membership_label(mi.membership[&spk]);
        for s in by_speaker(spk) {
            if !mi.moved.contains(&s.utterance_id) {
                test.push((s.utterance_id, label));
            }
        }
    }
    Ok(MembershipSets { train, val, test })
}

/// Membership identification: the UAR of a probe that tells s5 speakers
/// whose samples were partly used for training from unseen ones.
pub fn membership_attack(
    model: &Model,
    corpus: &[UtteranceSample],
    mi: &MiSplit,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackResult> {
    let mut expected: Vec<u32> = mi.training_samples(corpus).iter().map(|s| s.utterance_id).collect();
    expected.sort_unstable();
    if expected != model.train_utterances {
        return Err(Error::Protocol(format!(
            "model was trained on {} samples but the split implies {}",
            model.train_utterances.len(),
            expected.len()
        )));
    }
    let sets = membership_sets(corpus, mi, seed)?;
    let index: BTreeMap<u32, &UtteranceSample> = corpus.iter().map(|s| (s.utterance_id, s)).collect();
    let embed = |set: &[(u32, usize)]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let samples: Vec<&UtteranceSample> = set.iter().map(|(u, _)| index[u]).collect();
        Ok((model.embed_batch(&samples)?, set.iter().map(|&(_, y)| y).collect()))
    };
    let (tr, ty) = embed(&sets.train)?;
    let (vr, vy) = embed(&sets.val)?;
    let (er, ey) = embed(&sets.test)?;
    membership_from_representations((&tr, &ty), (&vr, &vy), (&er, &ey), cfg, seed)
}

/// Membership identification on representations already extracted.
pub fn membership_from_representations(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<AttackResult> {
    let probe = train_probe_with_validation(train, val, cfg, seed)?;
    let preds = probe.classify(test.0)?;
    Ok(AttackResult::new(AttackKind::Membership, uar(&preds, test.1, 2)?, &probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ProbeConfig {
        ProbeConfig {
            grid: vec![ProbeSpec { layers: 2, width: 32 }],
            max_epochs: 20,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn metric_arithmetic_and_flags() {
        let probe = AttackerProbe {
            spec: ProbeSpec { layers: 2, width: 32 },
            layers: Vec::new(),
            val_uar: 0.5,
        };
        let r = AttackResult::new(AttackKind::Gender, 0.70, &probe);
        assert!((r.metric - 0.30).abs() < 1e-15 && !r.flagged);
        assert!(AttackResult::new(AttackKind::Gender, 0.4, &probe).flagged);
        assert_eq!(AttackResult::new(AttackKind::Gender, 1.0, &probe).metric, 0.0);
        assert!(AttackResult::new(AttackKind::Membership, 0.45, &probe).flagged);
    }

    #[test]
    fn probe_rejects_bad_inputs() {
        let reps = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(train_probe(&reps, &[1, 1, 1], &quick(), 0), Err(Error::Data(_))));
        let ragged = vec![vec![0.0], vec![1.0, 0.0]];
        assert!(matches!(train_probe(&ragged, &[0, 1], &quick(), 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_representations_give_chance() {
        let reps = vec![vec![0.25; 8]; 40];
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let r = privacy_from_representations((&reps, &labels), (&reps, &labels), &quick(), 3).unwrap();
        assert_eq!(r.uar, 0.5);
        assert_eq!(r.metric, 0.5);
    }
}
