use std::collections::BTreeSet;

use emoguard_core::data::*;
use proptest::prelude::*;

fn corpus(gender_signal: f64, seed: u64) -> Vec<UtteranceSample> {
    generate_corpus(&GenConfig {
        n_speakers: 20,
        utterances_per_speaker: 20,
        gender_signal_acoustic: gender_signal,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn acoustic_mean(s: &UtteranceSample) -> Vec<f64> {
    let (t, d) = (s.acoustic.rows(), s.acoustic.cols());
    (0..d).map(|j| (0..t).map(|i| s.acoustic.row(i)[j]).sum::<f64>() / t as f64).collect()
}

/// Plain L2-regularised logistic regression by full-batch gradient descent,
/// on standardised features.
struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn fit(x: &[Vec<f64>], y: &[usize]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
            .collect();
        let mut m = Self { mean, scale, w: vec![0.0; d], b: 0.0 };
        let z: Vec<Vec<f64>> = x.iter().map(|r| m.standardise(r)).collect();
        for _ in 0..400 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &t) in z.iter().zip(y) {
                let err = m.prob(r) - t as f64;
                gw.iter_mut().zip(r).for_each(|(g, v)| *g += err * v / n);
                gb += err / n;
            }
            m.w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.5 * (g + 1e-3 * *w));
            m.b -= 0.5 * gb;
        }
        m
    }

    fn standardise(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn prob(&self, z: &[f64]) -> f64 {
        let a = self.b + z.iter().zip(&self.w).map(|(v, w)| v * w).sum::<f64>();
        1.0 / (1.0 + (-a).exp())
    }

    fn predict(&self, r: &[f64]) -> usize {
        usize::from(self.prob(&self.standardise(r)) > 0.5)
    }
}

/// Balanced accuracy of a probe trained on speakers `4k` and `4k+1`, tested on the rest.
fn cross_speaker_accuracy(samples: &[UtteranceSample], feature: impl Fn(&UtteranceSample) -> Vec<f64>, label: impl Fn(&UtteranceSample) -> usize) -> f64 {
    let (train, test): (Vec<&UtteranceSample>, Vec<&UtteranceSample>) = samples.iter().partition(|s| s.speaker_id % 4 < 2);
    let x: Vec<Vec<f64>> = train.iter().map(|s| feature(s)).collect();
    let y: Vec<usize> = train.iter().map(|s| label(s)).collect();
    let model = Logistic::fit(&x, &y);
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for s in &test {
        let t = label(s);
        totals[t] += 1;
        hits[t] += usize::from(model.predict(&feature(s)) == t);
    }
    (0..2).map(|c| hits[c] as f64 / totals[c] as f64).sum::<f64>() / 2.0
}

#[test]
fn planted_gender_signal_is_monotone() {
    let mut by_level = Vec::new();
    for level in [0.0, 0.4, 0.8] {
        let accs: Vec<f64> = (0..3)
            .map(|seed| cross_speaker_accuracy(&corpus(level, seed), acoustic_mean, |s| s.gender.index()))
            .collect();
        by_level.push(accs.iter().sum::<f64>() / 3.0);
        if level == 0.0 {
            assert!(accs.iter().all(|a| (a - 0.5).abs() <= 0.1), "{accs:?}");
        }
    }
    assert!((by_level[0] - 0.5).abs() <= 0.05, "{by_level:?}");
    assert!(by_level[2] >= 0.8, "{by_level:?}");
    assert!(by_level[0] < by_level[1] && by_level[1] < by_level[2], "{by_level:?}");
}

#[test]
fn emotion_classes_are_all_populated() {
    let c = corpus(0.6, 11);
    for task in [Task::Activation, Task::Valence] {
        let mut counts = [0usize; 3];
        for s in &c {
            counts[s.emotion(task).index()] += 1;
        }
        for n in counts {
            let share = n as f64 / c.len() as f64;
            assert!((0.2..=0.5).contains(&share), "{task:?}: {counts:?}");
        }
    }
}

#[test]
fn znorm_removes_speaker_identity_from_means() {
    let mut c = generate_corpus(&GenConfig {
        n_speakers: 4,
        utterances_per_speaker: 60,
        speaker_variance: 1.0,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap();
    // Two speakers of the same gender, split by utterance parity.
    let male: Vec<u32> = {
        let set: BTreeSet<u32> = c.iter().filter(|s| s.gender == Gender::M).map(|s| s.speaker_id).collect();
        set.into_iter().take(2).collect()
    };
    assert_eq!(male.len(), 2);
    let probe = |c: &[UtteranceSample]| {
        let pair: Vec<UtteranceSample> = c
            .iter()
            .filter(|s| male.contains(&s.speaker_id))
            .cloned()
            .map(|mut s| {
                let spk = usize::from(s.speaker_id == male[1]);
                // Reuse the parity split: even utterances train, odd ones test.
                s.speaker_id = (s.utterance_id % 2) * 2;
                s.activation_rating = spk as f64;
                s
            })
            .collect();
        cross_speaker_accuracy(&pair, acoustic_mean, |s| s.activation_rating as usize)
    };
    let raw = probe(&c);
    znorm_by_speaker(&mut c).unwrap();
    let normed = probe(&c);
    assert!(raw >= 0.95, "{raw}");
    // Each speaker's normalised means sum to zero, so the two halves are
    // anti-correlated and the probe can land below chance, never above.
    assert!(normed <= 0.6, "{normed}");
}

#[test]
fn membership_split_is_a_deterministic_partition() {
    let c = generate_corpus(&GenConfig {
        n_speakers: 20,
        utterances_per_speaker: 6,
        seq_len_range: [3, 4],
        seed: 2,
        ..GenConfig::default()
    })
    .unwrap();
    let plan = make_folds(&c, 5, 2).unwrap().with_membership_roles(0);
    let a = make_mi_splits(&plan, &c, 0.5, 0.5, 4).unwrap();
    assert_eq!(a, make_mi_splits(&plan, &c, 0.5, 0.5, 4).unwrap());

    assert!(a.moved.is_disjoint(&a.held_out));
    assert!(a.early_stop_speakers.is_disjoint(&a.train_speakers));
    for fold in [a.known_fold, a.target_fold] {
        for &spk in &a.fold_speakers[&fold] {
            let utts: BTreeSet<u32> = c.iter().filter(|s| s.speaker_id == spk).map(|s| s.utterance_id).collect();
            if a.is_selected(fold, spk) {
                assert_eq!(a.membership[&spk], Membership::Yes);
                assert!(utts.iter().all(|u| a.moved.contains(u) ^ a.held_out.contains(u)));
                assert!(utts.iter().any(|u| a.moved.contains(u)));
            } else {
                assert_eq!(a.membership[&spk], Membership::No);
                assert!(utts.iter().all(|u| !a.moved.contains(u) && !a.held_out.contains(u)));
            }
        }
    }
    let training = a.training_samples(&c);
    assert!(training.iter().all(|s| !a.early_stop_speakers.contains(&s.speaker_id)));
    let early: BTreeSet<u32> = a.early_stop_samples(&c).iter().map(|s| s.utterance_id).collect();
    assert!(training.iter().all(|s| !early.contains(&s.utterance_id)));
    assert_eq!(a.membership[&a.reserved_yes], Membership::Yes);
    assert_eq!(a.membership[&a.reserved_no], Membership::No);
    assert!(make_mi_splits(&plan, &c, 0.5, 1.0, 4).is_err());
}

proptest! {
    #[test]
    fn binning_is_monotone(a in 1.0f64..=5.0, b in 1.0f64..=5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = bin_rating(lo, RatingScale::FivePoint).unwrap().index();
        let y = bin_rating(hi, RatingScale::FivePoint).unwrap().index();
        prop_assert!(x <= y);
    }

    #[test]
    fn nine_point_binning_is_monotone(a in 1.0f64..=9.0, b in 1.0f64..=9.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bin_rating(lo, RatingScale::NinePoint).unwrap().index() <= bin_rating(hi, RatingScale::NinePoint).unwrap().index());
    }
}
