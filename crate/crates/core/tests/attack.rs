use emoguard_core::attack::*;
use emoguard_core::data::{generate_corpus, make_folds, znorm_by_speaker, FoldRole, GenConfig, Task, UtteranceSample};
use emoguard_core::model::{build_model, AdversaryTarget, Modality, ModelSpec};
use emoguard_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_grid() -> ProbeConfig {
    ProbeConfig {
        grid: vec![ProbeSpec { layers: 2, width: 32 }],
        max_epochs: 15,
        ..ProbeConfig::default()
    }
}

/// `n` samples whose first coordinate is `shift·(2y-1)` plus unit noise.
fn gaussian_reps(n: usize, dim: usize, shift: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::stream(seed, &[]);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let reps = labels
        .iter()
        .map(|&y| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            v[0] += shift * (2.0 * y as f64 - 1.0);
            v
        })
        .collect();
    (reps, labels)
}

#[test]
fn shuffled_labels_give_chance() {
    let (reps, mut labels) = gaussian_reps(2400, 8, 0.0, 1);
    labels.shuffle(&mut rng::stream(2, &[]));
    let (target, target_labels) = gaussian_reps(2000, 8, 0.0, 3);
    let r = privacy_from_representations((&reps, &labels), (&target, &target_labels), &small_grid(), 0).unwrap();
    assert!((r.uar - 0.5).abs() <= 0.05, "{}", r.uar);
}

#[test]
fn separable_gender_is_recovered() {
    let (reps, labels) = gaussian_reps(600, 8, 4.0, 4);
    let (target, target_labels) = gaussian_reps(600, 8, 4.0, 5);
    let r = privacy_from_representations((&reps, &labels), (&target, &target_labels), &small_grid(), 0).unwrap();
    assert!(r.uar >= 0.98, "{}", r.uar);
    assert!(r.metric <= 0.02 && !r.flagged);
}

#[test]
fn perfect_and_constant_representations() {
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let onehot: Vec<Vec<f64>> = labels.iter().map(|&y| vec![y as f64, 1.0 - y as f64]).collect();
    let p = privacy_from_representations((&onehot, &labels), (&onehot, &labels), &small_grid(), 1).unwrap();
    assert!(p.metric <= 0.02, "{}", p.metric);

    let constant = vec![vec![0.7; 4]; 200];
    let p = privacy_from_representations((&constant, &labels), (&constant, &labels), &small_grid(), 1).unwrap();
    assert!((p.metric - 0.5).abs() <= 0.02);
    let mi = membership_from_representations(
        (&constant, &labels),
        (&constant[..40], &labels[..40]),
        (&constant, &labels),
        &small_grid(),
        1,
    )
    .unwrap();
    assert!((mi.metric - 0.5).abs() <= 0.02);
    assert!(!mi.flagged);
}

#[test]
fn inverted_relation_is_flagged_not_clamped() {
    let (reps, labels) = gaussian_reps(400, 4, 4.0, 6);
    let (target, target_labels) = gaussian_reps(400, 4, 4.0, 7);
    let flipped: Vec<usize> = target_labels.iter().map(|y| 1 - y).collect();
    let r = privacy_from_representations((&reps, &labels), (&target, &flipped), &small_grid(), 0).unwrap();
    assert!(r.metric > 0.9 && r.flagged, "{r:?}");

    let mi = membership_from_representations((&reps, &labels), (&reps[..50], &labels[..50]), (&target, &flipped), &small_grid(), 0)
        .unwrap();
    assert!(mi.metric < 0.1 && mi.flagged);
}

#[test]
fn planted_memorization_is_detected() {
    // Members sit closer to a memorized template than non-members.
    let mut r = rng::stream(8, &[]);
    let mut sample = |n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let reps = labels
            .iter()
            .map(|&y| {
                let spread = if y == 1 { 0.4 } else { 1.0 };
                (0..6).map(|_| spread * r.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        (reps, labels)
    };
    let (tr, ty) = sample(400);
    let (vr, vy) = sample(100);
    let (er, ey) = sample(400);
    let mi = membership_from_representations((&tr, &ty), (&vr, &vy), (&er, &ey), &small_grid(), 0).unwrap();
    assert!(mi.metric >= 0.65, "{}", mi.metric);
}

fn setup() -> (Vec<UtteranceSample>, emoguard_core::data::SplitPlan) {
    let mut corpus = generate_corpus(&GenConfig {
        n_speakers: 10,
        utterances_per_speaker: 12,
        seq_len_range: [3, 4],
        seed: 5,
        ..GenConfig::default()
    })
    .unwrap();
    znorm_by_speaker(&mut corpus).unwrap();
    let plan = make_folds(&corpus, 5, 5).unwrap();
    (corpus, plan)
}

#[test]
fn attacks_leave_the_model_untouched_and_ignore_order() {
    let (corpus, plan) = setup();
    let d1 = plan.samples_with_role(&corpus, FoldRole::Train);
    let d2 = plan.samples_with_role(&corpus, FoldRole::Attacker);
    let spec = ModelSpec::private(Modality::Acoustic, Task::Activation, &[(AdversaryTarget::Gender, 0.5)]);
    let model = build_model(&spec, &[], 3).unwrap();
    let before = model.fingerprint();
    let a = privacy_metric(&model, &d1, &d2, &small_grid(), 9).unwrap();
    assert_eq!(model.fingerprint(), before);

    let mut shuffled = d1.clone();
    shuffled.shuffle(&mut rng::stream(10, &[]));
    let b = privacy_metric(&model, &shuffled, &d2, &small_grid(), 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shared_speakers_violate_the_protocol() {
    let (corpus, plan) = setup();
    let d1 = plan.samples_with_role(&corpus, FoldRole::Train);
    let model = build_model(&ModelSpec::gen(Modality::Lexical, Task::Valence), &[], 0).unwrap();
    let err = privacy_metric(&model, &d1, &d1[..5], &small_grid(), 0).unwrap_err();
    assert!(matches!(err, emoguard_core::Error::Protocol(_)));
}
