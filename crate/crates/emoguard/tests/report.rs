use emoguard::config::{BhFamily, Scenario};
use emoguard::report::{cell, emit_table, Metric, MetricsReport, Planned, Row, SCHEMA};
use emoguard_core::data::Task;
use emoguard_core::model::{AdversaryTarget, Modality, ModelSpec};

fn row(spec: ModelSpec, values: &[(Metric, [f64; 5])]) -> Row {
    let mut r = Row::new(spec);
    for (m, v) in values {
        r.metrics.insert(*m, cell(v.to_vec()));
    }
    r
}

fn gen_metrics(shift: f64) -> Vec<(Metric, [f64; 5])> {
    let base = [0.60, 0.62, 0.58, 0.61, 0.59];
    Metric::ALL
        .into_iter()
        .filter(|&m| m != Metric::MI)
        .map(|m| (m, base.map(|x| x + shift)))
        .collect()
}

fn priv_metrics(p: [f64; 5]) -> Vec<(Metric, [f64; 5])> {
    let u = [0.60, 0.62, 0.58, 0.61, 0.59];
    vec![(Metric::UMale, u), (Metric::UFemale, u), (Metric::U, u), (Metric::P, p)]
}

/// Gen and Priv rows for one modality on activation, with P clearly raised.
fn privacy_report() -> MetricsReport {
    let gen = row(ModelSpec::gen(Modality::Acoustic, Task::Activation), &gen_metrics(0.0));
    let priv_ = row(
        ModelSpec::private(Modality::Acoustic, Task::Activation, &[(AdversaryTarget::Gender, 0.5)]),
        &priv_metrics([0.40, 0.45, 0.43, 0.41, 0.44]),
    );
    let mut gen_p = gen;
    gen_p.metrics.insert(Metric::P, cell(vec![0.30, 0.31, 0.29, 0.33, 0.30]));
    // Treatment first, so assembly has to reorder.
    let planned = [Planned {
        metric: Metric::P,
        baseline: 1,
        treatment: 0,
    }];
    MetricsReport::assemble(Scenario::Q2Privacy, "0123456789abcdef".into(), 7, 0.05, BhFamily::PerTask, vec![priv_, gen_p], &planned)
        .unwrap()
}

#[test]
fn gen_table_has_all_columns_and_priv_omits_leakage() {
    let table = emit_table(&privacy_report());
    assert!(table.contains("| Modality | U(M) | U(F) | U | L | P | MI |"), "{table}");
    assert!(table.contains("| Modality | Variant | U(M) | U(F) | U | P | MI |"), "{table}");
    assert!(table.contains("n/a"));
    assert!(table.contains("Not measured in this scenario: MI."));
}

#[test]
fn significant_cells_are_bold_and_rows_sorted() {
    let report = privacy_report();
    assert_eq!(report.rows[0].mode, emoguard_core::model::Mode::Gen);
    let c = &report.comparisons[0];
    assert_eq!((c.baseline, c.treatment), (0, 1));
    assert!(c.reject && c.mean_difference > 0.1);
    let p = &report.rows[1].metrics[&Metric::P];
    assert_eq!(p.significant, Some(true));
    let table = emit_table(&report);
    assert!(table.contains(&format!("**{:.3}**", p.mean)), "{table}");
    assert!(!table.contains(&format!("**{:.3}**", report.rows[0].metrics[&Metric::P].mean)));
}

#[test]
fn report_json_round_trips_and_matches_schema() {
    let report = privacy_report();
    let text = report.to_json().unwrap();
    assert!(text.ends_with('\n'));
    let back = MetricsReport::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);

    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value = serde_json::from_str(&text).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let mut short = instance.clone();
    short["rows"][0]["metrics"]["U"]["folds"].as_array_mut().unwrap().pop();
    assert!(!validator.is_valid(&short));
}

#[test]
fn folds_csv_lists_every_fold_value() {
    let report = privacy_report();
    let csv = report.folds_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("modality,task,mode,lambda,placement,adversaries,metric,fold,value"));
    let cells: usize = report.rows.iter().map(|r| r.metrics.len()).sum();
    assert_eq!(lines.count(), cells * 5);
}

#[test]
fn wrong_fold_count_is_rejected() {
    let mut r = Row::new(ModelSpec::gen(Modality::Lexical, Task::Valence));
    r.metrics.insert(Metric::U, cell(vec![0.5; 4]));
    assert!(MetricsReport::assemble(Scenario::Q3Utility, "x".into(), 0, 0.05, BhFamily::PerTask, vec![r], &[]).is_err());
}

#[test]
fn multi_adversary_table_pairs_tasks() {
    let mut rows = Vec::new();
    let mi = (Metric::MI, [0.5, 0.52, 0.49, 0.51, 0.5]);
    for task in [Task::Activation, Task::Valence] {
        let mut g = gen_metrics(0.0);
        g.push(mi);
        rows.push(row(ModelSpec::gen(Modality::Lexical, task), &g));
        let mut p = priv_metrics([0.4; 5]);
        p.push(mi);
        let spec = ModelSpec::private(Modality::Lexical, task, &[(AdversaryTarget::Gender, 0.5), (AdversaryTarget::Speaker, 0.5)]);
        rows.push(row(spec, &p));
    }
    let report = MetricsReport::assemble(Scenario::Q7Multi, "m".into(), 0, 0.05, BhFamily::PerTask, rows, &[]).unwrap();
    let table = emit_table(&report);
    assert!(
        table.contains("| Modality | Mode | Variant | Activation U | Activation P | Activation MI | Valence U | Valence P | Valence MI |"),
        "{table}"
    );
    let body: Vec<&str> = table.lines().filter(|l| l.starts_with("| lexical")).collect();
    assert_eq!(body.len(), 2, "{table}");
}
