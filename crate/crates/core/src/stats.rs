//! Recall-based metrics and the paired significance machinery.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Gender, UtteranceSample};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{AdversaryTarget, Head, Model};

/// `K × K` counts, rows are true classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut m = Self::new(k);
        for (&p, &y) in preds.iter().zip(labels) {
            if p >= k || y >= k {
                return Err(Error::Index(format!("class pair ({y}, {p}) outside {k} classes")));
            }
            m.counts[y * k + p] += 1;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension(format!("merging {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Mean per-class recall; every true class must occur.
    pub fn uar(&self) -> Result<f64> {
        let mut sum = 0.0;
        for c in 0..self.k {
            let row = &self.counts[c * self.k..(c + 1) * self.k];
            let n: u64 = row.iter().sum();
            if n == 0 {
                return Err(Error::Metric(format!("true class {c} never occurs")));
            }
            sum += row[c] as f64 / n as f64;
        }
        Ok(sum / self.k as f64)
    }
}

pub fn uar(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    ConfusionMatrix::from_predictions(preds, labels, k)?.uar()
}

/// `(U(M), U(F))`: UAR restricted to each gender's samples.
pub fn per_group_uar(preds: &[usize], labels: &[usize], groups: &[Gender], k: usize) -> Result<(f64, f64)> {
    if groups.len() != labels.len() {
        return Err(Error::Dimension(format!("{} groups for {} labels", groups.len(), labels.len())));
    }
    let mut out = [0.0; 2];
    for g in [Gender::M, Gender::F] {
        let (p, y): (Vec<usize>, Vec<usize>) = preds
            .iter()
            .zip(labels)
            .zip(groups)
            .filter(|(_, &gg)| gg == g)
            .map(|((&p, &y), _)| (p, y))
            .unzip();
        if y.is_empty() {
            return Err(Error::Metric(format!("no samples for group {g:?}")));
        }
        out[g.index()] = uar(&p, &y, k).map_err(|e| Error::Metric(format!("group {g:?}: {e}")))?;
    }
    Ok((out[0], out[1]))
}

/// Index of the largest entry; the first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// UAR of the jointly trained gender head on `val`.
pub fn leakage(model: &Model, val: &[&UtteranceSample]) -> Result<f64> {
    let i = model
        .spec()
        .adversary_index(AdversaryTarget::Gender)
        .ok_or_else(|| Error::Spec("model has no gender head".into()))?;
    let probs = model.predict_batch(val, Head::Adversary(i))?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let labels: Vec<usize> = val.iter().map(|s| s.gender.index()).collect();
    uar(&preds, &labels, 2)
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("incomplete beta at a={a}, b={b}, x={x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = math::lgamma(a + b) - math::lgamma(a) - math::lgamma(b) + a * math::ln(x) + b * math::ln(1.0 - x);
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(math::exp(ln_front) * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - math::exp(ln_front) * beta_cf(b, a, 1.0 - x)? / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::Numeric(format!("incomplete beta did not converge at a={a}, b={b}, x={x}")))
}

/// Two-sided tail probability `P(|T| ≥ |t|)` of Student's t with `df` degrees
/// of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if !t.is_finite() {
        return Ok(0.0);
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Set when the differences have zero spread but a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`, pairing by index.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Metric(format!("paired t-test needs >= 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0, degenerate: false }
        } else {
            TTest {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / math::sqrt(var / n as f64);
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df as f64)?,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub alpha: f64,
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini-Hochberg step-up procedure. Outputs are in input order.
pub fn bh_adjust(pvals: &[f64], alpha: f64) -> Result<SignificanceResult> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].total_cmp(&pvals[j]).then(i.cmp(&j)));
    let mut k = 0;
    for (rank, &i) in order.iter().enumerate() {
        if pvals[i] <= (rank + 1) as f64 / m as f64 * alpha {
            k = rank + 1;
        }
    }
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(pvals[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    let mut reject = vec![false; m];
    for &i in &order[..k] {
        reject[i] = true;
    }
    Ok(SignificanceResult {
        alpha,
        raw: pvals.to_vec(),
        adjusted,
        reject,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uar_examples() {
        assert_eq!(uar(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // class 0: 2/2, class 1: 1/2
        assert_eq!(uar(&[0, 0, 1, 0], &[0, 0, 1, 1], 2).unwrap(), 0.75);
        assert!(matches!(uar(&[0, 0], &[0, 0], 2), Err(Error::Metric(_))));
    }

    #[test]
    fn pooled_confusion_is_sum_of_groups() {
        let preds = [0, 1, 2, 2, 1, 0, 0, 2];
        let labels = [0, 1, 2, 1, 1, 0, 2, 2];
        let groups = [Gender::M, Gender::F, Gender::M, Gender::F, Gender::M, Gender::F, Gender::M, Gender::F];
        let mut acc = ConfusionMatrix::new(3);
        for g in [Gender::M, Gender::F] {
            let idx: Vec<usize> = (0..8).filter(|&i| groups[i] == g).collect();
            let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            acc.merge(&ConfusionMatrix::from_predictions(&p, &y, 3).unwrap()).unwrap();
        }
        assert_eq!(acc, ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap());
        let (m, f) = per_group_uar(&preds, &labels, &groups, 3).unwrap();
        assert!((m - (1.0 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((f - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
        let missing = [Gender::M, Gender::M, Gender::M, Gender::M, Gender::M, Gender::F, Gender::F, Gender::F];
        assert!(matches!(per_group_uar(&preds, &labels, &missing, 3), Err(Error::Metric(_))));
    }

    #[test]
    fn t_test_degenerate_rules() {
        let a = [0.3, 0.4, 0.5];
        assert_eq!(paired_t_test(&a, &a).unwrap().p, 1.0);
        let r = paired_t_test(&[2.0; 5], &[1.0; 5]).unwrap();
        assert!(r.degenerate && r.p == 0.0);
        assert!(matches!(paired_t_test(&[1.0], &[0.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a
        for x in [0.1, 0.37, 0.5, 0.93] {
            assert!((incomplete_beta(1.0, 1.0, x).unwrap() - x).abs() < 1e-14);
            assert!((incomplete_beta(3.0, 1.0, x).unwrap() - x * x * x).abs() < 1e-14);
        }
        // t with 1 df is Cauchy: P(|T| > t) = 1 - 2 atan(t) / pi
        for t in [0.5f64, 1.0, 3.0] {
            let want = 1.0 - 2.0 * libm::atan(t) / core::f64::consts::PI;
            assert!((student_t_two_sided(t, 1.0).unwrap() - want).abs() < 1e-13);
        }
    }

    #[test]
    fn bh_examples() {
        let r = bh_adjust(&[0.04], 0.05).unwrap();
        assert_eq!((r.reject[0], r.adjusted[0]), (true, 0.04));
        let r = bh_adjust(&[0.01, 0.02, 0.04], 0.05).unwrap();
        assert_eq!(r.reject, vec![true, true, true]);
        let r = bh_adjust(&[0.03, 0.9], 0.05).unwrap();
        assert_eq!(r.reject, vec![false, false]);
        assert!(matches!(bh_adjust(&[1.2], 0.05), Err(Error::Domain(_))));
    }
}
