//! Distillation objective: softmax, cross-entropy against the one-hot label,
//! teacher top-K class selection, the truncated KL term and the analytic
//! gradient of the combined loss with respect to the student logits.
//!
//! The minimized objective is
//!
//! ```text
//! L = -ln s[y] + lambda * sum_{c in C_K} t[c] * ln(t[c] / s[c])
//! ```
//!
//! where `C_K` are the K classes the teacher scores highest. With
//! `renormalize` set, `t` and `s` are first restricted to `C_K` and rescaled
//! to sum to one, which keeps the term a proper divergence. There is no
//! temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly positive probability vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates an externally supplied distribution (sum within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidDistribution(format!(
                "value {v} outside (0, 1]"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OneHotLabel {
    pub class_index: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, classes: usize) -> Result<Self> {
        if class_index >= classes {
            return Err(Error::InvalidDistribution(format!(
                "label {class_index} outside 0..{classes}"
            )));
        }
        Ok(Self { class_index })
    }

    pub fn to_vector(self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        v[self.class_index] = 1.0;
        v
    }
}

/// The K classes with the highest teacher scores, in descending score order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSet {
    classes: Vec<usize>,
    total: usize,
}

impl TopKSet {
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    /// Class count of the distribution the set was drawn from.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn contains(&self, c: usize) -> bool {
        self.classes.contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub lambda: f64,
    pub k: usize,
    #[serde(default = "default_renormalize")]
    pub renormalize: bool,
}

fn default_renormalize() -> bool {
    true
}

impl KdConfig {
    /// Best small-model setting: K = 5, lambda = 0.5.
    pub const IMAGENET_B0: KdConfig = KdConfig {
        lambda: 0.5,
        k: 5,
        renormalize: true,
    };
    /// Destruction-space sweep setting for 10-class data: K = 3, lambda = 1.
    pub const CIFAR10_SWEEP: KdConfig = KdConfig {
        lambda: 1.0,
        k: 3,
        renormalize: true,
    };
    /// Destruction-space sweep setting for 100-class data: K = 5, lambda = 1.
    pub const CIFAR100_SWEEP: KdConfig = KdConfig {
        lambda: 1.0,
        k: 5,
        renormalize: true,
    };

    pub fn disabled() -> Self {
        Self {
            lambda: 0.0,
            k: 1,
            renormalize: true,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.k == 0 || self.k > classes {
            return Err(Error::TopKOutOfRange { k: self.k, classes });
        }
        Ok(())
    }
}

/// Max-subtracted softmax. Entries are floored at the smallest positive
/// normal so they stay strictly positive under extreme logits.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector(
        exps.into_iter()
            .map(|e| (e / sum).max(f64::MIN_POSITIVE))
            .collect(),
    )
}

/// `ln softmax(logits)`, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Negative log-likelihood of the true class.
pub fn cross_entropy(student: &ProbVector, label: OneHotLabel) -> f64 {
    -student.0[label.class_index].ln()
}

pub fn top_k(teacher: &ProbVector, k: usize) -> Result<TopKSet> {
    let n = teacher.len();
    if k == 0 || k > n {
        return Err(Error::TopKOutOfRange { k, classes: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|&a, &b| teacher.0[b].total_cmp(&teacher.0[a]));
    idx.truncate(k);
    Ok(TopKSet {
        classes: idx,
        total: n,
    })
}

/// KL(teacher ‖ student) restricted to `set`.
///
/// With `renormalize`, both distributions are rescaled over the set and the
/// result is non-negative. Without it the raw scores are used as they are and
/// the value may be negative when the student outweighs the teacher there.
pub fn truncated_kl(
    student: &ProbVector,
    teacher: &ProbVector,
    set: &TopKSet,
    renormalize: bool,
) -> Result<f64> {
    if student.len() != teacher.len() || set.total != teacher.len() {
        return Err(Error::InvalidDistribution(format!(
            "top-K set over {} classes used with student {} / teacher {}",
            set.total,
            student.len(),
            teacher.len()
        )));
    }
    let (s, t) = (&student.0, &teacher.0);
    if !renormalize {
        return Ok(set
            .classes
            .iter()
            .map(|&c| t[c] * (t[c].ln() - s[c].ln()))
            .sum());
    }
    let t_mass: f64 = set.classes.iter().map(|&c| t[c]).sum();
    let s_mass: f64 = set.classes.iter().map(|&c| s[c]).sum();
    let (lt, ls) = (t_mass.ln(), s_mass.ln());
    let kl: f64 = set
        .classes
        .iter()
        .map(|&c| {
            let th = t[c] / t_mass;
            th * ((t[c].ln() - lt) - (s[c].ln() - ls))
        })
        .sum();
    Ok(kl.max(0.0))
}

pub fn kd_loss(
    student: &ProbVector,
    teacher: &ProbVector,
    label: OneHotLabel,
    cfg: &KdConfig,
) -> Result<f64> {
    let ce = cross_entropy(student, label);
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let set = top_k(teacher, cfg.k)?;
    Ok(ce + cfg.lambda * truncated_kl(student, teacher, &set, cfg.renormalize)?)
}

/// Loss and gradient of [`kd_loss`]`(softmax(logits), …)` with respect to the
/// student logits. The teacher and its top-K set are constants. Pass
/// `teacher = None` for plain cross-entropy.
///
/// With `p = softmax(z)` the gradient is `p - onehot` plus `lambda` times
/// * `(p[j] / P - t[j] / T) * [j in C_K]` with renormalization, where `P` and
///   `T` are the student and teacher masses on `C_K`;
/// * `p[j] * T - t[j] * [j in C_K]` without.
pub fn kd_loss_and_grad(
    logits: &[f64],
    teacher: Option<&ProbVector>,
    label: OneHotLabel,
    cfg: &KdConfig,
) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    if label.class_index >= c {
        return Err(Error::InvalidDistribution(format!(
            "label {} outside 0..{c}",
            label.class_index
        )));
    }
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let mut loss = -logp[label.class_index];
    let mut grad = p.clone();
    grad[label.class_index] -= 1.0;

    let teacher = match teacher {
        Some(t) if cfg.lambda != 0.0 => t,
        _ => return Ok((loss, grad)),
    };
    if teacher.len() != c {
        return Err(Error::InvalidDistribution(format!(
            "teacher has {} classes, student {c}",
            teacher.len()
        )));
    }
    let set = top_k(teacher, cfg.k)?;
    let t = teacher.values();
    let lam = cfg.lambda;
    if cfg.renormalize {
        let t_mass: f64 = set.classes.iter().map(|&j| t[j]).sum();
        let s_mass: f64 = set.classes.iter().map(|&j| p[j]).sum();
        // ln P_S via log-sum-exp of the restricted log-probabilities
        let max = set.classes.iter().map(|&j| logp[j]).fold(f64::NEG_INFINITY, f64::max);
        let log_s_mass =
            max + set.classes.iter().map(|&j| (logp[j] - max).exp()).sum::<f64>().ln();
        let lt = t_mass.ln();
        let mut kl = 0.0;
        for &j in &set.classes {
            let th = t[j] / t_mass;
            kl += th * ((t[j].ln() - lt) - (logp[j] - log_s_mass));
            grad[j] += lam * (p[j] / s_mass - th);
        }
        loss += lam * kl;
    } else {
        let t_mass: f64 = set.classes.iter().map(|&j| t[j]).sum();
        let mut kl = 0.0;
        for &j in &set.classes {
            kl += t[j] * (t[j].ln() - logp[j]);
            grad[j] -= lam * t[j];
        }
        for (g, &pj) in grad.iter_mut().zip(&p) {
            *g += lam * t_mass * pj;
        }
        loss += lam * kl;
    }
    Ok((loss, grad))
}

/// Gradient of the distillation objective with respect to the student logits.
pub fn kd_loss_grad(
    student_logits: &[f64],
    teacher: &ProbVector,
    label: OneHotLabel,
    cfg: &KdConfig,
) -> Result<Vec<f64>> {
    kd_loss_and_grad(student_logits, Some(teacher), label, cfg).map(|(_, g)| g)
}
