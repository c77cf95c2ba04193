use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("accuracy", predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error over equal-width, right-closed confidence
/// bins `((b−1)/B, b/B]`; a confidence of exactly 0 falls in the first bin.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::dims("ece", confidences.len(), correct.len()));
    }
    if bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hit_sum[b] / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub support: usize,
    pub accuracy: f64,
}

/// Per-class accuracy, one entry per class index below `classes`.
pub fn per_class_report(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<ClassReport> {
    (0..classes)
        .map(|class| {
            let (support, hits) = labels
                .iter()
                .zip(predictions)
                .filter(|(l, _)| **l == class)
                .fold((0, 0), |(s, h), (l, p)| (s + 1, h + usize::from(l == p)));
            ClassReport {
                class,
                support,
                accuracy: if support == 0 { 0.0 } else { hits as f64 / support as f64 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn single_bin_gap() {
        let e = ece(&[0.9; 10], &[true; 10], 1).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn confident_and_right_is_zero() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 15).unwrap(), 0.0);
    }

    #[test]
    fn calibrated_stream_has_small_ece() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut conf = Vec::with_capacity(n);
        let mut ok = Vec::with_capacity(n);
        for _ in 0..n {
            let c = 0.2 + 0.8 * rng.uniform();
            conf.push(c);
            ok.push(rng.uniform() < c);
        }
        assert!(ece(&conf, &ok, 15).unwrap() < 0.02);
    }

    #[test]
    fn zero_confidence_joins_first_bin() {
        let e = ece(&[0.0, 0.05], &[false, false], 10).unwrap();
        assert!((e - 0.025).abs() < 1e-12);
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded() {
        let mut rng = Rng::new(4);
        let conf: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        let ok: Vec<bool> = (0..200).map(|_| rng.uniform() < 0.5).collect();
        let e = ece(&conf, &ok, 15).unwrap();
        let perm = rng.permutation(200);
        let conf_p: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let ok_p: Vec<bool> = perm.iter().map(|&i| ok[i]).collect();
        assert!((e - ece(&conf_p, &ok_p, 15).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&e));
        assert!(ece(&conf, &ok[..10], 15).is_err());
    }
}
