//! Classification accuracy and character n-gram F-score (chrF).

use std::collections::HashMap;

use crate::error::{Error, Result};

pub fn accuracy<L: PartialEq>(predictions: &[L], labels: &[L]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChrfParams {
    pub max_order: usize,
    pub beta: f64,
    pub remove_whitespace: bool,
}

impl Default for ChrfParams {
    fn default() -> Self {
        Self {
            max_order: 6,
            beta: 2.0,
            remove_whitespace: true,
        }
    }
}

impl ChrfParams {
    fn validate(&self) -> Result<()> {
        if self.max_order == 0 || self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "chrF needs max_order ≥ 1 and beta > 0, got {} and {}",
                self.max_order, self.beta
            )));
        }
        Ok(())
    }
}

/// Per-order n-gram totals: `(matches, hypothesis n-grams, reference n-grams)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChrfStats {
    pub orders: Vec<(usize, usize, usize)>,
}

impl ChrfStats {
    fn add(&mut self, other: &ChrfStats) {
        if self.orders.is_empty() {
            self.orders = vec![(0, 0, 0); other.orders.len()];
        }
        for (a, b) in self.orders.iter_mut().zip(&other.orders) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }

    /// Mean F-beta over orders the reference side has, scaled to 0..100.
    pub fn score(&self, beta: f64) -> f64 {
        let b2 = beta * beta;
        let mut sum = 0.0;
        let mut effective = 0;
        for &(m, h, r) in &self.orders {
            if r == 0 {
                continue;
            }
            effective += 1;
            let p = if h == 0 { 0.0 } else { m as f64 / h as f64 };
            let rc = m as f64 / r as f64;
            let denom = b2 * p + rc;
            if denom > 0.0 {
                sum += (1.0 + b2) * p * rc / denom;
            }
        }
        if effective == 0 {
            0.0
        } else {
            100.0 * sum / effective as f64
        }
    }
}

fn prepare(s: &str, p: &ChrfParams) -> Vec<char> {
    if p.remove_whitespace {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    } else {
        s.chars().collect()
    }
}

fn ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram counts for one segment pair.
pub fn chrf_stats(hypothesis: &str, reference: &str, p: &ChrfParams) -> Result<ChrfStats> {
    p.validate()?;
    let hyp = prepare(hypothesis, p);
    let refc = prepare(reference, p);
    if refc.is_empty() {
        return Err(Error::InvalidArgument("chrF reference is empty".into()));
    }
    let orders = (1..=p.max_order)
        .map(|n| {
            let h = ngrams(&hyp, n);
            let r = ngrams(&refc, n);
            let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            (matches, h.values().sum(), r.values().sum())
        })
        .collect();
    Ok(ChrfStats { orders })
}

/// Segment-level chrF in `[0, 100]`.
pub fn chrf(hypothesis: &str, reference: &str, p: &ChrfParams) -> Result<f64> {
    Ok(chrf_stats(hypothesis, reference, p)?.score(p.beta))
}

/// Corpus-level chrF: n-gram counts are summed over all pairs before
/// precision and recall are formed.
pub fn corpus_chrf(hypotheses: &[String], references: &[String], p: &ChrfParams) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus chrF needs equal non-empty lists, got {} and {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = ChrfStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&chrf_stats(h, r, p)?);
    }
    Ok(total.score(p.beta))
}
