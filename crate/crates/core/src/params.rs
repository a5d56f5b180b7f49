use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// Flat model parameters. Every node in a run carries one, with a shared layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `(1 - lambda) * self + lambda * other`. `lambda == 1` copies `other`
    /// exactly so a full overwrite stays bitwise identical to its source.
    pub fn mix_toward(&mut self, other: &ParamVector, lambda: f64) {
        if lambda <= 0.0 {
            return;
        }
        if lambda >= 1.0 {
            self.0.copy_from_slice(&other.0);
            return;
        }
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s = (1.0 - lambda) * *s + lambda * o;
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Weighted mean `sum_k(w_k * x_k) / sum_k(w_k)`, accumulated in input order.
///
/// Falls back to the plain mean when all weights are zero. Panics on an empty
/// input or on vectors of different lengths.
pub fn weighted_mean<'a, I>(items: I) -> ParamVector
where
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let items: Vec<(&[f64], f64)> = items.into_iter().collect();
    assert!(!items.is_empty(), "weighted mean of nothing");
    let len = items[0].0.len();
    let mut total = 0.0;
    for (x, w) in &items {
        assert_eq!(x.len(), len, "parameter length mismatch");
        total += *w;
    }
    let uniform = total <= 0.0;
    if uniform {
        total = items.len() as f64;
    }
    let mut acc = vec![0.0; len];
    for (x, w) in &items {
        let w = if uniform { 1.0 } else { *w };
        for (a, v) in acc.iter_mut().zip(x.iter()) {
            *a += w * v;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    ParamVector(acc)
}
