//! The black-box boundary: images in, probability vectors out, every query
//! counted.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};
use crate::model::{softmax, Network, SparseFront};
use crate::numerics::{argmax, Tensor};

/// Confidence scores `F(x)`; entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("probability outside [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Predicted class, ties toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0).unwrap_or(0)
    }
}

/// One probe expressed as changes to a base input: `(flat index, new value)`.
pub type Changes = Vec<(usize, f64)>;

/// Query-only access to a classifier.
///
/// Implementations must be safe to call from several threads; the query
/// counter only ever grows.
pub trait Oracle: Sync {
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// Queries answered so far.
    fn total_queries(&self) -> u64;

    fn query(&self, x: &Tensor) -> Result<ProbabilityVector>;

    /// Same as mapping [`Oracle::query`] over `xs`, in order. Shapes are all
    /// checked before anything is counted.
    fn query_batch(&self, xs: &[Tensor]) -> Result<Vec<ProbabilityVector>>;

    /// Evaluates `base` with each change set applied, one query per set.
    /// Agrees with [`Oracle::query_batch`] on the materialized inputs up to
    /// floating-point reassociation.
    fn query_changes(&self, base: &Tensor, sets: &[Changes]) -> Result<Vec<ProbabilityVector>> {
        let xs = sets
            .iter()
            .map(|set| materialize(base, set))
            .collect::<Result<Vec<_>>>()?;
        self.query_batch(&xs)
    }
}

/// `base` with a change set applied.
pub fn materialize(base: &Tensor, set: &[(usize, f64)]) -> Result<Tensor> {
    let mut x = base.clone();
    let n = x.len();
    for &(i, v) in set {
        *x.data_mut().get_mut(i).ok_or(Error::IndexOutOfRange { index: i, dim: n })? = v;
    }
    Ok(x)
}

/// Wraps a [`Network`] as `softmax(forward_logits(x))`.
#[derive(Debug)]
pub struct NetworkOracle {
    net: Network,
    front: Option<SparseFront>,
    queries: AtomicU64,
}

impl NetworkOracle {
    pub fn new(net: Network) -> Self {
        let front = net.sparse_front();
        Self {
            net,
            front,
            queries: AtomicU64::new(0),
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.net.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.net.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn probs(logits: &Tensor) -> ProbabilityVector {
        ProbabilityVector(softmax(logits.data()))
    }
}

impl Oracle for NetworkOracle {
    fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn total_queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    fn query(&self, x: &Tensor) -> Result<ProbabilityVector> {
        self.check(x)?;
        let z = self.net.forward_logits(x)?;
        self.queries.fetch_add(1, Ordering::SeqCst);
        Ok(Self::probs(&z))
    }

    fn query_batch(&self, xs: &[Tensor]) -> Result<Vec<ProbabilityVector>> {
        for x in xs {
            self.check(x)?;
        }
        let out = xs
            .iter()
            .map(|x| self.net.forward_logits(x).map(|z| Self::probs(&z)))
            .collect::<Result<Vec<_>>>()?;
        self.queries.fetch_add(xs.len() as u64, Ordering::SeqCst);
        Ok(out)
    }

    fn query_changes(&self, base: &Tensor, sets: &[Changes]) -> Result<Vec<ProbabilityVector>> {
        let Some(front) = &self.front else {
            let xs = sets
                .iter()
                .map(|set| materialize(base, set))
                .collect::<Result<Vec<_>>>()?;
            return self.query_batch(&xs);
        };
        self.check(base)?;
        let logits = front.logits_for_changes(&self.net, base, sets)?;
        self.queries.fetch_add(sets.len() as u64, Ordering::SeqCst);
        Ok(logits.iter().map(Self::probs).collect())
    }
}

/// Wraps any closure `x ↦ probabilities` as a counted oracle.
pub struct FnOracle<F> {
    f: F,
    input_shape: Vec<usize>,
    num_classes: usize,
    queries: AtomicU64,
}

impl<F> FnOracle<F>
where
    F: Fn(&Tensor) -> Vec<f64> + Sync,
{
    pub fn new(input_shape: Vec<usize>, num_classes: usize, f: F) -> Self {
        Self {
            f,
            input_shape,
            num_classes,
            queries: AtomicU64::new(0),
        }
    }
}

impl<F> Oracle for FnOracle<F>
where
    F: Fn(&Tensor) -> Vec<f64> + Sync,
{
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn total_queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    fn query(&self, x: &Tensor) -> Result<ProbabilityVector> {
        Ok(self.query_batch(std::slice::from_ref(x))?.remove(0))
    }

    fn query_batch(&self, xs: &[Tensor]) -> Result<Vec<ProbabilityVector>> {
        for x in xs {
            if x.shape() != self.input_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: self.input_shape.clone(),
                    actual: x.shape().to_vec(),
                });
            }
        }
        let out = xs
            .iter()
            .map(|x| ProbabilityVector::new((self.f)(x)))
            .collect::<Result<Vec<_>>>()?;
        self.queries.fetch_add(xs.len() as u64, Ordering::SeqCst);
        Ok(out)
    }
}
