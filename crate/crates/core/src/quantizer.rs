//! Vector quantization: nearest-centroid assignment, the straight-through
//! estimator and the codebook/commitment loss.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Adjoint, Scalar, Tensor, Var};

/// `C` centroids in `ℝ^{d_z}` plus the commitment weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<f64>,
    size: usize,
    dim: usize,
    beta: f64,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, centroids: Vec<f64>, beta: f64) -> Result<Self> {
        if size < 2 || dim == 0 {
            return Err(Error::invalid(format!("codebook needs C >= 2 and d_z >= 1, got {size}x{dim}")));
        }
        if centroids.len() != size * dim {
            return Err(Error::Shape(format!("{} centroid values for a {size}x{dim} codebook", centroids.len())));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("codebook centroid".into()));
        }
        Ok(Self { centroids, size, dim, beta })
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, beta: f64) -> Result<Self> {
        match t.shape() {
            [c, d] => Self::new(*c, *d, t.to_f64_vec(), beta),
            s => Err(Error::Shape(format!("codebook tensor must be 2-D, got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[self.size, self.dim], |i| S::of(self.centroids[i]))
    }
}

/// Result of [`quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub centroid: Vec<f64>,
    /// Squared Euclidean distance to the centroid.
    pub distance: f64,
}

/// Index and squared distance of the nearest row of `centroids`; the
/// lowest index wins ties.
pub fn nearest<S: Scalar>(x: &[S], centroids: &[S], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks(dim).enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn quantize(x: &[f64], book: &Codebook) -> Result<Assignment> {
    if x.len() != book.dim {
        return Err(Error::Shape(format!("vector of dimension {} for a d_z={} codebook", x.len(), book.dim)));
    }
    let (index, distance) = nearest(x, &book.centroids, book.dim);
    Ok(Assignment { index, centroid: book.centroid(index).to_vec(), distance })
}

/// Assignments of every row of `x: [B, d_z]`.
pub fn assign_rows<S: Scalar>(x: &Tensor<S>, centroids: &Tensor<S>) -> Vec<usize> {
    let dim = centroids.last_dim();
    x.data().chunks(dim).map(|row| nearest(row, centroids.data(), dim).0).collect()
}

struct PassThrough;

impl<S: Scalar> Adjoint<S> for PassThrough {
    fn backward(&self, _inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Tensor<S>> {
        vec![grad.clone()]
    }
}

/// `z^q = sg[c(x) − x] + x` for every row of `x: [B, d_z]`.
///
/// The forward value is the assigned centroid bit for bit; the adjoint
/// reaches `x` unchanged. Returns the quantized rows and their indices.
pub fn straight_through<'g, S: Scalar>(x: Var<'g, S>, centroids: &Tensor<S>) -> (Var<'g, S>, Vec<usize>) {
    let value = x.value();
    let idx = assign_rows(&value, centroids);
    let dim = centroids.last_dim();
    let mut data = Vec::with_capacity(value.len());
    for &i in &idx {
        data.extend_from_slice(&centroids.data()[i * dim..(i + 1) * dim]);
    }
    let out = Tensor::new(value.shape(), data).expect("same shape as input");
    (x.graph().custom(&[x], out, Rc::new(PassThrough)), idx)
}

/// `mean_b ‖sg[x_b] − c_b‖² + β‖x_b − sg[c_b]‖²` with `c_b = centroids[idx[b]]`.
pub fn vq_loss<'g, S: Scalar>(x: Var<'g, S>, centroids: Var<'g, S>, idx: &[usize], beta: f64) -> Result<Var<'g, S>> {
    if idx.is_empty() {
        return Err(Error::invalid("vq_loss on an empty batch"));
    }
    let c = centroids.gather_rows(Rc::new(idx.to_vec()));
    if c.shape() != x.shape() {
        return Err(Error::Shape(format!("inputs {:?} vs assigned centroids {:?}", x.shape(), c.shape())));
    }
    let codebook = x.stop_gradient().sub(c).square().sum_last();
    let commit = x.sub(c.stop_gradient()).square().sum_last();
    Ok(codebook.add(commit.scale(S::of(beta))).mean())
}

/// Code histogram and `exp(H)` of the empirical code distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<usize>,
    pub perplexity: f64,
}

pub fn usage_stats(assignments: &[usize], size: usize) -> Result<UsageStats> {
    if assignments.is_empty() {
        return Err(Error::invalid("usage statistics of an empty assignment list"));
    }
    let mut counts = vec![0; size];
    for &a in assignments {
        if a >= size {
            return Err(Error::invalid(format!("code {a} outside a codebook of {size}")));
        }
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    let entropy: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum();
    Ok(UsageStats { counts, perplexity: entropy.exp() })
}

/// Codebook whose rows are `size` samples drawn without replacement.
pub fn init_codebook(samples: &[Vec<f64>], size: usize, beta: f64, seed: u64) -> Result<Codebook> {
    if samples.len() < size {
        return Err(Error::invalid(format!("{} samples cannot seed {size} centroids", samples.len())));
    }
    let dim = samples.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(size * dim);
    for i in sample(&mut rng, samples.len(), size) {
        if samples[i].len() != dim {
            return Err(Error::Shape("samples of unequal dimension".into()));
        }
        centroids.extend_from_slice(&samples[i]);
    }
    Codebook::new(size, dim, centroids, beta)
}
