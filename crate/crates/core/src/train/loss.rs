use crate::error::{Error, Result};
use crate::flow::{log_normal, FlowModel};
use crate::scalar::Scalar;

/// Rows processed together in the reverse pass.
const CHUNK: usize = 256;

/// A set of `(x, t)` pairs in canonical order.
///
/// Rows are sorted by `(t, x)` on construction, so the summation order of
/// losses and gradients does not depend on how the caller arranged them.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    dim: usize,
    points: Vec<T>,
    times: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(dim: usize, points: Vec<T>, times: Vec<T>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("batch must not be empty"));
        }
        if points.len() != dim * times.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * times.len(),
                got: points.len(),
            });
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        let key = |i: usize| {
            std::iter::once(times[i].as_f64()).chain(points[i * dim..(i + 1) * dim].iter().map(|v| v.as_f64()))
        };
        order.sort_by(|&a, &b| {
            key(a)
                .zip(key(b))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut p = Vec::with_capacity(points.len());
        let mut t = Vec::with_capacity(times.len());
        for i in order {
            p.extend_from_slice(&points[i * dim..(i + 1) * dim]);
            t.push(times[i]);
        }
        Ok(Self { dim, points: p, times: t })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    /// Sub-batch of the given rows (re-canonicalized).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut p = Vec::with_capacity(rows.len() * self.dim);
        let mut t = Vec::with_capacity(rows.len());
        for &r in rows {
            p.extend_from_slice(&self.points[r * self.dim..(r + 1) * self.dim]);
            t.push(self.times[r]);
        }
        Self::new(self.dim, p, t)
    }

    fn chunks(&self) -> impl Iterator<Item = (&[T], &[T])> {
        self.points.chunks(CHUNK * self.dim).zip(self.times.chunks(CHUNK))
    }
}

/// Summed and per-sample negative log-likelihood of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nll<T> {
    pub sum: T,
    pub mean: T,
    pub count: usize,
}

impl<T: Scalar> Nll<T> {
    fn from_sum(sum: T, count: usize) -> Self {
        Self {
            sum,
            mean: sum / T::of(count as f64),
            count,
        }
    }
}

/// Gradient congruent to the parameters of a [`FlowModel`], one block per
/// network in the order `mu_0, nu_0, mu_1, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowGradient<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Scalar> FlowGradient<T> {
    pub fn zeros_for(model: &FlowModel<T>) -> Self {
        Self {
            blocks: model.nets().map(|n| vec![T::zero(); n.params().len()]).collect(),
        }
    }

    pub fn norm(&self) -> T {
        self.blocks
            .iter()
            .flatten()
            .map(|g| *g * *g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.blocks.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.is_finite())
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_dim<T: Scalar>(model: &FlowModel<T>, batch: &Batch<T>) -> Result<()> {
    if model.dim() != batch.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: batch.dim,
        });
    }
    Ok(())
}

/// `-sum log p(x, t)` over the batch.
pub fn nll_loss<T: Scalar>(model: &FlowModel<T>, batch: &Batch<T>) -> Result<Nll<T>> {
    check_dim(model, batch)?;
    let mut sum = T::zero();
    for (x, t) in batch.chunks() {
        for lp in model.log_density_batch(x, t)? {
            sum -= lp;
        }
    }
    if !sum.is_finite() {
        return Err(Error::Numerical("negative log-likelihood is not finite".into()));
    }
    Ok(Nll::from_sum(sum, batch.len()))
}

/// Summed NLL and its exact gradient with respect to every network parameter.
pub fn grad_nll<T: Scalar>(model: &FlowModel<T>, batch: &Batch<T>) -> Result<(Nll<T>, FlowGradient<T>)> {
    check_dim(model, batch)?;
    let dim = model.dim();
    let mut grad = FlowGradient::zeros_for(model);
    let mut sum = T::zero();
    for (x, t) in batch.chunks() {
        let rows = t.len();
        let mut z = x.to_vec();
        let mut logdet = vec![T::zero(); rows];
        let mut caches = Vec::with_capacity(model.layers().len());
        for layer in model.layers() {
            let (next, ld, cache) = layer.forward_cached(&z, t)?;
            z = next;
            for (a, b) in logdet.iter_mut().zip(ld) {
                *a += b;
            }
            caches.push(cache);
        }
        for (zr, ld) in z.chunks_exact(dim).zip(&logdet) {
            sum -= log_normal(zr) + *ld;
        }
        // d/dz of -log N(z) is z; d/d(logdet) of -logdet is -1
        let mut gz = z;
        let g_ld = vec![-T::one(); rows];
        for (k, (layer, cache)) in model.layers().iter().zip(&caches).enumerate().rev() {
            let (gm, gn) = grad.blocks.split_at_mut(2 * k + 1);
            gz = layer.backward(cache, &gz, &g_ld, &mut gm[2 * k], &mut gn[0]);
        }
    }
    if !sum.is_finite() || !grad.is_finite() {
        return Err(Error::Numerical("loss or gradient is not finite".into()));
    }
    Ok((Nll::from_sum(sum, batch.len()), grad))
}
