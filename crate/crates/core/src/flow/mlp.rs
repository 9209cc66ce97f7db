use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::scalar::{Scalar, Strided, StridedMut};

/// Dense network with `tanh` hidden layers and a linear output layer.
///
/// Parameters live in one flat buffer. Layer `l` maps `dims[l]` inputs to
/// `dims[l + 1]` outputs as `y = x W + b`, with `W` stored row-major with
/// shape `(dims[l], dims[l + 1])` followed by `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

/// Layer inputs saved by a forward pass: `acts[0]` is the network input,
/// `acts[l]` for `l >= 1` the `tanh` output of hidden layer `l`.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    batch: usize,
    acts: Vec<Vec<T>>,
}

impl<T> MlpCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn activations(&self) -> &[Vec<T>] {
        &self.acts
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    /// All-zero network with the given layer widths.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![T::zero(); param_count(dims)],
        })
    }

    /// Hidden layers uniform on `±1/sqrt(fan_in)`, output layer zero.
    pub fn init(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for l in 0..net.n_layers() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            let (w, b) = net.layer_mut(l);
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn from_parts(dims: &[usize], params: Vec<T>) -> Result<Self> {
        let net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("network parameters must be finite"));
        }
        Ok(Self { params, ..net })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn offset(&self, l: usize) -> usize {
        param_count(&self.dims[..=l])
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offset(l);
        let (w, rest) = self.params[off..].split_at(i * o);
        (w, &rest[..o])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.offset(l);
        let (w, rest) = self.params[off..].split_at_mut(i * o);
        (w, &mut rest[..o])
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        self.forward_batch(input, 1)
    }

    /// Forward pass over `batch` inputs stored row-major.
    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<(Vec<T>, MlpCache<T>)> {
        self.check_input(input, batch)?;
        let mut acts = Vec::with_capacity(self.n_layers());
        let mut cur = input.to_vec();
        for l in 0..self.n_layers() {
            let next = self.affine(l, &cur, batch, l + 1 < self.n_layers());
            acts.push(std::mem::replace(&mut cur, next));
        }
        Ok((cur, MlpCache { batch, acts }))
    }

    /// Forward pass without keeping activations.
    pub fn eval_batch(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_input(input, batch)?;
        let mut cur = input.to_vec();
        for l in 0..self.n_layers() {
            cur = self.affine(l, &cur, batch, l + 1 < self.n_layers());
        }
        Ok(cur)
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<()> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: batch * self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[T], batch: usize, hidden: bool) -> Vec<T> {
        let (ni, no) = (self.dims[l], self.dims[l + 1]);
        let (w, b) = self.layer(l);
        let mut out = Vec::with_capacity(batch * no);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        T::gemm(
            [batch, ni, no],
            Strided { data: x, rs: ni, cs: 1 },
            Strided { data: w, rs: no, cs: 1 },
            T::one(),
            StridedMut { data: &mut out, rs: no, cs: 1 },
        );
        if hidden {
            for v in out.iter_mut() {
                *v = tanh(*v);
            }
        }
        out
    }

    /// Reverse pass. `grad_out` is dL/d(output) per row; parameter gradients
    /// are accumulated into `grad_params` (congruent to [`params`](Self::params)),
    /// and dL/d(input) is returned.
    pub fn backward_batch(&self, cache: &MlpCache<T>, grad_out: &[T], grad_params: &mut [T]) -> Vec<T> {
        let batch = cache.batch;
        assert_eq!(grad_out.len(), batch * self.output_dim());
        assert_eq!(grad_params.len(), self.params.len());
        let mut g = grad_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (ni, no) = (self.dims[l], self.dims[l + 1]);
            let a_in = &cache.acts[l];
            let off = self.offset(l);
            let (gw, rest) = grad_params[off..].split_at_mut(ni * no);
            let gb = &mut rest[..no];
            let (w, _) = self.layer(l);
            for grow in g.chunks_exact(no) {
                for (b, gv) in gb.iter_mut().zip(grow) {
                    *b += *gv;
                }
            }
            // gW += a_in^T g
            T::gemm(
                [ni, batch, no],
                Strided { data: a_in, rs: 1, cs: ni },
                Strided { data: &g, rs: no, cs: 1 },
                T::one(),
                StridedMut { data: gw, rs: no, cs: 1 },
            );
            // g_in = g W^T
            let mut g_in = vec![T::zero(); batch * ni];
            T::gemm(
                [batch, no, ni],
                Strided { data: &g, rs: no, cs: 1 },
                Strided { data: w, rs: 1, cs: no },
                T::zero(),
                StridedMut { data: &mut g_in, rs: ni, cs: 1 },
            );
            if l > 0 {
                // a_in is a tanh output here
                for (gi, a) in g_in.iter_mut().zip(a_in) {
                    *gi *= T::one() - *a * *a;
                }
            }
            g = g_in;
        }
        g
    }
}

/// `tanh` through a single `exp`, about twice as fast as the libm routine
/// and within a few ulps of it away from zero (absolute error ~1e-16 near
/// zero).
#[inline]
fn tanh<T: Scalar>(v: T) -> T {
    let cap = T::of(20.0);
    if v > cap {
        return T::one();
    }
    if v < -cap {
        return -T::one();
    }
    let e = (v + v).exp();
    (e - T::one()) / (e + T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(dims: &[usize], seed: u64) -> Mlp<f64> {
        let mut rng = RngStream::new(seed, 0);
        let mut net = Mlp::<f64>::zeros(dims).unwrap();
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        net
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for k in -4000..=4000 {
            let x = k as f64 * 0.01;
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
        }
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 32, 32, 32, 2]).unwrap();
        let (y, _) = net.forward(&[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn output_bias_passes_through() {
        let mut net = Mlp::<f64>::zeros(&[1, 1, 1]).unwrap();
        net.layer_mut(1).1[0] = 2.5;
        assert_eq!(net.forward(&[123.0]).unwrap().0, vec![2.5]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let net = Mlp::<f64>::zeros(&[2, 4, 1]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.forward_batch(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn init_zeroes_output_layer_only() {
        let mut rng = RngStream::new(1, 1);
        let net = Mlp::<f64>::init(&[2, 32, 32, 32, 1], &mut rng).unwrap();
        let (w, b) = net.layer(3);
        assert!(w.iter().chain(b).all(|v| *v == 0.0));
        let (w0, _) = net.layer(0);
        let bound = 1.0 / 2f64.sqrt();
        assert!(w0.iter().all(|v| v.abs() <= bound));
        assert!(w0.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let net = random_net(&[3, 5, 4, 2], 4);
        let xs = [0.1, -0.3, 0.5, 1.0, 2.0, -1.0];
        let (yb, _) = net.forward_batch(&xs, 2).unwrap();
        for r in 0..2 {
            let (y, _) = net.forward(&xs[r * 3..r * 3 + 3]).unwrap();
            assert_eq!(&yb[r * 2..r * 2 + 2], y.as_slice());
        }
        assert_eq!(net.eval_batch(&xs, 2).unwrap(), yb);
    }

    #[test]
    fn weight_perturbation_matches_gradient() {
        let net = random_net(&[3, 6, 6, 2], 7);
        let x = [0.4, -0.7, 0.2];
        let (_, cache) = net.forward(&x).unwrap();
        // dL/dy = (1, 0) picks output 0
        let mut grad = vec![0.0; net.params().len()];
        let gx = net.backward_batch(&cache, &[1.0, 0.0], &mut grad);
        let eps = 1e-6;
        for k in [0, 5, 17, net.params().len() - 3] {
            let mut p = net.clone();
            p.params_mut()[k] += eps;
            let y1 = p.forward(&x).unwrap().0[0];
            let mut q = net.clone();
            q.params_mut()[k] -= eps;
            let y0 = q.forward(&x).unwrap().0[0];
            let fd = (y1 - y0) / (2.0 * eps);
            assert!((fd - grad[k]).abs() < 1e-9, "param {k}: {fd} vs {}", grad[k]);
        }
        for d in 0..3 {
            let mut xp = x;
            xp[d] += eps;
            let mut xm = x;
            xm[d] -= eps;
            let fd = (net.forward(&xp).unwrap().0[0] - net.forward(&xm).unwrap().0[0]) / (2.0 * eps);
            assert!((fd - gx[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_precision_forward() {
        let net = random_net(&[2, 4, 1], 3);
        let net32 = Mlp::<f32>::from_parts(
            net.dims(),
            net.params().iter().map(|&p| p as f32).collect(),
        )
        .unwrap();
        let y64 = net.forward(&[0.5, 0.25]).unwrap().0[0];
        let y32 = net32.forward(&[0.5, 0.25]).unwrap().0[0];
        assert!((y64 - y32 as f64).abs() < 1e-5);
    }
}
