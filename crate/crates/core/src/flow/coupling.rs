use crate::error::{Error, Result};
use crate::flow::mlp::{Mlp, MlpCache};
use crate::scalar::Scalar;

/// Soft bound on the log-scale: `mu = S tanh(raw / S)`.
pub const MU_CLAMP: f64 = 5.0;

/// Affine coupling conditioned on physical time.
///
/// Coordinates in `cond` pass through; every coordinate in `trans` is mapped
/// to `x * exp(mu(x_cond, t)) + nu(x_cond, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer<T> {
    dim: usize,
    cond: Vec<usize>,
    trans: Vec<usize>,
    pub mu: Mlp<T>,
    pub nu: Mlp<T>,
}

/// Intermediate values of a batched forward pass, needed by the reverse pass.
pub struct CouplingCache<T> {
    batch: usize,
    mu: MlpCache<T>,
    nu: MlpCache<T>,
    x_trans: Vec<T>,
    tanh: Vec<T>,
    scale: Vec<T>,
}

impl<T: Scalar> CouplingLayer<T> {
    /// `cond` is the pass-through set; its complement in `0..dim` is transformed.
    pub fn new(dim: usize, cond: Vec<usize>, mu: Mlp<T>, nu: Mlp<T>) -> Result<Self> {
        let trans = mask_complement(dim, &cond)?;
        for net in [&mu, &nu] {
            if net.input_dim() != cond.len() + 1 || net.output_dim() != trans.len() {
                return Err(Error::invalid(format!(
                    "coupling nets must map {} -> {}, got {:?}",
                    cond.len() + 1,
                    trans.len(),
                    net.dims()
                )));
            }
        }
        Ok(Self { dim, cond, trans, mu, nu })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond(&self) -> &[usize] {
        &self.cond
    }

    pub fn trans(&self) -> &[usize] {
        &self.trans
    }

    fn cond_input(&self, x: &[T], t: &[T]) -> Vec<T> {
        let w = self.cond.len() + 1;
        let mut input = Vec::with_capacity(t.len() * w);
        for (row, &ti) in x.chunks_exact(self.dim).zip(t) {
            input.extend(self.cond.iter().map(|&a| row[a]));
            input.push(ti);
        }
        input
    }

    fn check(&self, x: &[T], t: &[T]) -> Result<usize> {
        let batch = t.len();
        if x.len() != batch * self.dim {
            return Err(Error::DimensionMismatch {
                expected: batch * self.dim,
                got: x.len(),
            });
        }
        Ok(batch)
    }

    /// Forward (normalizing) direction for one point.
    pub fn forward(&self, x: &[T], t: T) -> Result<(Vec<T>, T)> {
        let (z, ld, _) = self.forward_cached(x, &[t])?;
        Ok((z, ld[0]))
    }

    /// Batched forward pass; returns `z`, the per-row log-determinant and the
    /// cache for [`backward`](Self::backward).
    pub fn forward_cached(&self, x: &[T], t: &[T]) -> Result<(Vec<T>, Vec<T>, CouplingCache<T>)> {
        let batch = self.check(x, t)?;
        let input = self.cond_input(x, t);
        let (raw, mu_cache) = self.mu.forward_batch(&input, batch)?;
        let (shift, nu_cache) = self.nu.forward_batch(&input, batch)?;
        let s = T::of(MU_CLAMP);
        let nb = self.trans.len();
        let mut z = x.to_vec();
        let mut logdet = vec![T::zero(); batch];
        let mut x_trans = Vec::with_capacity(batch * nb);
        let mut tanh = Vec::with_capacity(batch * nb);
        let mut scale = Vec::with_capacity(batch * nb);
        for r in 0..batch {
            let zr = &mut z[r * self.dim..(r + 1) * self.dim];
            for (k, &b) in self.trans.iter().enumerate() {
                let th = (raw[r * nb + k] / s).tanh();
                let mu = s * th;
                let e = mu.exp();
                x_trans.push(zr[b]);
                zr[b] = zr[b] * e + shift[r * nb + k];
                tanh.push(th);
                scale.push(e);
                logdet[r] += mu;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("coupling output is not finite".into()));
        }
        let cache = CouplingCache {
            batch,
            mu: mu_cache,
            nu: nu_cache,
            x_trans,
            tanh,
            scale,
        };
        Ok((z, logdet, cache))
    }

    /// Batched forward pass without a cache.
    pub fn forward_batch(&self, x: &[T], t: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let batch = self.check(x, t)?;
        let input = self.cond_input(x, t);
        let raw = self.mu.eval_batch(&input, batch)?;
        let shift = self.nu.eval_batch(&input, batch)?;
        let s = T::of(MU_CLAMP);
        let nb = self.trans.len();
        let mut z = x.to_vec();
        let mut logdet = vec![T::zero(); batch];
        for r in 0..batch {
            let zr = &mut z[r * self.dim..(r + 1) * self.dim];
            for (k, &b) in self.trans.iter().enumerate() {
                let mu = s * (raw[r * nb + k] / s).tanh();
                zr[b] = zr[b] * mu.exp() + shift[r * nb + k];
                logdet[r] += mu;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("coupling output is not finite".into()));
        }
        Ok((z, logdet))
    }

    /// Generative direction for one point.
    pub fn inverse(&self, z: &[T], t: T) -> Result<Vec<T>> {
        self.inverse_batch(z, &[t])
    }

    pub fn inverse_batch(&self, z: &[T], t: &[T]) -> Result<Vec<T>> {
        let batch = self.check(z, t)?;
        // z_cond == x_cond, so the nets see the same input in both directions
        let input = self.cond_input(z, t);
        let raw = self.mu.eval_batch(&input, batch)?;
        let shift = self.nu.eval_batch(&input, batch)?;
        let s = T::of(MU_CLAMP);
        let nb = self.trans.len();
        let mut x = z.to_vec();
        for r in 0..batch {
            let xr = &mut x[r * self.dim..(r + 1) * self.dim];
            for (k, &b) in self.trans.iter().enumerate() {
                let mu = s * (raw[r * nb + k] / s).tanh();
                xr[b] = (xr[b] - shift[r * nb + k]) * (-mu).exp();
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("inverse coupling output is not finite".into()));
        }
        Ok(x)
    }

    /// Reverse pass through the layer.
    ///
    /// `grad_z` is dL/dz per row and `grad_logdet` the per-row dL/d(logdet).
    /// Gradients of the two nets are accumulated into `grad_mu`/`grad_nu`;
    /// dL/dx is returned.
    pub fn backward(
        &self,
        cache: &CouplingCache<T>,
        grad_z: &[T],
        grad_logdet: &[T],
        grad_mu: &mut [T],
        grad_nu: &mut [T],
    ) -> Vec<T> {
        let batch = cache.batch;
        let nb = self.trans.len();
        let mut g_raw = Vec::with_capacity(batch * nb);
        let mut g_shift = Vec::with_capacity(batch * nb);
        let mut grad_x = grad_z.to_vec();
        for r in 0..batch {
            let gx = &mut grad_x[r * self.dim..(r + 1) * self.dim];
            for (k, &b) in self.trans.iter().enumerate() {
                let i = r * nb + k;
                let gz = gx[b];
                let e = cache.scale[i];
                let g_mu = gz * cache.x_trans[i] * e + grad_logdet[r];
                let th = cache.tanh[i];
                g_raw.push(g_mu * (T::one() - th * th));
                g_shift.push(gz);
                gx[b] = gz * e;
            }
        }
        let gin_mu = self.mu.backward_batch(&cache.mu, &g_raw, grad_mu);
        let gin_nu = self.nu.backward_batch(&cache.nu, &g_shift, grad_nu);
        let w = self.cond.len() + 1;
        for r in 0..batch {
            for (k, &a) in self.cond.iter().enumerate() {
                grad_x[r * self.dim + a] += gin_mu[r * w + k] + gin_nu[r * w + k];
            }
        }
        grad_x
    }
}

/// Complement of `cond` in `0..dim`; both sets must be nonempty.
pub fn mask_complement(dim: usize, cond: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; dim];
    for &a in cond {
        if a >= dim || seen[a] {
            return Err(Error::invalid(format!("bad conditioning set {cond:?} for dim {dim}")));
        }
        seen[a] = true;
    }
    let trans: Vec<usize> = (0..dim).filter(|&i| !seen[i]).collect();
    if cond.is_empty() || trans.is_empty() {
        return Err(Error::invalid(format!(
            "conditioning set {cond:?} must be a proper nonempty subset of 0..{dim}"
        )));
    }
    Ok(trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::RngStream;
    use rand::Rng;

    /// Layer whose effective log-scale and shift are the given constants.
    fn constant_layer(cond: usize, mu: f64, nu: f64) -> CouplingLayer<f64> {
        let mut m = Mlp::zeros(&[2, 1, 1]).unwrap();
        m.layer_mut(1).1[0] = MU_CLAMP * (mu / MU_CLAMP).atanh();
        let mut n = Mlp::zeros(&[2, 1, 1]).unwrap();
        n.layer_mut(1).1[0] = nu;
        CouplingLayer::new(2, vec![cond], m, n).unwrap()
    }

    fn random_layer(dim: usize, cond: Vec<usize>, seed: u64) -> CouplingLayer<f64> {
        let mut rng = RngStream::new(seed, 0);
        let nb = dim - cond.len();
        let net = |rng: &mut RngStream| {
            let mut m = Mlp::<f64>::zeros(&[cond.len() + 1, 8, 8, nb]).unwrap();
            for p in m.params_mut() {
                *p = rng.random_range(-0.8..0.8);
            }
            m
        };
        let mu = net(&mut rng);
        let nu = net(&mut rng);
        CouplingLayer::new(dim, cond, mu, nu).unwrap()
    }

    #[test]
    fn masks_are_validated() {
        assert_eq!(mask_complement(3, &[0, 2]).unwrap(), vec![1]);
        assert!(mask_complement(2, &[]).is_err());
        assert!(mask_complement(2, &[0, 1]).is_err());
        assert!(mask_complement(2, &[2]).is_err());
        assert!(mask_complement(3, &[1, 1]).is_err());
        let bad = Mlp::<f64>::zeros(&[3, 4, 1]).unwrap();
        assert!(CouplingLayer::new(2, vec![0], bad.clone(), bad).is_err());
    }

    #[test]
    fn zero_nets_give_identity() {
        let layer = constant_layer(0, 0.0, 0.0);
        let (z, ld) = layer.forward(&[0.7, -1.3], 0.4).unwrap();
        assert_eq!(z, vec![0.7, -1.3]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn constant_scale_and_shift() {
        let layer = constant_layer(0, 2f64.ln(), 3.0);
        let (z, ld) = layer.forward(&[1.0, 1.0], 0.9).unwrap();
        assert_eq!(z[0], 1.0);
        assert!((z[1] - 5.0).abs() < 1e-12);
        assert!((ld - 2f64.ln()).abs() < 1e-12);
        let x = layer.inverse(&[1.0, 5.0], 0.2).unwrap();
        assert_eq!(x[0], 1.0);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_keeps_pass_through_and_round_trips() {
        let mut rng = RngStream::new(2, 2);
        for (dim, cond) in [(2, vec![0]), (2, vec![1]), (3, vec![0, 2]), (3, vec![1])] {
            let layer = random_layer(dim, cond.clone(), 5);
            for _ in 0..200 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let t = rng.random_range(0.0..1.0);
                let (z, _) = layer.forward(&x, t).unwrap();
                for &a in &cond {
                    assert_eq!(z[a], x[a]);
                }
                let back = layer.inverse(&z, t).unwrap();
                for &a in &cond {
                    assert_eq!(back[a], z[a]);
                }
                for (u, v) in back.iter().zip(&x) {
                    assert!((u - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let layer = random_layer(2, vec![1], 8);
        let mut rng = RngStream::new(3, 3);
        let h = 1e-5;
        for _ in 0..50 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t = rng.random_range(0.0..1.0);
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let zp = layer.forward(&xp, t).unwrap().0;
                let zm = layer.forward(&xm, t).unwrap().0;
                for r in 0..2 {
                    jac[r][c] = (zp[r] - zm[r]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let ld = layer.forward(&x, t).unwrap().1;
            assert!((det.abs().ln() - ld).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_agrees_with_cached() {
        let layer = random_layer(3, vec![0, 1], 6);
        let x = [0.1, 0.2, 0.3, -1.0, 2.0, 0.5];
        let t = [0.0, 0.7];
        let (z1, l1) = layer.forward_batch(&x, &t).unwrap();
        let (z2, l2, _) = layer.forward_cached(&x, &t).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(l1, l2);
    }
}
