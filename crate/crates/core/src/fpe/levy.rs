//! The isotropic α-stable jump measure `c(n, α) |y|^{-n-α} dy` and its
//! lattice discretization.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::noise::StableParams;

/// `c(n, α) = α Γ((n+α)/2) / (2^{1-α} π^{n/2} Γ(1-α/2))`.
pub fn levy_constant(n: usize, alpha: StableParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    let a = alpha.alpha();
    let nf = n as f64;
    Ok(a * gamma((nf + a) / 2.0) / (2f64.powf(1.0 - a) * PI.powf(nf / 2.0) * gamma(1.0 - a / 2.0)))
}

/// Coefficient `D` of the Laplacian that replaces the jumps shorter than
/// `delta` in two dimensions: `∫_{|y|<δ} ½ y₁² c |y|^{-2-α} dy`.
pub fn small_jump_diffusion(alpha: StableParams, delta: f64, c: f64) -> f64 {
    let a = alpha.alpha();
    c * PI * delta.powf(2.0 - a) / (2.0 * (2.0 - a))
}

/// Lattice radius up to which the loss rate is summed term by term.
const LOSS_SUM_RADIUS: i64 = 1000;

/// Total lattice weight `Σ_{k ∈ Z² \ 0} c h² |h k|^{-2-α}`, the rate at which
/// mass leaves a node through jumps of length at least `h`.
pub fn lattice_loss_rate(alpha: StableParams, h: f64, c: f64) -> f64 {
    let a = alpha.alpha();
    let r = LOSS_SUM_RADIUS;
    let mut sum = 0.0;
    // One octant plus symmetry keeps the sum exact and cheap.
    for k1 in 1..=r {
        for k2 in 0..=k1 {
            let rr = (k1 * k1 + k2 * k2) as f64;
            if rr > (r * r) as f64 {
                break;
            }
            let mult = if k2 == 0 || k2 == k1 { 4.0 } else { 8.0 };
            sum += mult * rr.powf(-(2.0 + a) / 2.0);
        }
    }
    let lattice = c * h.powf(-a) * sum;
    let tail = 2.0 * PI * c * (h * r as f64).powf(-a) / a;
    lattice + tail
}

/// Gain term `Σ_k w_k p(x + h k)` of the large-jump quadrature, applied by
/// zero-padded FFT convolution.
pub struct JumpKernel {
    nx: usize,
    ny: usize,
    mx: usize,
    my: usize,
    spectrum: Vec<Complex64>,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    tbuf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for JumpKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JumpKernel")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("padded", &(self.mx, self.my))
            .finish()
    }
}

fn smooth_size(min: usize) -> usize {
    (min..)
        .find(|&n| {
            let mut m = n;
            for p in [2, 3, 5, 7] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .unwrap()
}

impl JumpKernel {
    /// Weights `c h² |h k|^{-2-α}` for every nonzero offset reachable on an
    /// `nx × ny` grid.
    pub fn new(nx: usize, ny: usize, h: f64, alpha: StableParams, c: f64) -> Self {
        let a = alpha.alpha();
        let mx = smooth_size(2 * nx - 1);
        let my = smooth_size(2 * ny - 1);
        let mut planner = FftPlanner::new();
        let fwd_x = planner.plan_fft_forward(mx);
        let inv_x = planner.plan_fft_inverse(mx);
        let fwd_y = planner.plan_fft_forward(my);
        let inv_y = planner.plan_fft_inverse(my);
        let scratch_len = [&fwd_x, &inv_x, &fwd_y, &inv_y]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap();
        let mut kernel = vec![Complex64::default(); mx * my];
        let (ix, iy) = (nx as i64 - 1, ny as i64 - 1);
        for k2 in -iy..=iy {
            for k1 in -ix..=ix {
                if k1 == 0 && k2 == 0 {
                    continue;
                }
                let r = h * ((k1 * k1 + k2 * k2) as f64).sqrt();
                let w = c * h * h * r.powf(-2.0 - a);
                let row = k2.rem_euclid(my as i64) as usize;
                let col = k1.rem_euclid(mx as i64) as usize;
                kernel[row * mx + col] = Complex64::new(w, 0.0);
            }
        }
        let mut this = Self {
            nx,
            ny,
            mx,
            my,
            spectrum: Vec::new(),
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
            buf: vec![Complex64::default(); mx * my],
            tbuf: vec![Complex64::default(); mx * my],
            scratch: vec![Complex64::default(); scratch_len],
        };
        this.buf.copy_from_slice(&kernel);
        this.forward(my);
        // The inverse transforms are unnormalized.
        let norm = 1.0 / (mx * my) as f64;
        this.spectrum = this.tbuf.iter().map(|v| v * norm).collect();
        this
    }

    /// Row transforms over the first `rows` rows of `buf`, then column
    /// transforms; the spectrum is left transposed in `tbuf`.
    fn forward(&mut self, rows: usize) {
        let (mx, my) = (self.mx, self.my);
        for row in self.buf[..rows * mx].chunks_exact_mut(mx) {
            self.fwd_x.process_with_scratch(row, &mut self.scratch);
        }
        for r in 0..my {
            for c in 0..mx {
                self.tbuf[c * my + r] = self.buf[r * mx + c];
            }
        }
        for col in self.tbuf.chunks_exact_mut(my) {
            self.fwd_y.process_with_scratch(col, &mut self.scratch);
        }
    }

    /// Writes `Σ_k w_k p[node + k]` into `out` (zero outside the grid).
    pub fn apply(&mut self, p: &[f64], out: &mut [f64]) {
        let (nx, ny, mx, my) = (self.nx, self.ny, self.mx, self.my);
        assert_eq!(p.len(), nx * ny);
        assert_eq!(out.len(), nx * ny);
        self.buf.fill(Complex64::default());
        for j in 0..ny {
            for i in 0..nx {
                self.buf[j * mx + i] = Complex64::new(p[j * nx + i], 0.0);
            }
        }
        self.forward(ny);
        for (v, k) in self.tbuf.iter_mut().zip(&self.spectrum) {
            *v *= k;
        }
        for col in self.tbuf.chunks_exact_mut(my) {
            self.inv_y.process_with_scratch(col, &mut self.scratch);
        }
        // Only the first ny rows of the result are needed.
        for r in 0..ny {
            for c in 0..mx {
                self.buf[r * mx + c] = self.tbuf[c * my + r];
            }
        }
        for row in self.buf[..ny * mx].chunks_exact_mut(mx) {
            self.inv_x.process_with_scratch(row, &mut self.scratch);
        }
        for j in 0..ny {
            for i in 0..nx {
                out[j * nx + i] = self.buf[j * mx + i].re;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha(a: f64) -> StableParams {
        StableParams::new(a).unwrap()
    }

    #[test]
    fn constant_reference_values() {
        assert!((levy_constant(2, alpha(1.5)).unwrap() - 0.17117).abs() < 1e-5);
        assert!((levy_constant(2, alpha(1.0)).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-12);
        // n = 1, α = 1 gives the Cauchy measure 1/(π y²).
        assert!((levy_constant(1, alpha(1.0)).unwrap() - 1.0 / PI).abs() < 1e-12);
        for n in 1..4 {
            for a in [0.1, 0.5, 1.0, 1.5, 1.99] {
                assert!(levy_constant(n, alpha(a)).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn small_jump_coefficient() {
        let a = alpha(1.5);
        let c = levy_constant(2, a).unwrap();
        let d = small_jump_diffusion(a, 0.2, c);
        assert!((d - 0.2405).abs() < 5e-4, "{d}");
        // Polar quadrature of ½ y₁² ν(dy) over the disc with r = δ s².
        let (ns, nt) = (2000, 64);
        let mut q = 0.0;
        for a in 0..ns {
            let s = (a as f64 + 0.5) / ns as f64;
            let r = 0.2 * s * s;
            let dr = 2.0 * 0.2 * s / ns as f64;
            for b in 0..nt {
                let th = 2.0 * PI * (b as f64 + 0.5) / nt as f64;
                let y1 = r * th.cos();
                q += 0.5 * y1 * y1 * c * r.powf(-3.5) * r * dr * (2.0 * PI / nt as f64);
            }
        }
        assert!((q - d).abs() < 1e-3 * d, "{q} vs {d}");
    }

    #[test]
    fn loss_rate_matches_direct_sum() {
        let a = alpha(1.5);
        let c = levy_constant(2, a).unwrap();
        let h = 0.2;
        let r = 300i64;
        let mut direct = 0.0;
        for k1 in -r..=r {
            for k2 in -r..=r {
                let rr = (k1 * k1 + k2 * k2) as f64;
                if rr == 0.0 || rr > (r * r) as f64 {
                    continue;
                }
                direct += c * h * h * (h * rr.sqrt()).powf(-3.5);
            }
        }
        direct += 2.0 * PI * c * (h * r as f64).powf(-1.5) / 1.5;
        let fast = lattice_loss_rate(a, h, c);
        assert!((fast - direct).abs() < 1e-4 * fast, "{fast} vs {direct}");
    }

    #[test]
    fn fft_gain_matches_direct_convolution() {
        let (nx, ny, h) = (9, 7, 0.3);
        let a = alpha(1.2);
        let c = levy_constant(2, a).unwrap();
        let p: Vec<f64> = (0..nx * ny).map(|k| ((k * 37 % 11) as f64).sin().abs()).collect();
        let mut out = vec![0.0; nx * ny];
        JumpKernel::new(nx, ny, h, a, c).apply(&p, &mut out);
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                let mut s = 0.0;
                for jj in 0..ny as i64 {
                    for ii in 0..nx as i64 {
                        let (d1, d2) = (ii - i, jj - j);
                        if d1 == 0 && d2 == 0 {
                            continue;
                        }
                        let r = h * ((d1 * d1 + d2 * d2) as f64).sqrt();
                        s += c * h * h * r.powf(-2.0 - 1.2) * p[(jj * nx as i64 + ii) as usize];
                    }
                }
                let got = out[(j * nx as i64 + i) as usize];
                assert!((got - s).abs() < 1e-12 * s.max(1.0), "({i},{j}): {got} vs {s}");
            }
        }
    }
}
