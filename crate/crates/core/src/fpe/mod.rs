//! Explicit finite-difference solvers for two-dimensional Fokker–Planck
//! equations, local (Brownian) and nonlocal (isotropic α-stable jumps).
//!
//! The scheme on a node-centred grid with absorbing (zero) boundary nodes:
//!
//! * drift: conservative fluxes with face-evaluated drift, first-order upwind
//!   by default or exponentially fitted (see [`Advection`]);
//! * diffusion: `½ Σ ∂ᵢ∂ⱼ(Aᵢⱼ p)` with `A = σσᵀ`, centred second order;
//! * jumps shorter than `h`: the Laplacian surrogate [`small_jump_diffusion`],
//!   added to the diagonal of `A`;
//! * longer jumps: lattice quadrature with weights `c h² |y|^{-2-α}`, gain by
//!   FFT convolution (zero outside the grid), loss at the full lattice rate.
//!
//! Negative values produced by the explicit step are clipped to zero and the
//! removed mass is reported.

mod levy;
mod solver;

pub use levy::{lattice_loss_rate, levy_constant, small_jump_diffusion, JumpKernel};
pub use solver::{solve_local_fpe, solve_nonlocal_fpe, FpeDiagnostics, FpeSolution};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::noise::StableParams;
use crate::sde::{Coupling, NoiseKind, SdeSystem};

/// Reference discretization: `Δt = 1e-4`, `h = 0.2`, domain `[-10, 10]²`.
pub const DEFAULT_DT: f64 = 1e-4;
pub const DEFAULT_H: f64 = 0.2;
pub const DEFAULT_HALF_WIDTH: f64 = 10.0;

/// Discretization of the drift flux across a cell face.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// First-order upwind: the face carries the upstream node value.
    #[default]
    Upwind,
    /// Scharfetter–Gummel exponential fitting of the combined drift and
    /// diagonal diffusion flux. Second order where diffusion dominates,
    /// upwind in the limit of vanishing diffusion, and exact for 1-D
    /// stationary profiles. Keeps the explicit update positive.
    ExponentialFitting,
}

/// Bernoulli function `w / (eʷ - 1)`.
fn bernoulli(w: f64) -> f64 {
    if w.abs() < 1e-10 {
        1.0 - 0.5 * w
    } else {
        w / w.exp_m1()
    }
}

/// Face flux `J = a·p_lo - b·p_hi` between a node and its upper neighbour
/// for face drift `u` and node diffusions `d_lo`, `d_hi` (diagonal entries
/// of `A`).
fn face_coefficients(advection: Advection, u: f64, d_lo: f64, d_hi: f64, h: f64) -> (f64, f64) {
    let df = 0.5 * (d_lo + d_hi);
    match advection {
        Advection::ExponentialFitting if df > 0.0 => {
            let w = 2.0 * u * h / df;
            (bernoulli(-w) * d_lo / (2.0 * h), bernoulli(w) * d_hi / (2.0 * h))
        }
        _ => (u.max(0.0) + d_lo / (2.0 * h), -u.min(0.0) + d_hi / (2.0 * h)),
    }
}

/// Drift `f` and local diffusion matrix `A = σσᵀ` of a 2-D Fokker–Planck
/// equation.
pub trait Coefficients {
    fn drift(&self, x: [f64; 2]) -> [f64; 2];
    fn diffusion(&self, x: [f64; 2]) -> [[f64; 2]; 2];
}

/// Zero drift, constant diffusion matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantDiffusion(pub [[f64; 2]; 2]);

impl Coefficients for ConstantDiffusion {
    fn drift(&self, _: [f64; 2]) -> [f64; 2] {
        [0.0; 2]
    }

    fn diffusion(&self, _: [f64; 2]) -> [[f64; 2]; 2] {
        self.0
    }
}

/// Coefficients of a built-in 2-D system with additive noise.
#[derive(Clone, Debug)]
pub struct SystemCoefficients {
    system: SdeSystem,
    diag: [f64; 2],
    jumps: Option<JumpSpec>,
}

/// Isotropic α-stable jump part with measure `scale^α c(2, α) |y|^{-2-α} dy`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpSpec {
    pub alpha: StableParams,
    pub scale: f64,
}

impl SystemCoefficients {
    /// Fails for systems outside the solver's scope: dimension other than 2,
    /// multiplicative noise, mixed noise kinds, or anisotropic jump scales.
    pub fn new(system: &SdeSystem) -> Result<Self> {
        if system.dim != 2 {
            return Err(Error::invalid(format!(
                "finite-difference solves are 2-D only, system {:?} has dimension {}",
                system.key, system.dim
            )));
        }
        if system.noise.iter().any(|n| n.coupling != Coupling::Additive) {
            return Err(Error::invalid(format!(
                "system {:?} has multiplicative noise, which the finite-difference solver does not handle",
                system.key
            )));
        }
        let (n0, n1) = (&system.noise[0], &system.noise[1]);
        let (diag, jumps) = match (n0.kind, n1.kind) {
            (NoiseKind::Brownian, NoiseKind::Brownian) => ([n0.scale * n0.scale, n1.scale * n1.scale], None),
            (NoiseKind::Stable { alpha: a0 }, NoiseKind::Stable { alpha: a1 }) => {
                if a0 != a1 || n0.scale.abs() != n1.scale.abs() {
                    return Err(Error::invalid("jump noise must share alpha and scale across components"));
                }
                ([0.0; 2], Some(JumpSpec { alpha: a0, scale: n0.scale.abs() }))
            }
            _ => return Err(Error::invalid("mixed Brownian and jump noise is not supported")),
        };
        Ok(Self {
            system: system.clone(),
            diag,
            jumps,
        })
    }

    pub fn jumps(&self) -> Option<JumpSpec> {
        self.jumps
    }
}

impl Coefficients for SystemCoefficients {
    fn drift(&self, x: [f64; 2]) -> [f64; 2] {
        let f = self.system.drift_eval(&x);
        [f[0], f[1]]
    }

    fn diffusion(&self, _: [f64; 2]) -> [[f64; 2]; 2] {
        [[self.diag[0], 0.0], [0.0, self.diag[1]]]
    }
}

/// A discretized Fokker–Planck initial value problem.
///
/// Coefficients are sampled onto the grid at construction, so the problem
/// owns no reference to them.
#[derive(Clone, Debug)]
pub struct FpeProblem {
    pub initial: DensityGrid,
    pub dt: f64,
    /// Times at which the solution is recorded (each a whole number of steps
    /// after `initial.time`).
    pub output_times: Vec<f64>,
    pub jumps: Option<JumpSpec>,
    advection: Advection,
    /// Drift at vertical faces: `fx[j * (nx-1) + i]` sits between nodes
    /// `(i, j)` and `(i+1, j)`.
    fx: Vec<f64>,
    /// Drift at horizontal faces between `(i, j)` and `(i, j+1)`.
    fy: Vec<f64>,
    /// Node values of `A₁₁`, `A₂₂`, `A₁₂`.
    a11: Vec<f64>,
    a22: Vec<f64>,
    pub(crate) a12: Vec<f64>,
    pub(crate) steps: Vec<usize>,
}

/// Flux coefficients of every face, `J = lo·p_lo - hi·p_hi`.
pub(crate) struct Faces {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
}

impl FpeProblem {
    /// Samples `coeffs` onto the grid of `initial`, validates the output
    /// times and checks the explicit stability bound.
    pub fn new(
        coeffs: &dyn Coefficients,
        initial: DensityGrid,
        dt: f64,
        output_times: Vec<f64>,
        jumps: Option<JumpSpec>,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be > 0, got {dt}")));
        }
        let spec = initial.spec;
        if spec.nx < 3 || spec.ny < 3 {
            return Err(Error::invalid("grid needs at least 3 nodes per axis"));
        }
        let mut steps = Vec::with_capacity(output_times.len());
        let mut prev = 0;
        for &t in &output_times {
            let span = t - initial.time;
            let k = (span / dt).round();
            if span < -1e-12 || (k * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
                return Err(Error::invalid(format!(
                    "output time {t} is not a whole number of steps of {dt} after {}",
                    initial.time
                )));
            }
            let k = k as usize;
            if k < prev {
                return Err(Error::invalid("output times must be non-decreasing"));
            }
            prev = k;
            steps.push(k);
        }
        let (nx, ny, h) = (spec.nx, spec.ny, spec.h);
        let mut fx = vec![0.0; (nx - 1) * ny];
        let mut fy = vec![0.0; nx * (ny - 1)];
        for j in 0..ny {
            for i in 0..nx - 1 {
                fx[j * (nx - 1) + i] = coeffs.drift([spec.x(i) + 0.5 * h, spec.y(j)])[0];
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                fy[j * nx + i] = coeffs.drift([spec.x(i), spec.y(j) + 0.5 * h])[1];
            }
        }
        let n = spec.len();
        let (mut a11, mut a22, mut a12) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (k, x) in spec.nodes().enumerate() {
            let a = coeffs.diffusion(x);
            if a[0][0] < 0.0 || a[1][1] < 0.0 || a.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("diffusion matrix at {x:?} is not admissible: {a:?}")));
            }
            a11[k] = a[0][0];
            a22[k] = a[1][1];
            a12[k] = 0.5 * (a[0][1] + a[1][0]);
        }
        if fx.iter().chain(&fy).any(|v| !v.is_finite()) {
            return Err(Error::invalid("drift is not finite on the grid"));
        }
        let problem = Self {
            initial,
            dt,
            output_times,
            jumps,
            advection: Advection::default(),
            fx,
            fy,
            a11,
            a22,
            a12,
            steps,
        };
        problem.check_stability()?;
        Ok(problem)
    }

    /// Switches the drift discretization, re-checking the explicit bound.
    pub fn with_advection(mut self, advection: Advection) -> Result<Self> {
        self.advection = advection;
        self.check_stability()?;
        Ok(self)
    }

    pub fn advection(&self) -> Advection {
        self.advection
    }

    fn check_stability(&self) -> Result<()> {
        let rate = self.max_outflow_rate()?;
        if rate * self.dt > 1.0 {
            return Err(Error::Stability(format!(
                "dt = {} exceeds the explicit bound {:.3e} (max outflow rate {rate:.3e})",
                self.dt,
                1.0 / rate
            )));
        }
        Ok(())
    }

    /// Face coefficients of the drift, diagonal diffusion and small-jump
    /// terms.
    pub(crate) fn faces(&self) -> Result<Faces> {
        let spec = self.initial.spec;
        let (nx, ny, h) = (spec.nx, spec.ny, spec.h);
        // D_δ Δp = ½ Σ ∂ᵢ²(2 D_δ p).
        let extra = self.jump_constants()?.map_or(0.0, |(_, d)| 2.0 * d);
        let mut f = Faces {
            x_lo: vec![0.0; self.fx.len()],
            x_hi: vec![0.0; self.fx.len()],
            y_lo: vec![0.0; self.fy.len()],
            y_hi: vec![0.0; self.fy.len()],
        };
        for j in 0..ny {
            for i in 0..nx - 1 {
                let (k, q) = (j * nx + i, j * (nx - 1) + i);
                let (lo, hi) = face_coefficients(self.advection, self.fx[q], self.a11[k] + extra, self.a11[k + 1] + extra, h);
                f.x_lo[q] = lo;
                f.x_hi[q] = hi;
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let k = j * nx + i;
                let (lo, hi) = face_coefficients(self.advection, self.fy[k], self.a22[k] + extra, self.a22[k + nx] + extra, h);
                f.y_lo[k] = lo;
                f.y_hi[k] = hi;
            }
        }
        Ok(f)
    }

    /// Jump constant including the `scale^α` factor, and the small-jump
    /// Laplacian coefficient.
    pub(crate) fn jump_constants(&self) -> Result<Option<(f64, f64)>> {
        let Some(j) = self.jumps else { return Ok(None) };
        let c = levy_constant(2, j.alpha)? * j.scale.powf(j.alpha.alpha());
        Ok(Some((c, small_jump_diffusion(j.alpha, self.initial.spec.h, c))))
    }

    /// Largest total rate at which an interior node's own value is drained
    /// in one step; `dt` times this must not exceed one.
    pub fn max_outflow_rate(&self) -> Result<f64> {
        let spec = self.initial.spec;
        let (nx, ny, h) = (spec.nx, spec.ny, spec.h);
        let loss = match (self.jump_constants()?, self.jumps) {
            (Some((c, _)), Some(j)) => lattice_loss_rate(j.alpha, h, c),
            _ => 0.0,
        };
        let f = self.faces()?;
        let mut worst: f64 = 0.0;
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let k = j * nx + i;
                let q = j * (nx - 1) + i;
                let out = (f.x_lo[q] + f.x_hi[q - 1] + f.y_lo[k] + f.y_hi[k - nx]) / h;
                worst = worst.max(out + loss);
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_fluxes_reduce_to_known_limits() {
        let h = 0.2;
        // No drift: both schemes give the centred diffusion flux.
        for adv in [Advection::Upwind, Advection::ExponentialFitting] {
            let (lo, hi) = face_coefficients(adv, 0.0, 1.0, 3.0, h);
            assert!((lo - 1.0 / (2.0 * h)).abs() < 1e-12 && (hi - 3.0 / (2.0 * h)).abs() < 1e-12);
        }
        // No diffusion: both are upwind.
        for adv in [Advection::Upwind, Advection::ExponentialFitting] {
            assert_eq!(face_coefficients(adv, 2.0, 0.0, 0.0, h), (2.0, 0.0));
            assert_eq!(face_coefficients(adv, -2.0, 0.0, 0.0, h), (0.0, 2.0));
        }
        // Constant density carries flux u p for any drift and diffusion.
        for u in [-30.0, -1.0, 0.3, 5.0, 400.0] {
            let (lo, hi) = face_coefficients(Advection::ExponentialFitting, u, 0.7, 0.7, h);
            assert!((lo - hi - u).abs() < 1e-9 * u.abs().max(1.0), "{u}: {lo} {hi}");
            assert!(lo >= 0.0 && hi >= 0.0);
        }
        assert!((bernoulli(1e-12) - 1.0).abs() < 1e-11);
        assert!((bernoulli(-800.0) - 800.0).abs() < 1e-9);
        assert_eq!(bernoulli(800.0), 0.0);
    }
}
