use serde::{Deserialize, Serialize};

use super::{lattice_loss_rate, FpeProblem, JumpKernel};
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Bookkeeping of one solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpeDiagnostics {
    pub steps: usize,
    /// Most negative value produced by a step before clipping (0 if none).
    pub min_before_clip: f64,
    /// Largest mass removed by clipping in a single step.
    pub max_clipped_per_step: f64,
    pub total_clipped: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
}

#[derive(Clone, Debug)]
pub struct FpeSolution {
    /// One grid per requested output time, in order.
    pub grids: Vec<DensityGrid>,
    pub diagnostics: FpeDiagnostics,
}

/// Solves `p_t = -∇·(f p) + ½ Σ ∂ᵢ∂ⱼ(Aᵢⱼ p)`.
pub fn solve_local_fpe(problem: &FpeProblem) -> Result<FpeSolution> {
    if problem.jumps.is_some() {
        return Err(Error::invalid("problem has a jump part; use solve_nonlocal_fpe"));
    }
    run(problem)
}

/// Solves the local equation plus the isotropic α-stable jump integral
/// `∫ [p(x + y) - p(x)] ν(dy)`.
pub fn solve_nonlocal_fpe(problem: &FpeProblem) -> Result<FpeSolution> {
    if problem.jumps.is_none() {
        return Err(Error::invalid("problem has no jump part; use solve_local_fpe"));
    }
    run(problem)
}

struct Jumps {
    kernel: JumpKernel,
    loss: f64,
    gain: Vec<f64>,
}

fn run(problem: &FpeProblem) -> Result<FpeSolution> {
    let spec = problem.initial.spec;
    let (nx, ny, h, dt) = (spec.nx, spec.ny, spec.h, problem.dt);
    let area = spec.cell_area();
    let mut jumps = match (problem.jump_constants()?, problem.jumps) {
        (Some((c, _)), Some(j)) => Some(Jumps {
            kernel: JumpKernel::new(nx, ny, h, j.alpha, c),
            loss: lattice_loss_rate(j.alpha, h, c),
            gain: vec![0.0; spec.len()],
        }),
        _ => None,
    };
    let has_cross = problem.a12.iter().any(|v| *v != 0.0);
    let inv_h = 1.0 / h;
    let inv_h2 = inv_h * inv_h;

    let mut p = problem.initial.values().to_vec();
    // Boundary nodes are absorbing.
    for j in 0..ny {
        for i in 0..nx {
            if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                p[j * nx + i] = 0.0;
            }
        }
    }
    let mut next = vec![0.0; p.len()];
    let mut diag = FpeDiagnostics {
        initial_mass: problem.initial.mass(),
        ..Default::default()
    };
    let total_steps = problem.steps.last().copied().unwrap_or(0);
    let mut grids = Vec::with_capacity(problem.steps.len());
    let mut out_idx = 0;
    let faces = problem.faces()?;
    let a12 = &problem.a12;

    for step in 0..=total_steps {
        while out_idx < problem.steps.len() && problem.steps[out_idx] == step {
            grids.push(DensityGrid::new(spec, problem.output_times[out_idx], p.clone())?);
            out_idx += 1;
        }
        if step == total_steps {
            break;
        }
        if let Some(jp) = jumps.as_mut() {
            jp.kernel.apply(&p, &mut jp.gain);
        }
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let k = j * nx + i;
                let (qr, qt) = (j * (nx - 1) + i, k);
                let flux_r = faces.x_lo[qr] * p[k] - faces.x_hi[qr] * p[k + 1];
                let flux_l = faces.x_lo[qr - 1] * p[k - 1] - faces.x_hi[qr - 1] * p[k];
                let flux_t = faces.y_lo[qt] * p[k] - faces.y_hi[qt] * p[k + nx];
                let flux_b = faces.y_lo[qt - nx] * p[k - nx] - faces.y_hi[qt - nx] * p[k];
                let mut rhs = -(flux_r - flux_l + flux_t - flux_b) * inv_h;
                if has_cross {
                    rhs += 0.25
                        * inv_h2
                        * (a12[k + nx + 1] * p[k + nx + 1] - a12[k - nx + 1] * p[k - nx + 1]
                            - a12[k + nx - 1] * p[k + nx - 1]
                            + a12[k - nx - 1] * p[k - nx - 1]);
                }
                if let Some(jp) = &jumps {
                    rhs += jp.gain[k] - jp.loss * p[k];
                }
                next[k] = p[k] + dt * rhs;
            }
        }
        let mut clipped = 0.0;
        for v in next.iter_mut() {
            if *v < 0.0 {
                diag.min_before_clip = diag.min_before_clip.min(*v);
                clipped -= *v;
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite density after step {step}")));
            }
        }
        clipped *= area;
        diag.total_clipped += clipped;
        diag.max_clipped_per_step = diag.max_clipped_per_step.max(clipped);
        std::mem::swap(&mut p, &mut next);
        diag.steps += 1;
    }
    diag.final_mass = p.iter().sum::<f64>() * area;
    if diag.final_mass < 0.95 * diag.initial_mass {
        log::warn!(
            "mass dropped from {:.4} to {:.4}: boundary leak",
            diag.initial_mass,
            diag.final_mass
        );
    }
    Ok(FpeSolution { grids, diagnostics: diag })
}
