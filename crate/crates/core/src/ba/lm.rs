//! Damped normal equations `(JᵀJ + λ·D²)·Δ = −JᵀE`, solved by eliminating the diagonal
//! depth block (Schur complement on the pose block).

use nalgebra::{DMatrix, DVector, Vector6};
use rayon::prelude::*;

use crate::ba::residual::{JacobianBlocks, ResidualVector};

/// Lower bound on `D²` entries (`D` itself is clamped to 1e-8).
pub const DAMPING_FLOOR: f64 = 1e-16;

/// Smallest squared Cholesky pivot of the unit-diagonal reduced pose system that still
/// counts as non-singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// A depth column whose `JᵀJ` entry is at most this fraction of the largest pose diagonal
/// holds only rounding noise (no parallax, e.g. at zero baseline) and keeps Δd = 0.
pub const DEPTH_OBSERVABILITY: f64 = 1e-20;

/// `JᵀJ` and `JᵀE` in block form.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub views: usize,
    pub pixels: usize,
    /// Diagonal depth block.
    pub hdd: Vec<f64>,
    pub gd: Vec<f64>,
    /// Depth-pose coupling, `6·views` entries per pixel.
    pub coupling: Vec<f64>,
    pub hpp: DMatrix<f64>,
    pub gp: DVector<f64>,
}

impl NormalEquations {
    pub fn build(e: &ResidualVector, j: &JacobianBlocks) -> Self {
        let (n, c, p) = (e.views, e.channels, e.pixels);
        let np = 6 * n;
        struct Px {
            hdd: f64,
            gd: f64,
            b: Vec<f64>,
            hpp: Vec<[[f64; 6]; 6]>,
            gp: Vec<[f64; 6]>,
        }
        let per: Vec<Px> = (0..p)
            .into_par_iter()
            .map(|q| {
                let mut px = Px {
                    hdd: 0.0,
                    gd: 0.0,
                    b: vec![0.0; np],
                    hpp: vec![[[0.0; 6]; 6]; n],
                    gp: vec![[0.0; 6]; n],
                };
                for i in 0..n {
                    if !e.is_valid(q, i) {
                        continue;
                    }
                    let er = e.row(q, i);
                    let (jd, jp) = j.rows(q, i);
                    for ch in 0..c {
                        px.hdd += jd[ch] * jd[ch];
                        px.gd += jd[ch] * er[ch];
                        for a in 0..6 {
                            px.b[6 * i + a] += jd[ch] * jp[ch][a];
                            px.gp[i][a] += jp[ch][a] * er[ch];
                            for b in a..6 {
                                px.hpp[i][a][b] += jp[ch][a] * jp[ch][b];
                            }
                        }
                    }
                }
                px
            })
            .collect();
        let mut ne = NormalEquations {
            views: n,
            pixels: p,
            hdd: Vec::with_capacity(p),
            gd: Vec::with_capacity(p),
            coupling: Vec::with_capacity(p * np),
            hpp: DMatrix::zeros(np, np),
            gp: DVector::zeros(np),
        };
        for px in per {
            ne.hdd.push(px.hdd);
            ne.gd.push(px.gd);
            ne.coupling.extend(px.b);
            for i in 0..n {
                for a in 0..6 {
                    ne.gp[6 * i + a] += px.gp[i][a];
                    for b in a..6 {
                        ne.hpp[(6 * i + a, 6 * i + b)] += px.hpp[i][a][b];
                    }
                }
            }
        }
        for r in 0..np {
            for s in 0..r {
                ne.hpp[(r, s)] = ne.hpp[(s, r)];
            }
        }
        ne
    }

    #[inline]
    pub fn coupling_of(&self, q: usize) -> &[f64] {
        let np = 6 * self.views;
        &self.coupling[q * np..(q + 1) * np]
    }
}

#[derive(Debug, Clone)]
enum PoseFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Factorisation of the damped system, reusable for the adjoint solve.
#[derive(Debug, Clone)]
pub struct DampedSystem {
    pub lambda: f64,
    /// `D²` for depth columns then pose columns.
    pub damping_depth: Vec<f64>,
    pub damping_pose: Vec<f64>,
    pub damped_hdd: Vec<f64>,
    /// Pixels whose depth column is zero up to rounding keep Δd = 0.
    pub active: Vec<bool>,
    /// Jacobi scaling `1/√S_kk` applied on both sides of the reduced system.
    scale: Vec<f64>,
    factor: Option<PoseFactor>,
}

impl DampedSystem {
    pub fn new(ne: &NormalEquations, lambda: f64) -> Self {
        let damping_depth: Vec<f64> = ne.hdd.iter().map(|h| h.max(DAMPING_FLOOR)).collect();
        let np = 6 * ne.views;
        let damping_pose: Vec<f64> = (0..np).map(|k| ne.hpp[(k, k)].max(DAMPING_FLOOR)).collect();
        let pose_scale = (0..np).fold(0.0f64, |m, k| m.max(ne.hpp[(k, k)]));
        let active: Vec<bool> = ne.hdd.iter().map(|h| *h > 0.0 && *h > DEPTH_OBSERVABILITY * pose_scale).collect();
        let damped_hdd: Vec<f64> = ne.hdd.iter().zip(&damping_depth).map(|(h, d)| h + lambda * d).collect();

        let mut s = ne.hpp.clone();
        for k in 0..np {
            s[(k, k)] += lambda * damping_pose[k];
        }
        // S = A − Σ_q B_q B_qᵀ / a_q (serial for a fixed summation order).
        for q in 0..ne.pixels {
            if !active[q] || !(damped_hdd[q] > 0.0) {
                continue;
            }
            let b = ne.coupling_of(q);
            let inv = 1.0 / damped_hdd[q];
            for r in 0..np {
                if b[r] == 0.0 {
                    continue;
                }
                let br = b[r] * inv;
                for c in 0..np {
                    s[(r, c)] -= br * b[c];
                }
            }
        }
        let scale: Vec<f64> = (0..np).map(|k| 1.0 / s[(k, k)].sqrt()).collect();
        let factor = if scale.iter().all(|v| v.is_finite()) && s.iter().all(|v| v.is_finite()) {
            let scaled = DMatrix::from_fn(np, np, |r, c| s[(r, c)] * scale[r] * scale[c]);
            match nalgebra::Cholesky::new(scaled.clone()) {
                Some(ch) => {
                    let min_pivot = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
                    (min_pivot > PIVOT_TOLERANCE).then_some(PoseFactor::Cholesky(ch))
                }
                None => {
                    let lu = scaled.lu();
                    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                    (min_pivot > PIVOT_TOLERANCE).then_some(PoseFactor::Lu(lu))
                }
            }
        } else {
            None
        };
        DampedSystem {
            lambda,
            damping_depth,
            damping_pose,
            damped_hdd,
            active,
            scale,
            factor,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.factor.is_none()
    }

    /// Solves `M·x = rhs`; `None` when the reduced system is singular or the result is
    /// not finite.
    pub fn solve(&self, ne: &NormalEquations, rhs_d: &[f64], rhs_p: &DVector<f64>) -> Option<(Vec<f64>, DVector<f64>)> {
        let factor = self.factor.as_ref()?;
        let np = 6 * ne.views;
        let mut r = rhs_p.clone();
        for q in 0..ne.pixels {
            if !self.active[q] {
                continue;
            }
            let b = ne.coupling_of(q);
            let f = rhs_d[q] / self.damped_hdd[q];
            for k in 0..np {
                r[k] -= b[k] * f;
            }
        }
        let r = DVector::from_iterator(np, r.iter().zip(&self.scale).map(|(v, c)| v * c));
        let y = match factor {
            PoseFactor::Cholesky(ch) => ch.solve(&r),
            PoseFactor::Lu(lu) => lu.solve(&r)?,
        };
        let xp = DVector::from_iterator(np, y.iter().zip(&self.scale).map(|(v, c)| v * c));
        let xd: Vec<f64> = (0..ne.pixels)
            .into_par_iter()
            .map(|q| {
                if !self.active[q] {
                    return 0.0;
                }
                let b = ne.coupling_of(q);
                let bx: f64 = b.iter().zip(xp.iter()).map(|(a, c)| a * c).sum();
                (rhs_d[q] - bx) / self.damped_hdd[q]
            })
            .collect();
        if xp.iter().chain(xd.iter()).all(|v| v.is_finite()) {
            Some((xd, xp))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmStep {
    pub delta_depth: Vec<f64>,
    pub delta_pose: Vec<Vector6<f64>>,
    pub stalled: bool,
}

impl LmStep {
    pub fn zero(pixels: usize, views: usize) -> Self {
        LmStep {
            delta_depth: vec![0.0; pixels],
            delta_pose: vec![Vector6::zeros(); views],
            stalled: false,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.delta_depth.iter().map(|v| v * v).sum::<f64>()
            + self.delta_pose.iter().map(|v| v.norm_squared()).sum::<f64>())
        .sqrt()
    }
}

pub(crate) fn split_pose(x: &DVector<f64>) -> Vec<Vector6<f64>> {
    x.as_slice().chunks_exact(6).map(Vector6::from_column_slice).collect()
}

/// Damped step together with the factorisation that produced it.
pub fn lm_solve(ne: &NormalEquations, lambda: f64) -> (LmStep, DampedSystem) {
    let sys = DampedSystem::new(ne, lambda);
    let rhs_d: Vec<f64> = ne.gd.iter().map(|g| -g).collect();
    let rhs_p = -&ne.gp;
    match sys.solve(ne, &rhs_d, &rhs_p) {
        Some((xd, xp)) => (
            LmStep {
                delta_depth: xd,
                delta_pose: split_pose(&xp),
                stalled: false,
            },
            sys,
        ),
        None => {
            let mut s = LmStep::zero(ne.pixels, ne.views);
            s.stalled = true;
            (s, sys)
        }
    }
}

pub fn lm_step(e: &ResidualVector, j: &JacobianBlocks, lambda: f64) -> LmStep {
    let ne = NormalEquations::build(e, j);
    lm_solve(&ne, lambda.max(0.0)).0
}
