//! Macroscopic boundary-value problem: a second-gradient Cook's membrane
//! driven either by a closed-form material or by nested cell problems.
//!
//! The constitutive call at every macro Gauss point returns stresses and
//! the four tangent blocks in the same layout the cell assembly uses, so
//! one element kernel serves both scales. For the nested variant the
//! blocks are the condensed cell tangents and the per-point fluctuation
//! states are carried between Newton iterations as warm starts.

use crate::homog::{average, condensed_tangents};
use crate::material::{Material, MaterialError, MaterialResponse};
use crate::rve::{accumulate_qp, MacroDrive, NewtonOpts, RveConfig, RveError, RveProblem};
use crate::sparse::{LdlFactor, SparseError, SymCsc};
use crate::spline::{DerivOrder, Face, KnotVector, Patch, PointEval, QuadPoint, SplineError};
use crate::tensor::TensorN;
use crate::Tensor;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MacroError {
    #[error(transparent)]
    Rve(#[from] RveError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error("macroscopic deformation gradient not invertible at point {gp} (det {det:.3e})")]
    NonPositiveMacroJacobian { gp: usize, det: f64 },
    #[error("macroscopic Newton stalled at load factor {lambda} (residual {residual:.3e} N)")]
    NoConvergence { lambda: f64, residual: f64 },
    #[error("load step underflow below {min_step} at load factor {lambda}")]
    StepUnderflow { lambda: f64, min_step: f64 },
    #[error("invalid macroscopic configuration: {0}")]
    Config(String),
}

impl MacroError {
    /// Failures that a smaller load increment can plausibly cure.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            MacroError::NoConvergence { .. }
                | MacroError::NonPositiveMacroJacobian { .. }
                | MacroError::Rve(RveError::NoConvergence(_))
                | MacroError::Rve(RveError::Material(_))
                | MacroError::Material(_)
        )
    }
}

/// Constitutive response at a macro Gauss point.
#[derive(Clone, Debug)]
pub enum Constitutive {
    /// Closed-form material evaluated directly at (F̄, 𝔉̄).
    Direct(Material),
    /// Nested cell problem per Gauss point; the configuration is the
    /// template shared by all points.
    TwoScale(RveConfig),
}

#[derive(Clone, Debug)]
pub struct MacroConfig {
    /// Elements per parametric direction.
    pub elements: [usize; 3],
    pub degree: usize,
    /// Gauss points per direction.
    pub quad: usize,
    pub constitutive: Constitutive,
    /// Total dead-load resultant on the loaded face, N, applied along +y.
    pub load_n: f64,
    /// Initial number of equal load increments.
    pub steps: usize,
    /// Smallest admissible load increment before giving up.
    pub min_step: f64,
    /// Macro Newton: absolute residual tolerance (N) and iteration cap.
    pub atol_n: f64,
    pub max_iter: usize,
    /// Options for the nested cell solves.
    pub rve_newton: NewtonOpts,
}

impl MacroConfig {
    pub fn cooks(elements: [usize; 3], constitutive: Constitutive) -> Self {
        MacroConfig {
            elements,
            degree: 2,
            quad: 3,
            constitutive,
            load_n: 100.0,
            steps: 5,
            min_step: 1.0 / 1024.0,
            atol_n: 1e-7,
            max_iter: 25,
            rve_newton: NewtonOpts::default(),
        }
    }

    fn validate(&self) -> Result<(), MacroError> {
        if self.elements.iter().any(|&n| n == 0) {
            return Err(MacroError::Config("element counts must be positive".into()));
        }
        if self.degree < 2 {
            return Err(MacroError::Config(
                "second-gradient terms need degree at least 2".into(),
            ));
        }
        if self.quad < self.degree + 1 {
            return Err(MacroError::Config("quadrature underintegrates".into()));
        }
        if self.steps == 0 {
            return Err(MacroError::Config("at least one load step".into()));
        }
        Ok(())
    }
}

/// Cached macro element: quadrature with physical derivatives and the
/// global control-point column of each local function.
struct MacroElem {
    quad: Vec<QuadPoint>,
    dofs: Vec<usize>,
}

pub struct MacroProblem {
    pub patch: Patch,
    pub config: MacroConfig,
    /// Reduced column per control point; `None` when clamped.
    free: Vec<Option<usize>>,
    pub n_free: usize,
    elems: Vec<MacroElem>,
    /// Unit-load external force (scaled by the load factor), full length.
    f_ext: Vec<[f64; 3]>,
    pattern: SymCsc,
    pub volume_mm3: f64,
    /// Shared cell problem for the nested constitutive law.
    pub rve: Option<RveProblem>,
}

/// Full solver state: displacement coefficients for every control point
/// (clamped ones stay zero) plus per-Gauss-point fluctuation warm starts.
#[derive(Clone, Debug)]
pub struct MacroState {
    pub d: Vec<[f64; 3]>,
    pub rve_warm: Vec<Option<Vec<f64>>>,
}

/// Convergence log of one load step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub lambda: f64,
    /// 2-norm of the reduced out-of-balance force at each iterate, N.
    pub residuals: Vec<f64>,
    /// Newton decrement √(rᵀK⁻¹r) at each iterate that took a step: the
    /// affine-invariant distance measure, insensitive to the stiffness
    /// amplification that makes raw force norms incomparable across
    /// meshes.
    pub decrements: Vec<f64>,
    pub iterations: usize,
    pub rve_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct MacroReport {
    pub steps: Vec<StepLog>,
    /// Force transmitted through the clamped face at the final state, N;
    /// equals the applied resultant at equilibrium.
    pub reaction_n: [f64; 3],
    pub total_iterations: usize,
    pub total_rve_iterations: usize,
}

/// Cook's membrane: the classic tapered panel swept to thickness 10 mm,
///
/// ```text
/// X(ξ) = (48 ξ₁, 44 ξ₁ + ξ₂ (44 − 28 ξ₁), 10 ξ₃) mm.
/// ```
///
/// The map is bilinear, so B-spline coefficients built from products of
/// Greville abscissae reproduce it exactly. The face ξ₁ = 0 is clamped
/// through two coefficient layers (value and normal gradient), the face
/// ξ₁ = 1 carries the dead traction.
fn cooks_control(kv: &[KnotVector; 3]) -> Vec<[f64; 3]> {
    let n = [kv[0].n_basis(), kv[1].n_basis(), kv[2].n_basis()];
    let mut ctrl = Vec::with_capacity(n[0] * n[1] * n[2]);
    for k in 0..n[2] {
        let g3 = kv[2].greville(k);
        for j in 0..n[1] {
            let g2 = kv[1].greville(j);
            for i in 0..n[0] {
                let g1 = kv[0].greville(i);
                ctrl.push([48.0 * g1, 44.0 * g1 + g2 * (44.0 - 28.0 * g1), 10.0 * g3]);
            }
        }
    }
    ctrl
}

impl MacroProblem {
    pub fn cooks(config: MacroConfig) -> Result<Self, MacroError> {
        config.validate()?;
        let kv = [
            KnotVector::open_uniform(config.degree, config.elements[0])?,
            KnotVector::open_uniform(config.degree, config.elements[1])?,
            KnotVector::open_uniform(config.degree, config.elements[2])?,
        ];
        let ctrl = cooks_control(&kv);
        let patch = Patch::from_control(kv, ctrl);
        let n = patch.n_basis();

        // Clamp: the two coefficient layers next to ξ₁ = 0 pin the face
        // value and its normal derivative.
        let mut free = vec![None; patch.n_ctrl()];
        let mut n_free = 0;
        for a in 0..patch.n_ctrl() {
            let ijk = patch.ctrl_ijk(a);
            if ijk[0] >= 2 {
                free[a] = Some(n_free);
                n_free += 1;
            }
        }
        if n[0] < 3 {
            return Err(MacroError::Config(
                "clamping two layers leaves no unknowns in ξ₁".into(),
            ));
        }

        // Quadrature caches and the reduced sparsity pattern.
        let elems: Vec<MacroElem> = patch
            .elements()
            .par_iter()
            .map(|&e| {
                let quad = patch.element_quadrature(e, config.quad, DerivOrder::Two)?;
                let dofs = quad[0].eval.dofs.clone();
                Ok(MacroElem { quad, dofs })
            })
            .collect::<Result<_, SplineError>>()?;
        let volume: f64 = elems.iter().flat_map(|e| e.quad.iter().map(|q| q.w)).sum();

        let mut pairs = Vec::new();
        for ed in &elems {
            let reds: Vec<usize> = ed.dofs.iter().filter_map(|&a| free[a]).collect();
            for (i, &ra) in reds.iter().enumerate() {
                for &rb in &reds[i..] {
                    for ci in 0..3 {
                        for cj in 0..3 {
                            pairs.push((3 * ra + ci, 3 * rb + cj));
                        }
                    }
                }
            }
        }
        let pattern = SymCsc::pattern_from_pairs(3 * n_free, pairs.into_iter());

        // Dead traction on ξ₁ = 1: direction +y, magnitude resultant/area.
        let face = Face { dir: 0, max_side: true };
        let fq = patch.face_quadrature(face, config.degree + 1, DerivOrder::One)?;
        let area: f64 = fq.iter().map(|fp| fp.da).sum();
        let t_y = config.load_n / area;
        let mut f_ext = vec![[0.0; 3]; patch.n_ctrl()];
        for fp in &fq {
            for (loc, &a) in fp.eval.dofs.iter().enumerate() {
                f_ext[a][1] += fp.da * fp.eval.val[loc] * t_y;
            }
        }

        let rve = match &config.constitutive {
            Constitutive::TwoScale(rc) => Some(RveProblem::new(rc.clone())?),
            Constitutive::Direct(_) => None,
        };

        Ok(MacroProblem {
            patch,
            config,
            free,
            n_free,
            elems,
            f_ext,
            pattern,
            volume_mm3: volume,
            rve,
        })
    }

    pub fn n_dof(&self) -> usize {
        3 * self.n_free
    }

    pub fn cold_state(&self) -> MacroState {
        let n_gp = self.elems.iter().map(|e| e.quad.len()).sum();
        MacroState {
            d: vec![[0.0; 3]; self.patch.n_ctrl()],
            rve_warm: vec![None; n_gp],
        }
    }

    /// Deformation measures of the macro placement at an evaluated point.
    pub fn fields_at(eval: &PointEval, d: &[[f64; 3]]) -> (Tensor, Tensor) {
        let mut f = [0.0; 9];
        f[0] = 1.0;
        f[4] = 1.0;
        f[8] = 1.0;
        let mut g = [0.0; 27];
        for (loc, &a) in eval.dofs.iter().enumerate() {
            let dv = d[a];
            let gr = eval.grad[loc];
            let he = &eval.hess[loc];
            for i in 0..3 {
                for j in 0..3 {
                    f[3 * i + j] += dv[i] * gr[j];
                    for k in 0..3 {
                        g[9 * i + 3 * j + k] += dv[i] * he[j][k];
                    }
                }
            }
        }
        (
            TensorN::from_data(2, f.to_vec()).unwrap(),
            TensorN::from_data(3, g.to_vec()).unwrap(),
        )
    }

    /// Displacement at a parametric location.
    pub fn displacement_at(&self, state: &MacroState, xi: [f64; 3]) -> Result<[f64; 3], MacroError> {
        let ev = self.patch.eval_point(xi, DerivOrder::One)?;
        let mut u = [0.0; 3];
        for (loc, &a) in ev.dofs.iter().enumerate() {
            for i in 0..3 {
                u[i] += state.d[a][i] * ev.val[loc];
            }
        }
        Ok(u)
    }

    fn gp_response(
        &self,
        gp: usize,
        f: &Tensor,
        g: &Tensor,
        warm: Option<&[f64]>,
    ) -> Result<(MaterialResponse, Option<Vec<f64>>, usize), MacroError> {
        match &self.config.constitutive {
            Constitutive::Direct(m) => Ok((m.tangent(f, g)?, None, 0)),
            Constitutive::TwoScale(_) => {
                let det = f.det2().map_err(MaterialError::from)?;
                if det <= 0.0 {
                    return Err(MacroError::NonPositiveMacroJacobian { gp, det });
                }
                let rve = self.rve.as_ref().expect("nested problem built with config");
                let drive = MacroDrive { f: f.clone(), g: g.clone() };
                let (sol, ops) = rve.solve(&drive, warm, &self.config.rve_newton)?;
                let h = average(rve, &sol)?;
                let ct = condensed_tangents(rve, &sol, &ops)?;
                let iters = sol.iterations;
                Ok((
                    MaterialResponse {
                        psi: h.psi,
                        p: h.p_avg,
                        pp: h.pp_avg,
                        cc: ct.a_ff,
                        dd: ct.a_fg,
                        ee: ct.a_gf,
                        gg: ct.a_gg,
                    },
                    Some(sol.q_free),
                    iters,
                ))
            }
        }
    }

    fn kernel_is_second(&self) -> bool {
        match &self.config.constitutive {
            Constitutive::Direct(m) => m.is_second_gradient(),
            // Condensed tangents couple to the gradient drive through the
            // first-moment terms even for a first-gradient cell material.
            Constitutive::TwoScale(_) => true,
        }
    }

    /// One full assembly at `state`: reduced tangent, reduced residual
    /// (internal − λ·external), the full internal force, the refreshed
    /// warm starts and the summed cell iteration count.
    #[allow(clippy::type_complexity)]
    pub fn assemble(
        &self,
        state: &MacroState,
        lambda: f64,
    ) -> Result<(SymCsc, Vec<f64>, Vec<[f64; 3]>, Vec<Option<Vec<f64>>>, usize), MacroError>
    {
        let second = self.kernel_is_second();
        let npg = self.elems[0].quad.len();
        struct ElemOut {
            r_e: Vec<f64>,
            k_e: Vec<f64>,
            warms: Vec<Option<Vec<f64>>>,
            rve_iters: usize,
        }
        let outs: Vec<ElemOut> = self
            .elems
            .par_iter()
            .enumerate()
            .map(|(e, ed)| {
                let nloc = ed.dofs.len();
                let n3 = 3 * nloc;
                let mut out = ElemOut {
                    r_e: vec![0.0; n3],
                    k_e: vec![0.0; n3 * n3],
                    warms: Vec::with_capacity(ed.quad.len()),
                    rve_iters: 0,
                };
                for (gl, qp) in ed.quad.iter().enumerate() {
                    let gp = e * npg + gl;
                    let (f, g) = Self::fields_at(&qp.eval, &state.d);
                    let (resp, warm, iters) =
                        self.gp_response(gp, &f, &g, state.rve_warm[gp].as_deref())?;
                    out.warms.push(warm);
                    out.rve_iters += iters;
                    accumulate_qp(
                        qp.w,
                        qp.eval.x,
                        &qp.eval.grad,
                        &qp.eval.hess,
                        &resp,
                        second,
                        &mut out.r_e,
                        &mut out.k_e,
                        None,
                    );
                }
                Ok(out)
            })
            .collect::<Result<_, MacroError>>()?;

        // Deterministic serial scatter.
        let n_dof = self.n_dof();
        let mut k = self.pattern.clone();
        let mut r_full = vec![[0.0; 3]; self.patch.n_ctrl()];
        let mut warms = Vec::with_capacity(state.rve_warm.len());
        let mut rve_iters = 0;
        for (e, out) in outs.into_iter().enumerate() {
            let ed = &self.elems[e];
            let nloc = ed.dofs.len();
            let n3 = 3 * nloc;
            for a in 0..nloc {
                let ga = ed.dofs[a];
                for i in 0..3 {
                    r_full[ga][i] += out.r_e[3 * a + i];
                }
                let Some(ra) = self.free[ga] else { continue };
                for b in 0..nloc {
                    let Some(rb) = self.free[ed.dofs[b]] else { continue };
                    for i in 0..3 {
                        let row = 3 * ra + i;
                        for s in 0..3 {
                            let col = 3 * rb + s;
                            if row <= col {
                                k.add(row, col, out.k_e[(3 * a + i) * n3 + 3 * b + s])?;
                            }
                        }
                    }
                }
            }
            warms.extend(out.warms);
            rve_iters += out.rve_iters;
        }

        let mut r_red = vec![0.0; n_dof];
        for (a, &slot) in self.free.iter().enumerate() {
            if let Some(ra) = slot {
                for i in 0..3 {
                    r_red[3 * ra + i] = r_full[a][i] - lambda * self.f_ext[a][i];
                }
            }
        }
        Ok((k, r_red, r_full, warms, rve_iters))
    }

    /// Newton iteration at a fixed load factor. Mutates `state` in place;
    /// on failure the caller owns recovery.
    fn newton_at(&self, state: &mut MacroState, lambda: f64) -> Result<StepLog, MacroError> {
        let mut log = StepLog {
            lambda,
            residuals: Vec::new(),
            decrements: Vec::new(),
            iterations: 0,
            rve_iterations: 0,
        };
        loop {
            let (k, r_red, _full, warms, rve_iters) = self.assemble(state, lambda)?;
            state.rve_warm = warms;
            log.rve_iterations += rve_iters;
            let rn = r_red.iter().map(|v| v * v).sum::<f64>().sqrt();
            log.residuals.push(rn);
            if !rn.is_finite() {
                return Err(MacroError::NoConvergence { lambda, residual: rn });
            }
            if rn <= self.config.atol_n {
                return Ok(log);
            }
            if log.iterations >= self.config.max_iter {
                return Err(MacroError::NoConvergence { lambda, residual: rn });
            }
            let factor = LdlFactor::factor(&k, true)?;
            let delta = factor.solve(&r_red)?;
            let dec = r_red
                .iter()
                .zip(delta.iter())
                .map(|(r, d)| r * d)
                .sum::<f64>()
                .max(0.0)
                .sqrt();
            log.decrements.push(dec);
            for (a, &slot) in self.free.iter().enumerate() {
                if let Some(ra) = slot {
                    for i in 0..3 {
                        state.d[a][i] -= delta[3 * ra + i];
                    }
                }
            }
            log.iterations += 1;
        }
    }

    /// Single Newton solve at full load, for warm-started states whose
    /// distance to the solution no longer needs load stepping.
    pub fn polish(&self, state: &mut MacroState) -> Result<StepLog, MacroError> {
        self.newton_at(state, 1.0)
    }

    /// Incremental solve to full load with automatic step halving.
    pub fn solve(&self, state: &mut MacroState) -> Result<MacroReport, MacroError> {
        let mut report = MacroReport {
            steps: Vec::new(),
            reaction_n: [0.0; 3],
            total_iterations: 0,
            total_rve_iterations: 0,
        };
        let mut lambda = 0.0;
        let mut dl = 1.0 / self.config.steps as f64;
        while lambda < 1.0 - 1e-12 {
            let target = (lambda + dl).min(1.0);
            let saved = state.clone();
            match self.newton_at(state, target) {
                Ok(log) => {
                    report.total_iterations += log.iterations;
                    report.total_rve_iterations += log.rve_iterations;
                    report.steps.push(log);
                    lambda = target;
                }
                Err(e) if e.is_retryable() => {
                    *state = saved;
                    dl *= 0.5;
                    if dl < self.config.min_step {
                        return Err(MacroError::StepUnderflow {
                            lambda,
                            min_step: self.config.min_step,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }

        // Reaction through the clamp from the terminal internal force.
        report.reaction_n = self.reaction(state)?;
        Ok(report)
    }

    /// Force transmitted through the clamped face at the given state, N.
    /// Equals the applied resultant when the state is in equilibrium at
    /// full load.
    pub fn reaction(&self, state: &mut MacroState) -> Result<[f64; 3], MacroError> {
        let (_, _, r_full, warms, _) = self.assemble(state, 1.0)?;
        state.rve_warm = warms;
        let mut reaction = [0.0; 3];
        for (a, slot) in self.free.iter().enumerate() {
            if slot.is_none() {
                for i in 0..3 {
                    reaction[i] -= r_full[a][i];
                }
            }
        }
        Ok(reaction)
    }
}
