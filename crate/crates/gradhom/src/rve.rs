//! Unit-cell boundary-value problems driven by a macroscopic deformation
//! gradient pair.
//!
//! The cell is a centred cube discretised with a C¹ B-spline patch. The
//! unknowns are the free fluctuation coefficients q̃; the deformation fields
//! at a material point are composed as
//!
//! ```text
//! F(X) = F̄ + 𝔉̄·X + Σ_A q̃_A ⊗ ∇R^A(X)
//! 𝔉(X) = 𝔉̄     + Σ_A q̃_A ⊗ ∇∇R^A(X)
//! ```
//!
//! with the raw (possibly unsymmetrised) components of 𝔉̄, so that each of
//! the 36 drive coefficients acts as an independent control. Boundary
//! conditions eliminate coefficients through an affine map q̃ = T q̃_f + G̃ d
//! (d the 36 drive coefficients): tie rows for periodic images, fitted
//! offsets for prescribed-boundary cells.

use crate::material::{Material, MaterialError, MaterialResponse};
use crate::sparse::{LdlFactor, SparseError, SymCsc};
use crate::spline::{DerivOrder, Face, Patch, QuadPoint, SplineError};
use crate::tensor::TensorN;
use crate::Tensor;
use rayon::prelude::*;
use thiserror::Error;

/// Number of macroscopic drive coefficients: 9 for F̄ and 27 for 𝔉̄.
pub const DRIVE_DIM: usize = 36;

#[derive(Debug, Error)]
pub enum RveError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error("macro drive needs a rank-2 and a rank-3 tensor")]
    DriveShape,
    #[error("invalid cell configuration: {0}")]
    Config(String),
    #[error("newton iteration did not converge within {0} steps")]
    NoConvergence(usize),
    #[error("initial guess has {0} entries, problem has {1} unknowns")]
    InitLength(usize, usize),
}

/// Macroscopic deformation gradient F̄ and its gradient 𝔉̄ (units 1/mm).
#[derive(Clone, Debug, PartialEq)]
pub struct MacroDrive {
    pub f: Tensor,
    pub g: Tensor,
}

impl MacroDrive {
    pub fn new(f: Tensor, g: Tensor) -> Result<Self, RveError> {
        if f.rank() != 2 || g.rank() != 3 {
            return Err(RveError::DriveShape);
        }
        Ok(MacroDrive { f, g })
    }

    /// Undeformed state: F̄ = I, 𝔉̄ = 0.
    pub fn identity() -> Self {
        MacroDrive {
            f: Tensor::identity2(),
            g: TensorN::zeros(3).unwrap(),
        }
    }

    /// The finite-strain state used throughout the verification suite.
    pub fn benchmark() -> Self {
        let f = Tensor::from_arr2(&[
            [0.897, 0.500, -0.400],
            [-0.070, 1.001, -0.100],
            [0.082, 0.020, 0.997],
        ]);
        let g = Tensor::from_arr3(&[
            [
                [-0.033, 0.015, -0.020],
                [0.015, 0.013, 0.043],
                [-0.020, 0.043, 0.029],
            ],
            [
                [0.015, -0.005, 0.024],
                [-0.005, 0.028, 0.028],
                [0.024, 0.028, 0.014],
            ],
            [
                [0.023, 0.005, -0.031],
                [0.005, -0.042, -0.001],
                [-0.031, -0.001, -0.012],
            ],
        ]);
        MacroDrive { f, g }
    }

    /// Flatten to the 36 drive coefficients (F̄ row-major, then 𝔉̄).
    pub fn coeffs(&self) -> [f64; DRIVE_DIM] {
        let mut c = [0.0; DRIVE_DIM];
        c[..9].copy_from_slice(self.f.data());
        c[9..].copy_from_slice(self.g.data());
        c
    }

    pub fn from_coeffs(c: &[f64; DRIVE_DIM]) -> Self {
        MacroDrive {
            f: TensorN::from_data(2, c[..9].to_vec()).unwrap(),
            g: TensorN::from_data(3, c[9..].to_vec()).unwrap(),
        }
    }

    /// Interpolate between identity and `self` (t = 1 gives `self`).
    pub fn scaled_from_identity(&self, t: f64) -> Self {
        let id = Tensor::identity2();
        let f = id.add(&self.f.sub(&id).unwrap().scale(t)).unwrap();
        MacroDrive { f, g: self.g.scale(t) }
    }
}

/// Boundary condition family on the cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcKind {
    /// Quadratic boundary positions prescribed on the outer control layers.
    Dirichlet,
    /// Fluctuation periodicity through coefficient ties.
    Periodic,
}

/// Material assignment over the cell.
#[derive(Clone, Debug)]
pub enum MaterialLayout {
    Uniform(Material),
    /// Bulk material everywhere except a cross-shaped void: the union of the
    /// three axis-aligned arms `|X_a| <= l/8`, `|X_b|, |X_c| <= l/12`,
    /// realised by scaling the bulk parameters by `void_scale`.
    VoidCross { bulk: Material, void_scale: f64 },
}

impl MaterialLayout {
    pub fn bulk(&self) -> &Material {
        match self {
            MaterialLayout::Uniform(m) => m,
            MaterialLayout::VoidCross { bulk, .. } => bulk,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RveConfig {
    /// Elements per direction.
    pub elements: usize,
    /// Spline degree (>= 2 for the C¹ spaces used here).
    pub degree: usize,
    /// Cell edge length in mm; the cell is centred at the origin.
    pub edge_mm: f64,
    pub bc: BcKind,
    pub layout: MaterialLayout,
    /// Gauss points per direction and element.
    pub quad: usize,
}

impl RveConfig {
    pub fn standard(elements: usize, bc: BcKind, layout: MaterialLayout) -> Self {
        RveConfig {
            elements,
            degree: 2,
            edge_mm: 0.1,
            bc,
            layout,
            quad: 3,
        }
    }

    fn validate(&self) -> Result<(), RveError> {
        if self.elements < 2 {
            return Err(RveError::Config("need at least 2 elements per direction".into()));
        }
        if self.degree < 2 {
            return Err(RveError::Config("spline degree must be at least 2".into()));
        }
        if self.edge_mm <= 0.0 {
            return Err(RveError::Config("edge length must be positive".into()));
        }
        if self.quad < 2 {
            return Err(RveError::Config("need at least 2 Gauss points".into()));
        }
        Ok(())
    }
}

/// Elimination rule for one control point (all three components alike).
#[derive(Clone, Debug, PartialEq)]
pub enum CpRule {
    /// Retained unknown; payload is the reduced control-point index.
    Free(usize),
    /// Linear combination of free control points (empty list pins to zero).
    Tied(Vec<(usize, f64)>),
    /// Prescribed fluctuation, affine in the drive; payload indexes
    /// [`ConstraintMap::offsets`].
    Fixed(usize),
}

/// Affine elimination map q̃ = T q̃_f + G̃ d over the control net.
#[derive(Clone, Debug)]
pub struct ConstraintMap {
    pub rules: Vec<CpRule>,
    /// Number of free control points (unknown vector length is 3x this).
    pub n_free: usize,
    /// Per fixed control point: offset rows, one `[f64; 36]` per component.
    pub offsets: Vec<[[f64; DRIVE_DIM]; 3]>,
    /// Worst relative residual of the boundary fit over the 36 drive
    /// columns (zero for tie-based maps).
    pub fit_residual: f64,
}

impl ConstraintMap {
    pub fn n_dof(&self) -> usize {
        3 * self.n_free
    }

    /// Fluctuation coefficients for every control point.
    pub fn compose(&self, q_free: &[f64], drive: &[f64; DRIVE_DIM]) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.rules.len());
        for rule in &self.rules {
            let mut v = [0.0; 3];
            match rule {
                CpRule::Free(r) => {
                    v.copy_from_slice(&q_free[3 * r..3 * r + 3]);
                }
                CpRule::Tied(terms) => {
                    for &(r, c) in terms {
                        for (vi, qi) in v.iter_mut().zip(&q_free[3 * r..3 * r + 3]) {
                            *vi += c * qi;
                        }
                    }
                }
                CpRule::Fixed(row) => {
                    for (vi, g) in v.iter_mut().zip(&self.offsets[*row]) {
                        *vi = g.iter().zip(drive).map(|(a, b)| a * b).sum();
                    }
                }
            }
            out.push(v);
        }
        out
    }
}

/// Physical Greville abscissa and second-moment coefficients per direction.
/// A spline with coefficients `g1` reproduces X, with `g2` reproduces X².
struct PolyTables {
    g1: [Vec<f64>; 3],
    g2: [Vec<f64>; 3],
}

fn poly_tables(patch: &Patch, origin: f64, edge: f64) -> PolyTables {
    let mut g1: [Vec<f64>; 3] = Default::default();
    let mut g2: [Vec<f64>; 3] = Default::default();
    for d in 0..3 {
        let kv = &patch.kv[d];
        let n = kv.n_basis();
        for i in 0..n {
            let a1 = kv.greville(i);
            let a2 = kv.blossom2(i);
            g1[d].push(origin + edge * a1);
            g2[d].push(origin * origin + 2.0 * origin * edge * a1 + edge * edge * a2);
        }
    }
    PolyTables { g1, g2 }
}

/// Spatial component driven by drive coefficient `col`.
fn drive_component(col: usize) -> usize {
    if col < 9 {
        col / 3
    } else {
        (col - 9) / 9
    }
}

/// Control coefficient of the quadratic map x̂(X) = F̄X + ½ 𝔉̄ : X⊗X for a
/// unit drive coefficient, at control point `ijk` (active component only).
fn ppoly_unit(tables: &PolyTables, ijk: [usize; 3], col: usize) -> f64 {
    if col < 9 {
        let jj = col % 3;
        tables.g1[jj][ijk[jj]]
    } else {
        let c = col - 9;
        let jj = (c / 3) % 3;
        let kk = c % 3;
        if jj == kk {
            0.5 * tables.g2[jj][ijk[jj]]
        } else {
            0.5 * tables.g1[jj][ijk[jj]] * tables.g1[kk][ijk[kk]]
        }
    }
}

/// Build the tie map for fluctuation periodicity. Values and boundary
/// normal derivatives are tied across opposite faces, independent of the
/// material: the gradient ties are what make the volume average of the
/// fluctuation Hessian vanish for every admissible field, not just for
/// second-gradient energies. The kernel of the ties is pinned at the
/// first corner plus its three axis neighbours, which zeroes the
/// fluctuation gradient at every corner.
fn periodic_map(patch: &Patch) -> Result<ConstraintMap, RveError> {
    let n = patch.n_basis();
    for d in 0..3 {
        // Slave indices {n-2, n-1} may not collide with tie targets {0, 1}.
        if n[d] < 4 {
            return Err(RveError::Config(
                "periodic ties need at least 4 basis functions per direction".into(),
            ));
        }
    }

    // Per-direction substitution: slave index -> masters with coefficients.
    let mut subs: [Vec<Option<Vec<(usize, f64)>>>; 3] = Default::default();
    for d in 0..3 {
        let kv = &patch.kv[d];
        let nd = n[d];
        let mut s: Vec<Option<Vec<(usize, f64)>>> = vec![None; nd];
        s[nd - 1] = Some(vec![(0, 1.0)]);
        // Matching end-point first derivatives with the value tie in
        // place gives q_{n-2} = (1+c) q_0 - c q_1, c the ratio of the
        // end-point derivative coefficients.
        let c = kv.deriv_coeff_start() / kv.deriv_coeff_end();
        s[nd - 2] = Some(vec![(0, 1.0 + c), (1, -c)]);
        subs[d] = s;
    }

    let pinned: Vec<[usize; 3]> = vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]];
    let is_pinned = |ijk: [usize; 3]| pinned.contains(&ijk);

    // First pass: reduced numbering of the free control points.
    let n_cp = patch.n_ctrl();
    let mut red = vec![usize::MAX; n_cp];
    let mut n_free = 0;
    for a in 0..n_cp {
        let ijk = patch.ctrl_ijk(a);
        let slave = (0..3).any(|d| subs[d][ijk[d]].is_some());
        if !slave && !is_pinned(ijk) {
            red[a] = n_free;
            n_free += 1;
        }
    }

    // Second pass: expand the tensor-product substitution.
    let mut rules = Vec::with_capacity(n_cp);
    for a in 0..n_cp {
        let ijk = patch.ctrl_ijk(a);
        if red[a] != usize::MAX {
            rules.push(CpRule::Free(red[a]));
            continue;
        }
        if is_pinned(ijk) {
            rules.push(CpRule::Tied(Vec::new()));
            continue;
        }
        let expand = |d: usize| -> Vec<(usize, f64)> {
            match &subs[d][ijk[d]] {
                Some(list) => list.clone(),
                None => vec![(ijk[d], 1.0)],
            }
        };
        let (e0, e1, e2) = (expand(0), expand(1), expand(2));
        let mut terms = Vec::new();
        for &(i0, c0) in &e0 {
            for &(i1, c1) in &e1 {
                for &(i2, c2) in &e2 {
                    let tgt = [i0, i1, i2];
                    if is_pinned(tgt) {
                        continue;
                    }
                    let t = patch.ctrl_index(tgt);
                    debug_assert!(red[t] != usize::MAX, "tie target must be free");
                    terms.push((red[t], c0 * c1 * c2));
                }
            }
        }
        rules.push(CpRule::Tied(terms));
    }

    Ok(ConstraintMap {
        rules,
        n_free,
        offsets: Vec::new(),
        fit_residual: 0.0,
    })
}

/// Build the prescribed-boundary map. The two outer control layers are
/// fixed to a least-squares fit of the quadratic boundary map over face
/// Gauss points: position rows and normal-derivative rows on every face,
/// independent of the material, so the boundary clamps both the
/// fluctuation and its gradient. The stored offsets are fluctuations,
/// i.e. the fitted total coefficients minus the exact polynomial
/// coefficients of the quadratic map.
fn dirichlet_map(patch: &Patch, origin: f64, edge: f64) -> Result<ConstraintMap, RveError> {
    let n = patch.n_basis();
    let layers = 2;
    for d in 0..3 {
        if n[d] < 2 * layers {
            return Err(RveError::Config(
                "not enough basis functions for the prescribed boundary layers".into(),
            ));
        }
    }
    let n_cp = patch.n_ctrl();
    let constrained: Vec<bool> = (0..n_cp)
        .map(|a| {
            let ijk = patch.ctrl_ijk(a);
            (0..3).any(|d| ijk[d] < layers || ijk[d] >= n[d] - layers)
        })
        .collect();

    // Reduced numbering for the free interior and fit numbering for the
    // constrained boundary set.
    let mut red = vec![usize::MAX; n_cp];
    let mut sidx = vec![usize::MAX; n_cp];
    let mut n_free = 0;
    let mut n_s = 0;
    for a in 0..n_cp {
        if constrained[a] {
            sidx[a] = n_s;
            n_s += 1;
        } else {
            red[a] = n_free;
            n_free += 1;
        }
    }

    // Normal equations of the weighted fit. Derivative rows are scaled by
    // the element size so both row families carry comparable weight.
    let ng = patch.degree() + 1;
    let h_scale = edge / patch.kv[0].n_elements() as f64;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![vec![0.0; n_s]; DRIVE_DIM];
    let mut bnorm2 = [0.0; DRIVE_DIM];
    let mut entries: Vec<(usize, f64)> = Vec::new();

    let add_row = |entries: &[(usize, f64)],
                       w: f64,
                       triplets: &mut Vec<(usize, usize, f64)>,
                       rhs: &mut [Vec<f64>],
                       bnorm2: &mut [f64; DRIVE_DIM],
                       targets: &[(usize, f64)]| {
        for (ii, &(si, vi)) in entries.iter().enumerate() {
            for &(sj, vj) in &entries[ii..] {
                triplets.push((si, sj, w * vi * vj));
            }
        }
        for &(col, tgt) in targets {
            for &(si, vi) in entries {
                rhs[col][si] += w * vi * tgt;
            }
            bnorm2[col] += w * tgt * tgt;
        }
    };

    for face in Face::ALL {
        let quad = patch.face_quadrature(face, ng, DerivOrder::One)?;
        for fp in &quad {
            let ev = &fp.eval;
            let x = ev.x;
            let nrm = fp.normal;
            let w = fp.da;

            // Position row: the face value involves only the outermost
            // layer, which is constrained by construction.
            entries.clear();
            for (loc, &ga) in ev.dofs.iter().enumerate() {
                let v = ev.val[loc];
                if v.abs() > 1e-13 {
                    debug_assert!(constrained[ga], "face value from unconstrained dof");
                    entries.push((sidx[ga], v));
                }
            }
            let mut targets = Vec::with_capacity(DRIVE_DIM);
            for col in 0..DRIVE_DIM {
                let tgt = if col < 9 {
                    x[col % 3]
                } else {
                    let c = col - 9;
                    0.5 * x[(c / 3) % 3] * x[c % 3]
                };
                targets.push((col, tgt));
            }
            add_row(&entries, w, &mut triplets, &mut rhs, &mut bnorm2, &targets);

            // Normal-derivative row: prescribes (F̄ + 𝔉̄X) N on the face.
            entries.clear();
            for (loc, &ga) in ev.dofs.iter().enumerate() {
                let g = ev.grad[loc];
                let gn = (g[0] * nrm[0] + g[1] * nrm[1] + g[2] * nrm[2]) * h_scale;
                if gn.abs() > 1e-13 {
                    debug_assert!(constrained[ga], "face gradient from unconstrained dof");
                    entries.push((sidx[ga], gn));
                }
            }
            let mut targets = Vec::with_capacity(DRIVE_DIM);
            for col in 0..DRIVE_DIM {
                let tgt = if col < 9 {
                    nrm[col % 3] * h_scale
                } else {
                    let c = col - 9;
                    nrm[(c / 3) % 3] * x[c % 3] * h_scale
                };
                targets.push((col, tgt));
            }
            add_row(&entries, w, &mut triplets, &mut rhs, &mut bnorm2, &targets);
        }
    }

    let ata = SymCsc::from_triplets(n_s, &triplets);
    let factor = LdlFactor::factor(&ata, true)?;
    let fits = factor.solve_many(&rhs)?;

    // Fit quality: ||Ax - b||² = xᵀAᵀAx - 2 xᵀ(Aᵀb) + ||b||².
    let mut fit_residual = 0.0f64;
    for col in 0..DRIVE_DIM {
        let ax = ata.mul_vec(&fits[col])?;
        let xtax: f64 = fits[col].iter().zip(&ax).map(|(a, b)| a * b).sum();
        let xtb: f64 = fits[col].iter().zip(&rhs[col]).map(|(a, b)| a * b).sum();
        let r2 = (xtax - 2.0 * xtb + bnorm2[col]).max(0.0);
        fit_residual = fit_residual.max((r2 / bnorm2[col].max(1e-300)).sqrt());
    }

    // Offsets = fit - exact polynomial coefficients, stored per component.
    let tables = poly_tables(patch, origin, edge);
    let mut rules = Vec::with_capacity(n_cp);
    let mut offsets = Vec::new();
    for a in 0..n_cp {
        if !constrained[a] {
            rules.push(CpRule::Free(red[a]));
            continue;
        }
        let ijk = patch.ctrl_ijk(a);
        let mut g = [[0.0; DRIVE_DIM]; 3];
        for (col, fit) in fits.iter().enumerate() {
            let comp = drive_component(col);
            g[comp][col] = fit[sidx[a]] - ppoly_unit(&tables, ijk, col);
        }
        rules.push(CpRule::Fixed(offsets.len()));
        offsets.push(g);
    }

    Ok(ConstraintMap {
        rules,
        n_free,
        offsets,
        fit_residual,
    })
}

/// Cached element data: quadrature and the constraint expansion of the
/// local control points.
struct ElemData {
    quad: Vec<QuadPoint>,
    /// Per local control point: (reduced control point, coefficient) terms.
    targets: Vec<Vec<(usize, f64)>>,
    /// Per local control point: offset row when the point is drive-fixed.
    fixed: Vec<Option<usize>>,
}

pub struct RveProblem {
    pub patch: Patch,
    /// One material per element, in [`Patch::elements`] order.
    pub materials: Vec<Material>,
    pub cmap: ConstraintMap,
    pub volume_mm3: f64,
    pub config: RveConfig,
    elems: Vec<ElemData>,
    pattern: SymCsc,
}

/// Assembled reduced operators at a linearisation point.
pub struct Assembled {
    pub k: SymCsc,
    /// Residual G_A = ∫ (∇R^A · P + ∇∇R^A : 𝔓) dV, reduced.
    pub r: Vec<f64>,
    /// 36 drive-derivative columns ∂G/∂d (including the lifting through
    /// drive-fixed coefficients); `None` unless requested.
    pub drive_cols: Option<Vec<Vec<f64>>>,
}

/// Factorised state kept from the terminal Newton step.
pub struct SolvedOperators {
    pub factor: LdlFactor,
    pub drive_cols: Vec<Vec<f64>>,
}

impl SolvedOperators {
    /// Fluctuation sensitivity S = dq̃_f/dd = -K⁻¹ ∂G/∂d, 36 columns.
    pub fn sensitivity(&self) -> Result<Vec<Vec<f64>>, SparseError> {
        let mut cols = self.factor.solve_many(&self.drive_cols)?;
        for col in cols.iter_mut() {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        Ok(cols)
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOpts {
    /// Absolute tolerance on the 2-norm of the reduced residual (N).
    pub atol: f64,
    /// Relative drop from the initial residual that also counts as
    /// converged (0 disables).
    pub rtol: f64,
    pub max_iter: usize,
    pub line_search: bool,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            atol: 1e-10,
            rtol: 0.0,
            max_iter: 30,
            line_search: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RveSolution {
    pub q_free: Vec<f64>,
    pub drive: MacroDrive,
    pub residual_history: Vec<f64>,
    /// Number of Newton updates taken (0 when the initial state already
    /// satisfies the tolerance).
    pub iterations: usize,
}

impl RveProblem {
    pub fn new(config: RveConfig) -> Result<Self, RveError> {
        config.validate()?;
        let l = config.edge_mm;
        let nel = config.elements;
        let patch = Patch::unit_box(
            config.degree,
            [nel; 3],
            [-0.5 * l; 3],
            [l; 3],
        )?;
        let cmap = match config.bc {
            BcKind::Periodic => periodic_map(&patch)?,
            BcKind::Dirichlet => dirichlet_map(&patch, -0.5 * l, l)?,
        };

        // Per-element material assignment: an element is part of the void
        // when its box overlaps an arm with nonempty interior.
        let elements = patch.elements();
        let materials: Vec<Material> = elements
            .iter()
            .map(|&e| {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for d in 0..3 {
                    let span = patch.kv[d].element_spans()[e[d]];
                    let (a, b) = patch.kv[d].span_range(span);
                    lo[d] = -0.5 * l + l * a;
                    hi[d] = -0.5 * l + l * b;
                }
                match &config.layout {
                    MaterialLayout::Uniform(m) => m.clone(),
                    MaterialLayout::VoidCross { bulk, void_scale } => {
                        let wide = l / 8.0;
                        let slim = l / 12.0;
                        let overlaps = |d: usize, half: f64| hi[d] > -half && lo[d] < half;
                        let in_arm = |a: usize, b: usize, c: usize| {
                            overlaps(a, wide) && overlaps(b, slim) && overlaps(c, slim)
                        };
                        if in_arm(0, 1, 2) || in_arm(1, 0, 2) || in_arm(2, 0, 1) {
                            bulk.scaled(*void_scale)
                        } else {
                            bulk.clone()
                        }
                    }
                }
            })
            .collect();

        // Cached quadrature and constraint expansions.
        let order = DerivOrder::Two;
        let elems: Vec<ElemData> = elements
            .par_iter()
            .map(|&e| {
                let quad = patch.element_quadrature(e, config.quad, order)?;
                let dofs = &quad[0].eval.dofs;
                let mut targets = Vec::with_capacity(dofs.len());
                let mut fixed = Vec::with_capacity(dofs.len());
                for &a in dofs {
                    match &cmap.rules[a] {
                        CpRule::Free(r) => {
                            targets.push(vec![(*r, 1.0)]);
                            fixed.push(None);
                        }
                        CpRule::Tied(terms) => {
                            targets.push(terms.clone());
                            fixed.push(None);
                        }
                        CpRule::Fixed(row) => {
                            targets.push(Vec::new());
                            fixed.push(Some(*row));
                        }
                    }
                }
                Ok(ElemData { quad, targets, fixed })
            })
            .collect::<Result<_, RveError>>()?;

        // Reduced stiffness pattern.
        let n_dof = cmap.n_dof();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for ed in &elems {
            let mut reds: Vec<usize> = ed
                .targets
                .iter()
                .flat_map(|t| t.iter().map(|&(r, _)| r))
                .collect();
            reds.sort_unstable();
            reds.dedup();
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
        let pattern = SymCsc::pattern_from_pairs(n_dof, pairs.into_iter());

        let volume = l * l * l;
        Ok(RveProblem {
            patch,
            materials,
            cmap,
            volume_mm3: volume,
            config,
            elems,
            pattern,
        })
    }

    pub fn n_dof(&self) -> usize {
        self.cmap.n_dof()
    }

    pub(crate) fn element_data(&self, e: usize) -> (&[QuadPoint], &Material) {
        (&self.elems[e].quad, &self.materials[e])
    }

    pub(crate) fn n_elements(&self) -> usize {
        self.elems.len()
    }

    /// Fluctuation coefficients of every control point for a reduced state.
    pub fn compose(&self, q_free: &[f64], drive: &MacroDrive) -> Vec<[f64; 3]> {
        self.cmap.compose(q_free, &drive.coeffs())
    }

    /// Deformation fields at a quadrature point for composed coefficients.
    pub(crate) fn fields_at(
        eval: &crate::spline::PointEval,
        q_all: &[[f64; 3]],
        drive: &MacroDrive,
    ) -> (Tensor, Tensor) {
        let fd = drive.f.data();
        let gd = drive.g.data();
        let x = eval.x;
        let mut f = [0.0; 9];
        let mut g = [0.0; 27];
        for i in 0..3 {
            for j in 0..3 {
                let mut v = fd[3 * i + j];
                for k in 0..3 {
                    v += gd[9 * i + 3 * j + k] * x[k];
                }
                f[3 * i + j] = v;
            }
        }
        g.copy_from_slice(gd);
        for (loc, &a) in eval.dofs.iter().enumerate() {
            let q = q_all[a];
            let gr = eval.grad[loc];
            let he = &eval.hess[loc];
            for i in 0..3 {
                for j in 0..3 {
                    f[3 * i + j] += q[i] * gr[j];
                    for k in 0..3 {
                        g[9 * i + 3 * j + k] += q[i] * he[j][k];
                    }
                }
            }
        }
        (
            TensorN::from_data(2, f.to_vec()).unwrap(),
            TensorN::from_data(3, g.to_vec()).unwrap(),
        )
    }

    /// Reduced residual only (cheaper jets than the full assembly).
    pub fn residual(&self, q_free: &[f64], drive: &MacroDrive) -> Result<Vec<f64>, RveError> {
        let q_all = self.compose(q_free, drive);
        let contribs: Vec<Vec<f64>> = (0..self.elems.len())
            .into_par_iter()
            .map(|e| {
                let ed = &self.elems[e];
                let mat = &self.materials[e];
                let second = mat.is_second_gradient();
                let nloc = ed.targets.len();
                let mut r_e = vec![0.0; 3 * nloc];
                for qp in &ed.quad {
                    let (f, g) = Self::fields_at(&qp.eval, &q_all, drive);
                    let resp = mat.stress(&f, &g)?;
                    let p = resp.p.data();
                    let pp = resp.pp.data();
                    for a in 0..nloc {
                        let gr = qp.eval.grad[a];
                        let he = &qp.eval.hess[a];
                        for i in 0..3 {
                            let mut s =
                                gr[0] * p[3 * i] + gr[1] * p[3 * i + 1] + gr[2] * p[3 * i + 2];
                            if second {
                                for j in 0..3 {
                                    for k in 0..3 {
                                        s += he[j][k] * pp[9 * i + 3 * j + k];
                                    }
                                }
                            }
                            r_e[3 * a + i] += qp.w * s;
                        }
                    }
                }
                Ok(r_e)
            })
            .collect::<Result<_, RveError>>()?;

        let mut r = vec![0.0; self.n_dof()];
        for (e, r_e) in contribs.iter().enumerate() {
            let ed = &self.elems[e];
            for (a, terms) in ed.targets.iter().enumerate() {
                for &(ra, ca) in terms {
                    for i in 0..3 {
                        r[3 * ra + i] += ca * r_e[3 * a + i];
                    }
                }
            }
        }
        Ok(r)
    }

    /// Material of the element containing a physical point; points on
    /// element boundaries resolve to the nearest interior element, which is
    /// enough for face quadrature (tangential Gauss points are interior).
    pub(crate) fn material_at(&self, x: [f64; 3]) -> &Material {
        let l = self.config.edge_mm;
        let nel = self.config.elements;
        let h = l / nel as f64;
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let t = ((x[d] + 0.5 * l) / h).floor() as isize;
            idx[d] = t.clamp(0, nel as isize - 1) as usize;
        }
        &self.materials[idx[0] + nel * (idx[1] + nel * idx[2])]
    }

    /// Scatter per-element stress motion maps through the constraint
    /// targets into the reduced maps, and fold the drive-fixed coefficient
    /// motion into the direct drive derivative.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn reduce_motion_maps(
        &self,
        e: usize,
        n_e: &[f64],
        nn_e: &[f64],
        n_red: &mut [f64],
        nn_red: &mut [f64],
        lift_p: &mut [f64],
        lift_pp: &mut [f64],
    ) {
        let ed = &self.elems[e];
        let nloc = ed.targets.len();
        let n3 = 3 * nloc;
        let n_dof = self.n_dof();
        for b in 0..nloc {
            for &(rb, cb) in &ed.targets[b] {
                for s in 0..3 {
                    let colb = 3 * b + s;
                    let dof = 3 * rb + s;
                    for rf in 0..9 {
                        n_red[rf * n_dof + dof] += cb * n_e[rf * n3 + colb];
                    }
                    for rg in 0..27 {
                        nn_red[rg * n_dof + dof] += cb * nn_e[rg * n3 + colb];
                    }
                }
            }
            if let Some(rowg) = ed.fixed[b] {
                let g = &self.cmap.offsets[rowg];
                for s in 0..3 {
                    let colb = 3 * b + s;
                    for col in 0..DRIVE_DIM {
                        let gv = g[s][col];
                        if gv != 0.0 {
                            for rf in 0..9 {
                                lift_p[rf * DRIVE_DIM + col] += n_e[rf * n3 + colb] * gv;
                            }
                            for rg in 0..27 {
                                lift_pp[rg * DRIVE_DIM + col] += nn_e[rg * n3 + colb] * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Serial assembly of the reduced stress motion maps, for the
    /// transpose-identity checks against the drive columns.
    #[cfg(test)]
    pub(crate) fn assemble_motion_maps_for_test(
        &self,
        q_free: &[f64],
        drive: &MacroDrive,
    ) -> Result<(Vec<f64>, Vec<f64>), RveError> {
        let n_dof = self.n_dof();
        let q_all = self.compose(q_free, drive);
        let mut n_red = vec![0.0; 9 * n_dof];
        let mut nn_red = vec![0.0; 27 * n_dof];
        let mut lift_p = vec![0.0; 9 * DRIVE_DIM];
        let mut lift_pp = vec![0.0; 27 * DRIVE_DIM];
        for e in 0..self.elems.len() {
            let ed = &self.elems[e];
            let mat = &self.materials[e];
            let second = mat.is_second_gradient();
            let nloc = ed.targets.len();
            let n3 = 3 * nloc;
            let mut v1 = [0.0; 81];
            let mut v2 = vec![0.0; 9 * 27];
            let mut v3 = vec![0.0; 27 * 9];
            let mut v4 = vec![0.0; 27 * 27];
            let mut n_e = vec![0.0; 9 * n3];
            let mut nn_e = vec![0.0; 27 * n3];
            for qp in &ed.quad {
                let (f, g) = Self::fields_at(&qp.eval, &q_all, drive);
                let resp = mat.tangent(&f, &g)?;
                accumulate_condense_qp(
                    qp.w,
                    qp.eval.x,
                    &qp.eval.grad,
                    &qp.eval.hess,
                    &resp,
                    second,
                    &mut v1,
                    &mut v2,
                    &mut v3,
                    &mut v4,
                    &mut n_e,
                    &mut nn_e,
                );
            }
            self.reduce_motion_maps(e, &n_e, &nn_e, &mut n_red, &mut nn_red, &mut lift_p, &mut lift_pp);
        }
        Ok((n_red, nn_red))
    }

    /// Full assembly of the reduced tangent, residual and (optionally) the
    /// 36 drive-derivative columns at the given state.
    pub fn assemble(
        &self,
        q_free: &[f64],
        drive: &MacroDrive,
        with_drive: bool,
    ) -> Result<Assembled, RveError> {
        let q_all = self.compose(q_free, drive);
        struct ElemOut {
            r_e: Vec<f64>,
            k_e: Vec<f64>,
            l_e: Vec<f64>,
            m_e: Vec<f64>,
        }
        let outs: Vec<ElemOut> = (0..self.elems.len())
            .into_par_iter()
            .map(|e| {
                let ed = &self.elems[e];
                let mat = &self.materials[e];
                let second = mat.is_second_gradient();
                let nloc = ed.targets.len();
                let n3 = 3 * nloc;
                let mut out = ElemOut {
                    r_e: vec![0.0; n3],
                    k_e: vec![0.0; n3 * n3],
                    l_e: vec![0.0; if with_drive { n3 * 9 } else { 0 }],
                    m_e: vec![0.0; if with_drive { n3 * 27 } else { 0 }],
                };
                for qp in &ed.quad {
                    let (f, g) = Self::fields_at(&qp.eval, &q_all, drive);
                    let resp = mat.tangent(&f, &g)?;
                    accumulate_qp(
                        qp.w,
                        qp.eval.x,
                        &qp.eval.grad,
                        &qp.eval.hess,
                        &resp,
                        second,
                        &mut out.r_e,
                        &mut out.k_e,
                        if with_drive {
                            Some((&mut out.l_e, &mut out.m_e))
                        } else {
                            None
                        },
                    );
                }
                Ok(out)
            })
            .collect::<Result<_, RveError>>()?;

        // Deterministic serial scatter in element order.
        let n_dof = self.n_dof();
        let mut k = self.pattern.clone();
        let mut r = vec![0.0; n_dof];
        let mut drive_cols = if with_drive {
            Some(vec![vec![0.0; n_dof]; DRIVE_DIM])
        } else {
            None
        };
        for (e, out) in outs.iter().enumerate() {
            let ed = &self.elems[e];
            let nloc = ed.targets.len();
            let n3 = 3 * nloc;
            for a in 0..nloc {
                for &(ra, ca) in &ed.targets[a] {
                    for i in 0..3 {
                        let row = 3 * ra + i;
                        let la = 3 * a + i;
                        r[row] += ca * out.r_e[la];
                        if let Some(dc) = drive_cols.as_mut() {
                            for col in 0..9 {
                                dc[col][row] += ca * out.l_e[la * 9 + col];
                            }
                            for col in 0..27 {
                                dc[9 + col][row] += ca * out.m_e[la * 27 + col];
                            }
                        }
                        for b in 0..nloc {
                            for &(rb, cb) in &ed.targets[b] {
                                for s in 0..3 {
                                    let colg = 3 * rb + s;
                                    if row <= colg {
                                        k.add(row, colg, ca * cb * out.k_e[la * n3 + 3 * b + s])?;
                                    }
                                }
                            }
                            if let (Some(dc), Some(rowg)) =
                                (drive_cols.as_mut(), ed.fixed[b])
                            {
                                // Lifting: drive-fixed coefficients move
                                // affinely with the drive, so the stiffness
                                // column feeds the drive derivative.
                                let g = &self.cmap.offsets[rowg];
                                for s in 0..3 {
                                    let kv = ca * out.k_e[la * n3 + 3 * b + s];
                                    if kv != 0.0 {
                                        for col in 0..DRIVE_DIM {
                                            dc[col][row] += kv * g[s][col];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Assembled { k, r, drive_cols })
    }

    /// Newton solve for the fluctuation state under `drive`, starting from
    /// `init` when given. Returns the solution together with the factorised
    /// terminal operators.
    pub fn solve(
        &self,
        drive: &MacroDrive,
        init: Option<&[f64]>,
        opts: &NewtonOpts,
    ) -> Result<(RveSolution, SolvedOperators), RveError> {
        let n = self.n_dof();
        let mut q = match init {
            Some(v) if v.len() == n => v.to_vec(),
            Some(v) => return Err(RveError::InitLength(v.len(), n)),
            None => vec![0.0; n],
        };
        let mut history = Vec::new();
        let mut iterations = 0;
        loop {
            let asm = self.assemble(&q, drive, true)?;
            let rn = norm2(&asm.r);
            history.push(rn);
            let converged = rn <= opts.atol
                || (opts.rtol > 0.0 && rn <= opts.rtol * history[0]);
            let factor = LdlFactor::factor(&asm.k, true)?;
            if converged {
                return Ok((
                    RveSolution {
                        q_free: q,
                        drive: drive.clone(),
                        residual_history: history,
                        iterations,
                    },
                    SolvedOperators {
                        factor,
                        drive_cols: asm.drive_cols.unwrap(),
                    },
                ));
            }
            if iterations >= opts.max_iter {
                return Err(RveError::NoConvergence(opts.max_iter));
            }
            let neg: Vec<f64> = asm.r.iter().map(|v| -v).collect();
            let dq = factor.solve(&neg)?;

            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = q
                    .iter()
                    .zip(&dq)
                    .map(|(qi, di)| qi + alpha * di)
                    .collect();
                if !opts.line_search {
                    q = trial;
                    break;
                }
                let rt = norm2(&self.residual(&trial, drive)?);
                if rt <= rn * (1.0 - 1e-4 * alpha) || alpha < 1.0 / 64.0 {
                    q = trial;
                    break;
                }
                alpha *= 0.5;
            }
            iterations += 1;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Accumulate one quadrature point into the local residual, stiffness and
/// (optionally) drive-derivative blocks. `second` skips the hyperstress
/// couplings for first-gradient materials.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_qp(
    w: f64,
    x: [f64; 3],
    grads: &[[f64; 3]],
    hesses: &[[[f64; 3]; 3]],
    resp: &MaterialResponse,
    second: bool,
    r_e: &mut [f64],
    k_e: &mut [f64],
    lm_e: Option<(&mut [f64], &mut [f64])>,
) {
    let nloc = grads.len();
    let n3 = 3 * nloc;
    let p = resp.p.data();
    let pp = resp.pp.data();
    let cc = resp.cc.data();
    let dd = resp.dd.data();
    let ee = resp.ee.data();
    let gg = resp.gg.data();

    for a in 0..nloc {
        let ga = grads[a];
        let ha = &hesses[a];
        for i in 0..3 {
            let mut s = ga[0] * p[3 * i] + ga[1] * p[3 * i + 1] + ga[2] * p[3 * i + 2];
            if second {
                for j in 0..3 {
                    for k in 0..3 {
                        s += ha[j][k] * pp[9 * i + 3 * j + k];
                    }
                }
            }
            r_e[3 * a + i] += w * s;
        }
    }

    for b in 0..nloc {
        let gb = grads[b];
        let hb = &hesses[b];
        for s in 0..3 {
            // t1[iJ] = ℂ_{iJsT} ∇R^B_T + 𝔇_{iJsTU} ∇∇R^B_{TU}
            // t2[iJK] = 𝔈_{iJKsT} ∇R^B_T + 𝔾_{iJKsTU} ∇∇R^B_{TU}
            let mut t1 = [0.0; 9];
            let mut t2 = [0.0; 27];
            for i in 0..3 {
                for j in 0..3 {
                    let base = ((i * 3 + j) * 3 + s) * 3;
                    let mut v = cc[base] * gb[0] + cc[base + 1] * gb[1] + cc[base + 2] * gb[2];
                    if second {
                        let db = base * 3;
                        for t in 0..3 {
                            for u in 0..3 {
                                v += dd[db + 3 * t + u] * hb[t][u];
                            }
                        }
                    }
                    t1[3 * i + j] = v;
                }
            }
            if second {
                for i in 0..3 {
                    for j in 0..3 {
                        for kq in 0..3 {
                            let eb = (((i * 3 + j) * 3 + kq) * 3 + s) * 3;
                            let mut v =
                                ee[eb] * gb[0] + ee[eb + 1] * gb[1] + ee[eb + 2] * gb[2];
                            let gbse = eb * 3;
                            for t in 0..3 {
                                for u in 0..3 {
                                    v += gg[gbse + 3 * t + u] * hb[t][u];
                                }
                            }
                            t2[9 * i + 3 * j + kq] = v;
                        }
                    }
                }
            }
            for a in 0..nloc {
                let ga = grads[a];
                let ha = &hesses[a];
                for i in 0..3 {
                    let mut v =
                        ga[0] * t1[3 * i] + ga[1] * t1[3 * i + 1] + ga[2] * t1[3 * i + 2];
                    if second {
                        for j in 0..3 {
                            for kq in 0..3 {
                                v += ha[j][kq] * t2[9 * i + 3 * j + kq];
                            }
                        }
                    }
                    k_e[(3 * a + i) * n3 + 3 * b + s] += w * v;
                }
            }
        }
    }

    if let Some((l_e, m_e)) = lm_e {
        // ∂G/∂F̄ columns: ∫ ∇R ℂ + ∇∇R 𝔈.
        for col in 0..9 {
            let (s, t) = (col / 3, col % 3);
            for a in 0..nloc {
                let ga = grads[a];
                let ha = &hesses[a];
                for i in 0..3 {
                    let mut v = 0.0;
                    for j in 0..3 {
                        v += ga[j] * cc[((i * 3 + j) * 3 + s) * 3 + t];
                    }
                    if second {
                        for j in 0..3 {
                            for kq in 0..3 {
                                v += ha[j][kq] * ee[(((i * 3 + j) * 3 + kq) * 3 + s) * 3 + t];
                            }
                        }
                    }
                    l_e[(3 * a + i) * 9 + col] += w * v;
                }
            }
        }
        // ∂G/∂𝔉̄ columns: the direct 𝔇/𝔾 couplings plus the X-moment of the
        // F̄ couplings, since F(X) carries 𝔉̄·X.
        for col in 0..27 {
            let s = col / 9;
            let t = (col / 3) % 3;
            let u = col % 3;
            for a in 0..nloc {
                let ga = grads[a];
                let ha = &hesses[a];
                for i in 0..3 {
                    let mut v = 0.0;
                    for j in 0..3 {
                        let cb = ((i * 3 + j) * 3 + s) * 3 + t;
                        let mut term = cc[cb] * x[u];
                        if second {
                            term += dd[cb * 3 + u];
                        }
                        v += ga[j] * term;
                    }
                    if second {
                        for j in 0..3 {
                            for kq in 0..3 {
                                let eb = (((i * 3 + j) * 3 + kq) * 3 + s) * 3 + t;
                                v += ha[j][kq] * (ee[eb] * x[u] + gg[eb * 3 + u]);
                            }
                        }
                    }
                    m_e[(3 * a + i) * 27 + col] += w * v;
                }
            }
        }
    }
}

/// Per-quadrature-point kernel for the condensation pass: the direct drive
/// blocks of the averaged stress derivatives,
///
/// ```text
/// v1[iJ, sT]   = ℂ                       v2[iJ, sTU]  = ℂ x_U + 𝔇
/// v3[iJK, sT]  = ℂ x_K + 𝔈               v4[iJK, sTU] = ℂ x_K x_U + 𝔇 x_K + 𝔈 x_U + 𝔾
/// ```
///
/// together with the stress motion maps per local coefficient (b, s):
/// N̂[iJ] = ℂ_{iJsT}∇R^b_T + 𝔇_{iJsTU}∇∇R^b_{TU} and 𝔑[iJK] = N̂[iJ] x_K +
/// 𝔈_{iJKsT}∇R^b_T + 𝔾_{iJKsTU}∇∇R^b_{TU}. Quadrature weights are raw
/// volume integrals; the caller divides by V once at the end.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_condense_qp(
    w: f64,
    x: [f64; 3],
    grads: &[[f64; 3]],
    hesses: &[[[f64; 3]; 3]],
    resp: &MaterialResponse,
    second: bool,
    v1: &mut [f64; 81],
    v2: &mut [f64],
    v3: &mut [f64],
    v4: &mut [f64],
    n_e: &mut [f64],
    nn_e: &mut [f64],
) {
    let nloc = grads.len();
    let n3 = 3 * nloc;
    let cc = resp.cc.data();
    let dd = resp.dd.data();
    let ee = resp.ee.data();
    let gg = resp.gg.data();

    for i in 0..3 {
        for j in 0..3 {
            let rf = 3 * i + j;
            for s in 0..3 {
                for t in 0..3 {
                    let cf = 3 * s + t;
                    let base_c = ((i * 3 + j) * 3 + s) * 3 + t;
                    let c = cc[base_c];
                    v1[rf * 9 + cf] += w * c;
                    for u in 0..3 {
                        let d = if second { dd[base_c * 3 + u] } else { 0.0 };
                        v2[rf * 27 + 3 * cf + u] += w * (c * x[u] + d);
                    }
                    for k in 0..3 {
                        let rg = 9 * i + 3 * j + k;
                        let base_e = (((i * 3 + j) * 3 + k) * 3 + s) * 3 + t;
                        let e = if second { ee[base_e] } else { 0.0 };
                        v3[rg * 9 + cf] += w * (c * x[k] + e);
                        for u in 0..3 {
                            let (d, g) = if second {
                                (dd[base_c * 3 + u], gg[base_e * 3 + u])
                            } else {
                                (0.0, 0.0)
                            };
                            v4[rg * 27 + 3 * cf + u] +=
                                w * (c * x[k] * x[u] + d * x[k] + e * x[u] + g);
                        }
                    }
                }
            }
        }
    }

    for b in 0..nloc {
        let gb = grads[b];
        let hb = &hesses[b];
        for s in 0..3 {
            let colb = 3 * b + s;
            for i in 0..3 {
                for j in 0..3 {
                    let base = ((i * 3 + j) * 3 + s) * 3;
                    let mut t1 =
                        cc[base] * gb[0] + cc[base + 1] * gb[1] + cc[base + 2] * gb[2];
                    if second {
                        let db = base * 3;
                        for t in 0..3 {
                            for u in 0..3 {
                                t1 += dd[db + 3 * t + u] * hb[t][u];
                            }
                        }
                    }
                    n_e[(3 * i + j) * n3 + colb] += w * t1;
                    for k in 0..3 {
                        let mut t2 = 0.0;
                        if second {
                            let eb = (((i * 3 + j) * 3 + k) * 3 + s) * 3;
                            t2 = ee[eb] * gb[0] + ee[eb + 1] * gb[1] + ee[eb + 2] * gb[2];
                            let gbase = eb * 3;
                            for t in 0..3 {
                                for u in 0..3 {
                                    t2 += gg[gbase + 3 * t + u] * hb[t][u];
                                }
                            }
                        }
                        nn_e[(9 * i + 3 * j + k) * n3 + colb] += w * (t1 * x[k] + t2);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{FiberReinforced, MooneyRivlin};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fiber() -> MaterialLayout {
        MaterialLayout::Uniform(Material::Fiber(FiberReinforced::benchmark()))
    }

    fn mr() -> MaterialLayout {
        MaterialLayout::Uniform(Material::MooneyRivlin(MooneyRivlin::benchmark()))
    }

    fn random_symmetric_drive(rng: &mut ChaCha8Rng, scale: f64) -> MacroDrive {
        let mut f = Tensor::identity2();
        for i in 0..3 {
            for j in 0..3 {
                f.set(&[i, j], f.get(&[i, j]) + scale * rng.random_range(-1.0..1.0));
            }
        }
        let mut g = TensorN::zeros(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in j..3 {
                    let v = 10.0 * scale * rng.random_range(-1.0..1.0);
                    g.set(&[i, j, k], v);
                    g.set(&[i, k, j], v);
                }
            }
        }
        MacroDrive { f, g }
    }

    #[test]
    fn drive_roundtrip() {
        let d = MacroDrive::benchmark();
        let c = d.coeffs();
        let d2 = MacroDrive::from_coeffs(&c);
        assert_eq!(d, d2);
        assert_eq!(c[1], 0.500);
        assert_eq!(c[9], -0.033);
    }

    #[test]
    fn periodic_map_structure() {
        let cfg = RveConfig::standard(4, BcKind::Periodic, fiber());
        let prob = RveProblem::new(cfg).unwrap();
        let n = prob.patch.n_basis()[0];
        assert_eq!(n, 6);
        // Masters 0..n-2 per direction minus the four pinned points.
        assert_eq!(prob.cmap.n_free, (n - 2).pow(3) - 4);

        // Uniform knots: derivative coefficient ratio is one.
        let idx = prob.patch.ctrl_index([n - 2, 3, 2]);
        match &prob.cmap.rules[idx] {
            CpRule::Tied(terms) => {
                assert_eq!(terms.len(), 2);
                assert!((terms[0].1 - 2.0).abs() < 1e-14);
                assert!((terms[1].1 + 1.0).abs() < 1e-14);
            }
            other => panic!("expected gradient tie, got {other:?}"),
        }
        let corner = prob.patch.ctrl_index([n - 1, n - 1, n - 1]);
        match &prob.cmap.rules[corner] {
            CpRule::Tied(terms) => {
                // Ties to the pinned origin only, which is dropped.
                assert!(terms.is_empty());
            }
            other => panic!("expected corner tie, got {other:?}"),
        }
        let pinned = prob.patch.ctrl_index([0, 0, 1]);
        assert_eq!(prob.cmap.rules[pinned], CpRule::Tied(Vec::new()));
    }

    #[test]
    fn constraint_maps_do_not_depend_on_the_material() {
        // The admissible fluctuation space is a property of the cell, not
        // of the energy living on it: a first-gradient bulk gets the same
        // value-and-gradient control as a second-gradient one, so the
        // Hessian average vanishes for every admissible field.
        for bc in [BcKind::Periodic, BcKind::Dirichlet] {
            let a = RveProblem::new(RveConfig::standard(4, bc, mr())).unwrap();
            let b = RveProblem::new(RveConfig::standard(4, bc, fiber())).unwrap();
            assert_eq!(a.cmap.n_free, b.cmap.n_free, "{bc:?}");
            assert_eq!(a.cmap.rules, b.cmap.rules, "{bc:?}");
        }
    }

    #[test]
    fn dirichlet_fit_reproduces_polynomials() {
        let cfg = RveConfig::standard(4, BcKind::Dirichlet, fiber());
        let prob = RveProblem::new(cfg).unwrap();
        let n = prob.patch.n_basis()[0];
        assert_eq!(prob.cmap.n_free, (n - 4).pow(3));

        // The drive-to-boundary fit reproduces the quadratic map exactly,
        // so fluctuation offsets vanish for every physically symmetric
        // drive: the F̄ columns directly, the 𝔉̄ columns pairwise.
        let mut worst_f = 0.0f64;
        let mut worst_sym = 0.0f64;
        for g in &prob.cmap.offsets {
            for comp in 0..3 {
                for col in 0..9 {
                    worst_f = worst_f.max(g[comp][col].abs());
                }
                for c in 0..27 {
                    let (i, j, k) = (c / 9, (c / 3) % 3, c % 3);
                    let cswap = 9 * i + 3 * k + j;
                    worst_sym =
                        worst_sym.max((g[comp][9 + c] + g[comp][9 + cswap]).abs() * 0.5);
                }
            }
        }
        assert!(worst_f < 1e-12, "F-column offsets {worst_f}");
        assert!(worst_sym < 1e-12, "symmetrised G-column offsets {worst_sym}");
        assert!(prob.cmap.fit_residual < 1.0, "{}", prob.cmap.fit_residual);
    }

    #[test]
    fn stiffness_matches_residual_differences() {
        let cfg = RveConfig::standard(2, BcKind::Periodic, fiber());
        let prob = RveProblem::new(cfg).unwrap();
        let n = prob.n_dof();
        assert_eq!(n, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let drive = random_symmetric_drive(&mut rng, 0.05);
        let q: Vec<f64> = (0..n).map(|_| 1e-3 * rng.random_range(-1.0..1.0)).collect();
        let asm = prob.assemble(&q, &drive, false).unwrap();
        let h = 1e-6;
        for d in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[d] += h;
            qm[d] -= h;
            let rp = prob.residual(&qp, &drive).unwrap();
            let rm = prob.residual(&qm, &drive).unwrap();
            let mut e = vec![0.0; n];
            e[d] = 1.0;
            let ke = asm.k.mul_vec(&e).unwrap();
            for r in 0..n {
                let fd = (rp[r] - rm[r]) / (2.0 * h);
                assert!(
                    (ke[r] - fd).abs() < 5e-5 * (1.0 + fd.abs()),
                    "K[{r}][{d}] = {} vs fd {fd}",
                    ke[r]
                );
            }
        }
    }

    #[test]
    fn drive_columns_match_residual_differences() {
        for bc in [BcKind::Periodic, BcKind::Dirichlet] {
            let cfg = RveConfig::standard(2, bc, fiber());
            let prob = RveProblem::new(cfg).unwrap();
            let n = prob.n_dof();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let drive = random_symmetric_drive(&mut rng, 0.04);
            let q: Vec<f64> = (0..n).map(|_| 1e-3 * rng.random_range(-1.0..1.0)).collect();
            let asm = prob.assemble(&q, &drive, true).unwrap();
            let cols = asm.drive_cols.unwrap();
            let base = drive.coeffs();
            let h = 1e-6;
            for col in 0..DRIVE_DIM {
                let mut cp = base;
                let mut cm = base;
                cp[col] += h;
                cm[col] -= h;
                let rp = prob.residual(&q, &MacroDrive::from_coeffs(&cp)).unwrap();
                let rm = prob.residual(&q, &MacroDrive::from_coeffs(&cm)).unwrap();
                for r in 0..n {
                    let fd = (rp[r] - rm[r]) / (2.0 * h);
                    assert!(
                        (cols[col][r] - fd).abs() < 5e-5 * (1.0 + fd.abs()),
                        "{bc:?} drive col {col}, row {r}: {} vs {fd}",
                        cols[col][r]
                    );
                }
            }
        }
    }

    #[test]
    fn affine_state_needs_no_iterations() {
        for bc in [BcKind::Periodic, BcKind::Dirichlet] {
            let cfg = RveConfig::standard(3, bc, mr());
            let prob = RveProblem::new(cfg).unwrap();
            let drive = MacroDrive {
                f: MacroDrive::benchmark().f,
                g: TensorN::zeros(3).unwrap(),
            };
            let (sol, _) = prob.solve(&drive, None, &NewtonOpts::default()).unwrap();
            assert_eq!(sol.iterations, 0, "{bc:?}");
            assert!(norm2(&sol.q_free) < 1e-12);
            assert!(sol.residual_history[0] < 1e-10);
        }
    }

    #[test]
    fn fiber_cell_converges_quadratically() {
        for bc in [BcKind::Periodic, BcKind::Dirichlet] {
            let cfg = RveConfig::standard(3, bc, fiber());
            let prob = RveProblem::new(cfg).unwrap();
            let drive = MacroDrive::benchmark();
            let (sol, ops) = prob.solve(&drive, None, &NewtonOpts::default()).unwrap();
            let h = &sol.residual_history;
            assert!(h.last().unwrap() <= &1e-10, "{bc:?}: {h:?}");
            assert!(sol.iterations <= 12, "{bc:?}: {h:?}");
            // Terminal contraction at least two orders per step.
            let k = h.len();
            assert!(h[k - 1] < 1e-2 * h[k - 2], "{bc:?}: {h:?}");

            // Warm restart from the solution converges immediately.
            let (sol2, _) = prob
                .solve(&drive, Some(&sol.q_free), &NewtonOpts::default())
                .unwrap();
            assert_eq!(sol2.iterations, 0);

            let sens = ops.sensitivity().unwrap();
            assert_eq!(sens.len(), DRIVE_DIM);
        }
    }

    #[test]
    fn void_cross_assigns_scaled_elements() {
        let layout = MaterialLayout::VoidCross {
            bulk: Material::Fiber(FiberReinforced::benchmark()),
            void_scale: 1e-8,
        };
        let cfg = RveConfig::standard(4, BcKind::Dirichlet, layout);
        let prob = RveProblem::new(cfg).unwrap();
        let voided = prob
            .materials
            .iter()
            .filter(|m| match m {
                Material::Fiber(f) => f.a_f < 1.0,
                _ => false,
            })
            .count();
        // At 4 elements per direction the three arms all overlap the same
        // central 2x2x2 block.
        assert_eq!(voided, 8);
    }
}
