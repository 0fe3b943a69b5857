//! Hyperelastic material models: compressible Mooney-Rivlin and a
//! fiber-reinforced second-gradient energy.
//!
//! Both energies are written once over the generic scalar type and
//! evaluated three ways: with `f64` for the energy density, with dual
//! numbers for stresses, and with second-order jets for the four tangent
//! blocks. The deformation measures are the deformation gradient `F` and
//! its gradient `G = Grad F`; `G` components are treated as independent
//! seeds, so symmetry of the resulting hyperstress and tangents in the
//! trailing index pair is a property of the energy rather than an imposed
//! constraint.
//!
//! Mooney-Rivlin:
//!
//! ```text
//! Ψ = c (J-1)² - d ln J + c₁ (I₁ - 3) + c₂ (I₂ - 3)
//! J = det F,  I₁ = F:F,  I₂ = tr cof(FᵀF) = ((F:F)² - C:C) / 2
//! c = (c₁ + c₂)/3,  d = 2 (c₁ + 2 c₂)
//! ```
//!
//! Fiber-reinforced polymer with two fiber families `L¹`, `L²`:
//!
//! ```text
//! Ψ_frp = ζ Ψ_mat + (1-ζ)/2 Ψ_fib
//! Ψ_fib = a_F tan²(θ_fib) + 1/2 Σ_α [ b_F (λ^α - 1)² + c_F κ^α · (F Fᵀ κ^α) ]
//! λ^α = ‖F L^α‖,   l̃^α = F L^α / λ^α,   θ_fib = acos(l̃¹ · l̃²) - β
//! κ^α = (λ^α)⁻² (I - l̃^α ⊗ l̃^α) [G : (L^α ⊗ L^α)]
//! ```
//!
//! The angle offset `β = acos(L¹·L²)` makes the reference state stress
//! free. Stiffness units are MPa except the curvature modulus `c_F` (N).

use crate::dual::{Dual, HessJet};
use crate::scalar::Scalar;
use crate::tensor::{TensorN, TensorError};
use crate::Tensor;
use thiserror::Error;

/// Tolerance for acos arguments drifting outside [-1, 1] by roundoff.
pub const ACOS_CLAMP_TOL: f64 = 1e-12;
/// Fiber angles closer than this to ±π/2 are treated as singular.
pub const TAN_SINGULAR_TOL: f64 = 1e-8;
/// Fiber stretches below this are degenerate.
pub const MIN_FIBER_STRETCH: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MaterialError {
    #[error("deformation gradient has non-positive determinant J = {0}")]
    NonPositiveJacobian(f64),
    #[error("fiber angle argument {0} outside [-1, 1] beyond tolerance")]
    AcosDomain(f64),
    #[error("fiber shear angle {0} rad at the tan singularity")]
    TanSingular(f64),
    #[error("degenerate fiber stretch {0}")]
    DegenerateFiber(f64),
    #[error("non-finite value in material response")]
    NonFinite,
    #[error("input tensor shape: {0}")]
    Shape(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MooneyRivlin {
    pub c1: f64,
    pub c2: f64,
}

impl MooneyRivlin {
    /// Benchmark parameter set: c₁ = 2000 MPa, c₂ = 1000 MPa.
    pub fn benchmark() -> Self {
        MooneyRivlin { c1: 2000.0, c2: 1000.0 }
    }

    pub fn scaled(&self, s: f64) -> Self {
        MooneyRivlin { c1: self.c1 * s, c2: self.c2 * s }
    }

    /// First Piola-Kirchhoff stress in closed form,
    /// `P = (2c(J-1)J - d) F⁻ᵀ + 2c₁ F + 2c₂ (I₁ F - F C)`.
    pub fn first_piola_analytic(&self, f: &Tensor) -> Result<Tensor, MaterialError> {
        if f.rank() != 2 {
            return Err(TensorError::RankMismatch(f.rank(), 2).into());
        }
        let j = f.det2()?;
        if j <= 0.0 {
            return Err(MaterialError::NonPositiveJacobian(j));
        }
        let c = (self.c1 + self.c2) / 3.0;
        let d = 2.0 * (self.c1 + 2.0 * self.c2);
        let finv_t = f.inv2()?.t2()?;
        let cten = f.t2()?.contract(f, 1)?;
        let i1 = f.inner(f)?;
        let fc = f.contract(&cten, 1)?;
        let mut out = finv_t.scale(2.0 * c * (j - 1.0) * j - d);
        out = out.add(&f.scale(2.0 * self.c1))?;
        out = out.add(&f.scale(2.0 * self.c2 * i1))?;
        out = out.sub(&fc.scale(2.0 * self.c2))?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberReinforced {
    pub matrix: MooneyRivlin,
    /// Matrix volume fraction ζ.
    pub zeta: f64,
    /// Shear modulus of the fiber network, MPa.
    pub a_f: f64,
    /// Stretch modulus, MPa.
    pub b_f: f64,
    /// Curvature modulus, N.
    pub c_f: f64,
    /// Unit reference fiber directions.
    pub l1: [f64; 3],
    pub l2: [f64; 3],
}

impl FiberReinforced {
    /// Benchmark parameter set (ζ = 0.5, a_F = 15000 MPa, b_F = 3000 MPa,
    /// c_F = 1.25 N, crossing fibers along (−1, −1, ±1.5)/√4.25).
    pub fn benchmark() -> Self {
        let s = 1.0 / 4.25f64.sqrt();
        FiberReinforced {
            matrix: MooneyRivlin::benchmark(),
            zeta: 0.5,
            a_f: 15000.0,
            b_f: 3000.0,
            c_f: 1.25,
            l1: [-s, -s, 1.5 * s],
            l2: [-s, -s, -1.5 * s],
        }
    }

    /// Reference angle between the two fiber families.
    pub fn beta(&self) -> f64 {
        let dot: f64 = (0..3).map(|i| self.l1[i] * self.l2[i]).sum();
        dot.clamp(-1.0, 1.0).acos()
    }

    pub fn scaled(&self, s: f64) -> Self {
        FiberReinforced {
            matrix: self.matrix.scaled(s),
            a_f: self.a_f * s,
            b_f: self.b_f * s,
            c_f: self.c_f * s,
            ..*self
        }
    }

    /// Scale only the first-gradient stiffness (matrix moduli, fiber shear
    /// and stretch); the curvature modulus c_F is untouched, which turns
    /// the model into a nearly pure second-gradient material as s → 0.
    pub fn with_first_gradient_scaling(&self, s: f64) -> Self {
        FiberReinforced {
            matrix: self.matrix.scaled(s),
            a_f: self.a_f * s,
            b_f: self.b_f * s,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Material {
    MooneyRivlin(MooneyRivlin),
    Fiber(FiberReinforced),
}

impl Material {
    pub fn is_second_gradient(&self) -> bool {
        matches!(self, Material::Fiber(_))
    }

    /// Scale every stiffness parameter; used to stabilize void regions
    /// with a strongly softened copy of the bulk material.
    pub fn scaled(&self, s: f64) -> Material {
        match self {
            Material::MooneyRivlin(m) => Material::MooneyRivlin(m.scaled(s)),
            Material::Fiber(m) => Material::Fiber(m.scaled(s)),
        }
    }
}

/// Stress-level response.
#[derive(Clone, Debug)]
pub struct StressResponse {
    pub psi: f64,
    /// First Piola-Kirchhoff stress, rank 2.
    pub p: Tensor,
    /// Hyperstress conjugate to `G`, rank 3.
    pub pp: Tensor,
}

/// Full response with the four tangent blocks.
#[derive(Clone, Debug)]
pub struct MaterialResponse {
    pub psi: f64,
    pub p: Tensor,
    pub pp: Tensor,
    /// ∂P/∂F, rank 4.
    pub cc: Tensor,
    /// ∂P/∂G, rank 5.
    pub dd: Tensor,
    /// ∂PP/∂F, rank 5, indices (i J K s T).
    pub ee: Tensor,
    /// ∂PP/∂G, rank 6.
    pub gg: Tensor,
}

fn check_shapes(f: &Tensor, g: &Tensor) -> Result<(), MaterialError> {
    if f.rank() != 2 {
        return Err(TensorError::RankMismatch(f.rank(), 2).into());
    }
    if g.rank() != 3 {
        return Err(TensorError::RankMismatch(g.rank(), 3).into());
    }
    Ok(())
}

fn det3s<S: Scalar>(f: &[[S; 3]; 3]) -> S {
    f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1])
        - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
        + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0])
}

fn psi_mr<S: Scalar>(m: &MooneyRivlin, f: &[[S; 3]; 3]) -> Result<S, MaterialError> {
    let j = det3s(f);
    if j.val() <= 0.0 {
        return Err(MaterialError::NonPositiveJacobian(j.val()));
    }
    let mut i1 = S::zero();
    let mut cc = S::zero();
    for a in 0..3 {
        for b in 0..3 {
            let mut cab = S::zero();
            for i in 0..3 {
                cab = cab + f[i][a] * f[i][b];
            }
            cc = cc + cab * cab;
            if a == b {
                i1 = i1 + cab;
            }
        }
    }
    let i2 = (i1 * i1 - cc) * S::from_f64(0.5);
    let c = S::from_f64((m.c1 + m.c2) / 3.0);
    let d = S::from_f64(2.0 * (m.c1 + 2.0 * m.c2));
    let jm1 = j - S::one();
    Ok(c * jm1 * jm1 - d * j.ln()
        + S::from_f64(m.c1) * (i1 - S::from_f64(3.0))
        + S::from_f64(m.c2) * (i2 - S::from_f64(3.0)))
}

fn psi_fiber<S: Scalar>(
    m: &FiberReinforced,
    f: &[[S; 3]; 3],
    g: &[[[S; 3]; 3]; 3],
) -> Result<S, MaterialError> {
    let psi_mat = psi_mr(&m.matrix, f)?;

    // Deformed fiber directions l^α = F L^α and stretches.
    let dirs = [m.l1, m.l2];
    let mut lam = [S::zero(); 2];
    let mut lt = [[S::zero(); 3]; 2];
    for (al, lref) in dirs.iter().enumerate() {
        let mut l = [S::zero(); 3];
        for i in 0..3 {
            for j in 0..3 {
                l[i] = l[i] + f[i][j] * S::from_f64(lref[j]);
            }
        }
        let mut n2 = S::zero();
        for li in l {
            n2 = n2 + li * li;
        }
        let lambda = n2.sqrt();
        if lambda.val() < MIN_FIBER_STRETCH {
            return Err(MaterialError::DegenerateFiber(lambda.val()));
        }
        let inv = lambda.recip();
        for i in 0..3 {
            lt[al][i] = l[i] * inv;
        }
        lam[al] = lambda;
    }

    // Shear of the fiber crossing angle.
    let mut cosang = S::zero();
    for i in 0..3 {
        cosang = cosang + lt[0][i] * lt[1][i];
    }
    if cosang.val().abs() > 1.0 + ACOS_CLAMP_TOL {
        return Err(MaterialError::AcosDomain(cosang.val()));
    }
    let theta = cosang.clamp_val(-1.0, 1.0).acos() - S::from_f64(m.beta());
    if (theta.val().abs() - std::f64::consts::FRAC_PI_2).abs() < TAN_SINGULAR_TOL {
        return Err(MaterialError::TanSingular(theta.val()));
    }
    let t = theta.tan();
    let mut psi_fib = S::from_f64(m.a_f) * t * t;

    for al in 0..2 {
        let lref = dirs[al];
        // G : (L ⊗ L), a vector.
        let mut gl = [S::zero(); 3];
        for i in 0..3 {
            let mut s = S::zero();
            for j in 0..3 {
                for k in 0..3 {
                    s = s + g[i][j][k] * S::from_f64(lref[j] * lref[k]);
                }
            }
            gl[i] = s;
        }
        // κ = λ⁻² (I - l̃ ⊗ l̃) gl.
        let mut dot = S::zero();
        for i in 0..3 {
            dot = dot + lt[al][i] * gl[i];
        }
        let inv2 = (lam[al] * lam[al]).recip();
        let mut kappa = [S::zero(); 3];
        for i in 0..3 {
            kappa[i] = (gl[i] - lt[al][i] * dot) * inv2;
        }
        // κ · (F Fᵀ κ) = ‖Fᵀ κ‖².
        let mut ftk = [S::zero(); 3];
        for j in 0..3 {
            for i in 0..3 {
                ftk[j] = ftk[j] + f[i][j] * kappa[i];
            }
        }
        let mut curv = S::zero();
        for v in ftk {
            curv = curv + v * v;
        }
        let stretch = lam[al] - S::one();
        psi_fib = psi_fib
            + (S::from_f64(m.b_f) * stretch * stretch + S::from_f64(m.c_f) * curv)
                * S::from_f64(0.5);
    }

    Ok(S::from_f64(m.zeta) * psi_mat + S::from_f64((1.0 - m.zeta) / 2.0) * psi_fib)
}

fn psi_generic<S: Scalar>(
    mat: &Material,
    f: &[[S; 3]; 3],
    g: &[[[S; 3]; 3]; 3],
) -> Result<S, MaterialError> {
    match mat {
        Material::MooneyRivlin(m) => psi_mr(m, f),
        Material::Fiber(m) => psi_fiber(m, f, g),
    }
}

fn to_arrays<S: Scalar>(
    f: &Tensor,
    g: &Tensor,
    seed: impl Fn(f64, usize) -> S,
    seed_f_only: bool,
) -> ([[S; 3]; 3], [[[S; 3]; 3]; 3]) {
    let fd = f.data();
    let gd = g.data();
    let mut fa = [[S::zero(); 3]; 3];
    let mut ga = [[[S::zero(); 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            fa[i][j] = seed(fd[3 * i + j], 3 * i + j);
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let flat = 9 * i + 3 * j + k;
                ga[i][j][k] = if seed_f_only {
                    S::from_f64(gd[flat])
                } else {
                    seed(gd[flat], 9 + flat)
                };
            }
        }
    }
    (fa, ga)
}

impl Material {
    /// Strain energy density.
    pub fn energy(&self, f: &Tensor, g: &Tensor) -> Result<f64, MaterialError> {
        check_shapes(f, g)?;
        let fd = f.data();
        let gd = g.data();
        let mut fa = [[0.0; 3]; 3];
        let mut ga = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                fa[i][j] = fd[3 * i + j];
                for k in 0..3 {
                    ga[i][j][k] = gd[9 * i + 3 * j + k];
                }
            }
        }
        let psi = psi_generic(self, &fa, &ga)?;
        if !psi.is_finite() {
            return Err(MaterialError::NonFinite);
        }
        Ok(psi)
    }

    /// Energy and both stresses via first-order jets.
    pub fn stress(&self, f: &Tensor, g: &Tensor) -> Result<StressResponse, MaterialError> {
        check_shapes(f, g)?;
        let mut p = TensorN::zeros(2)?;
        let mut pp = TensorN::zeros(3)?;
        let psi = match self {
            Material::MooneyRivlin(_) => {
                let (fa, ga) =
                    to_arrays::<Dual<9>>(f, g, |v, i| Dual::var(v, i), true);
                let jet = psi_generic(self, &fa, &ga)?;
                for i in 0..9 {
                    p.data_mut()[i] = jet.g[i];
                }
                jet.v
            }
            Material::Fiber(_) => {
                let (fa, ga) =
                    to_arrays::<Dual<36>>(f, g, |v, i| Dual::var(v, i), false);
                let jet = psi_generic(self, &fa, &ga)?;
                for i in 0..9 {
                    p.data_mut()[i] = jet.g[i];
                }
                for i in 0..27 {
                    pp.data_mut()[i] = jet.g[9 + i];
                }
                jet.v
            }
        };
        let finite = psi.is_finite()
            && p.data().iter().all(|x| x.is_finite())
            && pp.data().iter().all(|x| x.is_finite());
        if !finite {
            return Err(MaterialError::NonFinite);
        }
        Ok(StressResponse { psi, p, pp })
    }

    /// Energy, stresses and all four tangent blocks via second-order jets.
    pub fn tangent(&self, f: &Tensor, g: &Tensor) -> Result<MaterialResponse, MaterialError> {
        check_shapes(f, g)?;
        let mut p = TensorN::zeros(2)?;
        let mut pp = TensorN::zeros(3)?;
        let mut cc = TensorN::zeros(4)?;
        let mut dd = TensorN::zeros(5)?;
        let mut ee = TensorN::zeros(5)?;
        let mut gg = TensorN::zeros(6)?;
        let psi = match self {
            Material::MooneyRivlin(_) => {
                let (fa, ga) =
                    to_arrays::<HessJet<9, 45>>(f, g, |v, i| HessJet::var(v, i), true);
                let jet = psi_generic(self, &fa, &ga)?;
                for i in 0..9 {
                    p.data_mut()[i] = jet.g[i];
                    for j in 0..9 {
                        cc.data_mut()[9 * i + j] = jet.hess(i, j);
                    }
                }
                jet.v
            }
            Material::Fiber(_) => {
                let (fa, ga) =
                    to_arrays::<HessJet<36, 666>>(f, g, |v, i| HessJet::var(v, i), false);
                let jet = psi_generic(self, &fa, &ga)?;
                for i in 0..9 {
                    p.data_mut()[i] = jet.g[i];
                    for j in 0..9 {
                        cc.data_mut()[9 * i + j] = jet.hess(i, j);
                    }
                    for j in 0..27 {
                        dd.data_mut()[27 * i + j] = jet.hess(i, 9 + j);
                    }
                }
                for i in 0..27 {
                    pp.data_mut()[i] = jet.g[9 + i];
                    for j in 0..9 {
                        ee.data_mut()[9 * i + j] = jet.hess(9 + i, j);
                    }
                    for j in 0..27 {
                        gg.data_mut()[27 * i + j] = jet.hess(9 + i, 9 + j);
                    }
                }
                jet.v
            }
        };
        let finite = psi.is_finite()
            && p.data().iter().all(|x| x.is_finite())
            && pp.data().iter().all(|x| x.is_finite())
            && cc.data().iter().all(|x| x.is_finite())
            && dd.data().iter().all(|x| x.is_finite())
            && ee.data().iter().all(|x| x.is_finite())
            && gg.data().iter().all(|x| x.is_finite());
        if !finite {
            return Err(MaterialError::NonFinite);
        }
        Ok(MaterialResponse { psi, p, pp, cc, dd, ee, gg })
    }
}

/// Cauchy von Mises stress from `P` and `F`: deviatoric norm of
/// `σ = J⁻¹ P Fᵀ` scaled by √(3/2).
pub fn von_mises(p: &Tensor, f: &Tensor) -> Result<f64, MaterialError> {
    let j = f.det2()?;
    if j <= 0.0 {
        return Err(MaterialError::NonPositiveJacobian(j));
    }
    let sigma = p.contract(&f.t2()?, 1)?.scale(1.0 / j);
    let tr = (sigma.get(&[0, 0]) + sigma.get(&[1, 1]) + sigma.get(&[2, 2])) / 3.0;
    let mut dev2 = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            let d = sigma.get(&[i, k]) - if i == k { tr } else { 0.0 };
            dev2 += d * d;
        }
    }
    Ok((1.5 * dev2).sqrt())
}
