//! Trivariate B-spline patches: basis evaluation to third derivatives,
//! Gauss quadrature, uniform knot refinement and the induced prolongation.
//!
//! Knot vectors are open (clamped) on the unit interval, so boundary
//! control values interpolate face data and the two outermost control
//! layers govern face values and normal derivatives. Basis evaluation
//! follows Piegl & Tiller (The NURBS Book, algorithms A2.1 and A2.3).
//!
//! Physical derivatives on distorted geometry use the inverse-Jacobian
//! chain rule through second order:
//!
//! ```text
//! ∂R/∂X_I      = ∂R/∂ξ_a ∂ξ_a/∂X_I
//! ∂²R/∂X_I∂X_J = ∂²R/∂ξ_a∂ξ_b ∂ξ_a/∂X_I ∂ξ_b/∂X_J + ∂R/∂ξ_a ∂²ξ_a/∂X_I∂X_J
//! ∂²ξ_a/∂X_I∂X_J = -(J⁻¹)_{aα} ∂²X_α/∂ξ_b∂ξ_c (J⁻¹)_{bI} (J⁻¹)_{cJ}
//! ```
//!
//! Third physical derivatives are provided for affine geometry only (the
//! unit-cell boxes), where the chain rule degenerates to constant scaling.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("degree must be at least 2 for C^1 continuity, got {0}")]
    DegreeTooLow(usize),
    #[error("element count must be positive, got {0}")]
    NoElements(usize),
    #[error("parameter {0} outside [0, 1]")]
    ParamOutOfRange(f64),
    #[error("third derivatives require an affine geometry map")]
    ThirdDerivativesNotAffine,
    #[error("geometry Jacobian is singular (det = {0})")]
    SingularJacobian(f64),
}

/// Open uniform knot vector of degree `p` with `nel` equal spans on [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    p: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn open_uniform(p: usize, nel: usize) -> Result<Self, SplineError> {
        if p < 2 {
            return Err(SplineError::DegreeTooLow(p));
        }
        if nel == 0 {
            return Err(SplineError::NoElements(nel));
        }
        let mut knots = vec![0.0; p + 1];
        for i in 1..nel {
            knots.push(i as f64 / nel as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(p + 1));
        Ok(KnotVector { p, knots })
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.p
    }

    /// Number of basis functions.
    #[inline]
    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.p - 1
    }

    /// Number of nonempty spans (elements).
    pub fn n_elements(&self) -> usize {
        let mut n = 0;
        for w in self.knots.windows(2) {
            if w[1] > w[0] {
                n += 1;
            }
        }
        n
    }

    /// Knot span indices of the nonempty spans, in parameter order.
    pub fn element_spans(&self) -> Vec<usize> {
        let mut spans = Vec::with_capacity(self.n_elements());
        for (k, w) in self.knots.windows(2).enumerate() {
            if w[1] > w[0] {
                spans.push(k);
            }
        }
        spans
    }

    pub fn span_range(&self, span: usize) -> (f64, f64) {
        (self.knots[span], self.knots[span + 1])
    }

    /// Knot span containing `u` (A2.1), with `u = 1` assigned to the last
    /// nonempty span.
    pub fn find_span(&self, u: f64) -> usize {
        let n = self.n_basis();
        if u >= self.knots[n] {
            let mut k = n - 1;
            while self.knots[k + 1] <= self.knots[k] {
                k -= 1;
            }
            return k;
        }
        let mut low = self.p;
        let mut high = n;
        let mut mid = (low + high) / 2;
        while u < self.knots[mid] || u >= self.knots[mid + 1] {
            if u < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// Nonzero basis functions and derivatives at `u` (A2.3).
    ///
    /// Returns `ders[k][j]` = k-th derivative of `N_{span-p+j}` for
    /// `k <= order`, `j <= p`. Orders above `p` come out zero.
    pub fn basis_ders(&self, span: usize, u: f64, order: usize) -> Vec<Vec<f64>> {
        let p = self.p;
        let t = &self.knots;
        let n = order.min(p);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let mut s1 = 0;
            let mut s2 = 1;
            a[0][0] = 1.0;
            for k in 1..=n {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as isize) as usize];
                    d += a[s2][j] * ndu[(rk + j as isize) as usize][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut r = p as f64;
        for k in 1..=n {
            for j in 0..=p {
                ders[k][j] *= r;
            }
            r *= (p - k) as f64;
        }
        ders
    }

    /// Greville abscissa of basis function `i`: the first polar-form
    /// (blossom) moment `(t_{i+1} + ... + t_{i+p}) / p`. A spline with these
    /// coefficients reproduces the identity exactly.
    pub fn greville(&self, i: usize) -> f64 {
        let s: f64 = self.knots[i + 1..=i + self.p].iter().sum();
        s / self.p as f64
    }

    /// Second polar-form moment `Σ_{a<b} t_{i+a} t_{i+b} / C(p,2)`; the
    /// coefficients of the monomial `u²` in this basis.
    pub fn blossom2(&self, i: usize) -> f64 {
        let w = &self.knots[i + 1..=i + self.p];
        let mut s = 0.0;
        for a in 0..w.len() {
            for b in (a + 1)..w.len() {
                s += w[a] * w[b];
            }
        }
        s / (self.p * (self.p - 1) / 2) as f64
    }

    /// Coefficient `c` in the endpoint derivative `f'(0) = c (q_1 - q_0)`.
    pub fn deriv_coeff_start(&self) -> f64 {
        self.p as f64 / (self.knots[self.p + 1] - self.knots[1])
    }

    /// Coefficient `c` in `f'(1) = c (q_{n-1} - q_{n-2})`.
    pub fn deriv_coeff_end(&self) -> f64 {
        let n = self.n_basis();
        self.p as f64 / (self.knots[n + self.p - 1] - self.knots[n - 1])
    }

    /// Insert one knot at every span midpoint. Returns the refined vector
    /// and the refinement matrix mapping coarse to fine coefficients
    /// (rows sum to one: affine combinations of coarse control values).
    pub fn refine_midpoints(&self) -> (KnotVector, Vec<Vec<f64>>) {
        let mut kv = self.clone();
        let n0 = self.n_basis();
        let mut m: Vec<Vec<f64>> = (0..n0)
            .map(|i| {
                let mut row = vec![0.0; n0];
                row[i] = 1.0;
                row
            })
            .collect();
        let mids: Vec<f64> = self
            .element_spans()
            .iter()
            .map(|&s| 0.5 * (self.knots[s] + self.knots[s + 1]))
            .collect();
        for u in mids {
            let k = kv.find_span(u);
            let p = kv.p;
            let t = &kv.knots;
            let n = kv.n_basis();
            let mut mnew = Vec::with_capacity(n + 1);
            for i in 0..=n {
                if i <= k - p {
                    mnew.push(m[i].clone());
                } else if i >= k + 1 {
                    mnew.push(m[i - 1].clone());
                } else {
                    let alpha = (u - t[i]) / (t[i + p] - t[i]);
                    let row: Vec<f64> = m[i]
                        .iter()
                        .zip(&m[i - 1])
                        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                        .collect();
                    mnew.push(row);
                }
            }
            let mut knots = kv.knots.clone();
            knots.insert(k + 1, u);
            kv = KnotVector { p, knots };
            m = mnew;
        }
        (kv, m)
    }
}

/// Requested derivative order for point evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd)]
pub enum DerivOrder {
    One,
    Two,
    Three,
}

impl DerivOrder {
    fn as_usize(self) -> usize {
        match self {
            DerivOrder::One => 1,
            DerivOrder::Two => 2,
            DerivOrder::Three => 3,
        }
    }
}

/// Basis data at one parametric point, in physical derivatives.
#[derive(Clone, Debug)]
pub struct PointEval {
    /// Global control-point indices of the nonzero basis functions.
    pub dofs: Vec<usize>,
    /// Physical location of the point.
    pub x: [f64; 3],
    /// Geometry Jacobian dX/dξ.
    pub jac: [[f64; 3]; 3],
    pub det_jac: f64,
    pub val: Vec<f64>,
    pub grad: Vec<[f64; 3]>,
    pub hess: Vec<[[f64; 3]; 3]>,
    pub third: Option<Vec<[[[f64; 3]; 3]; 3]>>,
}

/// Volume quadrature point: evaluation data plus total weight `w ·|det J|`.
#[derive(Clone, Debug)]
pub struct QuadPoint {
    pub eval: PointEval,
    pub w: f64,
}

/// Surface quadrature point with reference outward normal and area weight.
#[derive(Clone, Debug)]
pub struct FacePoint {
    pub eval: PointEval,
    pub da: f64,
    pub normal: [f64; 3],
}

/// One of the six faces of the parametric box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub dir: usize,
    pub max_side: bool,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face { dir: 0, max_side: false },
        Face { dir: 0, max_side: true },
        Face { dir: 1, max_side: false },
        Face { dir: 1, max_side: true },
        Face { dir: 2, max_side: false },
        Face { dir: 2, max_side: true },
    ];
}

/// Tensor-product B-spline patch with embedded geometry control points.
///
/// Control points are numbered with the first parametric direction fastest:
/// `A = i + n1 (j + n2 k)`.
#[derive(Clone, Debug)]
pub struct Patch {
    pub kv: [KnotVector; 3],
    pub ctrl: Vec<[f64; 3]>,
    affine: bool,
}

impl Patch {
    /// Axis-aligned box `[origin, origin + size]`, geometry laid out on the
    /// Greville abscissae so the map is exactly affine.
    pub fn unit_box(
        p: usize,
        nel: [usize; 3],
        origin: [f64; 3],
        size: [f64; 3],
    ) -> Result<Self, SplineError> {
        let kv = [
            KnotVector::open_uniform(p, nel[0])?,
            KnotVector::open_uniform(p, nel[1])?,
            KnotVector::open_uniform(p, nel[2])?,
        ];
        let n = [kv[0].n_basis(), kv[1].n_basis(), kv[2].n_basis()];
        let mut ctrl = Vec::with_capacity(n[0] * n[1] * n[2]);
        for k in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    ctrl.push([
                        origin[0] + size[0] * kv[0].greville(i),
                        origin[1] + size[1] * kv[1].greville(j),
                        origin[2] + size[2] * kv[2].greville(k),
                    ]);
                }
            }
        }
        Ok(Patch { kv, ctrl, affine: true })
    }

    /// General patch from explicit control points (not assumed affine).
    pub fn from_control(kv: [KnotVector; 3], ctrl: Vec<[f64; 3]>) -> Self {
        Patch { kv, ctrl, affine: false }
    }

    #[inline]
    pub fn n_basis(&self) -> [usize; 3] {
        [self.kv[0].n_basis(), self.kv[1].n_basis(), self.kv[2].n_basis()]
    }

    #[inline]
    pub fn n_ctrl(&self) -> usize {
        self.ctrl.len()
    }

    pub fn degree(&self) -> usize {
        self.kv[0].degree()
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    #[inline]
    pub fn ctrl_index(&self, ijk: [usize; 3]) -> usize {
        let n = self.n_basis();
        ijk[0] + n[0] * (ijk[1] + n[1] * ijk[2])
    }

    pub fn ctrl_ijk(&self, a: usize) -> [usize; 3] {
        let n = self.n_basis();
        [a % n[0], (a / n[0]) % n[1], a / (n[0] * n[1])]
    }

    /// Elements as triples of per-direction element indices.
    pub fn elements(&self) -> Vec<[usize; 3]> {
        let ne = [
            self.kv[0].n_elements(),
            self.kv[1].n_elements(),
            self.kv[2].n_elements(),
        ];
        let mut out = Vec::with_capacity(ne[0] * ne[1] * ne[2]);
        for k in 0..ne[2] {
            for j in 0..ne[1] {
                for i in 0..ne[0] {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    /// Basis and geometry data at a parametric point.
    pub fn eval_point(&self, xi: [f64; 3], order: DerivOrder) -> Result<PointEval, SplineError> {
        for &u in &xi {
            if !(0.0..=1.0).contains(&u) {
                return Err(SplineError::ParamOutOfRange(u));
            }
        }
        let ord = order.as_usize();
        if ord >= 3 && !self.affine {
            return Err(SplineError::ThirdDerivativesNotAffine);
        }
        let p = [self.kv[0].degree(), self.kv[1].degree(), self.kv[2].degree()];
        let span = [
            self.kv[0].find_span(xi[0]),
            self.kv[1].find_span(xi[1]),
            self.kv[2].find_span(xi[2]),
        ];
        let uni: [Vec<Vec<f64>>; 3] = [
            self.kv[0].basis_ders(span[0], xi[0], ord),
            self.kv[1].basis_ders(span[1], xi[1], ord),
            self.kv[2].basis_ders(span[2], xi[2], ord),
        ];
        let n = self.n_basis();
        let nloc = (p[0] + 1) * (p[1] + 1) * (p[2] + 1);

        let mut dofs = Vec::with_capacity(nloc);
        let mut val = Vec::with_capacity(nloc);
        // Parametric derivatives: value, 3 firsts, 6 seconds, 10 thirds.
        let mut d1 = Vec::with_capacity(nloc);
        let mut d2 = Vec::with_capacity(nloc);
        let mut d3 = Vec::with_capacity(if ord >= 3 { nloc } else { 0 });
        for c in 0..=p[2] {
            let ic = span[2] - p[2] + c;
            for b in 0..=p[1] {
                let ib = span[1] - p[1] + b;
                for a in 0..=p[0] {
                    let ia = span[0] - p[0] + a;
                    dofs.push(ia + n[0] * (ib + n[1] * ic));
                    let (f0, f1, f2, f3) = (
                        uni[0][0][a],
                        uni[0][1][a],
                        if ord >= 2 { uni[0][2][a] } else { 0.0 },
                        if ord >= 3 { uni[0][3][a] } else { 0.0 },
                    );
                    let (g0, g1, g2, g3) = (
                        uni[1][0][b],
                        uni[1][1][b],
                        if ord >= 2 { uni[1][2][b] } else { 0.0 },
                        if ord >= 3 { uni[1][3][b] } else { 0.0 },
                    );
                    let (h0, h1, h2, h3) = (
                        uni[2][0][c],
                        uni[2][1][c],
                        if ord >= 2 { uni[2][2][c] } else { 0.0 },
                        if ord >= 3 { uni[2][3][c] } else { 0.0 },
                    );
                    val.push(f0 * g0 * h0);
                    d1.push([f1 * g0 * h0, f0 * g1 * h0, f0 * g0 * h1]);
                    if ord >= 2 {
                        // Symmetric second derivatives: [11, 22, 33, 12, 13, 23].
                        d2.push([
                            f2 * g0 * h0,
                            f0 * g2 * h0,
                            f0 * g0 * h2,
                            f1 * g1 * h0,
                            f1 * g0 * h1,
                            f0 * g1 * h1,
                        ]);
                    }
                    if ord >= 3 {
                        // Full rank-3 symmetric array of parametric thirds.
                        let mut t = [[[0.0; 3]; 3]; 3];
                        let fg = [
                            [f3 * g0 * h0, f2 * g1 * h0, f2 * g0 * h1],
                            [f2 * g1 * h0, f1 * g2 * h0, f1 * g1 * h1],
                            [f2 * g0 * h1, f1 * g1 * h1, f1 * g0 * h2],
                        ];
                        let gg = [
                            [f2 * g1 * h0, f1 * g2 * h0, f1 * g1 * h1],
                            [f1 * g2 * h0, f0 * g3 * h0, f0 * g2 * h1],
                            [f1 * g1 * h1, f0 * g2 * h1, f0 * g1 * h2],
                        ];
                        let hh = [
                            [f2 * g0 * h1, f1 * g1 * h1, f1 * g0 * h2],
                            [f1 * g1 * h1, f0 * g2 * h1, f0 * g1 * h2],
                            [f1 * g0 * h2, f0 * g1 * h2, f0 * g0 * h3],
                        ];
                        t[0] = fg;
                        t[1] = gg;
                        t[2] = hh;
                        d3.push(t);
                    }
                }
            }
        }

        // Geometry map, Jacobian and its parametric Hessian.
        let mut x = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        let mut hgeo = [[0.0; 6]; 3];
        for (l, &a) in dofs.iter().enumerate() {
            let c = self.ctrl[a];
            for i in 0..3 {
                x[i] += c[i] * val[l];
                for m in 0..3 {
                    jac[i][m] += c[i] * d1[l][m];
                }
                if ord >= 2 {
                    for m in 0..6 {
                        hgeo[i][m] += c[i] * d2[l][m];
                    }
                }
            }
        }
        let det_jac = det3(&jac);
        if det_jac.abs() < 1e-300 {
            return Err(SplineError::SingularJacobian(det_jac));
        }
        let jinv = inv3(&jac, det_jac);

        // d²ξ_a/dX_I dX_J, needed only for non-affine geometry.
        let mut xi_hess = [[[0.0; 3]; 3]; 3];
        if ord >= 2 && !self.affine {
            let unpack = |v: &[f64; 6], b: usize, c: usize| -> f64 {
                match (b.min(c), b.max(c)) {
                    (0, 0) => v[0],
                    (1, 1) => v[1],
                    (2, 2) => v[2],
                    (0, 1) => v[3],
                    (0, 2) => v[4],
                    _ => v[5],
                }
            };
            for a in 0..3 {
                for ii in 0..3 {
                    for jj in 0..3 {
                        let mut s = 0.0;
                        for al in 0..3 {
                            for b in 0..3 {
                                for c in 0..3 {
                                    s += jinv[a][al]
                                        * unpack(&hgeo[al], b, c)
                                        * jinv[b][ii]
                                        * jinv[c][jj];
                                }
                            }
                        }
                        xi_hess[a][ii][jj] = -s;
                    }
                }
            }
        }

        let mut grad = Vec::with_capacity(nloc);
        let mut hess = Vec::with_capacity(if ord >= 2 { nloc } else { 0 });
        let mut third = if ord >= 3 { Some(Vec::with_capacity(nloc)) } else { None };
        for l in 0..nloc {
            let mut g = [0.0; 3];
            for i in 0..3 {
                for a in 0..3 {
                    g[i] += d1[l][a] * jinv[a][i];
                }
            }
            grad.push(g);
            if ord >= 2 {
                let v = &d2[l];
                let par = [
                    [v[0], v[3], v[4]],
                    [v[3], v[1], v[5]],
                    [v[4], v[5], v[2]],
                ];
                let mut h = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let mut s = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                s += par[a][b] * jinv[a][i] * jinv[b][j];
                            }
                        }
                        if !self.affine {
                            for a in 0..3 {
                                s += d1[l][a] * xi_hess[a][i][j];
                            }
                        }
                        h[i][j] = s;
                    }
                }
                hess.push(h);
            }
            if let Some(t3) = third.as_mut() {
                let par = &d3[l];
                let mut t = [[[0.0; 3]; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            let mut s = 0.0;
                            for a in 0..3 {
                                for b in 0..3 {
                                    for c in 0..3 {
                                        s += par[a][b][c]
                                            * jinv[a][i]
                                            * jinv[b][j]
                                            * jinv[c][k];
                                    }
                                }
                            }
                            t[i][j][k] = s;
                        }
                    }
                }
                t3.push(t);
            }
        }

        Ok(PointEval { dofs, x, jac, det_jac, val, grad, hess, third })
    }

    /// Volume quadrature over one element with `ng` Gauss points per
    /// direction.
    pub fn element_quadrature(
        &self,
        elem: [usize; 3],
        ng: usize,
        order: DerivOrder,
    ) -> Result<Vec<QuadPoint>, SplineError> {
        let (nodes, weights) = gauss_legendre_unit(ng);
        let mut ranges = [(0.0, 0.0); 3];
        for d in 0..3 {
            let span = self.kv[d].element_spans()[elem[d]];
            ranges[d] = self.kv[d].span_range(span);
        }
        let mut out = Vec::with_capacity(ng * ng * ng);
        for c in 0..ng {
            for b in 0..ng {
                for a in 0..ng {
                    let gi = [a, b, c];
                    let mut xi = [0.0; 3];
                    let mut w = 1.0;
                    for d in 0..3 {
                        let (lo, hi) = ranges[d];
                        xi[d] = lo + (hi - lo) * nodes[gi[d]];
                        w *= (hi - lo) * weights[gi[d]];
                    }
                    let eval = self.eval_point(xi, order)?;
                    let wt = w * eval.det_jac.abs();
                    out.push(QuadPoint { eval, w: wt });
                }
            }
        }
        Ok(out)
    }

    /// Surface quadrature over one face of the patch, `ng` Gauss points per
    /// in-face direction, with outward reference normals.
    pub fn face_quadrature(
        &self,
        face: Face,
        ng: usize,
        order: DerivOrder,
    ) -> Result<Vec<FacePoint>, SplineError> {
        let (nodes, weights) = gauss_legendre_unit(ng);
        let d = face.dir;
        let (d1, d2) = match d {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let xid = if face.max_side { 1.0 } else { 0.0 };
        let spans1 = self.kv[d1].element_spans();
        let spans2 = self.kv[d2].element_spans();
        let mut out = Vec::new();
        for &s2 in &spans2 {
            let (lo2, hi2) = self.kv[d2].span_range(s2);
            for &s1 in &spans1 {
                let (lo1, hi1) = self.kv[d1].span_range(s1);
                for b in 0..ng {
                    for a in 0..ng {
                        let mut xi = [0.0; 3];
                        xi[d] = xid;
                        xi[d1] = lo1 + (hi1 - lo1) * nodes[a];
                        xi[d2] = lo2 + (hi2 - lo2) * nodes[b];
                        let wpar = (hi1 - lo1) * weights[a] * (hi2 - lo2) * weights[b];
                        let eval = self.eval_point(xi, order)?;
                        let t1 = [eval.jac[0][d1], eval.jac[1][d1], eval.jac[2][d1]];
                        let t2 = [eval.jac[0][d2], eval.jac[1][d2], eval.jac[2][d2]];
                        let mut nv = [
                            t1[1] * t2[2] - t1[2] * t2[1],
                            t1[2] * t2[0] - t1[0] * t2[2],
                            t1[0] * t2[1] - t1[1] * t2[0],
                        ];
                        let len = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
                        let td = [eval.jac[0][d], eval.jac[1][d], eval.jac[2][d]];
                        let mut dot = 0.0;
                        for i in 0..3 {
                            dot += nv[i] * td[i];
                        }
                        let outward = if face.max_side { 1.0 } else { -1.0 };
                        let sign = if dot * outward >= 0.0 { 1.0 } else { -1.0 };
                        for v in nv.iter_mut() {
                            *v *= sign / len;
                        }
                        out.push(FacePoint { eval, da: len * wpar, normal: nv });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Uniformly refine all three directions by span midpoint insertion.
    pub fn refine_uniform(&self) -> (Patch, Prolongation) {
        let mut kvs = Vec::with_capacity(3);
        let mut mats = Vec::with_capacity(3);
        for d in 0..3 {
            let (kv, m) = self.kv[d].refine_midpoints();
            kvs.push(kv);
            mats.push(m);
        }
        let pro = Prolongation { mats: [mats[0].clone(), mats[1].clone(), mats[2].clone()] };
        let coarse_n = self.n_basis();
        let ctrl = pro.apply_points(&self.ctrl, coarse_n);
        let patch = Patch {
            kv: [kvs[0].clone(), kvs[1].clone(), kvs[2].clone()],
            ctrl,
            affine: self.affine,
        };
        (patch, pro)
    }
}

/// Tensor-product prolongation between a coarse and a midpoint-refined
/// patch, stored as the three univariate refinement matrices.
#[derive(Clone, Debug)]
pub struct Prolongation {
    pub mats: [Vec<Vec<f64>>; 3],
}

impl Prolongation {
    pub fn fine_n(&self) -> [usize; 3] {
        [self.mats[0].len(), self.mats[1].len(), self.mats[2].len()]
    }

    pub fn coarse_n(&self) -> [usize; 3] {
        [self.mats[0][0].len(), self.mats[1][0].len(), self.mats[2][0].len()]
    }

    /// Apply to a coarse control-point lattice (3-vectors).
    pub fn apply_points(&self, coarse: &[[f64; 3]], cn: [usize; 3]) -> Vec<[f64; 3]> {
        let fnn = self.fine_n();
        assert_eq!(coarse.len(), cn[0] * cn[1] * cn[2]);
        // Sweep one direction at a time.
        let mut cur = coarse.to_vec();
        let mut dims = cn;
        for d in 0..3 {
            let m = &self.mats[d];
            let mut out_dims = dims;
            out_dims[d] = m.len();
            let mut next = vec![[0.0; 3]; out_dims[0] * out_dims[1] * out_dims[2]];
            for k in 0..out_dims[2] {
                for j in 0..out_dims[1] {
                    for i in 0..out_dims[0] {
                        let fi = [i, j, k];
                        let mut acc = [0.0; 3];
                        for (ci, &w) in m[fi[d]].iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let mut src = fi;
                            src[d] = ci;
                            let s = cur[src[0] + dims[0] * (src[1] + dims[1] * src[2])];
                            for c in 0..3 {
                                acc[c] += w * s[c];
                            }
                        }
                        next[i + out_dims[0] * (j + out_dims[1] * k)] = acc;
                    }
                }
            }
            cur = next;
            dims = out_dims;
        }
        debug_assert_eq!(dims, fnn);
        cur
    }
}

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse with rows/columns such that `inv[a][i] = ∂ξ_a/∂X_i` when the
/// input is `jac[i][a] = ∂X_i/∂ξ_a`.
fn inv3(a: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let r = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * r;
    inv[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * r;
    inv[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * r;
    inv[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * r;
    inv[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * r;
    inv[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * r;
    inv[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * r;
    inv[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * r;
    inv[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * r;
    inv
}

/// Gauss-Legendre nodes and weights on [0, 1].
///
/// Nodes are the Legendre roots found by Newton iteration from the
/// Chebyshev initial guess; any order is supported.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (pn, dpn) = legendre(n, x);
            let dx = pn / dpn;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dpn) = legendre(n, x);
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dpn * dpn);
    }
    (nodes, weights)
}

/// Legendre polynomial `P_n` and derivative at `x` by the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
