//! The token-type mask `M` built from a fusion system, its projection back
//! onto the consistent set after a gradient step, and the positive-definite
//! weight defining the flow norm.
//!
//! `M(i, j) = Σ_k F[k][i][j] · [C(i, j, k)]`, clipped to `[0, 1]`, where
//! `C(i, j, k)` holds when the signed pentagon term `r(i, j, k)` is within
//! the tolerance. Cells that are zero in the built mask form the hard
//! pattern: they stay exactly zero forever.
//!
//! A mask regenerates its fusion system by rescaling each `(i, j)` fibre of
//! the original amplitudes to sum to `M(i, j)`:
//! `F'[k][i][j] = M(i, j) · F[k][i][j] / Σ_k F[k][i][j]`. Consistency of a
//! mask means the pentagon residual of `F'` is within tolerance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::fusion::{pentagon_terms, FusionSystem};
use crate::numcore::Tensor;

/// Iteration cap of the residual-reduction loop in [`project_mask`].
pub const MAX_PROJECTION_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Logits are multiplied by `M`; a zero cell still gets weight `e⁰`.
    Literal,
    /// Zero cells are excluded before the softmax.
    #[default]
    Hard,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Literal => "literal",
            MaskMode::Hard => "hard",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(MaskMode::Literal),
            "hard" => Ok(MaskMode::Hard),
            _ => Err(Error::Domain(format!("mask mode must be `literal` or `hard`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoMask {
    m: Tensor,
    forbidden: Vec<bool>,
    tol: f64,
    mode: MaskMode,
}

impl TopoMask {
    /// Rebuilds a mask from stored parts; `m` must be square with entries in
    /// `[0, 1]` and exact zeros on forbidden cells.
    pub fn from_parts(m: Tensor, forbidden: Vec<bool>, tol: f64, mode: MaskMode) -> Result<Self> {
        if !m.is_matrix() || m.rows() != m.cols() || forbidden.len() != m.len() {
            return Err(dim_err("mask", format!("mask {:?} with {} forbidden flags", m.shape(), forbidden.len())));
        }
        if m.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain("mask entries must lie in [0, 1]".into()));
        }
        if m.data().iter().zip(&forbidden).any(|(x, f)| *f && *x != 0.0) {
            return Err(Error::Contract("forbidden mask cell is nonzero".into()));
        }
        Ok(Self { m, forbidden, tol, mode })
    }

    /// The neutral mask: all ones, nothing forbidden.
    pub fn ones(n: usize, tol: f64, mode: MaskMode) -> Self {
        Self { m: Tensor::ones(&[n, n]), forbidden: vec![false; n * n], tol, mode }
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m.get(i, j)
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.forbidden[i * self.n() + j]
    }

    /// Row-major hard-zero flags.
    pub fn forbidden(&self) -> &[bool] {
        &self.forbidden
    }

    /// `F'` regenerated from this mask (see module docs).
    pub fn generating_amplitudes(&self, fs: &FusionSystem) -> Result<Tensor> {
        generating(fs, self.m.data())
    }

    /// Pentagon residual of the regenerated system.
    pub fn residual(&self, fs: &FusionSystem) -> Result<f64> {
        Ok(pentagon_terms(&self.generating_amplitudes(fs)?).frobenius_norm())
    }
}

fn generating(fs: &FusionSystem, m: &[f64]) -> Result<Tensor> {
    let n = fs.n_types();
    if m.len() != n * n {
        return Err(dim_err("mask", format!("mask has {} cells, fusion system {n} types", m.len())));
    }
    let f = fs.f().data();
    let mut out = Tensor::zeros(&[n, n, n]);
    let od = out.data_mut();
    for ij in 0..n * n {
        let total: f64 = (0..n).map(|k| f[k * n * n + ij]).sum();
        if total > 0.0 {
            for k in 0..n {
                od[k * n * n + ij] = m[ij] * f[k * n * n + ij] / total;
            }
        }
    }
    Ok(out)
}

/// `M(i, j) = Σ_k F[k][i][j] · [|r(i, j, k)| ≤ tol]`, clipped to `[0, 1]`.
pub fn build_mask(fs: &FusionSystem, tol: f64, mode: MaskMode) -> TopoMask {
    let n = fs.n_types();
    let r = pentagon_terms(fs.f());
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..n)
                .filter(|&k| r.data()[(i * n + j) * n + k].abs() <= tol)
                .map(|k| fs.amp(k, i, j))
                .sum();
            m.set(i, j, v.clamp(0.0, 1.0));
        }
    }
    let forbidden = m.data().iter().map(|x| *x == 0.0).collect();
    TopoMask { m, forbidden, tol, mode }
}

fn clip_and_restore(x: &mut [f64], forbidden: &[bool]) {
    for (v, f) in x.iter_mut().zip(forbidden) {
        *v = if *f { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

/// Applies `M + η·update`, clips to `[0, 1]`, restores hard zeros, and then
/// runs damped Gauss–Newton steps on the free cells until the regenerated
/// pentagon residual is within the mask tolerance.
///
/// Pass `update = −∇_M L` for a descent step. A mask that is already
/// consistent after clipping is returned without any correction steps, so
/// projecting twice with a zero update is exactly idempotent.
pub fn project_mask(mask: &TopoMask, fs: &FusionSystem, update: &Tensor, eta: f64) -> Result<TopoMask> {
    if update.shape() != mask.m.shape() {
        return Err(dim_err("project_mask", format!("update {:?} vs mask {:?}", update.shape(), mask.m.shape())));
    }
    if !update.all_finite() || !eta.is_finite() {
        return Err(Error::Domain("mask update must be finite".into()));
    }
    let mut x: Vec<f64> = mask.m.data().iter().zip(update.data()).map(|(m, u)| m + eta * u).collect();
    clip_and_restore(&mut x, &mask.forbidden);

    let terms = |x: &[f64]| -> Result<Vec<f64>> { Ok(pentagon_terms(&generating(fs, x)?).into_data()) };
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut r = terms(&x)?;
    let mut res = norm(&r);
    let n = mask.n();
    let free: Vec<usize> = (0..n * n)
        .filter(|&c| !mask.forbidden[c] && (0..n).any(|k| fs.f().data()[k * n * n + c] > 0.0))
        .collect();
    let mut lambda = 1e-3;
    let mut iters = 0;
    while res > mask.tol {
        if iters == MAX_PROJECTION_ITERS || free.is_empty() {
            return Err(Error::ProjectionFailed { iters, residual: res });
        }
        iters += 1;
        // the terms are quadratic in the cells, so central differences are exact
        let h = 1e-3;
        let mut jac = DMatrix::<f64>::zeros(r.len(), free.len());
        for (col, &c) in free.iter().enumerate() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let (rp, rm) = (terms(&xp)?, terms(&xm)?);
            for row in 0..r.len() {
                jac[(row, col)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let g = &jt * DVector::from_column_slice(&r);
        let jtj = &jt * &jac;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for d in 0..free.len() {
                a[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let mut trial = x.clone();
            for (col, &c) in free.iter().enumerate() {
                trial[c] += step[col];
            }
            clip_and_restore(&mut trial, &mask.forbidden);
            let rt = terms(&trial)?;
            let nt = norm(&rt);
            if nt < res {
                x = trial;
                r = rt;
                res = nt;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            return Err(Error::ProjectionFailed { iters, residual: res });
        }
    }
    let m = Tensor::new(vec![n, n], x)?;
    Ok(TopoMask { m, forbidden: mask.forbidden.clone(), tol: mask.tol, mode: mask.mode })
}

/// Positive-definite weight `W = S ⊗ I_d + ε·I` on flattened `P×d` arrays.
///
/// `S` is a symmetric positive semidefinite `P×P` base. When the symmetric
/// part of the supplied base has negative eigenvalues they are clipped to
/// zero, so `W` always has minimum eigenvalue at least `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeight {
    base: Tensor,
    d: usize,
    eps_pd: f64,
}

impl NormWeight {
    pub fn from_base(base: &Tensor, d: usize, eps_pd: f64) -> Result<Self> {
        if !base.is_matrix() || base.rows() != base.cols() {
            return Err(dim_err("norm_weight", format!("base must be square, got {:?}", base.shape())));
        }
        if eps_pd.is_nan() || eps_pd <= 0.0 {
            return Err(Error::Domain(format!("eps_pd must be positive, got {eps_pd}")));
        }
        let p = base.rows();
        let sym = DMatrix::from_fn(p, p, |i, j| 0.5 * (base.get(i, j) + base.get(j, i)));
        let eig = sym.clone().symmetric_eigen();
        let s = if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
            sym
        } else {
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            let q = &eig.eigenvectors;
            let m = q * DMatrix::from_diagonal(&clipped) * q.transpose();
            // exact symmetry after the round trip
            DMatrix::from_fn(p, p, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
        };
        let shifted = &s + DMatrix::identity(p, p) * eps_pd;
        if shifted.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { eps_pd });
        }
        let base = Tensor::from_fn(p, p, |i, j| s[(i, j)]);
        Ok(Self { base, d, eps_pd })
    }

    /// Position base for a typed sequence: unit diagonal, and neighbours
    /// coupled by half the symmetrised mask,
    /// `S[p][p+1] = S[p+1][p] = (M(t_p, t_{p+1}) + M(t_{p+1}, t_p)) / 4`.
    /// Halving keeps every row weakly diagonally dominant, so `S` is
    /// positive semidefinite without any clipping.
    pub fn for_sequence(mask: &TopoMask, types: &[usize], d: usize, eps_pd: f64) -> Result<Self> {
        let p = types.len();
        let mut s = Tensor::eye(p);
        for t in 0..p.saturating_sub(1) {
            let (a, b) = (types[t], types[t + 1]);
            let v = 0.25 * (mask.get(a, b) + mask.get(b, a));
            s.set(t, t + 1, v);
            s.set(t + 1, t, v);
        }
        Self::from_base(&s, d, eps_pd)
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn eps_pd(&self) -> f64 {
        self.eps_pd
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    /// The full `(P·d)×(P·d)` matrix.
    pub fn dense(&self) -> Tensor {
        let mut w = self.base.kron(&Tensor::eye(self.d)).expect("matrices");
        let n = w.rows();
        for i in 0..n {
            w.set(i, i, w.get(i, i) + self.eps_pd);
        }
        w
    }

    /// `vᵀWv` for `v` of shape `P×d`, without materialising `W`.
    pub fn quad_form(&self, v: &Tensor) -> Result<f64> {
        if v.shape() != [self.base.rows(), self.d] {
            return Err(dim_err("quad_form", format!("expected [{}, {}], got {:?}", self.base.rows(), self.d, v.shape())));
        }
        let sv = self.base.matmul(v)?;
        Ok(sv.dot(v) + self.eps_pd * v.dot(v))
    }
}

/// `W = sym(M) ⊗ I_d + ε·I` over the mask's own index set.
pub fn lift_norm_weight(mask: &TopoMask, d: usize, eps_pd: f64) -> Result<NormWeight> {
    NormWeight::from_base(mask.matrix(), d, eps_pd)
}
