//! Fusion systems: which token types may combine, and whether those rules
//! compose consistently.
//!
//! A [`FusionSystem`] over `n` token types carries
//!
//! - `F[k][i][j]`, the amplitude for `i` followed by `j` to fuse into `k`;
//! - `N[c][a][b]`, a 0/1 indicator that `c` is a valid continuation of `a, b`;
//! - real orthogonal `s×s` coupling matrices `Ω(i, j)` between primitives;
//! - sector projectors with orthonormal bases.
//!
//! # Residuals
//!
//! Write `F_k^{ij}` for `F[k][i][j]` and `s(a, b) = Σ_n F_n^{ab}`.
//!
//! The pentagon residual is the Frobenius norm over `(i, j, k)` of
//!
//! ```text
//! r(i,j,k) = Σ_{m,n} F_m^{ij} F_n^{mk} − Σ_{p,q} F_p^{ik} F_q^{pj}
//!          = Σ_m F_m^{ij} s(m,k) − Σ_p F_p^{ik} s(p,j)
//! ```
//!
//! The hexagon residual uses three-index amplitudes built from two fusions,
//! `G_n^{abc} = Σ_x F_x^{ab} F_n^{xc}` (fuse `a, b` first, then `c`), and
//! takes the Frobenius norm over `(i, j, k, l, m)` of
//!
//! ```text
//! h(i,j,k,l,m) = Σ_n G_n^{ijk} G_l^{inm} − (Σ_p G_p^{jkm} G_l^{ijp}) · G_l^{ikm}
//! ```
//!
//! Both vanish on the delta tensor `F_m^{ij} = [m = j]` and on `F ≡ 0`, and
//! both are invariant under a simultaneous relabelling of token types.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// Default side length of the coupling matrices.
pub const DEFAULT_COUPLING_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSystem {
    n_types: usize,
    f: Tensor,
    rules: Tensor,
    coupling_dim: usize,
    omega: BTreeMap<(usize, usize), Tensor>,
    projectors: Vec<Projector>,
}

#[inline]
fn at(n: usize, k: usize, i: usize, j: usize) -> usize {
    (k * n + i) * n + j
}

impl FusionSystem {
    /// Validates shapes, the `[0, 1]` range of `F`, 0/1 entries of `N`, and
    /// that every pair has at least one continuation.
    pub fn new(
        f: Tensor,
        rules: Tensor,
        coupling_dim: usize,
        omega: BTreeMap<(usize, usize), Tensor>,
        projectors: Vec<Projector>,
    ) -> Result<Self> {
        let n = f.shape().first().copied().unwrap_or(0);
        if f.shape() != [n, n, n] {
            return Err(dim_err("fusion", format!("F must be n×n×n, got {:?}", f.shape())));
        }
        if rules.shape() != [n, n, n] {
            return Err(dim_err("fusion", format!("N must be {n}×{n}×{n}, got {:?}", rules.shape())));
        }
        if let Some(x) = f.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!("fusion amplitude {x} outside [0, 1]")));
        }
        if let Some(x) = rules.data().iter().find(|x| **x != 0.0 && **x != 1.0) {
            return Err(Error::Domain(format!("local rule entry {x} is not 0 or 1")));
        }
        for (&(i, j), m) in &omega {
            if m.shape() != [coupling_dim, coupling_dim] {
                return Err(dim_err(
                    "fusion",
                    format!("Ω({i}, {j}) must be {coupling_dim}×{coupling_dim}, got {:?}", m.shape()),
                ));
            }
        }
        let fs = Self { n_types: n, f, rules, coupling_dim, omega, projectors };
        for a in 0..n {
            for b in 0..n {
                fs.local_rule_check(a, b)?;
            }
        }
        Ok(fs)
    }

    /// Encodes a transition relation `legal[i][j]` ("`j` may follow `i`")
    /// and a continuation relation `cont[a][b][c]`.
    ///
    /// Each legal pair fuses into its leading token: `F_k^{ij} = [legal(i,j)]·[k = i]`.
    /// With this encoding `s(i, j) = [legal(i, j)]` and both sides of the
    /// pentagon relation reduce to `[legal(i,j)]·[legal(i,k)]`, so the
    /// residual is exactly zero.
    pub fn from_relations(legal: &[Vec<bool>], cont: &[Vec<Vec<bool>>]) -> Result<Self> {
        let n = legal.len();
        if legal.iter().any(|r| r.len() != n)
            || cont.len() != n
            || cont.iter().any(|r| r.len() != n || r.iter().any(|c| c.len() != n))
        {
            return Err(dim_err("from_relations", format!("relations must be over {n} types")));
        }
        let mut f = Tensor::zeros(&[n, n, n]);
        let mut rules = Tensor::zeros(&[n, n, n]);
        for i in 0..n {
            for j in 0..n {
                if legal[i][j] {
                    f.data_mut()[at(n, i, i, j)] = 1.0;
                }
                for (c, &on) in cont[i][j].iter().enumerate() {
                    if on {
                        rules.data_mut()[at(n, c, i, j)] = 1.0;
                    }
                }
            }
        }
        Self::new(f, rules, DEFAULT_COUPLING_DIM, BTreeMap::new(), Vec::new())
    }

    /// `F_m^{ij} = [m = j]` with every continuation allowed.
    pub fn delta(n: usize) -> Self {
        let mut f = Tensor::zeros(&[n, n, n]);
        for i in 0..n {
            for j in 0..n {
                f.data_mut()[at(n, j, i, j)] = 1.0;
            }
        }
        Self::new(f, Tensor::ones(&[n, n, n]), DEFAULT_COUPLING_DIM, BTreeMap::new(), Vec::new())
            .expect("delta system is valid")
    }

    /// Same system with `Ω(i, j) = I` for all primitive pairs `i < j < k`.
    pub fn with_identity_couplings(mut self, k: usize) -> Self {
        for i in 0..k {
            for j in i + 1..k {
                self.omega.insert((i, j), Tensor::eye(self.coupling_dim));
            }
        }
        self
    }

    pub fn with_projectors(mut self, projectors: Vec<Projector>) -> Self {
        self.projectors = projectors;
        self
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn f(&self) -> &Tensor {
        &self.f
    }

    pub fn rules(&self) -> &Tensor {
        &self.rules
    }

    pub fn coupling_dim(&self) -> usize {
        self.coupling_dim
    }

    pub fn omega(&self, i: usize, j: usize) -> Result<&Tensor> {
        self.omega.get(&(i, j)).ok_or(Error::MissingCoupling(i, j))
    }

    pub fn couplings(&self) -> &BTreeMap<(usize, usize), Tensor> {
        &self.omega
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    /// `F[k][i][j]`.
    pub fn amp(&self, k: usize, i: usize, j: usize) -> f64 {
        self.f.data()[at(self.n_types, k, i, j)]
    }

    pub fn pentagon_residual(&self) -> f64 {
        pentagon_terms(&self.f).frobenius_norm()
    }

    pub fn hexagon_residual(&self) -> f64 {
        hexagon_norm(&self.f)
    }

    /// `‖Ω(i,j)Ω(j,k)Ω(i,j) − Ω(j,k)Ω(i,j)Ω(j,k)‖_F`.
    pub fn braiding_residual(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        let a = self.omega(i, j)?;
        let b = self.omega(j, k)?;
        let lhs = a.matmul(b)?.matmul(a)?;
        let rhs = b.matmul(a)?.matmul(b)?;
        Ok(lhs.sub(&rhs)?.frobenius_norm())
    }

    /// Continuations `c` with `N_c^{ab} = 1`, ascending.
    pub fn local_rule_check(&self, a: usize, b: usize) -> Result<Vec<usize>> {
        let n = self.n_types;
        if a >= n || b >= n {
            return Err(Error::Domain(format!("token pair ({a}, {b}) outside 0..{n}")));
        }
        let out: Vec<usize> = (0..n).filter(|&c| self.rules.data()[at(n, c, a, b)] == 1.0).collect();
        if out.is_empty() {
            return Err(Error::NoContinuation { a, b });
        }
        Ok(out)
    }

    /// Errors if the pentagon residual exceeds `tol`.
    pub fn check_consistency(&self, tol: f64) -> Result<f64> {
        let r = self.pentagon_residual();
        if r > tol {
            return Err(Error::Contract(format!("pentagon residual {r:.3e} exceeds {tol:.3e}")));
        }
        Ok(r)
    }

    /// Parses the line-oriented text format written by [`FusionSystem::to_text`].
    ///
    /// ```text
    /// n_types 3
    /// coupling_dim 2        # optional, default 2
    /// proj_dim 3            # optional, default n_types
    /// [F]
    /// k i j value
    /// [N]
    /// c a b value           # N defaults to all ones when the section is absent
    /// [OMEGA]
    /// i j row col value     # listed pairs start from zero matrices
    /// [PROJ]
    /// sector row col value
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            Header,
            F,
            N,
            Omega,
            Proj,
        }
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut section = Section::Header;
        let mut n: Option<usize> = None;
        let mut s = DEFAULT_COUPLING_DIM;
        let mut proj_dim: Option<usize> = None;
        let mut f_entries = Vec::new();
        let mut n_entries = Vec::new();
        let mut seen_n = false;
        let mut om_entries = Vec::new();
        let mut proj_entries = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[F]" | "[N]" | "[OMEGA]" | "[PROJ]" => {
                    if n.is_none() {
                        return Err(err(line_no, "section before n_types".into()));
                    }
                    section = match line {
                        "[F]" => Section::F,
                        "[N]" => {
                            seen_n = true;
                            Section::N
                        }
                        "[OMEGA]" => Section::Omega,
                        _ => Section::Proj,
                    };
                    continue;
                }
                _ if line.starts_with('[') => {
                    return Err(err(line_no, format!("unknown section {line}")));
                }
                _ => {}
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if section == Section::Header {
                let [key, val] = toks[..] else {
                    return Err(err(line_no, format!("expected `key value`, got `{line}`")));
                };
                let v: usize =
                    val.parse().map_err(|_| err(line_no, format!("invalid integer `{val}`")))?;
                match key {
                    "n_types" => n = Some(v),
                    "coupling_dim" => s = v,
                    "proj_dim" => proj_dim = Some(v),
                    _ => return Err(err(line_no, format!("unknown header key `{key}`"))),
                }
                continue;
            }
            let width = match section {
                Section::F | Section::N | Section::Proj => 4,
                _ => 5,
            };
            if toks.len() != width {
                return Err(err(line_no, format!("expected {width} fields, got {}", toks.len())));
            }
            let mut idx = Vec::with_capacity(width - 1);
            for t in &toks[..width - 1] {
                idx.push(
                    t.parse::<usize>()
                        .map_err(|_| err(line_no, format!("invalid index `{t}`")))?,
                );
            }
            let value: f64 = toks[width - 1]
                .parse()
                .map_err(|_| err(line_no, format!("invalid value `{}`", toks[width - 1])))?;
            if !value.is_finite() {
                return Err(err(line_no, "non-finite value".into()));
            }
            let n = n.expect("checked at section start");
            let limit = match section {
                Section::F | Section::N => vec![n, n, n],
                Section::Omega => vec![usize::MAX, usize::MAX, s, s],
                Section::Proj => vec![usize::MAX, proj_dim.unwrap_or(n), usize::MAX],
                Section::Header => unreachable!(),
            };
            if let Some((pos, (i, lim))) =
                idx.iter().zip(&limit).enumerate().find(|(_, (i, lim))| **i >= **lim)
            {
                return Err(err(line_no, format!("index {i} in field {} out of range 0..{lim}", pos + 1)));
            }
            let entry = (line_no, idx, value);
            match section {
                Section::F => f_entries.push(entry),
                Section::N => n_entries.push(entry),
                Section::Omega => om_entries.push(entry),
                Section::Proj => proj_entries.push(entry),
                Section::Header => unreachable!(),
            }
        }

        let n = n.ok_or_else(|| err(0, "missing n_types".into()))?;
        let mut f = Tensor::zeros(&[n, n, n]);
        for (line, ix, v) in f_entries {
            if !(0.0..=1.0).contains(&v) {
                return Err(err(line, format!("amplitude {v} outside [0, 1]")));
            }
            f.data_mut()[at(n, ix[0], ix[1], ix[2])] = v;
        }
        let mut rules = if seen_n { Tensor::zeros(&[n, n, n]) } else { Tensor::ones(&[n, n, n]) };
        for (line, ix, v) in n_entries {
            if v != 0.0 && v != 1.0 {
                return Err(err(line, format!("local rule entry {v} is not 0 or 1")));
            }
            rules.data_mut()[at(n, ix[0], ix[1], ix[2])] = v;
        }
        let mut omega: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        for (_, ix, v) in om_entries {
            let m = omega.entry((ix[0], ix[1])).or_insert_with(|| Tensor::zeros(&[s, s]));
            m.set(ix[2], ix[3], v);
        }
        let d = proj_dim.unwrap_or(n);
        let mut by_sector: BTreeMap<usize, Vec<(usize, usize, f64, usize)>> = BTreeMap::new();
        for (line, ix, v) in proj_entries {
            by_sector.entry(ix[0]).or_default().push((ix[1], ix[2], v, line));
        }
        let mut projectors = Vec::new();
        for (sector, entries) in by_sector {
            let r = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
            let mut basis = Tensor::zeros(&[d, r]);
            for (row, col, v, _) in &entries {
                basis.set(*row, *col, *v);
            }
            let first_line = entries.iter().map(|e| e.3).min().unwrap_or(0);
            projectors.push(
                Projector::new(sector, basis).map_err(|e| err(first_line, e.to_string()))?,
            );
        }
        Self::new(f, rules, s, omega, projectors)
    }

    /// Sparse text form; zero amplitudes and zero rules are omitted.
    pub fn to_text(&self) -> String {
        let n = self.n_types;
        let mut out = String::new();
        let _ = writeln!(out, "n_types {n}");
        let _ = writeln!(out, "coupling_dim {}", self.coupling_dim);
        if let Some(p) = self.projectors.first() {
            let _ = writeln!(out, "proj_dim {}", p.basis.rows());
        }
        let _ = writeln!(out, "[F]");
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let v = self.amp(k, i, j);
                    if v != 0.0 {
                        let _ = writeln!(out, "{k} {i} {j} {v:?}");
                    }
                }
            }
        }
        let _ = writeln!(out, "[N]");
        for c in 0..n {
            for a in 0..n {
                for b in 0..n {
                    if self.rules.data()[at(n, c, a, b)] == 1.0 {
                        let _ = writeln!(out, "{c} {a} {b} 1");
                    }
                }
            }
        }
        if !self.omega.is_empty() {
            let _ = writeln!(out, "[OMEGA]");
            for (&(i, j), m) in &self.omega {
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        let _ = writeln!(out, "{i} {j} {r} {c} {:?}", m.get(r, c));
                    }
                }
            }
        }
        if !self.projectors.is_empty() {
            let _ = writeln!(out, "[PROJ]");
            for p in &self.projectors {
                for r in 0..p.basis.rows() {
                    for c in 0..p.basis.cols() {
                        let v = p.basis.get(r, c);
                        if v != 0.0 {
                            let _ = writeln!(out, "{} {r} {c} {v:?}", p.sector_id);
                        }
                    }
                }
            }
        }
        out
    }
}

/// `s(a, b) = Σ_n F_n^{ab}` as an `n×n` row-major buffer.
fn channel_sums(f: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for k in 0..n {
        for ab in 0..n * n {
            s[ab] += f[k * n * n + ab];
        }
    }
    s
}

/// Signed pentagon terms `r(i, j, k)` for a raw `n×n×n` amplitude tensor,
/// returned with shape `[n, n, n]` indexed `[i][j][k]`.
pub fn pentagon_terms(f: &Tensor) -> Tensor {
    let n = f.shape().first().copied().unwrap_or(0);
    let fd = f.data();
    let s = channel_sums(fd, n);
    let mut out = Tensor::zeros(&[n, n, n]);
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += fd[at(n, m, i, j)] * s[m * n + k];
                    acc -= fd[at(n, m, i, k)] * s[m * n + j];
                }
                od[(i * n + j) * n + k] = acc;
            }
        }
    }
    out
}

fn hexagon_norm(f: &Tensor) -> f64 {
    let n = f.shape().first().copied().unwrap_or(0);
    let fd = f.data();
    // g[((n*N + a)*N + b)*N + c] = G_n^{abc}
    let mut g = vec![0.0; n * n * n * n];
    for a in 0..n {
        for b in 0..n {
            for x in 0..n {
                let fx = fd[at(n, x, a, b)];
                if fx == 0.0 {
                    continue;
                }
                for c in 0..n {
                    for o in 0..n {
                        g[((o * n + a) * n + b) * n + c] += fx * fd[at(n, o, x, c)];
                    }
                }
            }
        }
    }
    let gi = |o: usize, a: usize, b: usize, c: usize| g[((o * n + a) * n + b) * n + c];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    for m in 0..n {
                        let mut lhs = 0.0;
                        let mut inner = 0.0;
                        for p in 0..n {
                            lhs += gi(p, i, j, k) * gi(l, i, p, m);
                            inner += gi(p, j, k, m) * gi(l, i, j, p);
                        }
                        let h = lhs - inner * gi(l, i, k, m);
                        total += h * h;
                    }
                }
            }
        }
    }
    total.sqrt()
}

/// Orthogonal projector onto the span of orthonormal basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub sector_id: usize,
    basis: Tensor,
}

impl Projector {
    /// Errors unless `basisᵀ·basis = I` within 1e-10.
    pub fn new(sector_id: usize, basis: Tensor) -> Result<Self> {
        if !basis.is_matrix() {
            return Err(dim_err("projector", format!("basis must be a matrix, got {:?}", basis.shape())));
        }
        let gram = basis.transpose()?.matmul(&basis)?;
        let dev = gram.max_abs_diff(&Tensor::eye(basis.cols()));
        if dev > 1e-10 {
            return Err(Error::Contract(format!(
                "sector {sector_id} basis is not orthonormal (max deviation {dev:.3e})"
            )));
        }
        Ok(Self { sector_id, basis })
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    /// `Π = basis · basisᵀ`.
    pub fn matrix(&self) -> Tensor {
        self.basis.matmul(&self.basis.transpose().expect("matrix")).expect("conformable")
    }
}

/// `inv_i · inv_j · tr(Ω)/s`.
pub fn invariant_compose(inv_i: f64, inv_j: f64, omega: &Tensor) -> f64 {
    let s = omega.rows();
    let tr: f64 = (0..s).map(|d| omega.get(d, d)).sum();
    inv_i * inv_j * tr / s as f64
}

/// Per-primitive invariant scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveInvariant {
    pub values: Tensor,
}

impl PrimitiveInvariant {
    pub fn new(values: Vec<f64>) -> Self {
        let k = values.len();
        Self { values: Tensor::new(vec![k], values).expect("1-d") }
    }

    /// Composite invariant of primitives `i` and `j` under the system's coupling.
    pub fn compose(&self, i: usize, j: usize, fs: &FusionSystem) -> Result<f64> {
        let k = self.values.len();
        if i >= k || j >= k {
            return Err(Error::Domain(format!("primitive pair ({i}, {j}) outside 0..{k}")));
        }
        Ok(invariant_compose(self.values.data()[i], self.values.data()[j], fs.omega(i, j)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{continuation_relation, fusion_system, TokenType};
    use crate::numcore::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    /// Quadruple loop straight from the relation, no shared sums.
    fn pentagon_oracle(f: &Tensor) -> f64 {
        let n = f.shape()[0];
        let a = |k: usize, i: usize, j: usize| f.data()[(k * n + i) * n + j];
        let mut tot = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut lhs = 0.0;
                    let mut rhs = 0.0;
                    for m in 0..n {
                        for q in 0..n {
                            lhs += a(m, i, j) * a(q, m, k);
                            rhs += a(m, i, k) * a(q, m, j);
                        }
                    }
                    tot += (lhs - rhs).powi(2);
                }
            }
        }
        tot.sqrt()
    }

    /// Hexagon with every composite amplitude expanded in place.
    fn hexagon_oracle(f: &Tensor) -> f64 {
        let n = f.shape()[0];
        let a = |k: usize, i: usize, j: usize| f.data()[(k * n + i) * n + j];
        let g = |o: usize, x: usize, y: usize, z: usize| {
            (0..n).map(|w| a(w, x, y) * a(o, w, z)).sum::<f64>()
        };
        let mut tot = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        for m in 0..n {
                            let lhs: f64 = (0..n).map(|p| g(p, i, j, k) * g(l, i, p, m)).sum();
                            let inner: f64 = (0..n).map(|p| g(p, j, k, m) * g(l, i, j, p)).sum();
                            tot += (lhs - inner * g(l, i, k, m)).powi(2);
                        }
                    }
                }
            }
        }
        tot.sqrt()
    }

    fn random_f(n: usize, rng: &mut Rng, density: f64) -> Tensor {
        let mut f = Tensor::zeros(&[n, n, n]);
        for x in f.data_mut() {
            if rng.uniform() < density {
                *x = rng.uniform();
            }
        }
        f
    }

    fn system(f: Tensor) -> FusionSystem {
        let n = f.shape()[0];
        FusionSystem::new(f, Tensor::ones(&[n, n, n]), 2, BTreeMap::new(), Vec::new()).unwrap()
    }

    fn rotation(theta: f64) -> Tensor {
        Tensor::from_rows(&[vec![theta.cos(), -theta.sin()], vec![theta.sin(), theta.cos()]])
            .unwrap()
    }

    #[test]
    fn delta_and_zero_tensors_are_consistent() {
        for n in 1..=4 {
            let d = FusionSystem::delta(n);
            assert_eq!(d.pentagon_residual(), 0.0);
            assert_eq!(d.hexagon_residual(), 0.0);
            let z = system(Tensor::zeros(&[n, n, n]));
            assert_eq!(z.pentagon_residual(), 0.0);
            assert_eq!(z.hexagon_residual(), 0.0);
        }
    }

    #[test]
    fn flipped_delta_entry_matches_oracle() {
        let mut f = FusionSystem::delta(3).f().clone();
        f.data_mut()[at(3, 0, 1, 2)] = 1.0;
        let fs = system(f.clone());
        let r = fs.pentagon_residual();
        assert!(r > 0.0);
        assert!((r - pentagon_oracle(&f)).abs() <= 1e-12);
        assert!((fs.hexagon_residual() - hexagon_oracle(&f)).abs() <= 1e-12);
    }

    #[test]
    fn residuals_match_oracles_for_small_systems() {
        let mut rng = Rng::new(3);
        for n in 1..=4 {
            for _ in 0..20 {
                let f = random_f(n, &mut rng, 0.6);
                let fs = system(f.clone());
                assert!((fs.pentagon_residual() - pentagon_oracle(&f)).abs() <= 1e-12);
                assert!((fs.hexagon_residual() - hexagon_oracle(&f)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hexagon_is_permutation_invariant() {
        let mut rng = Rng::new(8);
        let n = 4;
        let f = random_f(n, &mut rng, 0.5);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut g = Tensor::zeros(&[n, n, n]);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    g.data_mut()[at(n, perm[k], perm[i], perm[j])] = f.data()[at(n, k, i, j)];
                }
            }
        }
        let (a, b) = (system(f), system(g));
        assert!((a.hexagon_residual() - b.hexagon_residual()).abs() <= 1e-12);
        assert!((a.pentagon_residual() - b.pentagon_residual()).abs() <= 1e-12);
    }

    #[test]
    fn braiding_cases() {
        let mut fs = FusionSystem::delta(2).with_identity_couplings(3);
        assert_eq!(fs.braiding_residual(0, 1, 2).unwrap(), 0.0);

        let r = rotation(0.7);
        fs.omega.insert((0, 1), r.clone());
        fs.omega.insert((1, 2), r);
        assert!(fs.braiding_residual(0, 1, 2).unwrap() <= 1e-15);

        let (a, b) = (rotation(0.3), Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap());
        fs.omega.insert((0, 1), a.clone());
        fs.omega.insert((1, 2), b.clone());
        // direct evaluation, element by element
        let mul = |x: &Tensor, y: &Tensor| {
            Tensor::from_fn(2, 2, |r, c| (0..2).map(|t| x.get(r, t) * y.get(t, c)).sum())
        };
        let lhs = mul(&mul(&a, &b), &a);
        let rhs = mul(&mul(&b, &a), &b);
        let want = lhs.sub(&rhs).unwrap().frobenius_norm();
        assert!(want > 0.1);
        assert!((fs.braiding_residual(0, 1, 2).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn braiding_names_missing_pair() {
        let fs = FusionSystem::delta(2);
        let e = fs.braiding_residual(0, 1, 2).unwrap_err();
        assert!(matches!(e, Error::MissingCoupling(0, 1)));
    }

    #[test]
    fn blockworld_continuations() {
        use TokenType::*;
        let fs = fusion_system();
        let got = fs.local_rule_check(Approach.index(), Grasp.index()).unwrap();
        let want: Vec<usize> = [Lift, Release, Noop].iter().map(|t| t.index()).collect();
        assert_eq!(got, want);
        // a noop keeps open everything the token before it allowed
        for a in 0..8 {
            let with_noop = fs.local_rule_check(a, Noop.index()).unwrap();
            for c in (0..8).filter(|&c| fs.amp(a, a, c) == 1.0) {
                assert!(with_noop.contains(&c), "{a} then noop should allow {c}");
            }
        }
        assert_eq!(fs.pentagon_residual(), 0.0);
        // the three-index relation does not hold for this encoding; it is a diagnostic
        assert!((fs.hexagon_residual() - hexagon_oracle(fs.f())).abs() <= 1e-12);
    }

    #[test]
    fn blockworld_rules_equal_state_machine() {
        let fs = fusion_system();
        let cont = continuation_relation();
        for a in 0..8 {
            for b in 0..8 {
                let got = fs.local_rule_check(a, b).unwrap();
                let want: Vec<usize> = (0..8).filter(|&c| cont[a][b][c]).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn all_ones_rules_give_full_set() {
        let fs = FusionSystem::delta(5);
        assert_eq!(fs.local_rule_check(2, 4).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(fs.local_rule_check(5, 0).is_err());
    }

    #[test]
    fn empty_continuation_is_rejected() {
        let mut rules = Tensor::ones(&[2, 2, 2]);
        rules.data_mut()[at(2, 0, 1, 0)] = 0.0;
        rules.data_mut()[at(2, 1, 1, 0)] = 0.0;
        let e = FusionSystem::new(Tensor::zeros(&[2, 2, 2]), rules, 2, BTreeMap::new(), vec![])
            .unwrap_err();
        assert!(matches!(e, Error::NoContinuation { a: 1, b: 0 }));
    }

    #[test]
    fn compose_examples() {
        let id = Tensor::eye(2);
        assert_eq!(invariant_compose(2.0, 3.0, &id), 6.0);
        assert_eq!(invariant_compose(0.0, 3.0, &rotation(0.4)), 0.0);
        let half = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(invariant_compose(2.0, 3.0, &half), 3.0);
        let fs = FusionSystem::delta(2).with_identity_couplings(2);
        let inv = PrimitiveInvariant::new(vec![2.0, 5.0]);
        assert_eq!(inv.compose(0, 1, &fs).unwrap(), 10.0);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = Rng::new(1);
        let f = random_f(3, &mut rng, 0.5);
        let basis = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let fs = system(f)
            .with_identity_couplings(3)
            .with_projectors(vec![Projector::new(0, basis).unwrap()]);
        let back = FusionSystem::parse(&fs.to_text()).unwrap();
        assert_eq!(back, fs);
    }

    #[test]
    fn parser_reports_line_numbers() {
        let text = "n_types 2\n[F]\n0 0 1 1.0\n0 2 1 1.0\n";
        match FusionSystem::parse(text).unwrap_err() {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("out of range"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            FusionSystem::parse("n_types 2\n[F]\n0 0 x 1\n").unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
        assert!(matches!(
            FusionSystem::parse("[F]\n").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projectors_are_idempotent_and_orthogonal(seed in 0u64..100_000, d in 3usize..7) {
            // orthonormalise random columns, then split them between two sectors
            let mut rng = Rng::new(seed);
            let m = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
            let q = m.qr().q();
            let r1 = 1 + (seed as usize % (d - 1));
            let cols = |lo: usize, hi: usize| {
                Tensor::from_fn(d, hi - lo, |r, c| q[(r, lo + c)])
            };
            let a = Projector::new(0, cols(0, r1)).unwrap();
            let b = Projector::new(1, cols(r1, d)).unwrap();
            let (pa, pb) = (a.matrix(), b.matrix());
            prop_assert!(pa.matmul(&pa).unwrap().max_abs_diff(&pa) <= 1e-9);
            prop_assert!(pb.matmul(&pb).unwrap().max_abs_diff(&pb) <= 1e-9);
            prop_assert!(pa.matmul(&pb).unwrap().frobenius_norm() <= 1e-9);
        }
    }
}
