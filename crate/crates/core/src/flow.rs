//! Flow matching: the noising path, the regression target, the loss terms,
//! and fixed-step integrators.
//!
//! The path interpolates noise `ε` (at `τ = 0`) to data `A` (at `τ = 1`):
//!
//! ```text
//! A_τ = τ·A + √(1 − τ²)·ε
//! u   = d/dτ A_τ = A − τ/√(1 − τ²)·ε
//! ```
//!
//! `u` is singular at `τ = 1`, so training draws are clamped to `τ ≤ 1 − EPS_TAU`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::fusion::Projector;
use crate::numcore::{Rng, Tape, Tensor, Var};
use crate::topomask::NormWeight;

pub const EPS_TAU: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub tau: f64,
    pub a_tau: Tensor,
    pub eps: Tensor,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0 - EPS_TAU).contains(&tau) {
        return Err(Error::Domain(format!("tau {tau} outside [0, {}]", 1.0 - EPS_TAU)));
    }
    Ok(())
}

/// `A_τ` for a given noise draw.
pub fn noise_with(a: &Tensor, tau: f64, eps: Tensor) -> Result<NoisySample> {
    check_tau(tau)?;
    if eps.shape() != a.shape() {
        return Err(dim_err("noise", format!("{:?} vs {:?}", a.shape(), eps.shape())));
    }
    let c = (1.0 - tau * tau).sqrt();
    let data = a.data().iter().zip(eps.data()).map(|(a, e)| tau * a + c * e).collect();
    Ok(NoisySample { tau, a_tau: Tensor::new(a.shape().to_vec(), data)?, eps })
}

/// `A_τ` with a fresh standard-normal draw.
pub fn noise_sample(a: &Tensor, tau: f64, rng: &mut Rng) -> Result<NoisySample> {
    check_tau(tau)?;
    let eps = rng.gaussian(a.shape());
    noise_with(a, tau, eps)
}

/// `u = A − τ/√(1 − τ²)·ε`.
pub fn ot_target(sample: &NoisySample, a: &Tensor) -> Result<Tensor> {
    check_tau(sample.tau)?;
    if sample.eps.shape() != a.shape() {
        return Err(dim_err("ot_target", format!("{:?} vs {:?}", a.shape(), sample.eps.shape())));
    }
    let tau = sample.tau;
    let c = tau / (1.0 - tau * tau).sqrt();
    let data = a.data().iter().zip(sample.eps.data()).map(|(a, e)| a - c * e).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `τ ~ Beta(α, β)`, clamped to `1 − EPS_TAU`.
pub fn sample_tau(rng: &mut Rng, alpha: f64, beta: f64) -> Result<f64> {
    Ok(rng.beta(alpha, beta)?.min(1.0 - EPS_TAU))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.05, lambda3: 0.2 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(Self { lambda1, lambda2, lambda3 })
    }

    /// `flow + λ1·task + λ2·smooth + λ3·topo`.
    pub fn total(&self, flow: f64, task: f64, smooth: f64, topo: f64) -> f64 {
        flow + self.lambda1 * task + self.lambda2 * smooth + self.lambda3 * topo
    }
}

/// One-step estimate of the endpoint: `Â = A_τ + (1 − τ)·v`.
pub fn denoised(a_tau: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    let mut out = a_tau.clone();
    out.axpy(1.0 - tau, v)?;
    Ok(out)
}

/// `(v − u)ᵀ W (v − u)` on the flattened difference.
pub fn loss_flow(v_pred: &Tensor, u: &Tensor, weight: &NormWeight) -> Result<f64> {
    weight.quad_form(&v_pred.sub(u)?)
}

fn check_orthonormal_rows(basis: &Tensor) -> Result<()> {
    if !basis.is_matrix() {
        return Err(dim_err("loss_topo", format!("basis must be a matrix, got {:?}", basis.shape())));
    }
    let gram = basis.matmul(&basis.transpose()?)?;
    let dev = gram.max_abs_diff(&Tensor::eye(basis.rows()));
    if dev > 1e-10 {
        return Err(Error::Contract(format!("fusion basis rows are not orthonormal (deviation {dev:.3e})")));
    }
    Ok(())
}

/// `‖B·vec(v − u)‖²` for a basis `B` with orthonormal rows.
pub fn loss_topo(v_pred: &Tensor, u: &Tensor, basis: &Tensor) -> Result<f64> {
    check_orthonormal_rows(basis)?;
    let diff = v_pred.sub(u)?;
    let n = diff.len();
    if basis.cols() != n {
        return Err(dim_err("loss_topo", format!("basis has {} columns, difference {n} entries", basis.cols())));
    }
    let proj = basis.matmul(&diff.reshape(&[n, 1])?)?;
    Ok(proj.dot(&proj))
}

/// Mean squared error.
pub fn loss_task(a_hat: &Tensor, a: &Tensor) -> Result<f64> {
    let d = a_hat.sub(a)?;
    Ok(if d.is_empty() { 0.0 } else { d.dot(&d) / d.len() as f64 })
}

/// Mean over interior steps of `‖Â_{t+1} − 2Â_t + Â_{t−1}‖²`; 0 when `H < 3`.
pub fn loss_smooth(a_hat: &Tensor) -> Result<f64> {
    let (h, d) = (a_hat.rows(), a_hat.cols());
    if h < 3 {
        return Ok(0.0);
    }
    let mut tot = 0.0;
    for t in 1..h - 1 {
        for c in 0..d {
            let s = a_hat.get(t + 1, c) - 2.0 * a_hat.get(t, c) + a_hat.get(t - 1, c);
            tot += s * s;
        }
    }
    Ok(tot / (h - 2) as f64)
}

/// Orthonormal rows `ψ_{k,a} = m^{-1/2} Σ_{t ∈ P_k} e_{t,a}`, one per
/// primitive `k` and action dimension `a`, over flattened `H×d` arrays.
pub fn fusion_basis(k: usize, m: usize, d: usize) -> Tensor {
    let h = k * m;
    let c = 1.0 / (m as f64).sqrt();
    let mut b = Tensor::zeros(&[k * d, h * d]);
    for p in 0..k {
        for a in 0..d {
            for t in p * m..(p + 1) * m {
                b.set(p * d + a, t * d + a, c);
            }
        }
    }
    b
}

/// Sector projectors of [`fusion_basis`], one sector per primitive.
pub fn sector_projectors(k: usize, m: usize, d: usize) -> Vec<Projector> {
    let b = fusion_basis(k, m, d);
    (0..k)
        .map(|p| {
            let cols = Tensor::from_fn(b.cols(), d, |r, c| b.get(p * d + c, r));
            Projector::new(p, cols).expect("rows of the fusion basis are orthonormal")
        })
        .collect()
}

/// Taped versions of the loss terms, used by the trainer.
pub mod taped {
    use super::*;

    /// `Σ_{p,q} S[p,q]⟨d_p, d_q⟩ + ε‖d‖²`.
    pub fn flow(tape: &mut Tape, diff: Var, weight: &NormWeight) -> Result<Var> {
        let s = tape.leaf(weight.base().clone());
        let sd = tape.matmul(s, diff)?;
        let q = tape.mul(sd, diff)?;
        let q = tape.sum(q);
        let sq = tape.square(diff);
        let sq = tape.sum(sq);
        let e = tape.scale(sq, weight.eps_pd());
        tape.add(q, e)
    }

    pub fn topo(tape: &mut Tape, diff: Var, basis: &Tensor) -> Result<Var> {
        let n = tape.value(diff).len();
        let b = tape.leaf(basis.clone());
        let col = tape.reshape(diff, &[n, 1])?;
        let p = tape.matmul(b, col)?;
        let p = tape.square(p);
        Ok(tape.sum(p))
    }

    pub fn task(tape: &mut Tape, a_hat: Var, a: &Tensor) -> Result<Var> {
        let n = a.len().max(1);
        let target = tape.leaf(a.clone());
        let d = tape.sub(a_hat, target)?;
        let d = tape.square(d);
        let d = tape.sum(d);
        Ok(tape.scale(d, 1.0 / n as f64))
    }

    pub fn smooth(tape: &mut Tape, a_hat: Var) -> Result<Var> {
        let h = tape.value(a_hat).rows();
        if h < 3 {
            let z = tape.scale(a_hat, 0.0);
            return Ok(tape.sum(z));
        }
        let mut d2 = Tensor::zeros(&[h - 2, h]);
        for t in 0..h - 2 {
            d2.set(t, t, 1.0);
            d2.set(t, t + 1, -2.0);
            d2.set(t, t + 2, 1.0);
        }
        let d2 = tape.leaf(d2);
        let s = tape.matmul(d2, a_hat)?;
        let s = tape.square(s);
        let s = tape.sum(s);
        Ok(tape.scale(s, 1.0 / (h - 2) as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    /// Field evaluations per step.
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Rk4 => 4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::Domain(format!("integrator must be `euler` or `rk4`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub method: Method,
    pub n_steps: usize,
    pub delta: f64,
}

impl IntegratorSpec {
    /// Errors unless `n_steps·delta = 1` within 1e-12.
    pub fn new(method: Method, n_steps: usize, delta: f64) -> Result<Self> {
        if n_steps == 0 || (n_steps as f64 * delta - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("{n_steps} steps of {delta} do not cover [0, 1]")));
        }
        Ok(Self { method, n_steps, delta })
    }

    pub fn steps(method: Method, n_steps: usize) -> Result<Self> {
        Self::new(method, n_steps, 1.0 / n_steps as f64)
    }

    pub fn rk4_4() -> Self {
        Self { method: Method::Rk4, n_steps: 4, delta: 0.25 }
    }

    pub fn euler_10() -> Self {
        Self { method: Method::Euler, n_steps: 10, delta: 0.1 }
    }

    pub fn evaluations(&self) -> usize {
        self.n_steps * self.method.stages()
    }
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self::rk4_4()
    }
}

/// Integrates `dA/dτ = v(A, τ)` from `τ = 0` to `1`. Returns the endpoint
/// and the number of field evaluations.
pub fn integrate(
    mut v: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    a0: &Tensor,
    spec: &IntegratorSpec,
) -> Result<(Tensor, usize)> {
    let mut a = a0.clone();
    let d = spec.delta;
    let mut evals = 0;
    let mut eval = |x: &Tensor, t: f64| {
        evals += 1;
        let out = v(x, t)?;
        if out.shape() != x.shape() {
            return Err(dim_err("integrate", format!("field returned {:?} for state {:?}", out.shape(), x.shape())));
        }
        Ok(out)
    };
    for i in 0..spec.n_steps {
        let tau = i as f64 * d;
        match spec.method {
            Method::Euler => {
                let k1 = eval(&a, tau)?;
                a.axpy(d, &k1)?;
            }
            Method::Rk4 => {
                let k1 = eval(&a, tau)?;
                let mut x = a.clone();
                x.axpy(d / 2.0, &k1)?;
                let k2 = eval(&x, tau + d / 2.0)?;
                let mut x = a.clone();
                x.axpy(d / 2.0, &k2)?;
                let k3 = eval(&x, tau + d / 2.0)?;
                let mut x = a.clone();
                x.axpy(d, &k3)?;
                let k4 = eval(&x, tau + d)?;
                a.axpy(d / 6.0, &k1)?;
                a.axpy(d / 3.0, &k2)?;
                a.axpy(d / 3.0, &k3)?;
                a.axpy(d / 6.0, &k4)?;
            }
        }
    }
    Ok((a, evals))
}
