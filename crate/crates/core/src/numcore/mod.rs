//! Numeric substrate: tensors, a differentiation tape and random streams.

mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x` (step `h`).
///
/// Test and diagnostic helper; `f` is evaluated `2·len(x)` times.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Relative error used by every gradient check in the crate:
/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
