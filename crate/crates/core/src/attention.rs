//! Masked scaled dot-product attention.
//!
//! Logits `QKᵀ/√d` are multiplied elementwise by the sequence-level mask.
//! What happens to masked cells depends on [`MaskMode`]:
//!
//! - `Literal`: only structurally forbidden cells are set to `−∞`. A zero
//!   mask cell leaves a zero logit, which still receives softmax weight.
//! - `Hard`: cells whose mask value is zero are set to `−∞` as well, so they
//!   get exactly zero weight.
//!
//! The structural mask is blockwise causal over `[vision+language | state |
//! action]`: full attention inside a block, and each block sees every
//! earlier block.

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::topomask::{MaskMode, TopoMask};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub mask_mode: MaskMode,
    /// Block sizes in token order.
    pub layout: Vec<usize>,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize, mask_mode: MaskMode, layout: Vec<usize>) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Domain(format!("d_model {d_model} not divisible by {n_heads} heads")));
        }
        Ok(Self { n_heads, d_model, mask_mode, layout })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.iter().sum()
    }
}

/// `S[r][c] = 1` iff the block of `c` is not after the block of `r`.
pub fn blockwise_structural_mask(layout: &[usize]) -> Tensor {
    let block: Vec<usize> = layout.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect();
    let t = block.len();
    Tensor::from_fn(t, t, |r, c| f64::from(u8::from(block[c] <= block[r])))
}

/// A token-type mask laid out over sequence positions.
///
/// Cell `(p, q)` reads `M[index]` when both positions carry a type, and the
/// constant 1 otherwise (including the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMask {
    t: usize,
    index: Vec<Option<usize>>,
    allowed: Vec<bool>,
}

impl SeqMask {
    /// Positions `offset..offset + types.len()` carry the given types; the
    /// pair `(p, q)` uses `M(type(min(p, q)), type(max(p, q)))`, i.e. the
    /// earlier token followed by the later one.
    pub fn expand(mask: &TopoMask, structural: &Tensor, offset: usize, types: &[usize]) -> Result<Self> {
        let t = structural.rows();
        if !structural.is_matrix() || structural.cols() != t || offset + types.len() > t {
            return Err(dim_err("expand", format!("structural {:?}, {} typed from {offset}", structural.shape(), types.len())));
        }
        let n = mask.n();
        if let Some(bad) = types.iter().find(|&&x| x >= n) {
            return Err(Error::Domain(format!("token type {bad} outside 0..{n}")));
        }
        let mut index = vec![None; t * t];
        for (a, &ta) in types.iter().enumerate() {
            for (b, &tb) in types.iter().enumerate() {
                if a == b {
                    continue;
                }
                let (first, second) = if a < b { (ta, tb) } else { (tb, ta) };
                index[(offset + a) * t + offset + b] = Some(first * n + second);
            }
        }
        Self::from_index(mask, structural, index)
    }

    /// Position-level mask: `mask` must already be `T×T`.
    pub fn direct(mask: &TopoMask, structural: &Tensor) -> Result<Self> {
        let t = mask.n();
        if structural.shape() != [t, t] {
            return Err(dim_err("attention", format!("mask {t}×{t} vs structural {:?}", structural.shape())));
        }
        Self::from_index(mask, structural, (0..t * t).map(Some).collect())
    }

    fn from_index(mask: &TopoMask, structural: &Tensor, index: Vec<Option<usize>>) -> Result<Self> {
        let t = structural.rows();
        let md = mask.matrix().data();
        let hard = mask.mode() == MaskMode::Hard;
        let allowed = index
            .iter()
            .zip(structural.data())
            .map(|(ix, s)| *s != 0.0 && !(hard && ix.is_some_and(|k| md[k] == 0.0)))
            .collect();
        Ok(Self { t, index, allowed })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn allowed(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.t + q]
    }
}

/// Attention of one head recorded on the tape. `m` is the mask leaf the
/// sequence mask was expanded from; gradients flow into it through the
/// logit product. Returns `(output, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, m: Var, seq: &SeqMask) -> Result<(Var, Var)> {
    let t = tape.value(q).rows();
    if t != seq.t || tape.value(k).rows() != t || tape.value(v).rows() != t {
        return Err(dim_err("attention", format!("{t} queries vs mask over {} tokens", seq.t)));
    }
    let d = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let mseq = tape.gather_cells(m, t, t, seq.index.clone())?;
    let logits = tape.mul(logits, mseq)?;
    let logits = tape.mask_fill(logits, seq.allowed.clone())?;
    let w = tape.softmax_rows(logits)?;
    let out = tape.matmul(w, v)?;
    Ok((out, w))
}

/// Multi-head attention: project `x` with `wq, wk, wv`, attend per head on
/// column slices, concatenate and project with `wo`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    n_heads: usize,
    m: Var,
    seq: &SeqMask,
) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let d_model = tape.value(q).cols();
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Domain(format!("d_model {d_model} not divisible by {n_heads} heads")));
    }
    let dh = d_model / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        heads.push(attend(tape, qh, kh, vh, m, seq)?.0);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, wo)
}

/// Single-head attention over `T` tokens with a position-level `T×T` mask.
/// The mode is taken from the mask. Returns `(output, weights)`.
pub fn topo_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &TopoMask, structural: &Tensor) -> Result<(Tensor, Tensor)> {
    let seq = SeqMask::direct(mask, structural)?;
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let m = tape.leaf(mask.matrix().clone());
    let (out, w) = attend(&mut tape, q, k, v, m, &seq)?;
    Ok((tape.value(out).clone(), tape.value(w).clone()))
}
