//! Bias-free item projection head and top-k selection.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// `logits = W h_u` with `W: [num_items, d]` and no bias.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub weight: ParamId,
    pub num_items: usize,
    pub dim: usize,
}

impl ProjectionHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, num_items: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / libm::sqrt(dim as f64);
        let weight = store.add_uniform("head.weight", ParamGroup::Head, &[num_items, dim], bound, rng);
        Self { weight, num_items, dim }
    }

    /// `h_u: [batch, d] -> [batch, num_items]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_u: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.matmul_nt(h_u, w)
    }
}

/// One score per row of `weight` for a single user vector.
pub fn score_items<T: Real>(h_u: &[T], weight: &Tensor<T>) -> Result<Vec<T>> {
    if weight.shape().len() != 2 || weight.cols() != h_u.len() {
        return Err(Error::Shape {
            op: "score_items",
            lhs: weight.shape().to_vec(),
            rhs: vec![h_u.len()],
        });
    }
    Ok((0..weight.rows())
        .map(|r| weight.row(r).iter().zip(h_u).map(|(&w, &h)| w * h).sum())
        .collect())
}

/// Descending score, ties by ascending index. NaN sorts last.
fn rank_order<T: Real>(logits: &[T], a: usize, b: usize) -> Ordering {
    let key = |i: usize| {
        let x = logits[i].to_f64();
        if x.is_nan() {
            f64::NEG_INFINITY
        } else {
            x
        }
    };
    key(b).total_cmp(&key(a)).then_with(|| a.cmp(&b))
}

/// The `k` best items not in `exclude`, highest score first, ties broken by
/// ascending item index. Uses partial selection rather than a full sort.
pub fn top_k_recommend<T: Real>(logits: &[T], exclude: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut banned = vec![false; logits.len()];
    for &e in exclude {
        if e < banned.len() {
            banned[e] = true;
        }
    }
    let mut cand: Vec<usize> = (0..logits.len()).filter(|&i| !banned[i]).collect();
    if k > cand.len() {
        return Err(Error::KTooLarge {
            k,
            available: cand.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_order(logits, a, b));
        cand.truncate(k);
    }
    cand.sort_unstable_by(|&a, &b| rank_order(logits, a, b));
    Ok(cand)
}
