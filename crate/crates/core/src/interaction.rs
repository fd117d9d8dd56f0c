//! Gram-matrix feature-transfer losses.
//!
//! The informational loss ties the Gram matrix of each modality's encoder
//! output to the Gram matrix of the *other* modality's transfer output:
//!
//! ```text
//! L_infor = ( |G(F_img) - G(F'_pc)|² + |G(F_pc) - G(F'_img)|² ) / (N' · C')
//! L_stc   = mean (F_pc - F'_pc)²
//! L_transfer = L_infor + L_stc
//! L_total    = alpha · L_transfer + L_l1cd
//! ```
//!
//! `|·|²` is the sum of squared entries. The normalizer is the token count
//! times the channel count even though the Gram is `C' × C'`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::tokenize::TokenSequence;

/// `FᵀF` of an `N' × C'` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(pub Mat);

impl GramMatrix {
    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }
}

pub fn gram(f: &TokenSequence) -> GramMatrix {
    gram_of(&f.tokens)
}

pub fn gram_of(f: &Mat) -> GramMatrix {
    GramMatrix(crate::tensor::matmul(f, true, f, false))
}

pub fn gram_var(tape: &mut Tape, f: Var) -> Var {
    tape.matmul_t(f, true, f, false)
}

fn normalizer(tape: &Tape, f: Var) -> f64 {
    let (n, c) = tape.shape(f);
    (n * c) as f64
}

/// Sum of squared entries of `G(a) - G(b)`.
fn gram_gap(tape: &mut Tape, a: Var, b: Var) -> Var {
    let ga = gram_var(tape, a);
    let gb = gram_var(tape, b);
    let d = tape.sub(ga, gb);
    tape.sum_squares(d)
}

pub fn infor_loss_var(tape: &mut Tape, img_stc: Var, pc_stc: Var, img_out: Var, pc_out: Var) -> Var {
    let n = normalizer(tape, img_stc);
    let a = gram_gap(tape, img_stc, pc_out);
    let b = gram_gap(tape, pc_stc, img_out);
    let s = tape.add(a, b);
    tape.scale(s, 1.0 / n)
}

pub fn stc_loss_var(tape: &mut Tape, pc_stc: Var, pc_out: Var) -> Var {
    let d = tape.sub(pc_stc, pc_out);
    tape.mean_squares(d)
}

/// Gram alignment applied straight to the encoder outputs, used when the
/// transfer stack is ablated: `|G(F_img) - G(F_pc)|² / (N' · C')`.
pub fn direct_gram_loss_var(tape: &mut Tape, img_stc: Var, pc_stc: Var) -> Var {
    let n = normalizer(tape, img_stc);
    let g = gram_gap(tape, img_stc, pc_stc);
    tape.scale(g, 1.0 / n)
}

fn same_shape(seqs: &[&TokenSequence]) -> Result<()> {
    let shape = seqs[0].tokens.shape();
    if seqs.iter().any(|s| s.tokens.shape() != shape) {
        return Err(Error::invalid(format!(
            "token sequences differ in shape: {:?}",
            seqs.iter().map(|s| s.tokens.shape()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn evaluate(seqs: &[&TokenSequence], f: impl FnOnce(&mut Tape, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = seqs.iter().map(|s| tape.constant(s.tokens.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

pub fn loss_infor(
    img_stc: &TokenSequence,
    pc_stc: &TokenSequence,
    img_out: &TokenSequence,
    pc_out: &TokenSequence,
) -> Result<f64> {
    let seqs = [img_stc, pc_stc, img_out, pc_out];
    same_shape(&seqs)?;
    Ok(evaluate(&seqs, |t, v| infor_loss_var(t, v[0], v[1], v[2], v[3])))
}

pub fn loss_stc(pc_stc: &TokenSequence, pc_out: &TokenSequence) -> Result<f64> {
    let seqs = [pc_stc, pc_out];
    same_shape(&seqs)?;
    Ok(evaluate(&seqs, |t, v| stc_loss_var(t, v[0], v[1])))
}

pub fn loss_direct_gram(img_stc: &TokenSequence, pc_stc: &TokenSequence) -> Result<f64> {
    let seqs = [img_stc, pc_stc];
    same_shape(&seqs)?;
    Ok(evaluate(&seqs, |t, v| direct_gram_loss_var(t, v[0], v[1])))
}

pub fn loss_transfer(l_infor: f64, l_stc: f64) -> f64 {
    l_infor + l_stc
}

pub fn loss_total(l_transfer: f64, l_l1cd: f64, alpha: f64) -> f64 {
    alpha * l_transfer + l_l1cd
}

/// Scalar losses of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_infor: f64,
    pub l_stc: f64,
    pub l_transfer: f64,
    pub l_l1cd: f64,
    pub l_total: f64,
    pub alpha: f64,
    /// False for the `no_ftloss` ablation, where `l_total = l_l1cd` and the
    /// transfer loss is only logged.
    pub transfer_in_objective: bool,
}

impl LossBundle {
    pub fn new(l_infor: f64, l_stc: f64, l_l1cd: f64, alpha: f64, transfer_in_objective: bool) -> Self {
        let l_transfer = loss_transfer(l_infor, l_stc);
        let l_total = if transfer_in_objective {
            loss_total(l_transfer, l_l1cd, alpha)
        } else {
            l_l1cd
        };
        LossBundle {
            l_infor,
            l_stc,
            l_transfer,
            l_l1cd,
            l_total,
            alpha,
            transfer_in_objective,
        }
    }

    /// First non-finite component, by name.
    pub fn non_finite_component(&self) -> Option<(&'static str, f64)> {
        [
            ("l_infor", self.l_infor),
            ("l_stc", self.l_stc),
            ("l_transfer", self.l_transfer),
            ("l_l1cd", self.l_l1cd),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}
