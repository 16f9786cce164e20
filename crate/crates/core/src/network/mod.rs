//! T-CAM generation: a class-agnostic attention unit and a classifier with
//! a temporal self-attention ("non-local") layer.
//!
//! ```text
//! A  = sigmoid(conv1(relu(conv3(relu(conv3(X))))))           T×1
//! S  = head1(relu(conv3(relu(conv3(relu(conv3(X + NL(X))))))))  T×(C+1)
//! S̄ = A ⊙ S
//! ```
//!
//! `NL(X) = softmax(XWq (XWk)ᵀ / √F) · XWv`, so zero value weights make the
//! non-local layer an identity map.

mod params;

pub use params::{BoundParams, ModelParams, ModelShape, ParamBlock, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use params::slot;

use crate::autodiff::{Tape, Tensor2, Var};
use crate::error::{Error, Result};

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TCamVars {
    pub s: Var,
    pub a: Var,
    pub s_bar: Var,
}

/// Materialized forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TCamPair {
    pub s: Tensor2,
    pub a: Tensor2,
    pub s_bar: Tensor2,
}

fn check_input(tape: &Tape, x: Var, shape: &ModelShape) -> Result<()> {
    let (t_len, f) = tape.shape(x);
    if f != shape.feature_dim || t_len == 0 {
        return Err(Error::ShapeMismatch {
            op: "network input",
            left: (t_len, f),
            right: (t_len, shape.feature_dim),
        });
    }
    Ok(())
}

/// Class-agnostic attention `A = Att(X)`, values in (0, 1).
pub fn attention_forward(tape: &mut Tape, x: Var, p: &BoundParams, shape: &ModelShape) -> Result<Var> {
    check_input(tape, x, shape)?;
    let h = tape.conv1d(x, p.get(slot::ATT_CONV1_W), p.get(slot::ATT_CONV1_B), 3)?;
    let h = tape.relu(h)?;
    let h = tape.conv1d(h, p.get(slot::ATT_CONV2_W), p.get(slot::ATT_CONV2_B), 3)?;
    let h = tape.relu(h)?;
    let logit = tape.conv1d(h, p.get(slot::ATT_CONV3_W), p.get(slot::ATT_CONV3_B), 1)?;
    tape.sigmoid(logit)
}

/// Residual single-head temporal self-attention.
fn non_local(tape: &mut Tape, x: Var, p: &BoundParams, shape: &ModelShape) -> Result<Var> {
    let q = tape.matmul(x, p.get(slot::NL_QUERY))?;
    let k = tape.matmul(x, p.get(slot::NL_KEY))?;
    let v = tape.matmul(x, p.get(slot::NL_VALUE))?;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / (shape.feature_dim as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(weights, v)?;
    tape.add(x, mixed)
}

/// Class logits `S = f(X)`, T×(C+1), no normalization.
pub fn classifier_forward(tape: &mut Tape, x: Var, p: &BoundParams, shape: &ModelShape) -> Result<Var> {
    check_input(tape, x, shape)?;
    let mut h = non_local(tape, x, p, shape)?;
    for (w, b) in [
        (slot::CLS_CONV1_W, slot::CLS_CONV1_B),
        (slot::CLS_CONV2_W, slot::CLS_CONV2_B),
        (slot::CLS_CONV3_W, slot::CLS_CONV3_B),
    ] {
        h = tape.conv1d(h, p.get(w), p.get(b), 3)?;
        h = tape.relu(h)?;
    }
    tape.conv1d(h, p.get(slot::CLS_HEAD_W), p.get(slot::CLS_HEAD_B), 1)
}

pub fn tcam_forward(tape: &mut Tape, x: Var, p: &BoundParams, shape: &ModelShape) -> Result<TCamVars> {
    let a = attention_forward(tape, x, p, shape)?;
    let s = classifier_forward(tape, x, p, shape)?;
    let s_bar = tape.mul_col(s, a)?;
    Ok(TCamVars { s, a, s_bar })
}

impl ModelParams {
    /// Gradient-free forward pass.
    pub fn infer(&self, x: &Tensor2) -> Result<TCamPair> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = tcam_forward(&mut tape, xv, &bound, &self.shape)?;
        Ok(TCamPair {
            s: tape.value(out.s).clone(),
            a: tape.value(out.a).clone(),
            s_bar: tape.value(out.s_bar).clone(),
        })
    }
}
