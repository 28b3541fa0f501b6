//! Alignment losses: ASL (the primary loss for both branches), plain BCE,
//! and the batch-contrastive cross-entropy used by the ITC baseline.
//!
//! Every loss exists twice on purpose: a direct scalar formula (the oracle
//! surface) and a tape composition used in training. Tests hold the two
//! routes together.

use serde::{Deserialize, Serialize};

use crate::numerics::{log_softmax_rows, Array, Tape, Var};
use crate::{Error, Result};

/// Probabilities are clamped to [EPS, 1 - EPS] before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Asymmetric-loss shape: focusing exponents for positives/negatives and a
/// probability margin that zeroes out easy negatives.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl AslConfig {
    /// Tagging-branch default.
    pub fn tagging() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }

    /// Text-branch default: milder negative focusing, no margin.
    pub fn text() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 1.0,
            margin: 0.0,
        }
    }

    /// Degenerate configuration equal to BCE.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Validation("ASL gammas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Validation("ASL margin must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Asymmetric loss for one (probability, label) pair.
///
/// y = 1: (1-p)^gamma_pos * (-ln p); y = 0: p_m^gamma_neg * (-ln(1-p_m))
/// with p_m = max(p - margin, 0).
pub fn asl(p: f64, y: bool, cfg: &AslConfig) -> f64 {
    let p = clamp_prob(p);
    if y {
        (1.0 - p).powf(cfg.gamma_pos) * (-p.ln())
    } else {
        let pm = (p - cfg.margin).max(0.0);
        pm.powf(cfg.gamma_neg) * (-(1.0 - pm).ln())
    }
}

/// Binary cross-entropy with the same clamping.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Symmetric in-batch contrastive cross-entropy over a square logit matrix
/// whose diagonal holds the matched pairs: mean of the row-softmax CE and the
/// column-softmax CE at the given temperature.
pub fn batch_contrastive(sim: &Array, temperature: f64) -> Result<f64> {
    let b = sim.rows();
    if sim.shape().len() != 2 || sim.cols() != b {
        return Err(Error::Shape(format!(
            "batch_contrastive needs a square matrix, got {:?}",
            sim.shape()
        )));
    }
    if b < 2 {
        return Err(Error::Validation(
            "batch_contrastive needs at least 2 pairs".into(),
        ));
    }
    let scaled = sim.map(|v| v / temperature);
    let row_lsm = log_softmax_rows(&scaled);
    let col_lsm = log_softmax_rows(&crate::numerics::transpose(&scaled));
    let mut row_ce = 0.0;
    let mut col_ce = 0.0;
    for i in 0..b {
        row_ce -= row_lsm.row(i)[i];
        col_ce -= col_lsm.row(i)[i];
    }
    Ok((row_ce + col_ce) / (2.0 * b as f64))
}

// ---------------------------------------------------------------------------
// Tape compositions
// ---------------------------------------------------------------------------

/// Mean ASL over a probability matrix with a same-shape 0/1 target mask,
/// composed from tape primitives so gradients flow into the probabilities.
pub fn asl_mean_on_tape(
    tape: &mut Tape,
    probs: Var,
    targets: &Array,
    cfg: &AslConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(probs).shape().to_vec();
    if targets.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "targets {:?} vs probabilities {:?}",
            targets.shape(),
            shape
        )));
    }
    let pos_mask = tape.input(targets.clone());
    let neg_mask = tape.input(targets.map(|y| 1.0 - y));

    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);

    // positive term: (1-p)^gp * (-ln p)
    let one_minus = tape.rsub_const(1.0, p);
    let focus_pos = tape.pow_const(one_minus, cfg.gamma_pos);
    let ln_p = tape.ln(p);
    let nll_pos = tape.neg(ln_p);
    let pos_term = tape.mul(focus_pos, nll_pos)?;

    // negative term: pm^gn * (-ln(1-pm)), pm = relu(p - m)
    let shifted = tape.add_const(p, -cfg.margin);
    let pm = tape.relu(shifted);
    let focus_neg = tape.pow_const(pm, cfg.gamma_neg);
    let one_minus_pm = tape.rsub_const(1.0, pm);
    let ln_q = tape.ln(one_minus_pm);
    let nll_neg = tape.neg(ln_q);
    let neg_term = tape.mul(focus_neg, nll_neg)?;

    let pos_masked = tape.mul(pos_term, pos_mask)?;
    let neg_masked = tape.mul(neg_term, neg_mask)?;
    let total = tape.add(pos_masked, neg_masked)?;
    Ok(tape.mean_all(total))
}

/// Symmetric contrastive CE on a square logit matrix node, diagonal targets.
pub fn batch_contrastive_on_tape(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(logits).rows();
    if tape.value(logits).cols() != b {
        return Err(Error::Shape(format!(
            "batch_contrastive needs a square matrix, got {:?}",
            tape.value(logits).shape()
        )));
    }
    if b < 2 {
        return Err(Error::Validation(
            "batch_contrastive needs at least 2 pairs".into(),
        ));
    }
    let mut diag = Array::zeros(&[b, b]);
    for i in 0..b {
        diag.data_mut()[i * b + i] = 1.0;
    }
    let diag = tape.input(diag);

    let scaled = tape.scale(logits, 1.0 / temperature);
    let row_lsm = tape.log_softmax_rows(scaled);
    let row_diag = tape.mul(row_lsm, diag)?;
    let row_sum = tape.sum_all(row_diag);

    let t = tape.transpose(scaled);
    let col_lsm = tape.log_softmax_rows(t);
    let col_diag = tape.mul(col_lsm, diag)?;
    let col_sum = tape.sum_all(col_diag);

    let total = tape.add(row_sum, col_sum)?;
    Ok(tape.scale(total, -1.0 / (2.0 * b as f64)))
}
