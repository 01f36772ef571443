//! Monotone rational-quadratic splines on the unit square.
//!
//! Each spline maps [0,1] onto [0,1] through `BINS` rational-quadratic
//! pieces. Bin widths and heights come from softmaxes (so knots stay
//! sorted and the ends stay pinned at (0,0) and (1,1)), interior knot
//! derivatives from a softplus (so every piece is strictly increasing),
//! and the boundary derivatives are fixed at 1. With uniform raws and
//! unit derivatives the map is exactly the identity, which is the
//! initialization the distribution models rely on.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Number of rational-quadratic pieces per dimension.
pub const BINS: usize = 8;

/// Raw parameters one spline consumes: widths and heights logits plus
/// interior derivative pre-activations.
pub const RAW_PER_DIM: usize = 3 * BINS - 1;

/// Softplus pre-image of 1; raw interior derivatives initialized here
/// make the spline start as the identity.
pub const DERIV_IDENTITY_RAW: f64 = 0.5413248546129181;

/// Views into one dimension's slice of raw head output.
pub struct SplineRaw {
    pub widths: NodeId,
    pub heights: NodeId,
    pub derivs: NodeId,
}

/// Splits a `[RAW_PER_DIM]` vector into the three raw parameter blocks.
pub fn split_raw(tape: &Tape, raw: NodeId) -> Result<SplineRaw> {
    let shape = tape.shape(raw);
    if shape != vec![RAW_PER_DIM] {
        return Err(Error::Model(format!(
            "spline raw block must have {RAW_PER_DIM} values, found shape {shape:?}"
        )));
    }
    let idx: Vec<usize> = (0..BINS).collect();
    let widths = tape.gather(raw, &idx)?;
    let idx: Vec<usize> = (BINS..2 * BINS).collect();
    let heights = tape.gather(raw, &idx)?;
    let idx: Vec<usize> = (2 * BINS..RAW_PER_DIM).collect();
    let derivs = tape.gather(raw, &idx)?;
    Ok(SplineRaw {
        widths,
        heights,
        derivs,
    })
}

/// Scalar node for the sum of a vector's first `k` entries.
fn prefix_sum(tape: &Tape, v: NodeId, k: usize) -> Result<NodeId> {
    if k == 0 {
        return Ok(tape.scalar_const(0.0));
    }
    let idx: Vec<usize> = (0..k).collect();
    let head = tape.gather(v, &idx)?;
    Ok(tape.sum(head))
}

fn element(tape: &Tape, v: NodeId, i: usize) -> Result<NodeId> {
    let g = tape.gather(v, &[i])?;
    Ok(tape.sum(g))
}

/// Cumulative value of the spline at `x`, as a scalar node
/// differentiable in the raw parameters. `x` itself is a fixed query
/// coordinate, not a differentiated input. Out-of-range `x` clamps to
/// the pinned endpoint values 0 and 1, whose parameter gradients vanish
/// identically, so constants are exact there.
pub fn eval_cdf(tape: &Tape, raw: &SplineRaw, x: f64) -> Result<NodeId> {
    if x <= 0.0 {
        return Ok(tape.scalar_const(0.0));
    }
    if x >= 1.0 {
        return Ok(tape.scalar_const(1.0));
    }
    let w = tape.softmax(raw.widths)?;
    let h = tape.softmax(raw.heights)?;
    let interior = tape.softplus(raw.derivs);
    let one = tape.constant(vec![1], vec![1.0]);
    let d = tape.concat(&[one, interior, one])?;

    // locate the bin by value; the x-knots are the width prefix sums
    let wv = tape.value(w);
    let mut cum = 0.0;
    let mut bin = BINS - 1;
    for (i, wi) in wv.iter().enumerate() {
        if x < cum + wi {
            bin = i;
            break;
        }
        cum += wi;
    }

    let xk = prefix_sum(tape, w, bin)?;
    let wk = element(tape, w, bin)?;
    let yk = prefix_sum(tape, h, bin)?;
    let dy = element(tape, h, bin)?;
    let dk = element(tape, d, bin)?;
    let dk1 = element(tape, d, bin + 1)?;

    // xi in [0,1) is the position within the bin; s is the bin's mean slope
    let x_node = tape.scalar_const(x);
    let xi = {
        let rel = tape.sub(x_node, xk)?;
        tape.div(rel, wk)?
    };
    let s = tape.div(dy, wk)?;
    let one_minus = {
        let one = tape.scalar_const(1.0);
        tape.sub(one, xi)?
    };
    let xi_sq = tape.mul(xi, xi)?;
    let t = tape.mul(xi, one_minus)?;

    // y = yk + dy * (s xi^2 + dk xi(1-xi)) / (s + (dk1 + dk - 2s) xi(1-xi))
    let num = {
        let a = tape.mul(s, xi_sq)?;
        let b = tape.mul(dk, t)?;
        let inner = tape.add(a, b)?;
        tape.mul(dy, inner)?
    };
    let den = {
        let dsum = tape.add(dk1, dk)?;
        let two_s = tape.mul_scalar(s, 2.0);
        let coef = tape.sub(dsum, two_s)?;
        let scaled = tape.mul(coef, t)?;
        tape.add(s, scaled)?
    };
    let frac = tape.div(num, den)?;
    tape.add(yk, frac)
}
