use rand::Rng;

use super::param::{Init, ParamId, ParamSet};
use super::tape::{NodeId, Tape};
use crate::Result;

/// Weights of one GRU cell with input size `d_in` and hidden size `d_h`.
///
/// ```text
/// z   = sigmoid(W_z in + U_z h + b_z)
/// r   = sigmoid(W_r in + U_r h + b_r)
/// c   = tanh(W_c in + U_c (r * h) + b_c)
/// out = (1 - z) * h + z * c
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
}

impl GruParams {
    /// Registers `{prefix}.W_z`, `{prefix}.U_z`, `{prefix}.b_z`, and likewise for `r` and `c`.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gate = |g: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                params.add(format!("{prefix}.W_{g}"), d_h, d_in, Init::FanIn, rng)?,
                params.add(format!("{prefix}.U_{g}"), d_h, d_h, Init::FanIn, rng)?,
                params.add(format!("{prefix}.b_{g}"), d_h, 1, Init::Zeros, rng)?,
            ))
        };
        let (w_z, u_z, b_z) = gate("z")?;
        let (w_r, u_r, b_r) = gate("r")?;
        let (w_c, u_c, b_c) = gate("c")?;
        Ok(Self {
            d_in,
            d_h,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_c,
            u_c,
            b_c,
        })
    }

    /// Closed-form scalar count: three gates of `W`, `U` and `b`.
    pub fn n_scalars(d_in: usize, d_h: usize) -> usize {
        3 * (d_h * d_in + d_h * d_h + d_h)
    }

    /// Records one cell step on the tape and returns the output node.
    pub fn step(&self, tape: &mut Tape, params: &ParamSet, input: NodeId, hidden: NodeId) -> Result<NodeId> {
        let z = tape.linear_sum(params, &[(self.w_z, input), (self.u_z, hidden)], Some(self.b_z))?;
        let z = tape.sigmoid(z);
        let r = tape.linear_sum(params, &[(self.w_r, input), (self.u_r, hidden)], Some(self.b_r))?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, hidden)?;
        let c = tape.linear_sum(params, &[(self.w_c, input), (self.u_c, rh)], Some(self.b_c))?;
        let c = tape.tanh(c);
        tape.lerp(hidden, c, z)
    }

    /// Evaluates one step outside of any larger computation.
    pub fn eval(&self, params: &ParamSet, input: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let i = tape.constant(input.to_vec())?;
        let h = tape.constant(hidden.to_vec())?;
        let out = self.step(&mut tape, params, i, h)?;
        Ok(tape.value(out).to_vec())
    }
}
