//! LSTM cell recorded on a tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Tape handles for one LSTM layer's weights (see [`crate::ops::LstmParams`]
/// for the gate layout).
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// `c_t = f * c_prev + i * g`, `h_t = o * tanh(c_t)`.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: LstmVars,
) -> Result<(Var, Var)> {
    let zx = tape.matmul_t(x, w.w_input)?;
    let zh = tape.matmul_t(h_prev, w.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, w.bias)?;
    let hs = w.hidden;
    let i_pre = tape.slice_cols(z, 0, hs)?;
    let f_pre = tape.slice_cols(z, hs, hs)?;
    let g_pre = tape.slice_cols(z, 2 * hs, hs)?;
    let o_pre = tape.slice_cols(z, 3 * hs, hs)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
