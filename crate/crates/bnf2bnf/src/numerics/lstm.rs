use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::xavier;
use crate::Result;

/// One uni-directional LSTM cell. Gate order in the fused projection is
/// [input, forget, candidate, output]; the forget-gate bias starts at +1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// Parameter leaves bound to one tape for the duration of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = store.add(&format!("{prefix}.wx"), xavier(rng, input_dim, 4 * hidden));
        let wh = store.add(&format!("{prefix}.wh"), xavier(rng, hidden, 4 * hidden));
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        for v in bias.data[hidden..2 * hidden].iter_mut() {
            *v = 1.0;
        }
        let b = store.add(&format!("{prefix}.b"), bias);
        LstmCell {
            wx,
            wh,
            b,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> LstmCellVars {
        LstmCellVars {
            wx: tape.param(store, self.wx),
            wh: tape.param(store, self.wh),
            b: tape.param(store, self.b),
            hidden: self.hidden,
        }
    }
}

/// Single LSTM step: returns (h, c), both [1 x hidden].
pub fn lstm_cell_step(
    tape: &mut Tape,
    cell: LstmCellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hidden = cell.hidden;
    let zx = tape.affine(x, cell.wx, Some(cell.b))?;
    let zh = tape.affine(h_prev, cell.wh, None)?;
    let z = tape.add(zx, zh)?;
    let i_raw = tape.slice_cols(z, 0, hidden)?;
    let f_raw = tape.slice_cols(z, hidden, 2 * hidden)?;
    let g_raw = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let o_raw = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct)?;
    Ok((h, c))
}
