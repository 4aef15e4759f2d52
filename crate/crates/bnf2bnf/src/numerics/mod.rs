//! Dense f64 tensors, a Wengert tape for reverse-mode differentiation, and a
//! central-difference oracle used to cross-check every analytic gradient.

mod fd;
mod lstm;
mod tape;
mod tensor;

pub use fd::{finite_difference_gradient, max_relative_grad_error};
pub use lstm::{lstm_cell_step, LstmCell, LstmCellVars};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use rand::Rng;

/// Uniform Xavier/Glorot init for a `rows x cols` matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}
