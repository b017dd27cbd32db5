//! Small layer helpers shared by the model components.

use crate::error::Result;
use crate::params::{Bound, Init, ParamStore};
use crate::tape::{Tape, Var};

/// Registers `{prefix}.weight: [din, dout]` and `{prefix}.bias: [dout]`.
pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, din: usize, dout: usize) {
    store.init(
        seed,
        &format!("{prefix}.weight"),
        &[din, dout],
        Init::Glorot {
            fan_in: din,
            fan_out: dout,
        },
    );
    store.init(seed, &format!("{prefix}.bias"), &[dout], Init::Zeros);
}

/// `x @ weight + bias` over the last axis.
pub fn linear(tape: &mut Tape, params: &mut Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = params.var(tape, &format!("{prefix}.weight"))?;
    let b = params.var(tape, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}
