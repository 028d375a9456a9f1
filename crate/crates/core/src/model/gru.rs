use super::BoundGru;
use crate::error::Result;
use crate::tape::{expect_vector, ComputationTape, Var};

/// One GRU update:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step(tape: &mut ComputationTape<'_>, cell: &BoundGru, x: Var, h_prev: Var) -> Result<Var> {
    expect_vector(tape, x, cell.input, "gru_step input")?;
    expect_vector(tape, h_prev, cell.hidden, "gru_step state")?;

    let z = gate(tape, cell.w_z, x, cell.u_z, h_prev, cell.b_z)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, cell.w_r, x, cell.u_r, h_prev, cell.b_r)?;
    let r = tape.sigmoid(r);
    let reset_h = tape.hadamard(r, h_prev)?;
    let cand = gate(tape, cell.w_h, x, cell.u_h, reset_h, cell.b_h)?;
    let cand = tape.tanh(cand);

    // (1 − z) ⊙ h + z ⊙ h̃ == h + z ⊙ (h̃ − h)
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.hadamard(z, delta)?;
    tape.add(h_prev, step)
}

/// `W x + U h + b`
fn gate(tape: &mut ComputationTape<'_>, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let sum = tape.add(wx, uh)?;
    tape.add(sum, b)
}
