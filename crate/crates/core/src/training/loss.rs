//! Segmentation losses on logits.

use crate::error::Result;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Smoothing constant added to the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;
/// Weight of the BCE term in the mixed loss.
pub const BCE_WEIGHT: f64 = 0.5;

/// Values of the two loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Records `0.5 * BCE + Dice` on the tape and returns the scalar loss node.
pub fn mixed_loss_on<F: Float>(tape: &mut Tape<F>, logits: Var, target: &Tensor<F>) -> Result<(Var, LossParts)> {
    let bce = tape.bce_with_logits(logits, target)?;
    let dice = tape.dice_loss(logits, target, F::from_f64(DICE_SMOOTH))?;
    let weighted = tape.scale(bce, F::from_f64(BCE_WEIGHT));
    let total = tape.add(weighted, dice)?;
    let parts = LossParts {
        bce: tape.value(bce).item()?.to_f64(),
        dice: tape.value(dice).item()?.to_f64(),
        total: tape.value(total).item()?.to_f64(),
    };
    Ok((total, parts))
}

/// Mean binary cross-entropy of `logits` against a `{0, 1}` target.
pub fn bce_loss<F: Float>(logits: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let l = tape.bce_with_logits(z, target)?;
    tape.value(l).item()
}

/// Soft Dice loss `1 - (2*sum(p*y) + 1) / (sum(p) + sum(y) + 1)`.
pub fn dice_loss<F: Float>(logits: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let l = tape.dice_loss(z, target, F::from_f64(DICE_SMOOTH))?;
    tape.value(l).item()
}

/// `0.5 * bce_loss + dice_loss`.
pub fn mixed_loss<F: Float>(logits: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let (l, _) = mixed_loss_on(&mut tape, z, target)?;
    tape.value(l).item()
}
