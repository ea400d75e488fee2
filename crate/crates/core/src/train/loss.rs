//! Adversarial and reconstruction objectives.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Var};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f32 = 1e-12;

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(dim_err!(
            "{} needs equal shapes, got {:?} and {:?}",
            what,
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn loss_l1(tape: &mut Tape, fake: Var, target: Var) -> Result<Var> {
    same_shape(tape, fake, target, "L1 loss")?;
    let diff = tape.sub(target, fake)?;
    Ok(tape.abs_mean_all(diff))
}

/// `-mean(log d)`, the non-saturating generator term.
pub fn loss_adversarial(tape: &mut Tape, d_fake: Var) -> Var {
    let log = tape.log_clamped(d_fake, LOG_FLOOR);
    let mean = tape.mean_all(log);
    tape.scale(mean, -1.0)
}

/// Decomposed generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub l1: Var,
    /// `lambda * l1`.
    pub weighted_l1: Var,
}

/// `-mean(log d_fake) + lambda * mean|target - fake|`.
pub fn loss_generator(tape: &mut Tape, d_fake: Var, fake: Var, target: Var, lambda: f32) -> Result<GeneratorLoss> {
    let l1 = loss_l1(tape, fake, target)?;
    let adversarial = loss_adversarial(tape, d_fake);
    let weighted_l1 = tape.scale(l1, lambda);
    let total = tape.add(adversarial, weighted_l1)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
        weighted_l1,
    })
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn loss_discriminator(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    for (v, what) in [(d_real, "real"), (d_fake, "fake")] {
        if let Some(bad) = tape.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Contract(format!(
                "discriminator {what} output {bad} lies outside (0, 1)"
            )));
        }
    }
    let real = tape.log_clamped(d_real, LOG_FLOOR);
    let real = tape.mean_all(real);
    let one_minus = tape.affine(d_fake, -1.0, 1.0);
    let fake = tape.log_clamped(one_minus, LOG_FLOOR);
    let fake = tape.mean_all(fake);
    let sum = tape.add(real, fake)?;
    Ok(tape.scale(sum, -1.0))
}
