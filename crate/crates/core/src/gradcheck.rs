//! Central finite-difference gradient checking. Used by the test suites to
//! validate every primitive and every composite block against an independent
//! numerical derivative.

use crate::error::Result;
use crate::rng::Prng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: components whose gradients sit below this magnitude
/// are dominated by finite-difference roundoff and are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub components: usize,
    /// (input index, flat component) of the worst disagreement.
    pub worst: (usize, usize),
}

/// Checks d(loss)/d(inputs) for a scalar-valued graph builder against central
/// finite differences with step `FD_STEP`.
///
/// The builder receives fresh leaves for the current input values and must
/// return the scalar loss node. It is re-invoked 2*P times for P components.
pub fn check_gradients(
    inputs: &[Tensor],
    mut build: impl FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let mut eval = |vals: &[Tensor], want_grads: bool| -> Result<(f64, Option<Vec<Option<Tensor>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item();
        if want_grads {
            tape.backward(loss)?;
            let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = eval(inputs, true)?;
    let grads = grads.unwrap();

    let mut report = GradCheckReport { max_rel_err: 0.0, components: 0, worst: (0, 0) };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let (fp, _) = eval(&work, false)?;
            work[ti].data_mut()[j] = orig - FD_STEP;
            let (fm, _) = eval(&work, false)?;
            work[ti].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let ad = grads[ti].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
            report.components += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, j);
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`], but regenerates the inputs until no ReLU in the
/// graph is evaluated within `kink_margin` of its kink, so the tighter
/// tolerance applies. Returns the report and the number of resamples used.
pub fn check_gradients_away_from_kinks(
    rng: &mut Prng,
    mut sample: impl FnMut(&mut Prng) -> Vec<Tensor>,
    mut build: impl FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
    kink_margin: f64,
    max_attempts: usize,
) -> Result<(GradCheckReport, usize)> {
    let mut attempts = 0;
    loop {
        let inputs = sample(rng);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&mut tape, &ids)?;
        let margin = tape.min_abs_relu_input();
        attempts += 1;
        if margin > kink_margin || attempts >= max_attempts {
            let report = check_gradients(&inputs, build)?;
            return Ok((report, attempts));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn quadratic_matches_fd() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let report = check_gradients(&[x], |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn resampling_avoids_relu_kinks() {
        let mut rng = rng::seeded(5);
        let (report, _) = check_gradients_away_from_kinks(
            &mut rng,
            |rng| vec![rng::normal_tensor(rng, &[6], 1.0)],
            |tape, ids| {
                let y = tape.relu(ids[0]);
                Ok(tape.sum_squares(y))
            },
            1e-3,
            50,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }
}
