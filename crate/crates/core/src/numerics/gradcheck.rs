//! Central finite-difference gradient checking against [`Tape::backward`].

use super::{NodeId, Tape, Tensor};

/// Worst relative error between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Denominator floor for [`relative_error`]; below it the check is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of the scalar built by `f` against central
/// differences with step `eps`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &ids);
    tape.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad_tensor(id)).collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..probe[t].len() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe[t].data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, REL_ERR_FLOOR));
            report.checked += 1;
        }
    }
    report
}
