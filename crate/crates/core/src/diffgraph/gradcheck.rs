use super::{NodeId, ParamSet, Result, Tape};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively (central differences cannot resolve them better).
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compare backward-pass gradients of the scalar built by `build` against
/// central finite differences over every parameter entry.
///
/// The error for one entry is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check<F>(params: &ParamSet, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = build(&mut tape)?;
        Ok(tape.scalar(loss))
    };
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: Vec<_> = params
        .iter()
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in ids {
        for k in 0..params.get(id).data().len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
