use crate::{Result, Tape, Tensor, TensorError, Var};

/// Magnitude below which relative error is measured against this floor
/// instead of the gradient itself.
const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn evaluate<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("function must be scalar, got shape {:?}", value.shape()),
        });
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares tape gradients of a scalar function against central finite
/// differences with step `h`, element by element over every input.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        tol,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[k] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[k], numeric);
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, k));
                }
            }
        }
    }
    Ok(report)
}
