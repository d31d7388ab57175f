use super::{AdError, Tape, Tensor, Var};

/// Entrywise comparison of an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat (row-major) index of the worst entry.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

const REL_FLOOR: f64 = 1e-12;

/// Checks the gradient of a scalar `program` with respect to input `leaf`.
///
/// `program` receives a fresh tape and one leaf per entry of `inputs`, and
/// must return a `1 x 1` variable. Relative error per entry is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn check_gradient<F>(program: F, inputs: &[Tensor], leaf: usize, step: f64) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    if !(step > 0.0) {
        return Err(AdError::Invalid(format!("step must be positive, got {step}")));
    }
    if leaf >= inputs.len() {
        return Err(AdError::Invalid(format!(
            "leaf {leaf} out of range for {} inputs",
            inputs.len()
        )));
    }
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), AdError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = program(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let (tape2, _, out2) = eval(inputs)?;
    if tape.scalar_value(out).to_bits() != tape2.scalar_value(out2).to_bits() {
        return Err(AdError::NonDeterministic);
    }
    let analytic = tape.backward(out)?.get(vars[leaf]).clone();

    let mut numeric = Tensor::zeros(inputs[leaf].dim());
    let mut shifted = inputs.to_vec();
    shifted[leaf] = shifted[leaf].as_standard_layout().to_owned();
    let base_values: Vec<f64> = shifted[leaf].iter().copied().collect();
    for (flat, slot) in numeric.iter_mut().enumerate() {
        let base = base_values[flat];
        let set = |shifted: &mut Vec<Tensor>, v: f64| {
            shifted[leaf].as_slice_mut().expect("standard layout")[flat] = v;
        };
        set(&mut shifted, base + step);
        let (t, _, o) = eval(&shifted)?;
        let plus = t.scalar_value(o);
        set(&mut shifted, base - step);
        let (t, _, o) = eval(&shifted)?;
        let minus = t.scalar_value(o);
        set(&mut shifted, base);
        *slot = (plus - minus) / (2.0 * step);
    }

    let (mut max_rel_error, mut worst_index) = (0.0_f64, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
