use crate::error::Result;
use crate::nn::{ParameterSet, Tape, Var};

/// Compares tape gradients of `f` against central differences (step `h`)
/// over every parameter scalar. Returns the norm-wise relative error
/// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`.
pub fn gradient_check<F>(params: &ParameterSet, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    let mut probe = params.clone();
    for name in params.names().map(str::to_owned).collect::<Vec<_>>() {
        let n = params.get(&name)?.len();
        let analytic: Vec<f64> = grads.get(&name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = probe.get(&name)?.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                probe.get_mut(&name)?.data_mut()[i] = x;
                let mut t = Tape::new();
                let l = f(&mut t, &probe)?;
                Ok(t.scalar(l))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            probe.get_mut(&name)?.data_mut()[i] = orig;
            diff += (a - numeric).powi(2);
            norm_a += a.powi(2);
            norm_n += numeric.powi(2);
        }
    }
    Ok(diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12))
}
