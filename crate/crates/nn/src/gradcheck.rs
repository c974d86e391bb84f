//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Differences below this magnitude count as agreement regardless of the
/// relative error (both sides are zero up to roundoff).
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes dropped because `±h` flipped some ReLU input sign.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Builds the scalar function `f` on fresh tapes from `inputs`, and compares
/// the tape gradient of every (or `max_coords` sampled) input coordinate
/// against `(f(x+h) - f(x-h)) / 2h`.
pub fn check_gradients<F, R>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Vec<f64>]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), v)| tape.leaf_f64(shape.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (mut tape, vars, out) = eval(&base)?;
    let pattern = tape.relu_pattern();
    tape.backward(out)?;

    let mut report = GradCheckReport::default();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("grad after backward").to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let (tp, _, op) = eval(&plus)?;
            let (tm, _, om) = eval(&minus)?;
            if tp.relu_pattern() != pattern || tm.relu_pattern() != pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Same check, but over the parameters of `store` as read by `f`. The
/// numeric slope divides by the perturbation actually representable in f32.
pub fn check_param_gradients<F, R>(
    store: &ParamStore,
    h: f64,
    max_coords_per_param: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let pattern = tape.relu_pattern();
    tape.backward(out)?;
    tape.accumulate_grads(&mut analytic_store)?;

    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let value = store.get(&name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let analytic = analytic_store.grad(&name).expect("same layout").to_vec();
        let n = value.len();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let base = value.data()[j];
            let up = (base as f64 + h) as f32;
            let down = (base as f64 - h) as f32;
            let probe = |v: f32| -> Result<(f64, Vec<bool>)> {
                let mut s = store.clone();
                s.get_mut(&name).expect("present").data_mut()[j] = v;
                let mut t = Tape::new();
                let o = f(&mut t, &s)?;
                Ok((t.scalar(o), t.relu_pattern()))
            };
            let (fp, pp) = probe(up)?;
            let (fm, pm) = probe(down)?;
            if pp != pattern || pm != pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (up as f64 - down as f64);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
