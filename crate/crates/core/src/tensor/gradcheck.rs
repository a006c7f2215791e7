//! Central finite differences, used to validate the tape.

use super::{ParamId, ParamStore, Result};

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for one element of one parameter.
/// The parameter is restored before returning.
pub fn central_difference<F>(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    f: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let original = store.tensor(id).data()[index];
    store.get_mut(id).tensor.data_mut()[index] = original + h;
    let plus = f(store);
    store.get_mut(id).tensor.data_mut()[index] = original - h;
    let minus = f(store);
    store.get_mut(id).tensor.data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * h))
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Compares gradients already accumulated in `store` against finite
/// differences of `f` at the listed `(parameter, element)` positions.
pub fn compare<F>(
    store: &mut ParamStore,
    samples: &[(ParamId, usize)],
    h: f64,
    mut f: F,
) -> Result<Vec<GradCheckEntry>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Vec::with_capacity(samples.len());
    for &(id, index) in samples {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data()[index])
            .unwrap_or(0.0);
        let numeric = central_difference(store, id, index, h, &mut f)?;
        out.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
        });
    }
    Ok(out)
}
