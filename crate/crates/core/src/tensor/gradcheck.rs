use super::{Graph, ParamId, ParamStore, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares recorded gradients of the scalar `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every trainable parameter.
///
/// With `max_coords_per_param`, at most that many evenly spaced coordinates
/// of each tensor are checked. The error at a coordinate is
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    max_coords_per_param: Option<usize>,
) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph) -> Result<Var, TensorError>,
{
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue("gradcheck objective".into()));
        }
        Ok(v)
    };

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        store
            .ids()
            .filter(|&id| !store.is_frozen(id))
            .map(|id| {
                let g = grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
                (id, g)
            })
            .collect()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (id, g_ad) in analytic {
        let n = g_ad.len();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let g_fd = (plus? - minus?) / (2.0 * h);
            let a = g_ad[i];
            let err = (a - g_fd).abs() / a.abs().max(g_fd.abs()).max(1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
