//! Finite-difference gradient checks over whole parameter stores.

use super::ParamStore;

/// Compares analytic gradients from `f` against central differences on up to
/// `per_tensor` evenly spaced entries of every tensor in `store`.
///
/// `f(store, true)` must return the loss and per-parameter gradients (in store
/// order); `f(store, false)` only the loss. Returns the worst per-tensor
/// relative error `|a - n| / (|a| + |n|)`, skipping tensors whose sampled
/// gradient is numerically zero on both sides.
pub fn check_param_grads<E>(
    store: &ParamStore,
    per_tensor: usize,
    h: f64,
    f: impl Fn(&ParamStore, bool) -> Result<(f64, Vec<Option<Vec<f64>>>), E>,
) -> Result<f64, E> {
    let (_, grads) = f(store, true)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (k, (_, t)) in store.iter().enumerate() {
        let n = t.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut v: Vec<usize> = (0..per_tensor).map(|i| i * (n - 1) / (per_tensor - 1).max(1)).collect();
            v.dedup();
            v
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &picks {
            let base = t.data()[j];
            probe.tensors_mut().nth(k).expect("same layout").data_mut()[j] = base + h;
            let up = f(&probe, false)?.0;
            probe.tensors_mut().nth(k).expect("same layout").data_mut()[j] = base - h;
            let down = f(&probe, false)?.0;
            probe.tensors_mut().nth(k).expect("same layout").data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(k).and_then(|g| g.as_ref()).map_or(0.0, |g| g[j]);
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let scale = na.sqrt() + nn.sqrt();
        if scale > 1e-8 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}
