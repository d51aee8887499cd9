//! Central finite differences, used as an independent oracle for gradients.
//!
//! Only forward evaluations of the loss are used here, never the tape's
//! reverse pass.

use crate::store::ParameterStore;

/// Central-difference gradient of `f` at `params`, one entry at a time.
pub fn numeric_grad<F>(params: &ParameterStore<f64>, step: f64, f: F) -> ParameterStore<f64>
where
    F: Fn(&ParameterStore<f64>) -> f64,
{
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let fp = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let fm = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] = (fp - fm) / (2.0 * step);
        }
    }
    out
}

/// Central-difference gradient of a function of a flat vector.
pub fn numeric_grad_vec<F>(x: &[f64], step: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let fp = f(&probe);
            probe[i] = x[i] - step;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the L2 sense over whole vectors; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Relative error between two parameter-shaped gradient sets (flattened).
pub fn store_relative_error(a: &ParameterStore<f64>, b: &ParameterStore<f64>) -> f64 {
    let fa: Vec<f64> = a.iter().flat_map(|(_, v)| v.data().to_vec()).collect();
    let fb: Vec<f64> = b.iter().flat_map(|(_, v)| v.data().to_vec()).collect();
    relative_error(&fa, &fb)
}
