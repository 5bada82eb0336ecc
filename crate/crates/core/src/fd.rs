//! Central finite differences and the error metrics used to compare them with
//! analytic gradients.

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| central_partial(&mut f, &mut probe, i, h))
        .collect()
}

/// Central difference along coordinate `i` only. `probe` is restored on return.
pub fn central_partial<F>(f: &mut F, probe: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = probe[i];
    probe[i] = orig + h;
    let plus = f(probe);
    probe[i] = orig - h;
    let minus = f(probe);
    probe[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative error of two gradient vectors in the max norm:
/// `|a - b|_inf / max(|a|_inf, |b|_inf, floor)`.
pub fn max_norm_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Per-coordinate relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn coord_rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
