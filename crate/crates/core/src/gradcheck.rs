//! Central finite differences, used to validate hand-written gradients.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every index in `indices`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: impl IntoIterator<Item = usize>,
    step: f64,
) -> Vec<(usize, f64)> {
    let mut probe = x.to_vec();
    indices
        .into_iter()
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (i, (plus - minus) / (2.0 * step))
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps gradients that are
/// zero up to roundoff from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x[0].powi(3) + x[1], &[2.0, 5.0], 0..2, 1e-4);
        assert!((d[0].1 - 12.0).abs() < 1e-7);
        assert!((d[1].1 - 1.0).abs() < 1e-9);
    }
}
