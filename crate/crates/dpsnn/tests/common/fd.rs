//! Central finite differences as an independent gradient oracle.

/// d loss / d x[i] for every i, by central differences with step `h`.
/// The closure must be a pure function of its argument.
pub fn grad_central_diff(mut loss: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = loss(&probe);
            probe[i] = orig - h;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
