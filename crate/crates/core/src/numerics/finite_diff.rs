use super::scalar::Real;

/// Central-difference gradient estimate `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h`.
///
/// This is the independent oracle the reverse-mode gradients are checked
/// against; it never touches the differentiation machinery.
pub fn finite_diff_gradient<T: Real>(mut f: impl FnMut(&[T]) -> T, theta: &[T], h: T) -> Vec<T> {
    assert!(h > T::zero(), "finite-difference step must be positive");
    let mut probe = theta.to_vec();
    let two_h = h + h;
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_gradient(|x: &[f64]| x[0] * x[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let g = finite_diff_gradient(|_: &[f64]| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn two_step_sizes_agree_on_smooth_function() {
        let f = |x: &[f64]| (x[0] * x[1]).sin() + x[1].exp() * x[0];
        let theta = [0.3, -0.8];
        let a = finite_diff_gradient(f, &theta, 1e-3);
        let b = finite_diff_gradient(f, &theta, 1e-4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
