//! Gaussian smoothing for loss curves.

use auditlm::Scalar;

/// Index into `0..n` under half-sample symmetric reflection
/// (`… 1 0 | 0 1 … n-1 | n-1 n-2 …`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Normalized Gaussian weights over offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel<S: Scalar>(sigma: S) -> Vec<S> {
    if sigma <= S::zero() {
        return vec![S::one()];
    }
    let r = (sigma * S::lit(4.0)).ceil().to_usize().unwrap_or(0);
    let two_var = S::lit(2.0) * sigma * sigma;
    let w: Vec<S> = (0..=2 * r)
        .map(|k| {
            let x = S::count(k as u64) - S::count(r as u64);
            (-(x * x) / two_var).exp()
        })
        .collect();
    let total = w.iter().fold(S::zero(), |a, &b| a + b);
    w.into_iter().map(|x| x / total).collect()
}

/// Convolve with a Gaussian of standard deviation `sigma` samples,
/// reflecting at both ends. The kernel is symmetric and the boundary rule
/// is too, so the smoothing matrix is doubly stochastic and the mean of the
/// series is unchanged.
pub fn gaussian_smooth<S: Scalar>(xs: &[S], sigma: S) -> Vec<S> {
    let n = xs.len();
    if n == 0 {
        return Vec::new();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            k.iter()
                .enumerate()
                .fold(S::zero(), |acc, (j, &w)| acc + w * xs[reflect(i + j as isize - r, n)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..6).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 2, 1, 0]);
    }

    #[test]
    fn constants_stay_constant() {
        let xs = vec![0.25; 40];
        for y in gaussian_smooth(&xs, 15.0) {
            assert_abs_diff_eq!(y, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(15.0f64);
        assert_eq!(k.len(), 121);
        assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(k[0], k[120]);
        assert_eq!(gaussian_kernel(0.0f64), vec![1.0]);
    }

    #[test]
    fn short_series_keep_their_mean() {
        let xs = [1.0f32, 0.0, 0.0, 1.0, 1.0];
        let ys = gaussian_smooth(&xs, 15.0);
        assert_abs_diff_eq!(ys.iter().sum::<f32>() / 5.0, 0.6, epsilon = 1e-5);
    }
}
