//! Oracles shared by the integration tests. Nothing here calls into the
//! code paths it is used to check.
#![allow(dead_code)]

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} f(x) dx`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[g(Z)]` for `Z ~ N(mu, var)` with `n` Gauss–Hermite nodes.
pub fn gh_expect(n: usize, mu: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    x.iter().zip(&w).map(|(xi, wi)| wi * g(mu + s * xi)).sum::<f64>() / std::f64::consts::PI.sqrt()
}

/// Relative error with a floor on the denominator for (near-)zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn log_softmax(f: &[f64], y: usize) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    f[y] - lse
}
