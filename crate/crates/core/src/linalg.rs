//! Small dense helpers for the d <= 3 vectors and matrices used throughout.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// y += c * x
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

pub fn scale(c: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| c * v).collect()
}

/// Lexicographic comparison of equal-length vectors.
pub fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(ord) => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

/// Composite Simpson on a uniform grid of spacing `h`; an odd interval
/// count finishes with a 3/8 rule so fourth order is kept throughout.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len().saturating_sub(1);
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return 0.5 * h * (values[0] + values[1]);
    }
    if n == 2 {
        return h / 3.0 * (values[0] + 4.0 * values[1] + values[2]);
    }
    let (even_part, tail38) = if n % 2 == 0 { (n, false) } else { (n - 3, true) };
    let mut acc = 0.0;
    if even_part >= 2 {
        let mut s = values[0] + values[even_part];
        let mut k = 1;
        while k < even_part {
            s += 4.0 * values[k];
            k += 2;
        }
        k = 2;
        while k < even_part {
            s += 2.0 * values[k];
            k += 2;
        }
        acc += h / 3.0 * s;
    }
    if tail38 {
        acc += 3.0 * h / 8.0
            * (values[n - 3] + 3.0 * values[n - 2] + 3.0 * values[n - 1] + values[n]);
    }
    acc
}

/// Solve A x = b for a small dense system by Gaussian elimination with
/// partial pivoting. A is row-major n x n. Returns None if singular.
pub fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())?;
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[row * n + k] * x[k];
        }
        x[row] = s / m[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_2x2() {
        // [2 1; 1 3] x = [3; 5] -> x = (4/5, 7/5)
        let x = solve_dense(&[2.0, 1.0, 1.0, 3.0], &[3.0, 5.0], 2).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14);
        assert!((x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn solve_singular_is_none() {
        assert!(solve_dense(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2).is_none());
    }

    #[test]
    fn lex_orders_first_differing_component() {
        assert_eq!(
            lex_cmp(&[1.0, 5.0], &[1.0, 4.0]),
            std::cmp::Ordering::Greater
        );
        assert_eq!(lex_cmp(&[1.0, 4.0], &[2.0, 0.0]), std::cmp::Ordering::Less);
    }

    #[test]
    fn simpson_integrates_cubics_exactly() {
        // int_0^1 x^3 = 1/4, both for even and odd interval counts
        for n in [2usize, 3, 4, 7, 10, 11] {
            let h = 1.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|k| (h * k as f64).powi(3)).collect();
            let got = simpson_uniform(&vals, h);
            assert!((got - 0.25).abs() < 1e-14, "n={n}: {got}");
        }
    }

    #[test]
    fn simpson_converges_at_fourth_order() {
        let integral = |n: usize| {
            let h = 1.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|k| (h * k as f64).sin().exp()).collect();
            simpson_uniform(&vals, h)
        };
        let fine = integral(4096);
        let e1 = (integral(16) - fine).abs();
        let e2 = (integral(32) - fine).abs();
        assert!(e1 / e2 > 12.0, "order ratio {}", e1 / e2);
    }
}
