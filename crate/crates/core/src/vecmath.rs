pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector along `a`, or the zero vector when `a` is (numerically) zero.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n > 1e-12 {
        a.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; a.len()]
    }
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}
