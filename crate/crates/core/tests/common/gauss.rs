//! Multivariate Gaussian helpers used as closed-form oracles.

use moarm::rng::Stream;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &v)| {
        let mut r = r.clone();
        r.push(v);
        r
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// A random correlation matrix with substantial off-diagonal mass.
pub fn random_correlation(d: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Stream::new(seed);
    let w: Vec<Vec<f64>> = (0..d).map(|_| (0..rank).map(|_| rng.normal()).collect()).collect();
    let mut s = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            s[i][j] = (0..rank).map(|k| w[i][k] * w[j][k]).sum::<f64>() + if i == j { 0.3 } else { 0.0 };
        }
    }
    let sd: Vec<f64> = (0..d).map(|i| s[i][i].sqrt()).collect();
    for i in 0..d {
        for j in 0..d {
            s[i][j] /= sd[i] * sd[j];
        }
    }
    s
}

pub fn sample(chol: &[Vec<f64>], n: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let d = chol.len();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            (0..d).map(|i| (0..=i).map(|k| chol[i][k] * z[k]).sum()).collect()
        })
        .collect()
}

/// `E[x_m | x_o]` for a zero-mean Gaussian with covariance `cov`.
pub fn conditional_mean(cov: &[Vec<f64>], x: &[f64], observed: &[bool]) -> Vec<f64> {
    let o: Vec<usize> = (0..x.len()).filter(|&j| observed[j]).collect();
    let mut out = x.to_vec();
    if o.is_empty() {
        for j in 0..x.len() {
            out[j] = 0.0;
        }
        return out;
    }
    let soo: Vec<Vec<f64>> = o.iter().map(|&a| o.iter().map(|&b| cov[a][b]).collect()).collect();
    let xo: Vec<f64> = o.iter().map(|&a| x[a]).collect();
    let alpha = solve(&soo, &xo);
    for j in 0..x.len() {
        if !observed[j] {
            out[j] = o.iter().zip(&alpha).map(|(&a, w)| cov[j][a] * w).sum();
        }
    }
    out
}
