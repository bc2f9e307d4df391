//! Greedy sparse decomposition with nonnegative coefficients.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmpResult {
    /// One coefficient per atom; zero for atoms never selected.
    pub coefficients: Vec<f64>,
    /// Atom indices in selection order.
    pub selected: Vec<usize>,
    /// Residual norm before the first selection and after every selection.
    pub residual_norms: Vec<f64>,
    /// Every atom was all-zero.
    pub no_signal: bool,
}

impl OmpResult {
    /// Coefficients scaled to sum to one (all zero if nothing was selected).
    pub fn normalized(&self) -> Vec<f64> {
        let s: f64 = self.coefficients.iter().sum();
        if s > 0.0 {
            self.coefficients.iter().map(|c| c / s).collect()
        } else {
            vec![0.0; self.coefficients.len()]
        }
    }

    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|&&c| c > 0.0).count()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonal matching pursuit where atoms enter by largest positive
/// normalized correlation with the residual and the coefficients over the
/// selected set come from nonnegative least squares. At most `k` atoms are
/// used.
pub fn relu_omp(target: &[f64], atoms: &[Vec<f64>], k: usize) -> OmpResult {
    let n_atoms = atoms.len();
    let norms: Vec<f64> = atoms.iter().map(|a| dot(a, a).sqrt()).collect();
    let target_norm = dot(target, target).sqrt();
    let mut out = OmpResult {
        coefficients: vec![0.0; n_atoms],
        selected: Vec::new(),
        residual_norms: vec![target_norm],
        no_signal: norms.iter().all(|&n| n == 0.0),
    };
    if out.no_signal || target_norm == 0.0 {
        return out;
    }
    let tol = 1e-12 * target_norm;
    let mut residual = target.to_vec();
    let mut excluded = vec![false; n_atoms];

    while out.selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n_atoms {
            if norms[j] == 0.0 || excluded[j] || out.selected.contains(&j) {
                continue;
            }
            let c = dot(&atoms[j], &residual) / norms[j];
            if c > tol && best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, _)) = best else { break };

        let mut trial = out.selected.clone();
        trial.push(j);
        let cols: Vec<&[f64]> = trial.iter().map(|&i| atoms[i].as_slice()).collect();
        let Some(coef) = nnls(&cols, target) else {
            excluded[j] = true;
            continue;
        };
        out.selected = trial;
        for c in out.coefficients.iter_mut() {
            *c = 0.0;
        }
        for (&i, &c) in out.selected.iter().zip(&coef) {
            out.coefficients[i] = c;
        }
        for (p, r) in residual.iter_mut().enumerate() {
            *r = target[p]
                - out
                    .selected
                    .iter()
                    .zip(&coef)
                    .map(|(&i, c)| c * atoms[i][p])
                    .sum::<f64>();
        }
        let rn = dot(&residual, &residual).sqrt();
        out.residual_norms.push(rn);
        if rn <= tol {
            break;
        }
    }
    out
}

/// Lawson–Hanson active-set NNLS on the normal equations. `None` if the
/// passive-set system is singular.
pub fn nnls(cols: &[&[f64]], y: &[f64]) -> Option<Vec<f64>> {
    let m = cols.len();
    let gram: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| dot(cols[i], cols[j])).collect())
        .collect();
    let b: Vec<f64> = cols.iter().map(|c| dot(c, y)).collect();
    let scale = gram.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale;

    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    for _outer in 0..(3 * m + 10) {
        let w: Vec<f64> = (0..m)
            .map(|i| b[i] - (0..m).map(|j| gram[i][j] * x[j]).sum::<f64>())
            .collect();
        let cand = (0..m)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &c| w[a].total_cmp(&w[c]));
        let Some(t) = cand else { break };
        passive[t] = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let sub: Vec<Vec<f64>> = idx.iter().map(|&i| idx.iter().map(|&j| gram[i][j]).collect()).collect();
            let rhs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let sol = solve(sub, rhs)?;
            let mut s = vec![0.0; m];
            for (&i, v) in idx.iter().zip(&sol) {
                s[i] = *v;
            }
            if idx.iter().all(|&i| s[i] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for i in 0..m {
                x[i] += alpha * (s[i] - x[i]);
            }
            for &i in &idx {
                if x[i] <= 1e-15 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Some(x)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot = &top[col];
        for (k, r) in rest.iter_mut().enumerate() {
            let f = r[col] / pivot[col];
            for (x, p) in r[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[col + 1 + k] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn residual(cols: &[&[f64]], y: &[f64], x: &[f64]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(p, v)| {
                let r = v - cols.iter().zip(x).map(|(c, a)| a * c[p]).sum::<f64>();
                r * r
            })
            .sum()
    }

    /// Exhaustive oracle: unconstrained least squares on every support,
    /// keeping the best feasible one.
    fn nnls_brute(cols: &[&[f64]], y: &[f64]) -> f64 {
        let m = cols.len();
        let mut best = y.iter().map(|v| v * v).sum::<f64>();
        for mask in 1u32..(1 << m) {
            let idx: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
            let a: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| idx.iter().map(|&j| dot(cols[i], cols[j])).collect())
                .collect();
            let b: Vec<f64> = idx.iter().map(|&i| dot(cols[i], y)).collect();
            if let Some(s) = solve(a, b) {
                if s.iter().all(|&v| v >= 0.0) {
                    let mut x = vec![0.0; m];
                    for (&i, v) in idx.iter().zip(&s) {
                        x[i] = *v;
                    }
                    best = best.min(residual(cols, y, &x));
                }
            }
        }
        best
    }

    #[test]
    fn exact_atom() {
        let t = vec![1.0, 1.0, 0.0, 1.0];
        let r = relu_omp(&t, std::slice::from_ref(&t), 3);
        assert_eq!(r.coefficients, vec![1.0]);
        assert_eq!(r.normalized(), vec![1.0]);
    }

    #[test]
    fn two_halves() {
        let t = vec![1.0; 8];
        let a = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let b = (0..8).map(|i| if i >= 4 { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let r = relu_omp(&t, &[a, b], 3);
        let n = r.normalized();
        assert!((n[0] - 0.5).abs() < 1e-12 && (n[1] - 0.5).abs() < 1e-12);
        let r1 = relu_omp(
            &t,
            &[
                vec![1.0; 4].into_iter().chain(vec![0.0; 4]).collect(),
                vec![0.0; 4].into_iter().chain(vec![1.0; 4]).collect(),
            ],
            1,
        );
        assert_eq!(r1.nonzeros(), 1);
    }

    #[test]
    fn empty_atoms_flagged() {
        let r = relu_omp(&[1.0, 1.0], &[vec![0.0, 0.0], vec![0.0, 0.0]], 3);
        assert!(r.no_signal);
        assert_eq!(r.coefficients, vec![0.0, 0.0]);
    }

    #[test]
    fn negative_correlation_never_enters() {
        let t = vec![1.0, 1.0, 0.0];
        let r = relu_omp(&t, &[vec![-1.0, -1.0, 0.0]], 3);
        assert_eq!(r.coefficients, vec![0.0]);
    }

    proptest! {
        #[test]
        fn nnls_matches_brute_force(seed in any::<u64>(), m in 1usize..5, n in 4usize..12) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 1000) as f64 / 500.0 - 1.0 };
            let cols: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| next()).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| next()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            if let Some(x) = nnls(&refs, &y) {
                prop_assert!(x.iter().all(|&v| v >= 0.0));
                let got = residual(&refs, &y, &x);
                let want = nnls_brute(&refs, &y);
                prop_assert!(got <= want + 1e-9 * (1.0 + want), "{} vs {}", got, want);
            }
        }

        #[test]
        fn residual_non_increasing(seed in any::<u64>(), k in 1usize..5) {
            let mut s = seed | 1;
            let mut bit = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; if s % 3 == 0 { 1.0 } else { 0.0 } };
            let target: Vec<f64> = (0..30).map(|_| 1.0).collect();
            let atoms: Vec<Vec<f64>> = (0..6).map(|_| (0..30).map(|_| bit()).collect()).collect();
            let r = relu_omp(&target, &atoms, k);
            prop_assert!(r.nonzeros() <= k);
            prop_assert!(r.coefficients.iter().all(|&c| c >= 0.0));
            for w in r.residual_norms.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
