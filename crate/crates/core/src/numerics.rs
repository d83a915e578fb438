//! Dense linear-algebra kernel.
//!
//! Everything the rest of the crate needs from linear algebra is small and
//! dense: Hessian solves for the hypergradient, spectral norms and extreme
//! eigenvalues for the problem constants, and the block matrices of the sector
//! transform. Vectors are plain `Vec<f64>` / `&[f64]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Above this dimension `spd_solve` switches from Cholesky to conjugate gradients.
pub const DIRECT_SOLVE_MAX_DIM: usize = 512;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix entries",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "matrix entry ({}, {}) is not finite",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(Error::DimensionMismatch {
                what: "matrix row length",
                expected: c,
                found: bad.len(),
            });
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                what: "matmul inner dimension",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "matvec operand",
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Mᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                what: "transposed matvec operand",
                expected: self.rows,
                found: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute entry of `M − Mᵀ`; `None` for non-square matrices.
    pub fn asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        Some(worst)
    }

    fn check_same_shape(&self, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Serialize for DenseMatrix {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for DenseMatrix {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        DenseMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `a + s·b`
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Solves `M x = rhs` for symmetric positive definite `M`.
///
/// Cholesky with one step of iterative refinement up to
/// [`DIRECT_SOLVE_MAX_DIM`], conjugate gradients beyond. Never forms `M⁻¹`.
pub fn spd_solve(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "spd_solve needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    if rhs.len() != n {
        return Err(Error::DimensionMismatch {
            what: "spd_solve right-hand side",
            expected: n,
            found: rhs.len(),
        });
    }
    let asym = m.asymmetry().unwrap_or(0.0);
    if asym > 1e-10 * m.max_abs().max(1.0) {
        return Err(Error::SingularHessian { index: 0 });
    }
    if n <= DIRECT_SOLVE_MAX_DIM {
        let chol = Cholesky::factor(m)?;
        let mut x = chol.solve(rhs);
        let resid = sub(rhs, &m.matvec(&x)?);
        let dx = chol.solve(&resid);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
        Ok(x)
    } else {
        conjugate_gradient(m, rhs)
    }
}

/// Lower-triangular Cholesky factor `M = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Reads only the lower triangle of `m`.
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        let n = m.rows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = m[(j, j)];
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::SingularHessian { index: j });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

fn conjugate_gradient(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let tol = 1e-10 * (1.0 + norm(rhs));
    let max_iters = 10 * n;
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iters {
        // Stop a little inside the target so the recomputed residual also passes.
        if rr.sqrt() <= 0.5 * tol {
            break;
        }
        let ap = m.matvec(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SingularHessian { index: it });
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    let true_resid = norm(&sub(rhs, &m.matvec(&x)?));
    if true_resid > tol {
        return Err(Error::NotConverged {
            what: "conjugate gradient solve",
            iterations: max_iters,
        });
    }
    Ok(x)
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn sym_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "symmetric eigenvalues need a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs().max(1.0);
    if m.asymmetry().unwrap_or(0.0) > 1e-12 * scale {
        return Err(Error::InvalidInput(format!(
            "matrix is not symmetric (asymmetry {:e})",
            m.asymmetry().unwrap_or(0.0)
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    // Symmetrize exactly; rotations below assume a[p][q] == a[q][p].
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut converged = n == 1;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let g = 100.0 * apq.abs();
                if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[(r, p)] = new_rp;
                    a[(p, r)] = new_rp;
                    a[(r, q)] = new_rq;
                    a[(q, r)] = new_rq;
                }
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "Jacobi eigenvalue sweep",
            iterations: JACOBI_MAX_SWEEPS,
        });
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DenseMatrix) -> Result<(f64, f64)> {
    let eig = sym_eigenvalues(m)?;
    Ok((eig[0], eig[eig.len() - 1]))
}

/// Largest singular value, via the smaller of the two Gram matrices.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    if m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let gram = if m.rows() >= m.cols() {
        m.transpose().matmul(m)?
    } else {
        m.matmul(&m.transpose())?
    };
    let (_, lmax) = sym_eig_extremes(&gram)?;
    Ok(lmax.max(0.0).sqrt())
}

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Gaussian elimination with partial pivoting on a dense copy.
    fn gauss_solve(m: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut a = m.to_rows();
        let mut b = b.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in (col + 1)..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|k| a[i][k] * x[k]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DenseMatrix::new(
            n,
            n,
            (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        g.transpose()
            .matmul(&g)
            .unwrap()
            .add(&DenseMatrix::identity(n))
            .unwrap()
    }

    #[test]
    fn solve_identity_and_scalar() {
        let x = spd_solve(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        let x = spd_solve(&DenseMatrix::from_diag(&[2.0]), &[6.0]).unwrap();
        assert_eq!(x, vec![3.0]);
    }

    #[test]
    fn solve_matches_elimination() {
        let m = DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = spd_solve(&m, &[1.0, 2.0]).unwrap();
        let oracle = gauss_solve(&m, &[1.0, 2.0]);
        // 1/11 and 7/11 by hand.
        assert!((oracle[0] - 1.0 / 11.0).abs() < 1e-15);
        assert!((oracle[1] - 7.0 / 11.0).abs() < 1e-15);
        assert!(distance(&x, &oracle) < 1e-14);
        let resid = norm(&sub(&[1.0, 2.0], &m.matvec(&x).unwrap()));
        assert!(resid <= 1e-10 * (1.0 + norm(&[1.0, 2.0])));
    }

    #[test]
    fn solve_rejects_indefinite() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            spd_solve(&m, &[1.0, 1.0]),
            Err(Error::SingularHessian { index: 1 })
        ));
        let m = DenseMatrix::from_diag(&[1.0, 0.0]);
        assert!(matches!(
            spd_solve(&m, &[1.0, 1.0]),
            Err(Error::SingularHessian { .. })
        ));
    }

    #[test]
    fn solve_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            spd_solve(&m, &[1.0, 1.0]),
            Err(Error::SingularHessian { .. })
        ));
    }

    #[test]
    fn solve_residual_bound_on_random_spd() {
        for seed in 0..1000u64 {
            let n = 1 + (seed as usize % 50);
            let m = random_spd(n, seed);
            let rhs: Vec<f64> = (0..n).map(|i| ((i * 7 + seed as usize) % 13) as f64 - 6.0).collect();
            let x = spd_solve(&m, &rhs).unwrap();
            let resid = norm(&sub(&rhs, &m.matvec(&x).unwrap()));
            assert!(resid <= 1e-10 * (1.0 + norm(&rhs)), "seed {seed}: {resid}");
        }
    }

    #[test]
    fn large_systems_use_conjugate_gradients() {
        let n = DIRECT_SOLVE_MAX_DIM + 40;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + (i % 10) as f64).collect();
        let mut m = DenseMatrix::from_diag(&diag);
        for i in 0..n - 1 {
            m[(i, i + 1)] = 0.3;
            m[(i + 1, i)] = 0.3;
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = spd_solve(&m, &rhs).unwrap();
        let resid = norm(&sub(&rhs, &m.matvec(&x).unwrap()));
        assert!(resid <= 1e-10 * (1.0 + norm(&rhs)));
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() < 1e-14);
        assert!((spectral_norm(&DenseMatrix::from_diag(&[3.0, -5.0])).unwrap() - 5.0).abs() < 1e-14);
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 2)).unwrap(), 0.0);

        // Closed-form 2x2: σ_max² = (S + sqrt(S² − 4 det²)) / 2 with S = ‖M‖_F².
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s: f64 = 1.0 + 4.0 + 9.0 + 16.0;
        let det: f64 = 1.0 * 4.0 - 2.0 * 3.0;
        let expected = ((s + (s * s - 4.0 * det * det).sqrt()) / 2.0).sqrt();
        let got = spectral_norm(&m).unwrap();
        assert!((got - expected).abs() <= 1e-8 * expected, "{got} vs {expected}");
    }

    #[test]
    fn eig_extremes_examples() {
        let (lo, hi) = sym_eig_extremes(&DenseMatrix::from_diag(&[1.0, 2.0, 7.0])).unwrap();
        assert_eq!((lo, hi), (1.0, 7.0));
        let (lo, hi) = sym_eig_extremes(&DenseMatrix::identity(5)).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (lo, hi) = sym_eig_extremes(&m).unwrap();
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0 + 1e-9, 2.0]]).unwrap();
        assert!(matches!(sym_eig_extremes(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn matrix_constructor_validation() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = DenseMatrix> {
        (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
        })
    }

    fn arb_symmetric() -> impl Strategy<Value = DenseMatrix> {
        arb_matrix().prop_map(|m| {
            let sq = if m.rows() <= m.cols() {
                m.matmul(&m.transpose()).unwrap()
            } else {
                m.transpose().matmul(&m).unwrap()
            };
            // Shift so the spectrum has both signs sometimes.
            let n = sq.rows();
            sq.sub(&DenseMatrix::identity(n).scaled(sq[(0, 0)] * 0.5)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn spectral_norm_transpose_invariant(m in arb_matrix()) {
            let a = spectral_norm(&m).unwrap();
            let b = spectral_norm(&m.transpose()).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.max(1e-300));
        }

        #[test]
        fn spectral_norm_bounds_matvec(m in arb_matrix(), seed in 0u64..1000) {
            let x: Vec<f64> = (0..m.cols()).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let nx = norm(&x);
            prop_assume!(nx > 0.0);
            let s = spectral_norm(&m).unwrap();
            prop_assert!(norm(&m.matvec(&x).unwrap()) <= s * nx * (1.0 + 1e-12));
        }

        #[test]
        fn rayleigh_quotient_within_extremes(m in arb_symmetric(), seed in 0u64..1000) {
            let (lo, hi) = sym_eig_extremes(&m).unwrap();
            let x: Vec<f64> = (0..m.rows()).map(|i| ((i as u64 * 13 + seed) % 11) as f64 - 5.0).collect();
            let xx = dot(&x, &x);
            prop_assume!(xx > 0.0);
            let rq = dot(&x, &m.matvec(&x).unwrap()) / xx;
            let tol = 1e-12 * m.max_abs().max(1.0);
            prop_assert!(lo - tol <= rq && rq <= hi + tol, "{} <= {} <= {}", lo, rq, hi);
        }

        #[test]
        fn eigenvalues_sum_to_trace(m in arb_symmetric()) {
            let eig = sym_eigenvalues(&m).unwrap();
            let trace: f64 = (0..m.rows()).map(|i| m[(i, i)]).sum();
            let sum: f64 = eig.iter().sum();
            prop_assert!((trace - sum).abs() <= 1e-10 * m.max_abs().max(1.0) * m.rows() as f64);
        }
    }
}
