//! Coupled quadratic bilevel instances with closed-form ground truth.
//!
//! ```text
//!   f(ω, v) = ½ ωᵀAω + ½ (v − d)ᵀB(v − d)
//!   g(ω, v) = ½ (v − Cω)ᵀQ(v − Cω)
//! ```
//!
//! so `v*(ω) = Cω`, the hypergradient is `Aω + CᵀB(v − d)`, and every problem
//! constant is an eigenvalue or spectral norm. The single-loop iteration is an
//! affine map whose linear part ([`QuadraticInstance::iteration_matrix`]) gives
//! an exact reference rate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    self, axpy, dot, spd_solve, spectral_norm, sub, sym_eig_extremes, Cholesky, DenseMatrix,
};
use crate::problem_model::{BilevelOracle, GroundTruth, ProblemConstants};
use crate::{Error, Result};

/// Relative slack on `H` so that `‖∇²_ωv g‖₂ < H` holds strictly.
pub const CROSS_BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct QuadraticInstance {
    pub m: usize,
    pub n: usize,
    #[serde(rename = "A")]
    pub a: DenseMatrix,
    #[serde(rename = "B")]
    pub b: DenseMatrix,
    /// `n × m` coupling.
    #[serde(rename = "C")]
    pub c: DenseMatrix,
    #[serde(rename = "Q")]
    pub q: DenseMatrix,
    pub d: Vec<f64>,
}

#[derive(Deserialize)]
struct RawInstance {
    m: usize,
    n: usize,
    #[serde(rename = "A")]
    a: DenseMatrix,
    #[serde(rename = "B")]
    b: DenseMatrix,
    #[serde(rename = "C")]
    c: DenseMatrix,
    #[serde(rename = "Q")]
    q: DenseMatrix,
    d: Vec<f64>,
}

impl TryFrom<RawInstance> for QuadraticInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        let inst = QuadraticInstance {
            m: raw.m,
            n: raw.n,
            a: raw.a,
            b: raw.b,
            c: raw.c,
            q: raw.q,
            d: raw.d,
        };
        inst.validate()?;
        Ok(inst)
    }
}

impl QuadraticInstance {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidInput("instance dimensions must be positive".into()));
        }
        let shape = |what: &'static str, mat: &DenseMatrix, r: usize, c: usize| -> Result<()> {
            if mat.rows() != r || mat.cols() != c {
                return Err(Error::InvalidInput(format!(
                    "{what} must be {r}x{c}, got {}x{}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            Ok(())
        };
        shape("A", &self.a, self.m, self.m)?;
        shape("B", &self.b, self.n, self.n)?;
        shape("C", &self.c, self.n, self.m)?;
        shape("Q", &self.q, self.n, self.n)?;
        if self.d.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "d",
                expected: self.n,
                found: self.d.len(),
            });
        }
        if self.d.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("d has non-finite entries".into()));
        }
        for (name, mat) in [("A", &self.a), ("B", &self.b), ("Q", &self.q)] {
            check_spd(name, mat)?;
        }
        Ok(())
    }

    pub fn f(&self, omega: &[f64], v: &[f64]) -> f64 {
        let av = self.a.matvec(omega).expect("validated dims");
        let r = sub(v, &self.d);
        let br = self.b.matvec(&r).expect("validated dims");
        0.5 * dot(omega, &av) + 0.5 * dot(&r, &br)
    }

    pub fn g(&self, omega: &[f64], v: &[f64]) -> f64 {
        let r = sub(v, &self.c_omega(omega));
        0.5 * dot(&r, &self.q.matvec(&r).expect("validated dims"))
    }

    pub fn v_star(&self, omega: &[f64]) -> Vec<f64> {
        self.c_omega(omega)
    }

    pub fn f_star(&self, omega: &[f64]) -> f64 {
        self.f(omega, &self.v_star(omega))
    }

    /// `∇f*(ω) = Aω + CᵀB(Cω − d)`.
    pub fn grad_f_star(&self, omega: &[f64]) -> Vec<f64> {
        self.hypergradient(omega, &self.v_star(omega))
    }

    /// Closed-form hypergradient `Aω + CᵀB(v − d)`.
    pub fn hypergradient(&self, omega: &[f64], v: &[f64]) -> Vec<f64> {
        let b_r = self.b.matvec(&sub(v, &self.d)).expect("validated dims");
        let ct = self.c.tr_matvec(&b_r).expect("validated dims");
        numerics::add(&self.a.matvec(omega).expect("validated dims"), &ct)
    }

    /// `A + CᵀBC`, the Hessian of `f*`.
    pub fn reduced_hessian(&self) -> DenseMatrix {
        let ctb = self.c.transpose().matmul(&self.b).expect("validated dims");
        let ctbc = ctb.matmul(&self.c).expect("validated dims");
        symmetrized(&self.a.add(&ctbc).expect("validated dims"))
    }

    /// Linear part of the single-loop map in error coordinates `(ω − ω*, v − Cω*)`:
    ///
    /// ```text
    ///   [ I − αA    −α CᵀB ]
    ///   [ β QC      I − βQ ]
    /// ```
    pub fn iteration_matrix(&self, alpha: f64, beta: f64) -> DenseMatrix {
        let (m, n) = (self.m, self.n);
        let mut t = DenseMatrix::zeros(m + n, m + n);
        let ctb = self.c.transpose().matmul(&self.b).expect("validated dims");
        let qc = self.q.matmul(&self.c).expect("validated dims");
        for i in 0..m {
            for j in 0..m {
                t[(i, j)] = if i == j { 1.0 } else { 0.0 } - alpha * self.a[(i, j)];
            }
            for j in 0..n {
                t[(i, m + j)] = -alpha * ctb[(i, j)];
            }
        }
        for i in 0..n {
            for j in 0..m {
                t[(m + i, j)] = beta * qc[(i, j)];
            }
            for j in 0..n {
                t[(m + i, m + j)] = if i == j { 1.0 } else { 0.0 } - beta * self.q[(i, j)];
            }
        }
        t
    }

    fn c_omega(&self, omega: &[f64]) -> Vec<f64> {
        self.c.matvec(omega).expect("validated dims")
    }
}

fn check_spd(name: &str, mat: &DenseMatrix) -> Result<()> {
    let asym = mat.asymmetry().unwrap_or(f64::INFINITY);
    if asym > 1e-12 * mat.max_abs().max(1.0) {
        return Err(Error::InvalidInput(format!("{name} is not symmetric")));
    }
    Cholesky::factor(mat)
        .map(|_| ())
        .map_err(|_| Error::InvalidInput(format!("{name} is not positive definite")))
}

fn symmetrized(m: &DenseMatrix) -> DenseMatrix {
    m.add(&m.transpose()).expect("square").scaled(0.5)
}

/// The scalar reference instance: `A = B = C = 1`, `Q = 2`, `d = 4`.
///
/// `ω* = 2`, `v*(ω) = ω`, and the constants are `μ_f = μ_g = L_g = 2`,
/// `H_ω = H_v = 1`, `H = 2` (plus slack).
pub fn ref1() -> QuadraticInstance {
    scalar_instance(1.0, 1.0, 1.0, 2.0, 4.0)
}

/// The decoupled scalar instance: `C = 0`, `d = 0`, everything else 1.
pub fn ref0() -> QuadraticInstance {
    scalar_instance(1.0, 1.0, 0.0, 1.0, 0.0)
}

fn scalar_instance(a: f64, b: f64, c: f64, q: f64, d: f64) -> QuadraticInstance {
    QuadraticInstance {
        m: 1,
        n: 1,
        a: DenseMatrix::from_diag(&[a]),
        b: DenseMatrix::from_diag(&[b]),
        c: DenseMatrix::from_diag(&[c]),
        q: DenseMatrix::from_diag(&[q]),
        d: vec![d],
    }
}

/// Looks up a named fixture (`ref0`, `ref1`, case-insensitive).
pub fn named_instance(name: &str) -> Option<QuadraticInstance> {
    match name.to_ascii_lowercase().as_str() {
        "ref0" => Some(ref0()),
        "ref1" => Some(ref1()),
        _ => None,
    }
}

/// Seeded random instance.
///
/// `A`, `B`, `Q` are `U diag(λ) Uᵀ` with a random orthogonal `U` and
/// eigenvalues spaced geometrically over `[1, cond_target]`; `C` and `d` are
/// uniform on `[−1, 1]`.
pub fn make_instance(m: usize, n: usize, seed: u64, cond_target: f64) -> Result<QuadraticInstance> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("instance dimensions must be positive".into()));
    }
    if !(cond_target >= 1.0) || !cond_target.is_finite() {
        return Err(Error::InvalidInput(format!(
            "condition target must be finite and >= 1, got {cond_target}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rotated_spd(m, cond_target, &mut rng);
    let b = rotated_spd(n, cond_target, &mut rng);
    let q = rotated_spd(n, cond_target, &mut rng);
    let c = DenseMatrix::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
    let d = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let inst = QuadraticInstance { m, n, a, b, c, q, d };
    inst.validate()?;
    Ok(inst)
}

fn rotated_spd(dim: usize, cond: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let eig: Vec<f64> = if dim == 1 {
        vec![1.0]
    } else {
        (0..dim)
            .map(|i| cond.powf(i as f64 / (dim - 1) as f64))
            .collect()
    };
    let u = random_orthogonal(dim, rng);
    let mut out = DenseMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let s: f64 = (0..dim).map(|k| u[(i, k)] * eig[k] * u[(j, k)]).sum();
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// Modified Gram–Schmidt on uniform random columns.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for q in &cols {
            let proj = dot(&v, q);
            v = axpy(&v, -proj, q);
        }
        let nv = numerics::norm(&v);
        // Redraw in the (measure-zero) degenerate case.
        if nv > 1e-8 {
            cols.push(v.iter().map(|x| x / nv).collect());
        }
    }
    let mut u = DenseMatrix::zeros(dim, dim);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            u[(i, j)] = col[i];
        }
    }
    u
}

/// Provable constants for a quadratic instance.
pub fn derive_constants(inst: &QuadraticInstance) -> Result<ProblemConstants> {
    check_spd("Q", &inst.q)?;
    let (mu_g, l_g) = sym_eig_extremes(&inst.q)?;
    let ct = inst.c.transpose();
    let h = spectral_norm(&ct.matmul(&inst.q)?)? * (1.0 + CROSS_BOUND_SLACK);
    let h_omega = spectral_norm(&inst.a)?;
    let h_v = spectral_norm(&ct.matmul(&inst.b)?)?;
    let (mu_f, _) = sym_eig_extremes(&inst.reduced_hessian())?;
    Ok(ProblemConstants {
        mu_f,
        mu_g,
        l_g,
        h_omega,
        h_v,
        h,
    })
}

/// `ω* = (A + CᵀBC)⁻¹ CᵀB d` together with the map `v*(ω) = Cω`.
pub fn ground_truth(inst: &QuadraticInstance) -> Result<(Vec<f64>, impl Fn(&[f64]) -> Vec<f64> + '_)> {
    let rhs = inst.c.tr_matvec(&inst.b.matvec(&inst.d)?)?;
    let omega_star = spd_solve(&inst.reduced_hessian(), &rhs)?;
    Ok((omega_star, move |w: &[f64]| inst.v_star(w)))
}

/// Oracle wired to the closed forms, with ground truth attached.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    inst: QuadraticInstance,
    omega_star: Vec<f64>,
    /// `−CᵀQ`, constant.
    cross: DenseMatrix,
}

impl QuadraticOracle {
    pub fn instance(&self) -> &QuadraticInstance {
        &self.inst
    }
}

pub fn as_oracle(inst: &QuadraticInstance) -> Result<QuadraticOracle> {
    inst.validate()?;
    let (omega_star, _) = ground_truth(inst)?;
    let cross = inst.c.transpose().matmul(&inst.q)?.scaled(-1.0);
    Ok(QuadraticOracle {
        inst: inst.clone(),
        omega_star,
        cross,
    })
}

impl BilevelOracle for QuadraticOracle {
    fn upper_dim(&self) -> usize {
        self.inst.m
    }
    fn lower_dim(&self) -> usize {
        self.inst.n
    }
    fn grad_f_omega(&self, omega: &[f64], _v: &[f64]) -> Vec<f64> {
        self.inst.a.matvec(omega).expect("validated dims")
    }
    fn grad_f_v(&self, _omega: &[f64], v: &[f64]) -> Vec<f64> {
        self.inst.b.matvec(&sub(v, &self.inst.d)).expect("validated dims")
    }
    fn grad_g_v(&self, omega: &[f64], v: &[f64]) -> Vec<f64> {
        self.inst
            .q
            .matvec(&sub(v, &self.inst.c_omega(omega)))
            .expect("validated dims")
    }
    fn hess_g_vv(&self, _omega: &[f64], _v: &[f64]) -> DenseMatrix {
        self.inst.q.clone()
    }
    fn hess_g_omega_v(&self, _omega: &[f64], _v: &[f64]) -> DenseMatrix {
        self.cross.clone()
    }
    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

impl GroundTruth for QuadraticOracle {
    fn v_star(&self, omega: &[f64]) -> Vec<f64> {
        self.inst.v_star(omega)
    }
    fn omega_star(&self) -> &[f64] {
        &self.omega_star
    }
    fn f_star(&self, omega: &[f64]) -> f64 {
        self.inst.f_star(omega)
    }
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<QuadraticInstance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_instance(inst: &QuadraticInstance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(inst)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
