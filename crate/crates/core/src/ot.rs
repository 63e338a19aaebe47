//! Entropic optimal transport between two batches of feature vectors.
//!
//! The plan solves `min ⟨T, C⟩ - (1/λ) H(T)` over couplings with the given
//! marginals. It is obtained by alternately rescaling the Gibbs kernel
//! `exp(-λ C)` in the log domain, so large `λ·C` never underflows.
//!
//! Gradients treat the plan as fixed: the derivative of `⟨T, C(a, b)⟩` with
//! respect to `a` is taken with `T` frozen at its current value.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::log_sum_exp;
use crate::{Error, Result};

/// Largest problem accepted by [`exact_ot_bruteforce`].
pub const BRUTEFORCE_MAX_N: usize = 8;

/// Pairwise squared Euclidean distances between two sets of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Matrix,
}

impl CostMatrix {
    /// Wraps an arbitrary non-negative, finite cost matrix.
    pub fn from_matrix(entries: Matrix) -> Result<Self> {
        if entries.as_slice().iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::Input("costs must be finite and non-negative".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    coupling: Matrix,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
    lambda: f64,
    iterations_used: usize,
    converged: bool,
    scaling_residual: f64,
}

impl TransportPlan {
    pub fn coupling(&self) -> &Matrix {
        &self.coupling
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Marginal residual of the last scaling iterate, before projection onto the feasible set.
    pub fn scaling_residual(&self) -> f64 {
        self.scaling_residual
    }

    pub fn total_mass(&self) -> f64 {
        self.coupling.as_slice().iter().sum()
    }

    /// ∞-norm distance of the coupling's row and column sums from the target marginals.
    pub fn marginal_residual(&self) -> f64 {
        marginal_residual(&self.coupling, &self.row_marginal, &self.col_marginal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Sharpness of the plan; the kernel is `exp(-lambda * C)`.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the ∞-norm marginal residual drops below this value.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            max_iters: 1000,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("sinkhorn lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// `C[i][j] = ‖a_i − b_j‖²`.
pub fn cost_matrix(features_a: &Matrix, features_b: &Matrix) -> Result<CostMatrix> {
    if features_a.cols() != features_b.cols() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            features_a.cols(),
            features_b.cols()
        )));
    }
    let mut entries = Matrix::zeros(features_a.rows(), features_b.rows());
    for (i, a) in features_a.row_iter().enumerate() {
        for (j, b) in features_b.row_iter().enumerate() {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            entries.set(i, j, d);
        }
    }
    Ok(CostMatrix { entries })
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(name: &str, m: &[f64], expected_len: usize) -> Result<()> {
    if m.len() != expected_len {
        return Err(Error::Input(format!(
            "{name} marginal has {} entries, cost has {expected_len}",
            m.len()
        )));
    }
    if m.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
        return Err(Error::Input(format!("{name} marginal must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} marginal sums to {total}, not 1")));
    }
    Ok(())
}

fn marginal_residual(coupling: &Matrix, rows: &[f64], cols: &[f64]) -> f64 {
    let mut col_sums = vec![0.0; cols.len()];
    let mut worst: f64 = 0.0;
    for (i, row) in coupling.row_iter().enumerate() {
        worst = worst.max((row.iter().sum::<f64>() - rows[i]).abs());
        for (s, v) in col_sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    col_sums
        .iter()
        .zip(cols)
        .fold(worst, |w, (s, c)| w.max((s - c).abs()))
}

/// Projects a nonnegative matrix onto the couplings of `rows` and `cols`:
/// rows and columns are scaled down to at most their targets, then the
/// missing mass is added back as a rank-one correction.
fn round_to_marginals(plan: &mut Matrix, rows: &[f64], cols: &[f64]) {
    let (n, m) = plan.shape();
    for (i, &r) in rows.iter().enumerate() {
        let sum: f64 = plan.row(i).iter().sum();
        if sum > r {
            let s = r / sum;
            plan.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
    }
    for (j, &c) in cols.iter().enumerate() {
        let sum: f64 = (0..n).map(|i| plan.get(i, j)).sum();
        if sum > c {
            let s = c / sum;
            (0..n).for_each(|i| plan.set(i, j, plan.get(i, j) * s));
        }
    }
    let row_gap: Vec<f64> = (0..n)
        .map(|i| (rows[i] - plan.row(i).iter().sum::<f64>()).max(0.0))
        .collect();
    let col_gap: Vec<f64> = (0..m)
        .map(|j| (cols[j] - (0..n).map(|i| plan.get(i, j)).sum::<f64>()).max(0.0))
        .collect();
    let missing: f64 = row_gap.iter().sum();
    if missing > 0.0 {
        for i in 0..n {
            for j in 0..m {
                plan.set(i, j, plan.get(i, j) + row_gap[i] * col_gap[j] / missing);
            }
        }
    }
}

/// Entropic transport plan via log-domain Sinkhorn scaling.
///
/// The final scaling iterate is projected onto the feasible couplings, so the
/// returned plan meets both marginals up to rounding even when the scaling
/// has not converged within `max_iters`.
pub fn sinkhorn_plan(
    cost: &CostMatrix,
    row_marginal: &[f64],
    col_marginal: &[f64],
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    config.validate()?;
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::Input("transport between empty batches".into()));
    }
    check_marginal("row", row_marginal, n)?;
    check_marginal("column", col_marginal, m)?;
    let c = cost.entries();
    if !c.is_finite() {
        return Err(Error::Input("cost matrix is not finite".into()));
    }

    let lambda = config.lambda;
    // log K_ij = -λ C_ij
    let log_kernel: Vec<f64> = c.as_slice().iter().map(|&v| -lambda * v).collect();
    let log_a: Vec<f64> = row_marginal.iter().map(|p| p.ln()).collect();
    let log_b: Vec<f64> = col_marginal.iter().map(|p| p.ln()).collect();
    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; m];
    let mut scratch_row = vec![0.0; m];
    let mut scratch_col = vec![0.0; n];

    let plan_of = |log_u: &[f64], log_v: &[f64]| {
        let mut t = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                t.set(i, j, (log_u[i] + log_kernel[i * m + j] + log_v[j]).exp());
            }
        }
        t
    };

    let mut iterations_used = 0;
    let mut converged = false;
    let mut coupling = Matrix::zeros(n, m);
    for it in 1..=config.max_iters.max(1) {
        for i in 0..n {
            for j in 0..m {
                scratch_row[j] = log_kernel[i * m + j] + log_v[j];
            }
            log_u[i] = log_a[i] - log_sum_exp(&scratch_row);
        }
        for j in 0..m {
            for i in 0..n {
                scratch_col[i] = log_kernel[i * m + j] + log_u[i];
            }
            log_v[j] = log_b[j] - log_sum_exp(&scratch_col);
        }
        if log_u.iter().chain(&log_v).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "sinkhorn scaling diverged despite log-domain stabilization".into(),
            ));
        }
        iterations_used = it;
        coupling = plan_of(&log_u, &log_v);
        if marginal_residual(&coupling, row_marginal, col_marginal) < config.tolerance {
            converged = true;
            break;
        }
    }
    let scaling_residual = marginal_residual(&coupling, row_marginal, col_marginal);
    round_to_marginals(&mut coupling, row_marginal, col_marginal);

    Ok(TransportPlan {
        coupling,
        scaling_residual,
        row_marginal: row_marginal.to_vec(),
        col_marginal: col_marginal.to_vec(),
        lambda,
        iterations_used,
        converged,
    })
}

/// Sinkhorn plan with uniform marginals on both sides.
pub fn sinkhorn_uniform(cost: &CostMatrix, config: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    sinkhorn_plan(cost, &uniform_marginal(n), &uniform_marginal(m), config)
}

/// Transport cost `⟨T, C⟩`.
pub fn ot_loss(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    plan.coupling
        .frobenius_dot(cost.entries())
        .map(|v| v.max(0.0))
}

/// Gradient of `⟨T, C(a, b)⟩` w.r.t. the rows of `a` with the plan held
/// fixed: row `i` is `Σ_j T_ij · 2 (a_i − b_j)`.
pub fn ot_loss_grad_features(
    plan: &TransportPlan,
    features_a: &Matrix,
    features_b: &Matrix,
) -> Result<Matrix> {
    let (n, m) = plan.coupling.shape();
    if features_a.rows() != n || features_b.rows() != m || features_a.cols() != features_b.cols()
    {
        return Err(Error::Shape(format!(
            "plan {n}x{m} does not match features {:?} and {:?}",
            features_a.shape(),
            features_b.shape()
        )));
    }
    let mut grad = Matrix::zeros(n, features_a.cols());
    for i in 0..n {
        let t_row = plan.coupling.row(i);
        let mass: f64 = t_row.iter().sum();
        let g = grad.row_mut(i);
        for (gk, &ak) in g.iter_mut().zip(features_a.row(i)) {
            *gk = 2.0 * mass * ak;
        }
        for (j, &t) in t_row.iter().enumerate() {
            for (gk, &bk) in g.iter_mut().zip(features_b.row(j)) {
                *gk -= 2.0 * t * bk;
            }
        }
    }
    Ok(grad)
}

/// Exact transport cost for uniform marginals on a square cost matrix,
/// by enumerating every permutation (Heap's algorithm).
pub fn exact_ot_bruteforce(cost: &CostMatrix) -> Result<f64> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(Error::Input(format!("brute force needs a square cost, got {n}x{m}")));
    }
    if n == 0 {
        return Err(Error::Input("empty cost matrix".into()));
    }
    if n > BRUTEFORCE_MAX_N {
        return Err(Error::Input(format!(
            "brute force limited to n <= {BRUTEFORCE_MAX_N}, got {n}"
        )));
    }
    let c = cost.entries();
    let total = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum() };

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = total(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(total(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// Serializes a matrix as whitespace separated text, one row per line, with
/// a `rows cols` header. Values use Rust's round-trip float formatting.
pub fn matrix_to_text(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty matrix text".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad header token {t:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("header must be `rows cols`, got {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value {tok:?}")))?,
            );
        }
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Recursive enumeration of all permutations; independent of Heap's
    /// algorithm in the implementation.
    fn enumerate_min(c: &Matrix) -> f64 {
        fn go(c: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.cols() {
                if !used[j] {
                    used[j] = true;
                    go(c, row + 1, used, acc + c.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
        best / c.rows() as f64
    }

    #[test]
    fn cost_matrix_examples() {
        let a = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        assert_eq!(cost_matrix(&a, &a).unwrap().entries().as_slice(), &[0.0]);

        let a = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(cost_matrix(&a, &b).unwrap().entries().get(0, 0), 25.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_points(4, 3, &mut rng);
        let b = random_points(5, 3, &mut rng);
        let c = cost_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut d = 0.0;
                for k in 0..3 {
                    d += (a.get(i, k) - b.get(j, k)).powi(2);
                }
                assert_eq!(c.entries().get(i, j), d);
            }
        }
        assert!(matches!(cost_matrix(&a, &random_points(2, 2, &mut rng)), Err(Error::Shape(_))));
    }

    #[test]
    fn single_point_plan_is_forced() {
        for lambda in [0.01, 1.0, 1e4] {
            let cost = CostMatrix::from_matrix(Matrix::from_rows(&[[7.0]]).unwrap()).unwrap();
            let cfg = SinkhornConfig { lambda, ..Default::default() };
            let plan = sinkhorn_uniform(&cost, &cfg).unwrap();
            assert!((plan.coupling().get(0, 0) - 1.0).abs() < 1e-15);
            assert!(plan.converged());
        }
    }

    #[test]
    fn zero_cost_gives_max_entropy_plan() {
        let cost = CostMatrix::from_matrix(Matrix::zeros(2, 2)).unwrap();
        let plan = sinkhorn_uniform(&cost, &SinkhornConfig::default()).unwrap();
        for &t in plan.coupling().as_slice() {
            assert!((t - 0.25).abs() < 1e-15);
        }
        assert_eq!(ot_loss(&plan, &cost).unwrap(), 0.0);
    }

    #[test]
    fn sharp_plan_close_to_exact_ot() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cost = CostMatrix::from_matrix(random_points(3, 3, &mut rng)).unwrap();
        let plan = sinkhorn_uniform(&cost, &SinkhornConfig::default()).unwrap();
        let entropic = ot_loss(&plan, &cost).unwrap();
        let exact = exact_ot_bruteforce(&cost).unwrap();
        assert!((entropic - exact).abs() <= 0.01 * exact, "{entropic} vs {exact}");
    }

    #[test]
    fn invalid_marginals_rejected() {
        let cost = CostMatrix::from_matrix(Matrix::zeros(2, 2)).unwrap();
        let cfg = SinkhornConfig::default();
        assert!(matches!(sinkhorn_plan(&cost, &[0.5, 0.6], &[0.5, 0.5], &cfg), Err(Error::Input(_))));
        assert!(matches!(sinkhorn_plan(&cost, &[1.0, 0.0], &[0.5, 0.5], &cfg), Err(Error::Input(_))));
        assert!(matches!(sinkhorn_plan(&cost, &[1.0], &[0.5, 0.5], &cfg), Err(Error::Input(_))));
        let bad = SinkhornConfig { lambda: 0.0, ..cfg };
        assert!(matches!(sinkhorn_uniform(&cost, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn ot_loss_examples() {
        let cost = CostMatrix::from_matrix(Matrix::zeros(3, 3)).unwrap();
        let plan = sinkhorn_uniform(&cost, &SinkhornConfig::default()).unwrap();
        assert_eq!(ot_loss(&plan, &cost).unwrap(), 0.0);

        let p = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let cost = cost_matrix(&p, &p).unwrap();
        let plan = sinkhorn_uniform(&cost, &SinkhornConfig::default()).unwrap();
        assert_eq!(ot_loss(&plan, &cost).unwrap(), 0.0);

        // permutation plan (0->2, 1->0, 2->1) with mass 1/3 each
        let c = Matrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]).unwrap();
        let third = 1.0 / 3.0;
        let coupling =
            Matrix::from_rows(&[[0.0, 0.0, third], [third, 0.0, 0.0], [0.0, third, 0.0]]).unwrap();
        let plan = TransportPlan {
            coupling,
            row_marginal: uniform_marginal(3),
            col_marginal: uniform_marginal(3),
            lambda: 1.0,
            iterations_used: 0,
            converged: true,
            scaling_residual: 0.0,
        };
        let cost = CostMatrix::from_matrix(c).unwrap();
        // (3 + 2 + 2) / 3
        assert!((ot_loss(&plan, &cost).unwrap() - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn feature_gradient_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let plan = sinkhorn_uniform(&cost_matrix(&a, &b).unwrap(), &SinkhornConfig::default()).unwrap();
        assert_eq!(ot_loss_grad_features(&plan, &a, &b).unwrap().as_slice(), &[2.0, 0.0]);

        let plan = sinkhorn_uniform(&cost_matrix(&a, &a).unwrap(), &SinkhornConfig::default()).unwrap();
        assert_eq!(ot_loss_grad_features(&plan, &a, &a).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn feature_gradient_matches_frozen_plan_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_points(3, 3, &mut rng);
        let b = random_points(3, 3, &mut rng);
        let cfg = SinkhornConfig { lambda: 5.0, ..Default::default() };
        let plan = sinkhorn_uniform(&cost_matrix(&a, &b).unwrap(), &cfg).unwrap();
        let grad = ot_loss_grad_features(&plan, &a, &b).unwrap();
        let frozen = |x: &Matrix| ot_loss(&plan, &cost_matrix(x, &b).unwrap()).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            let mut up = a.clone();
            up.as_mut_slice()[i] += h;
            let mut down = a.clone();
            down.as_mut_slice()[i] -= h;
            let fd = (frozen(&up) - frozen(&down)) / (2.0 * h);
            let an = grad.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn bruteforce_examples() {
        let c = Matrix::from_rows(&[[0.1, 5.0, 5.0], [5.0, 0.2, 5.0], [5.0, 5.0, 0.3]]).unwrap();
        let v = exact_ot_bruteforce(&CostMatrix::from_matrix(c).unwrap()).unwrap();
        assert!((v - 0.2).abs() < 1e-15);

        let one = CostMatrix::from_matrix(Matrix::from_rows(&[[4.5]]).unwrap()).unwrap();
        assert_eq!(exact_ot_bruteforce(&one).unwrap(), 4.5);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 2..=6 {
            let c = random_points(n, n, &mut rng);
            let expected = enumerate_min(&c);
            let got = exact_ot_bruteforce(&CostMatrix::from_matrix(c).unwrap()).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }

        let big = CostMatrix::from_matrix(Matrix::zeros(9, 9)).unwrap();
        assert!(matches!(exact_ot_bruteforce(&big), Err(Error::Input(_))));
    }

    #[test]
    fn matrix_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_points(3, 4, &mut rng);
        assert_eq!(matrix_from_text(&matrix_to_text(&m)).unwrap(), m);
        assert!(matches!(matrix_from_text("2 2\n1 2 3\n"), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plan_feasible_and_above_exact(seed in any::<u64>(), n in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(n, 3, &mut rng);
            let b = random_points(n, 3, &mut rng);
            let cost = cost_matrix(&a, &b).unwrap();
            let plan = sinkhorn_uniform(&cost, &SinkhornConfig::default()).unwrap();
            prop_assert!(plan.coupling().as_slice().iter().all(|&t| t >= 0.0));
            prop_assert!((plan.total_mass() - 1.0).abs() < 1e-9);
            prop_assert!(plan.marginal_residual() <= 1e-12);
            if plan.converged() {
                prop_assert!(plan.scaling_residual() <= 1e-6);
            }
            let exact = exact_ot_bruteforce(&cost).unwrap();
            prop_assert!(ot_loss(&plan, &cost).unwrap() >= exact - 1e-9);
        }

        #[test]
        fn truncated_scaling_still_returns_a_coupling(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = cost_matrix(&random_points(n, 2, &mut rng), &random_points(m, 2, &mut rng)).unwrap();
            let cfg = SinkhornConfig { lambda: 100.0, max_iters: 1, tolerance: 1e-12 };
            let plan = sinkhorn_uniform(&cost, &cfg).unwrap();
            prop_assert!(plan.coupling().as_slice().iter().all(|&t| t >= 0.0));
            prop_assert!(plan.marginal_residual() <= 1e-12);
        }

        #[test]
        fn sharpening_does_not_increase_cost(seed in any::<u64>(), n in 2usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = cost_matrix(&random_points(n, 2, &mut rng), &random_points(n, 2, &mut rng)).unwrap();
            let mut prev = f64::INFINITY;
            for lambda in [1.0, 10.0, 100.0] {
                let cfg = SinkhornConfig { lambda, max_iters: 20_000, tolerance: 1e-10 };
                let v = ot_loss(&sinkhorn_uniform(&cost, &cfg).unwrap(), &cost).unwrap();
                prop_assert!(v <= prev + 1e-8, "lambda {lambda}: {v} > {prev}");
                prev = v;
            }
        }

        #[test]
        fn swapping_sides_preserves_loss(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(n, 3, &mut rng);
            let b = random_points(m, 3, &mut rng);
            let cfg = SinkhornConfig { lambda: 5.0, max_iters: 10_000, tolerance: 1e-13 };
            let ab = cost_matrix(&a, &b).unwrap();
            let ba = cost_matrix(&b, &a).unwrap();
            let l1 = ot_loss(&sinkhorn_uniform(&ab, &cfg).unwrap(), &ab).unwrap();
            let l2 = ot_loss(&sinkhorn_uniform(&ba, &cfg).unwrap(), &ba).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-9, "{l1} vs {l2}");
        }

        #[test]
        fn translation_invariance(seed in any::<u64>(), shift in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(4, 3, &mut rng);
            let b = random_points(5, 3, &mut rng);
            let moved = |m: &Matrix| {
                let mut out = m.clone();
                for r in 0..out.rows() {
                    for (v, s) in out.row_mut(r).iter_mut().zip(&shift) {
                        *v += s;
                    }
                }
                out
            };
            let cfg = SinkhornConfig { lambda: 10.0, ..Default::default() };
            let c1 = cost_matrix(&a, &b).unwrap();
            let c2 = cost_matrix(&moved(&a), &moved(&b)).unwrap();
            for (x, y) in c1.entries().as_slice().iter().zip(c2.entries().as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let p1 = sinkhorn_uniform(&c1, &cfg).unwrap();
            let p2 = sinkhorn_uniform(&c2, &cfg).unwrap();
            for (x, y) in p1.coupling().as_slice().iter().zip(p2.coupling().as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            prop_assert!((ot_loss(&p1, &c1).unwrap() - ot_loss(&p2, &c2).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn descent_along_gradient_reduces_frozen_cost(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(4, 3, &mut rng);
            let b = random_points(4, 3, &mut rng);
            let cfg = SinkhornConfig { lambda: 10.0, ..Default::default() };
            let plan = sinkhorn_uniform(&cost_matrix(&a, &b).unwrap(), &cfg).unwrap();
            let grad = ot_loss_grad_features(&plan, &a, &b).unwrap();
            prop_assume!(grad.max_abs() > 1e-9);
            let mut stepped = a.clone();
            for (x, g) in stepped.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *x -= 1e-3 * g;
            }
            let before = ot_loss(&plan, &cost_matrix(&a, &b).unwrap()).unwrap();
            let after = ot_loss(&plan, &cost_matrix(&stepped, &b).unwrap()).unwrap();
            prop_assert!(after < before);
        }
    }
}
