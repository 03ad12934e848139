//! Partition balance penalty.
//!
//! For the full kernel `W` (rows `exp(D/2)·b`) and each agent's row block
//! `W_i`, with squared singular values `λ_k` of `W` and `μ_{i,k}` of `W_i`
//! (both descending, zero-padded to `P`), the penalty is
//!
//! ```text
//! Σ_i Σ_k max(0, λ_k − μ_{i,k} / δ)
//! ```
//!
//! Squared singular values are read off the eigenvalues of the `P × P` Gram
//! matrices `WᵀW` and `W_iᵀW_i`. Since `∂λ/∂W = 2 W v vᵀ` for a unit
//! eigenvector `v`, the gradient is a sum of rank-one projections applied to
//! each row and needs no differencing.

use crate::linalg::{self, Matrix};

use super::{KernelError, KernelGrad, QDppKernel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyEval {
    pub value: f64,
    /// Number of `(partition, k)` terms with a positive hinge.
    pub active_terms: usize,
    /// False when an eigen-solve failed; the value is then reported as zero.
    pub converged: bool,
}

/// Stateful evaluator that warm-starts each eigen-solve from the previous call.
#[derive(Debug, Clone)]
pub struct SvPenalty {
    delta: f64,
    full_vectors: Option<Matrix>,
    block_vectors: Vec<Option<Matrix>>,
    rows: Vec<f64>,
    failures: u64,
}

impl SvPenalty {
    pub fn new(delta: f64) -> Result<Self, KernelError> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(KernelError::BadDelta(delta));
        }
        Ok(Self {
            delta,
            full_vectors: None,
            block_vectors: Vec::new(),
            rows: Vec::new(),
            failures: 0,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Eigen-solver failures seen so far.
    pub fn failures(&self) -> u64 {
        self.failures
    }

    /// Evaluates the penalty; when `grad` is given, adds `weight · ∂penalty/∂θ` into it.
    pub fn evaluate(&mut self, kernel: &QDppKernel, grad: Option<(&mut KernelGrad, f64)>) -> PenaltyEval {
        let gs = kernel.ground();
        let p = kernel.feature_dim();
        let n = gs.n_agents();
        let block = gs.partition_size();
        let m = gs.size();

        self.rows.resize(m * p, 0.0);
        for j in 0..m {
            let s = (0.5 * kernel.log_quality()[j]).exp();
            for (dst, &b) in self.rows[j * p..(j + 1) * p].iter_mut().zip(kernel.diversity_row(j)) {
                *dst = s * b;
            }
        }

        let mut full = vec![0.0; p * p];
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let mut g = vec![0.0; p * p];
            for w in self.rows[i * block * p..(i + 1) * block * p].chunks_exact(p) {
                linalg::accumulate_outer(&mut g, w, p);
            }
            linalg::symmetrize_upper(&mut g, p);
            linalg::axpy(1.0, &g, &mut full);
            blocks.push(g);
        }

        self.block_vectors.resize(n, None);
        let full_eig = match solve(&full, p, self.full_vectors.as_ref()) {
            Some(e) => e,
            None => return self.fail(),
        };
        let mut block_eigs = Vec::with_capacity(n);
        for (i, g) in blocks.iter().enumerate() {
            match solve(g, p, self.block_vectors[i].as_ref()) {
                Some(e) => block_eigs.push(e),
                None => return self.fail(),
            }
        }

        let mut value = 0.0;
        let mut active_terms = 0;
        let mut full_weights = vec![0.0; p];
        let mut block_active = vec![vec![false; p]; n];
        for (i, e) in block_eigs.iter().enumerate() {
            for k in 0..p {
                let lam = full_eig.values[k].max(0.0);
                let mu = e.values[k].max(0.0);
                let h = lam - mu / self.delta;
                if h > 0.0 {
                    value += h;
                    active_terms += 1;
                    full_weights[k] += 1.0;
                    block_active[i][k] = true;
                }
            }
        }

        if let Some((grad, weight)) = grad {
            if active_terms > 0 && weight != 0.0 {
                let mut c_full = vec![0.0; p * p];
                for k in 0..p {
                    if full_weights[k] > 0.0 {
                        add_outer(&mut c_full, full_eig.vectors.row(k), full_weights[k], p);
                    }
                }
                let mut c = vec![0.0; p * p];
                let mut g_w = vec![0.0; p];
                for i in 0..n {
                    c.copy_from_slice(&c_full);
                    for k in 0..p {
                        if block_active[i][k] {
                            add_outer(&mut c, block_eigs[i].vectors.row(k), -1.0 / self.delta, p);
                        }
                    }
                    for j in i * block..(i + 1) * block {
                        let w = &self.rows[j * p..(j + 1) * p];
                        for (a, g) in g_w.iter_mut().enumerate() {
                            *g = 2.0 * weight * linalg::dot(&c[a * p..(a + 1) * p], w);
                        }
                        let s = (0.5 * kernel.log_quality()[j]).exp();
                        grad.log_quality[j] += 0.5 * linalg::dot(&g_w, w);
                        linalg::axpy(s, &g_w, &mut grad.diversity[j * p..(j + 1) * p]);
                    }
                }
            }
        }

        self.full_vectors = Some(full_eig.vectors);
        for (slot, e) in self.block_vectors.iter_mut().zip(block_eigs) {
            *slot = Some(e.vectors);
        }
        PenaltyEval {
            value,
            active_terms,
            converged: true,
        }
    }

    fn fail(&mut self) -> PenaltyEval {
        self.failures += 1;
        self.full_vectors = None;
        self.block_vectors.iter_mut().for_each(|v| *v = None);
        log::warn!("penalty eigen-solve did not converge; penalty skipped this step");
        PenaltyEval {
            value: 0.0,
            active_terms: 0,
            converged: false,
        }
    }
}

fn solve(g: &[f64], p: usize, warm: Option<&Matrix>) -> Option<linalg::SymmetricEigen> {
    let a = Matrix::from_vec(p, p, g.to_vec()).ok()?;
    linalg::symmetric_eigen(&a, warm)
        .or_else(|_| linalg::symmetric_eigen(&a, None))
        .ok()
}

#[inline]
fn add_outer(c: &mut [f64], v: &[f64], scale: f64, p: usize) {
    for a in 0..p {
        let va = scale * v[a];
        linalg::axpy(va, v, &mut c[a * p..(a + 1) * p]);
    }
}

/// Penalty value computed directly from singular values of `W` and its blocks.
pub fn sv_penalty(kernel: &QDppKernel, delta: f64) -> Result<f64, KernelError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(KernelError::BadDelta(delta));
    }
    let gs = kernel.ground();
    let p = kernel.feature_dim();
    let w = kernel.kernel_matrix();
    let full = padded_sq(&linalg::singular_values(&w)?, p);
    let block = gs.partition_size();
    let mut total = 0.0;
    for i in 0..gs.n_agents() {
        let rows = (i * block..(i + 1) * block).map(|j| w.row(j)).collect::<Vec<_>>();
        let part = padded_sq(&linalg::singular_values(&Matrix::from_rows(&rows)?)?, p);
        for k in 0..p {
            total += (full[k] - part[k] / delta).max(0.0);
        }
    }
    Ok(total)
}

fn padded_sq(sv: &[f64], p: usize) -> Vec<f64> {
    let mut out: Vec<f64> = sv.iter().map(|s| s * s).collect();
    out.resize(p, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::GroundSet;
    use crate::rng::{stream, Stream};
    use nalgebra::DMatrix;

    fn eig_desc(g: &DMatrix<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = g.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    fn oracle_penalty(kernel: &QDppKernel, delta: f64) -> f64 {
        let gs = kernel.ground();
        let p = kernel.feature_dim();
        let m = gs.size();
        let w = DMatrix::from_fn(m, p, |r, c| {
            (0.5 * kernel.log_quality()[r]).exp() * kernel.diversity_row(r)[c]
        });
        let lam = eig_desc(&(w.transpose() * &w));
        let block = gs.partition_size();
        let mut total = 0.0;
        for i in 0..gs.n_agents() {
            let wi = w.rows(i * block, block).into_owned();
            let mu = eig_desc(&(wi.transpose() * &wi));
            for k in 0..p {
                total += (lam[k].max(0.0) - mu[k].max(0.0) / delta).max(0.0);
            }
        }
        total
    }

    #[test]
    fn zero_kernel_has_zero_penalty() {
        let gs = GroundSet::new(2, 2, 2).unwrap();
        let k = QDppKernel::from_parts(gs, 3, vec![0.0; 8], vec![0.0; 24]).unwrap();
        let mut pen = SvPenalty::new(0.5).unwrap();
        let e = pen.evaluate(&k, None);
        assert_eq!(e.value, 0.0);
        assert!(e.converged);
        assert_eq!(sv_penalty(&k, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn single_partition_with_unit_delta_is_zero() {
        let gs = GroundSet::new(1, 3, 2).unwrap();
        let k = QDppKernel::random(gs, 4, &mut stream(3, Stream::Debug)).unwrap();
        assert!(SvPenalty::new(1.0).unwrap().evaluate(&k, None).value.abs() < 1e-12);
        assert!(sv_penalty(&k, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matches_eigen_oracle() {
        let mut rng = stream(17, Stream::Debug);
        for (n, o, a, p) in [(2, 2, 3, 4), (3, 1, 4, 5), (2, 3, 2, 3)] {
            let gs = GroundSet::new(n, o, a).unwrap();
            let mut k = QDppKernel::random(gs, p, &mut rng).unwrap();
            for (j, d) in k.params_mut().0.iter_mut().enumerate() {
                *d = 0.3 * ((j * 7 % 5) as f64 - 2.0);
            }
            let want = oracle_penalty(&k, 0.5);
            let got = SvPenalty::new(0.5).unwrap().evaluate(&k, None).value;
            let via_svd = sv_penalty(&k, 0.5).unwrap();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            assert!((via_svd - want).abs() <= 1e-9 * want.abs().max(1.0), "{via_svd} vs {want}");
        }
    }

    #[test]
    fn warm_start_gives_same_value() {
        let gs = GroundSet::new(3, 2, 3).unwrap();
        let mut rng = stream(23, Stream::Debug);
        let mut k = QDppKernel::random(gs, 4, &mut rng).unwrap();
        let mut pen = SvPenalty::new(0.5).unwrap();
        pen.evaluate(&k, None);
        k.params_mut().0.iter_mut().for_each(|d| *d += 0.01);
        let warm = pen.evaluate(&k, None).value;
        let cold = SvPenalty::new(0.5).unwrap().evaluate(&k, None).value;
        assert!((warm - cold).abs() < 1e-10 * cold.max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let gs = GroundSet::new(2, 2, 2).unwrap();
        let mut rng = stream(29, Stream::Debug);
        let mut k = QDppKernel::random(gs, 3, &mut rng).unwrap();
        for (j, d) in k.params_mut().0.iter_mut().enumerate() {
            *d = 0.25 * (j as f64) - 0.6;
        }
        let delta = 0.5;
        let mut grad = KernelGrad::zeros_like(&k);
        let base = SvPenalty::new(delta).unwrap().evaluate(&k, Some((&mut grad, 1.0)));
        assert!(base.active_terms > 0);
        let h = 1e-6;
        let value = |k: &QDppKernel| oracle_penalty(k, delta);
        for j in 0..gs.size() {
            let mut kp = k.clone();
            kp.params_mut().0[j] += h;
            let mut km = k.clone();
            km.params_mut().0[j] -= h;
            let fd = (value(&kp) - value(&km)) / (2.0 * h);
            assert!((fd - grad.log_quality[j]).abs() <= 1e-4 * fd.abs().max(1.0), "D[{j}]: {fd} vs {}", grad.log_quality[j]);
        }
        for c in 0..k.diversity().len() {
            let mut kp = k.clone();
            kp.params_mut().1[c] += h;
            let mut km = k.clone();
            km.params_mut().1[c] -= h;
            let fd = (value(&kp) - value(&km)) / (2.0 * h);
            assert!((fd - grad.diversity[c]).abs() <= 1e-4 * fd.abs().max(1.0), "b[{c}]: {fd} vs {}", grad.diversity[c]);
        }
    }

    #[test]
    fn rejects_bad_delta() {
        assert!(SvPenalty::new(0.0).is_err());
        assert!(SvPenalty::new(1.5).is_err());
        assert!(SvPenalty::new(f64::NAN).is_err());
    }
}
