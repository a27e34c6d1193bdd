//! Ground-truth functional gradient descent for the categorical in-context
//! loss (and the real-valued Gaussian variant), written directly from the
//! update equations and independent of any attention machinery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{attention_map, KernelSpec};
use crate::numerics::{softmax_vec, Matrix};

/// N labeled covariate/category pairs plus one query covariate. Column N+1 of
/// `covariates` is the query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextSet {
    pub covariates: Matrix,
    /// 1-based category ids for positions 1..N.
    pub labels: Vec<usize>,
    pub query_label: Option<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ContextSet {
    pub fn num_context(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.covariates.rows
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if self.covariates.cols != self.labels.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "covariates have {} columns but {} labels",
                self.covariates.cols,
                self.labels.len()
            )));
        }
        self.covariates.check_finite("context covariates")?;
        for &y in self.labels.iter().chain(self.query_label.iter()) {
            if y == 0 || y > num_categories {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_categories,
                });
            }
        }
        Ok(())
    }
}

/// Current latent-function estimates across all positions, d' x (N+1).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionState {
    pub values: Matrix,
    pub step_index: usize,
}

impl FunctionState {
    pub fn zero(d_prime: usize, positions: usize) -> Self {
        FunctionState {
            values: Matrix::zeros(d_prime, positions),
            step_index: 0,
        }
    }
}

/// Which coefficient the kernel-free bias term uses. Printed form is alpha;
/// the b-update itself is derived with alpha/N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasCoefficient {
    Alpha,
    AlphaOverN,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GDConfig {
    pub alpha: f64,
    pub steps: usize,
    pub include_bias: bool,
    pub bias_coefficient: BiasCoefficient,
    pub heads: Vec<KernelSpec>,
    /// Optional per-head learning-rate override; falls back to `alpha`.
    pub per_head_alpha: Option<Vec<f64>>,
}

impl GDConfig {
    pub fn single(alpha: f64, steps: usize, kernel: KernelSpec) -> Self {
        GDConfig {
            alpha,
            steps,
            include_bias: false,
            bias_coefficient: BiasCoefficient::Alpha,
            heads: vec![kernel],
            per_head_alpha: None,
        }
    }

    pub fn head_alpha(&self, m: usize) -> f64 {
        self.per_head_alpha
            .as_ref()
            .and_then(|v| v.get(m).copied())
            .unwrap_or(self.alpha)
    }
}

/// Softmax-weighted average of the embedding columns given function value f:
/// the conditional expectation of the category embedding.
pub fn expectation_we(w_e: &Matrix, f: &[f64]) -> Vec<f64> {
    let d_prime = w_e.rows;
    let num_categories = w_e.cols;
    let logits: Vec<f64> = (0..num_categories)
        .map(|c| (0..d_prime).map(|r| w_e.get(r, c) * f[r]).sum())
        .collect();
    let probs = softmax_vec(&logits);
    let mut out = vec![0.0; d_prime];
    for (c, p) in probs.iter().enumerate() {
        for r in 0..d_prime {
            out[r] += w_e.get(r, c) * p;
        }
    }
    out
}

/// Residuals w_{e,y_i} - E(w_e)|f_i for context positions, as d' x N.
fn residuals(ctx: &ContextSet, w_e: &Matrix, state: &FunctionState) -> Matrix {
    let n = ctx.num_context();
    let d_prime = w_e.rows;
    let mut r = Matrix::zeros(d_prime, n);
    for i in 0..n {
        let f_i = state.values.column(i);
        let e = expectation_we(w_e, &f_i);
        let y = ctx.labels[i] - 1;
        for row in 0..d_prime {
            r.set(row, i, w_e.get(row, y) - e[row]);
        }
    }
    r
}

/// One functional GD step over all positions (context and query).
pub fn gd_step(
    ctx: &ContextSet,
    w_e: &Matrix,
    state: &FunctionState,
    cfg: &GDConfig,
) -> Result<FunctionState> {
    let n = ctx.num_context();
    let positions = n + 1;
    if state.values.cols != positions {
        return Err(Error::InvalidArgument(format!(
            "state has {} columns, expected {positions}",
            state.values.cols
        )));
    }
    let resid = residuals(ctx, w_e, state);
    let mut values = state.values.clone();
    for (m, kernel) in cfg.heads.iter().enumerate() {
        let map = attention_map(kernel, &ctx.covariates, 1.0, true)?;
        let keys = map.weights.slice_rows(0, n); // N x (N+1)
        let delta = resid.matmul(&keys)?.scale(cfg.head_alpha(m) / n as f64);
        values = values.add(&delta)?;
    }
    if cfg.include_bias {
        let coeff = match cfg.bias_coefficient {
            BiasCoefficient::Alpha => cfg.alpha,
            BiasCoefficient::AlphaOverN => cfg.alpha / n as f64,
        };
        let mut bias = vec![0.0; w_e.rows];
        for i in 0..n {
            for row in 0..w_e.rows {
                bias[row] += resid.get(row, i);
            }
        }
        for j in 0..positions {
            for row in 0..w_e.rows {
                values.set(row, j, values.get(row, j) + coeff * bias[row]);
            }
        }
    }
    values.check_finite("gd_step")?;
    Ok(FunctionState {
        values,
        step_index: state.step_index + 1,
    })
}

/// Iterate `gd_step` from zero exactly K times; the loss trace has K+1
/// entries (initial state included).
pub fn gd_run(ctx: &ContextSet, w_e: &Matrix, cfg: &GDConfig) -> Result<(FunctionState, Vec<f64>)> {
    let mut state = FunctionState::zero(w_e.rows, ctx.num_context() + 1);
    let mut trace = vec![context_loss(ctx, w_e, &state)];
    for _ in 0..cfg.steps {
        state = gd_step(ctx, w_e, &state, cfg)?;
        trace.push(context_loss(ctx, w_e, &state));
    }
    Ok((state, trace))
}

/// Mean cross-entropy of the context positions under the current state; the
/// query column is excluded.
pub fn context_loss(ctx: &ContextSet, w_e: &Matrix, state: &FunctionState) -> f64 {
    let n = ctx.num_context();
    let mut total = 0.0;
    for i in 0..n {
        let f_i = state.values.column(i);
        let logits: Vec<f64> = (0..w_e.cols)
            .map(|c| (0..w_e.rows).map(|r| w_e.get(r, c) * f_i[r]).sum())
            .collect();
        let lse = crate::numerics::log_sum_exp(&logits);
        total -= logits[ctx.labels[i] - 1] - lse;
    }
    total / n as f64
}

/// One GD step for real-vector labels under the Gaussian observation model:
/// the expectation of Y given f is f itself.
pub fn gd_step_real(
    covariates: &Matrix,
    real_labels: &Matrix,
    state: &FunctionState,
    cfg: &GDConfig,
) -> Result<FunctionState> {
    let n = covariates.cols - 1;
    if real_labels.cols != n {
        return Err(Error::InvalidArgument(format!(
            "expected {n} real labels, got {}",
            real_labels.cols
        )));
    }
    let resid = real_labels.sub(&state.values.slice_cols(0, n))?;
    let mut values = state.values.clone();
    for (m, kernel) in cfg.heads.iter().enumerate() {
        let map = attention_map(kernel, covariates, 1.0, true)?;
        let keys = map.weights.slice_rows(0, n);
        let delta = resid.matmul(&keys)?.scale(cfg.head_alpha(m) / n as f64);
        values = values.add(&delta)?;
    }
    values.check_finite("gd_step_real")?;
    Ok(FunctionState {
        values,
        step_index: state.step_index + 1,
    })
}

/// Squared-error context loss for the real-valued variant.
pub fn context_loss_real(covariates: &Matrix, real_labels: &Matrix, state: &FunctionState) -> f64 {
    let n = covariates.cols - 1;
    let diff = real_labels
        .sub(&state.values.slice_cols(0, n))
        .expect("shape checked by caller");
    diff.data().iter().map(|x| x * x).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::numerics::derive_stream;

    fn random_we(d_prime: usize, c: usize, seed: u64) -> Matrix {
        let mut s = derive_stream(seed, 0);
        Matrix::from_vec(d_prime, c, s.normals(d_prime * c))
    }

    fn random_ctx(d: usize, n: usize, c: usize, seed: u64) -> ContextSet {
        let mut s = derive_stream(seed, 1);
        ContextSet {
            covariates: Matrix::from_vec(d, n + 1, s.normals(d * (n + 1))),
            labels: (0..n).map(|_| 1 + (s.uniform() * c as f64) as usize).collect(),
            query_label: Some(1),
            meta: serde_json::Value::Null,
        }
    }

    #[test]
    fn expectation_at_zero_is_column_mean() {
        let w_e = random_we(4, 7, 10);
        let e = expectation_we(&w_e, &[0.0; 4]);
        for r in 0..4 {
            let mean: f64 = (0..7).map(|c| w_e.get(r, c)).sum::<f64>() / 7.0;
            assert!((e[r] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn expectation_two_class_tanh() {
        // C=2, w1=(1,0), w2=(-1,0), f=(1,0) -> (tanh 1, 0)
        let w_e = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.0, 0.0]);
        let e = expectation_we(&w_e, &[1.0, 0.0]);
        assert!((e[0] - 1.0f64.tanh()).abs() < 1e-14);
        assert!(e[1].abs() < 1e-14);
    }

    #[test]
    fn expectation_limits_to_argmax_column() {
        let w_e = random_we(5, 8, 11);
        // pick a direction with a unique argmax column
        let f: Vec<f64> = w_e.column(3).iter().map(|x| x * 1e3).collect();
        let e = expectation_we(&w_e, &f);
        let target = w_e.column(3);
        let dist: f64 = e
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-6, "dist = {dist}");
    }

    #[test]
    fn convex_hull_weights() {
        let w_e = random_we(3, 6, 12);
        let mut s = derive_stream(12, 5);
        for _ in 0..20 {
            let f: Vec<f64> = s.normals(3);
            let e = expectation_we(&w_e, &f);
            // recover the softmax weights and confirm they form a convex combination
            let logits: Vec<f64> = (0..6)
                .map(|c| (0..3).map(|r| w_e.get(r, c) * f[r]).sum())
                .collect();
            let p = softmax_vec(&logits);
            assert!(p.iter().all(|x| *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let recon: Vec<f64> = (0..3)
                .map(|r| (0..6).map(|c| w_e.get(r, c) * p[c]).sum())
                .collect();
            for r in 0..3 {
                assert!((recon[r] - e[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_alpha_leaves_state_unchanged() {
        let w_e = random_we(4, 5, 13);
        let ctx = random_ctx(3, 6, 5, 13);
        let cfg = GDConfig::single(0.0, 1, KernelSpec::new(KernelFamily::Rbf, 0.5));
        let state = FunctionState::zero(4, 7);
        let next = gd_step(&ctx, &w_e, &state, &cfg).unwrap();
        assert_eq!(next.values, state.values);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn single_context_point_linear_hand_check() {
        // N=1, f0=0, linear kernel, no bias: delta f_j = alpha*(w_y - wbar)*(x1 . xj)
        let w_e = random_we(3, 4, 14);
        let mut s = derive_stream(14, 2);
        let x = Matrix::from_vec(2, 2, s.normals(4));
        let ctx = ContextSet {
            covariates: x.clone(),
            labels: vec![2],
            query_label: None,
            meta: serde_json::Value::Null,
        };
        let alpha = 0.3;
        let cfg = GDConfig::single(alpha, 1, KernelSpec::new(KernelFamily::Linear, 1.0));
        let state = FunctionState::zero(3, 2);
        let next = gd_step(&ctx, &w_e, &state, &cfg).unwrap();
        let wbar: Vec<f64> = (0..3)
            .map(|r| (0..4).map(|c| w_e.get(r, c)).sum::<f64>() / 4.0)
            .collect();
        for j in 0..2 {
            let k = x.get(0, 0) * x.get(0, j) + x.get(1, 0) * x.get(1, j);
            for r in 0..3 {
                let expect = alpha * (w_e.get(r, 1) - wbar[r]) * k;
                assert!((next.values.get(r, j) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_state_loss_is_ln_c() {
        let w_e = random_we(5, 25, 15);
        let ctx = random_ctx(4, 8, 25, 15);
        let state = FunctionState::zero(5, 9);
        let loss = context_loss(&ctx, &w_e, &state);
        assert!((loss - 25.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_near_zero_for_aligned_state() {
        // near-orthogonal embeddings, f_i = 10 * w_{e,y_i}
        let w_e = Matrix::identity(6).scale(3.0);
        let ctx = random_ctx(2, 4, 6, 16);
        let mut state = FunctionState::zero(6, 5);
        for i in 0..4 {
            let col: Vec<f64> = w_e.column(ctx.labels[i] - 1).iter().map(|x| x * 10.0).collect();
            state.values.set_column(i, &col);
        }
        assert!(context_loss(&ctx, &w_e, &state) < 1e-6);
    }

    #[test]
    fn loss_ignores_query_column() {
        let w_e = random_we(4, 5, 17);
        let ctx = random_ctx(3, 6, 5, 17);
        let mut state = FunctionState::zero(4, 7);
        let base = context_loss(&ctx, &w_e, &state);
        state.values.set_column(6, &[99.0, -5.0, 3.0, 0.1]);
        assert_eq!(context_loss(&ctx, &w_e, &state), base);
    }

    #[test]
    fn run_composition_matches_chained_steps() {
        let w_e = random_we(4, 6, 18);
        let ctx = random_ctx(3, 5, 6, 18);
        let cfg = GDConfig::single(0.2, 3, KernelSpec::new(KernelFamily::Rbf, 0.4));
        let (end, trace) = gd_run(&ctx, &w_e, &cfg).unwrap();
        assert_eq!(trace.len(), 4);

        let mut state = FunctionState::zero(4, 6);
        for _ in 0..3 {
            state = gd_step(&ctx, &w_e, &state, &cfg).unwrap();
        }
        assert_eq!(end.values, state.values);
    }

    #[test]
    fn query_passivity() {
        // dropping the query column leaves positions 1..N bit-identical
        let w_e = random_we(4, 6, 19);
        let ctx = random_ctx(3, 5, 6, 19);
        let cfg = GDConfig::single(0.2, 4, KernelSpec::new(KernelFamily::Laplacian, 0.6));
        let (full, _) = gd_run(&ctx, &w_e, &cfg).unwrap();

        // re-run with an arbitrary replacement query
        let mut alt = ctx.clone();
        alt.covariates.set_column(5, &[7.0, -3.0, 0.25]);
        let (alt_run, _) = gd_run(&alt, &w_e, &cfg).unwrap();
        assert_eq!(
            full.values.slice_cols(0, 5),
            alt_run.values.slice_cols(0, 5)
        );
    }

    #[test]
    fn first_update_is_kernel_weighted_residual_average() {
        let w_e = random_we(4, 6, 20);
        let ctx = random_ctx(3, 5, 6, 20);
        let kernel = KernelSpec::new(KernelFamily::Rbf, 0.7);
        let cfg = GDConfig::single(0.5, 1, kernel.clone());
        let state = FunctionState::zero(4, 6);
        let next = gd_step(&ctx, &w_e, &state, &cfg).unwrap();

        let wbar: Vec<f64> = (0..4)
            .map(|r| (0..6).map(|c| w_e.get(r, c)).sum::<f64>() / 6.0)
            .collect();
        for j in 0..6 {
            for r in 0..4 {
                let mut expect = 0.0;
                for i in 0..5 {
                    let k = crate::kernels::similarity(
                        &kernel,
                        &ctx.covariates.column(i),
                        &ctx.covariates.column(j),
                    )
                    .unwrap();
                    expect += (w_e.get(r, ctx.labels[i] - 1) - wbar[r]) * k;
                }
                expect *= 0.5 / 5.0;
                assert!((next.values.get(r, j) - expect).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn real_variant_zero_alpha_and_matrix_form() {
        let mut s = derive_stream(21, 0);
        let x = Matrix::from_vec(2, 4, s.normals(8));
        let y = Matrix::from_vec(3, 3, s.normals(9));
        let cfg = GDConfig::single(0.0, 1, KernelSpec::new(KernelFamily::Linear, 1.0));
        let state = FunctionState::zero(3, 4);
        let next = gd_step_real(&x, &y, &state, &cfg).unwrap();
        assert_eq!(next.values, state.values);

        // one step from zero with a linear kernel: (alpha/N) * Y * (X_keys^T X)
        let alpha = 0.1;
        let cfg = GDConfig::single(alpha, 1, KernelSpec::new(KernelFamily::Linear, 1.0));
        let next = gd_step_real(&x, &y, &state, &cfg).unwrap();
        let keys = x.slice_cols(0, 3);
        let gram = keys.transpose().matmul(&x).unwrap();
        let expect = y.matmul(&gram).unwrap().scale(alpha / 3.0);
        assert!(next.values.max_relative_deviation(&expect, 1e-12) < 1e-12);
    }

    #[test]
    fn real_variant_descends_for_small_alpha() {
        let mut s = derive_stream(22, 0);
        let x = Matrix::from_vec(3, 7, s.normals(21));
        let y = Matrix::from_vec(2, 6, s.normals(12));
        let cfg = GDConfig::single(0.05, 1, KernelSpec::new(KernelFamily::Rbf, 0.5));
        let mut state = FunctionState::zero(2, 7);
        let mut prev = context_loss_real(&x, &y, &state);
        for _ in 0..4 {
            state = gd_step_real(&x, &y, &state, &cfg).unwrap();
            let loss = context_loss_real(&x, &y, &state);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn bias_term_uses_printed_coefficient() {
        let w_e = random_we(3, 4, 23);
        let ctx = random_ctx(2, 5, 4, 23);
        let kernel = KernelSpec::new(KernelFamily::Linear, 1.0);
        let mut cfg = GDConfig::single(0.2, 1, kernel);
        cfg.include_bias = true;
        let state = FunctionState::zero(3, 6);
        let with_alpha = gd_step(&ctx, &w_e, &state, &cfg).unwrap();
        cfg.bias_coefficient = BiasCoefficient::AlphaOverN;
        let with_alpha_over_n = gd_step(&ctx, &w_e, &state, &cfg).unwrap();
        cfg.include_bias = false;
        let without = gd_step(&ctx, &w_e, &state, &cfg).unwrap();

        // the two conventions differ by exactly a factor N on the bias part
        let bias_a = with_alpha.values.sub(&without.values).unwrap();
        let bias_n = with_alpha_over_n.values.sub(&without.values).unwrap();
        assert!(bias_a.max_relative_deviation(&bias_n.scale(5.0), 1e-12) < 1e-10);
    }
}
