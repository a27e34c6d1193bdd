//! Similarity functions and the masked column-wise attention activation
//! shared by the GD oracle and the attention network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Linear,
    Rbf,
    Exponential,
    Laplacian,
    Softmax,
}

impl KernelFamily {
    pub fn all() -> [KernelFamily; 5] {
        [
            KernelFamily::Linear,
            KernelFamily::Rbf,
            KernelFamily::Exponential,
            KernelFamily::Laplacian,
            KernelFamily::Softmax,
        ]
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelFamily::Linear => "linear",
            KernelFamily::Rbf => "rbf",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Laplacian => "laplacian",
            KernelFamily::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelFamily::Linear),
            "rbf" => Ok(KernelFamily::Rbf),
            "exponential" => Ok(KernelFamily::Exponential),
            "laplacian" => Ok(KernelFamily::Laplacian),
            "softmax" => Ok(KernelFamily::Softmax),
            other => Err(Error::InvalidArgument(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Similarity-function descriptor: family, scalar bandwidth/temperature, and
/// an optional per-head diagonal scaling applied to both arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub param: f64,
    #[serde(rename = "lambda", default, skip_serializing_if = "Option::is_none")]
    pub head_scaling: Option<Vec<f64>>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, param: f64) -> Self {
        KernelSpec {
            family,
            param,
            head_scaling: None,
        }
    }

    pub fn with_head_scaling(mut self, lambda: Vec<f64>) -> Self {
        self.head_scaling = Some(lambda);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.family != KernelFamily::Linear && !(self.param > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel param must be positive, got {}",
                self.param
            )));
        }
        if let Some(l) = &self.head_scaling {
            if l.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("head scaling must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn apply_scaling(&self, v: &[f64]) -> Vec<f64> {
        match &self.head_scaling {
            Some(l) => v.iter().zip(l).map(|(x, s)| x * s).collect(),
            None => v.to_vec(),
        }
    }
}

/// Pairwise similarity. The diagonal scaling, when present, is applied to
/// both arguments first. The softmax family reports the unnormalized
/// exponential weight; normalization happens in `attention_map`.
pub fn similarity(spec: &KernelSpec, u: &[f64], v: &[f64]) -> Result<f64> {
    spec.validate()?;
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            context: "similarity".into(),
            lhs: (u.len(), 1),
            rhs: (v.len(), 1),
        });
    }
    let u = spec.apply_scaling(u);
    let v = spec.apply_scaling(v);
    let value = match spec.family {
        KernelFamily::Linear => dot(&u, &v),
        KernelFamily::Rbf => (-spec.param * sq_dist(&u, &v)).exp(),
        KernelFamily::Exponential | KernelFamily::Softmax => (spec.param * dot(&u, &v)).exp(),
        KernelFamily::Laplacian => (-spec.param * l1_dist(&u, &v)).exp(),
    };
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("similarity ({})", spec.family)));
    }
    Ok(value)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn l1_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum()
}

/// Attention weights between all positions. Entry (i, j) is the weight key i
/// contributes to query j. The last position is the query; when
/// `mask_query` is set, it never acts as a key.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub weights: Matrix,
    pub masked_query: bool,
    /// Set when duplicate covariates make a delta-approximation degenerate.
    pub degenerate_warning: Option<String>,
}

/// Build the (N+1)x(N+1) attention map over the columns of `covariates`
/// (column N+1 is the query). Kernel families return raw pairwise values,
/// masked; the softmax family applies column-wise normalization over the
/// unmasked keys after masking.
pub fn attention_map(
    spec: &KernelSpec,
    covariates: &Matrix,
    lambda_scale: f64,
    mask_query: bool,
) -> Result<AttentionMap> {
    spec.validate()?;
    let n_total = covariates.cols;
    if n_total < 2 {
        return Err(Error::InvalidArgument("need at least one context position".into()));
    }
    if !(lambda_scale >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_scale must be >= 1, got {lambda_scale}"
        )));
    }

    let cols: Vec<Vec<f64>> = (0..n_total)
        .map(|c| covariates.column(c).iter().map(|x| x * lambda_scale).collect())
        .collect();

    let degenerate_warning = if lambda_scale > 1.0 {
        min_pairwise_distance(&cols[..n_total - 1]).and_then(|d| {
            if d < 1e-9 {
                Some("duplicate covariates: delta-approximation erasure is degenerate".to_string())
            } else {
                None
            }
        })
    } else {
        None
    };

    let mut weights = Matrix::zeros(n_total, n_total);
    let key_rows = if mask_query { n_total - 1 } else { n_total };

    match spec.family {
        KernelFamily::Softmax => {
            // max-subtracted column softmax over unmasked key rows
            for j in 0..n_total {
                let logits: Vec<f64> = (0..key_rows)
                    .map(|i| spec.param * dot(&spec.apply_scaling(&cols[i]), &spec.apply_scaling(&cols[j])))
                    .collect();
                let probs = crate::numerics::softmax_vec(&logits);
                for (i, p) in probs.into_iter().enumerate() {
                    weights.set(i, j, p);
                }
            }
        }
        _ => {
            for j in 0..n_total {
                for i in 0..key_rows {
                    weights.set(i, j, similarity(spec, &cols[i], &cols[j])?);
                }
            }
        }
    }
    weights.check_finite("attention_map")?;
    Ok(AttentionMap {
        weights,
        masked_query: mask_query,
        degenerate_warning,
    })
}

/// The exact delta limit of the erasure attention: an identity map over all
/// positions (the query erases its own slot too).
pub fn exact_delta_map(n_total: usize) -> AttentionMap {
    AttentionMap {
        weights: Matrix::identity(n_total),
        masked_query: false,
        degenerate_warning: None,
    }
}

fn min_pairwise_distance(cols: &[Vec<f64>]) -> Option<f64> {
    let mut min = f64::INFINITY;
    for i in 0..cols.len() {
        for j in (i + 1)..cols.len() {
            min = min.min(sq_dist(&cols[i], &cols[j]).sqrt());
        }
    }
    if min.is_finite() {
        Some(min)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;

    #[test]
    fn linear_inner_product() {
        let s = KernelSpec::new(KernelFamily::Linear, 1.0);
        assert_eq!(similarity(&s, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn rbf_zero_distance_is_one() {
        let s = KernelSpec::new(KernelFamily::Rbf, 2.5);
        assert_eq!(similarity(&s, &[0.3, -0.7], &[0.3, -0.7]).unwrap(), 1.0);
    }

    #[test]
    fn laplacian_known_value() {
        let s = KernelSpec::new(KernelFamily::Laplacian, 1.0);
        let v = similarity(&s, &[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn exponential_overflow_errors() {
        let s = KernelSpec::new(KernelFamily::Exponential, 1.0);
        assert!(similarity(&s, &[1e3], &[1e3]).is_err());
    }

    #[test]
    fn softmax_map_column_stochastic_and_masked() {
        let mut stream = derive_stream(1, 0);
        let n = 6;
        let d = 3;
        let x = Matrix::from_vec(d, n + 1, stream.normals(d * (n + 1)));
        let s = KernelSpec::new(KernelFamily::Softmax, 1.0);
        let map = attention_map(&s, &x, 1.0, true).unwrap();
        for j in 0..=n {
            let sum: f64 = (0..n).map(|i| map.weights.get(i, j)).sum();
            assert!((sum - 1.0).abs() <= 1e-15, "col {j} sums to {sum}");
            assert_eq!(map.weights.get(n, j), 0.0);
        }
    }

    #[test]
    fn kernel_map_symmetric_before_mask() {
        let mut stream = derive_stream(2, 0);
        let x = Matrix::from_vec(3, 5, stream.normals(15));
        for family in [KernelFamily::Rbf, KernelFamily::Laplacian, KernelFamily::Linear] {
            let s = KernelSpec::new(family, 0.7);
            let map = attention_map(&s, &x, 1.0, false).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(map.weights.get(i, j), map.weights.get(j, i));
                }
            }
        }
    }

    #[test]
    fn rbf_delta_limit_with_large_lambda() {
        let mut stream = derive_stream(3, 0);
        let n = 4;
        let mut x = Matrix::from_vec(2, n + 1, stream.normals(2 * (n + 1)));
        // enforce min pairwise distance >= 0.5 by spreading the first coordinate
        for c in 0..=n {
            x.set(0, c, c as f64 * 0.5 + x.get(0, c) * 1e-3);
        }
        let s = KernelSpec::new(KernelFamily::Rbf, 1.0);
        let map = attention_map(&s, &x, 1e3, false).unwrap();
        for i in 0..=n {
            assert_eq!(map.weights.get(i, i), 1.0);
            for j in 0..=n {
                if i != j {
                    assert!(map.weights.get(i, j) <= (-1.0f64 * (1e3 * 0.4f64).powi(2)).exp());
                }
            }
        }
    }

    #[test]
    fn head_scaling_matches_prescaled_inputs() {
        let lambda = vec![0.5, 2.0, -1.25];
        let u = [0.3, -0.4, 0.9];
        let v = [1.1, 0.2, -0.6];
        let us: Vec<f64> = u.iter().zip(&lambda).map(|(x, s)| x * s).collect();
        let vs: Vec<f64> = v.iter().zip(&lambda).map(|(x, s)| x * s).collect();
        for family in KernelFamily::all() {
            let with = KernelSpec::new(family, 0.8).with_head_scaling(lambda.clone());
            let without = KernelSpec::new(family, 0.8);
            assert_eq!(
                similarity(&with, &u, &v).unwrap(),
                similarity(&without, &us, &vs).unwrap()
            );
        }
    }

    #[test]
    fn duplicate_covariates_warn_on_erasure() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let s = KernelSpec::new(KernelFamily::Rbf, 1.0);
        let map = attention_map(&s, &x, 100.0, false).unwrap();
        assert!(map.degenerate_warning.is_some());
    }

    #[test]
    fn kernel_spec_json_round_trip() {
        let s = KernelSpec::new(KernelFamily::Rbf, 0.25).with_head_scaling(vec![1.0, 2.0]);
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"family\":\"rbf\""));
        assert!(j.contains("\"lambda\""));
        let back: KernelSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(s, back);
    }
}
