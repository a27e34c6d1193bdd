//! Synthetic contextual dataset generators: an anchor-mixture family with
//! per-anchor bandwidths, a planar quadrant family, and a rotationally
//! invariant inner-product family. Every generator is a pure function of
//! (spec, embedding matrix, stream), so datasets are bit-identical across
//! runs and thread counts.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gd_oracle::ContextSet;
use crate::numerics::{derive_tagged_stream, softmax_vec, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorFamily {
    RbfMixture,
    Quadrant,
    RotInvariant,
}

impl std::fmt::Display for GeneratorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GeneratorFamily::RbfMixture => "rbf_mixture",
            GeneratorFamily::Quadrant => "quadrant",
            GeneratorFamily::RotInvariant => "rot_invariant",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for GeneratorFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "rbf_mixture" => Ok(GeneratorFamily::RbfMixture),
            "quadrant" => Ok(GeneratorFamily::Quadrant),
            "rot_invariant" => Ok(GeneratorFamily::RotInvariant),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator family: {other}"
            ))),
        }
    }
}

/// Default coefficient scale for the rot_invariant family, calibrated once by
/// pilot Monte-Carlo so the average max-class probability lands in [0.3, 0.9].
pub const ROT_INVARIANT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub family: GeneratorFamily,
    pub c: usize,
    pub d: usize,
    pub d_prime: usize,
    pub n: usize,
    /// Number of anchor points (rbf_mixture only).
    #[serde(default)]
    pub anchors: usize,
    /// Amplitude of the mixture function (rbf_mixture only).
    #[serde(default)]
    pub lambda_gain: f64,
    /// Use the squared-distance exponent instead of the plain l2 distance.
    #[serde(default)]
    pub squared_exponent: bool,
    /// Inner-product expansion rate (rot_invariant only).
    #[serde(default)]
    pub beta: f64,
    /// Coefficient scale (rot_invariant only).
    #[serde(default)]
    pub coeff_scale: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn rbf_mixture(seed: u64) -> Self {
        GeneratorSpec {
            family: GeneratorFamily::RbfMixture,
            c: 25,
            d: 10,
            d_prime: 5,
            n: 10,
            anchors: 5,
            lambda_gain: 10.0,
            squared_exponent: false,
            beta: 0.0,
            coeff_scale: 0.0,
            seed,
        }
    }

    pub fn quadrant(seed: u64) -> Self {
        GeneratorSpec {
            family: GeneratorFamily::Quadrant,
            c: 20,
            d: 2,
            d_prime: 5,
            n: 100,
            anchors: 0,
            lambda_gain: 0.0,
            squared_exponent: false,
            beta: 0.0,
            coeff_scale: 0.0,
            seed,
        }
    }

    pub fn rot_invariant(d: usize, seed: u64) -> Self {
        GeneratorSpec {
            family: GeneratorFamily::RotInvariant,
            c: 8,
            d,
            d_prime: 4,
            n: 10,
            anchors: 0,
            lambda_gain: 0.0,
            squared_exponent: false,
            beta: 1.0,
            coeff_scale: ROT_INVARIANT_SCALE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.d_prime == 0 || self.n == 0 {
            return Err(Error::InvalidArgument(
                "generator dimensions must be positive".into(),
            ));
        }
        match self.family {
            GeneratorFamily::RbfMixture => {
                if self.anchors == 0 || self.anchors > self.c {
                    return Err(Error::InvalidArgument(
                        "anchor count must be in 1..=C".into(),
                    ));
                }
            }
            GeneratorFamily::Quadrant => {
                if self.d != 2 {
                    return Err(Error::InvalidArgument("quadrant family requires d=2".into()));
                }
                if self.c < 4 {
                    return Err(Error::InvalidArgument(
                        "quadrant family requires at least 4 categories".into(),
                    ));
                }
            }
            GeneratorFamily::RotInvariant => {
                if self.coeff_scale <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "rot_invariant coefficient scale must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The latent function that generated a context, evaluable at any covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrueFunction {
    RbfMixture {
        /// d x M anchor positions.
        anchors: Matrix,
        /// Per-anchor bandwidth: the sigma^2 multiplying the distance.
        sigma_sq: Vec<f64>,
        /// 1-based category id per anchor.
        categories: Vec<usize>,
        gain: f64,
        squared: bool,
    },
    Quadrant {
        /// 1-based category ids for quadrants (+,+), (-,+), (-,-), (+,-).
        categories: Vec<usize>,
    },
    RotInvariant {
        /// d x N covariates spanning the expansion.
        base: Matrix,
        /// d' x N coefficient vectors.
        coeffs: Matrix,
        beta: f64,
    },
}

impl TrueFunction {
    /// f(x) in R^{d'}.
    pub fn eval(&self, w_e: &Matrix, x: &[f64]) -> Vec<f64> {
        match self {
            TrueFunction::RbfMixture {
                anchors,
                sigma_sq,
                categories,
                gain,
                squared,
            } => {
                let d_prime = w_e.rows;
                let mut f = vec![0.0; d_prime];
                for m in 0..anchors.cols {
                    let a = anchors.column(m);
                    let dist_sq: f64 = a.iter().zip(x).map(|(ai, xi)| (ai - xi).powi(2)).sum();
                    let dist = if *squared { dist_sq } else { dist_sq.sqrt() };
                    let w = gain * (-sigma_sq[m] * dist).exp();
                    let c = categories[m] - 1;
                    for r in 0..d_prime {
                        f[r] += w * w_e.get(r, c);
                    }
                }
                f
            }
            TrueFunction::Quadrant { categories } => {
                let c = categories[quadrant_index(x)] - 1;
                (0..w_e.rows).map(|r| w_e.get(r, c)).collect()
            }
            TrueFunction::RotInvariant { base, coeffs, beta } => {
                let d_prime = coeffs.rows;
                let mut f = vec![0.0; d_prime];
                for i in 0..base.cols {
                    let t: f64 = base.column(i).iter().zip(x).map(|(a, b)| a * b).sum();
                    let g = (beta * t).exp();
                    for r in 0..d_prime {
                        f[r] += coeffs.get(r, i) * g;
                    }
                }
                f
            }
        }
    }
}

/// Quadrant of a planar point; boundary coordinates (exactly 0) count as
/// positive for determinism.
pub fn quadrant_index(x: &[f64]) -> usize {
    match (x[0] >= 0.0, x[1] >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// d' x C embedding matrix with i.i.d. standard normal entries, generated
/// once per experiment and shared across contexts.
pub fn gen_embedding_matrix(c: usize, d_prime: usize, stream: &mut RngStream) -> Matrix {
    Matrix::from_vec(d_prime, c, stream.normals(d_prime * c))
}

/// Categorical draw from softmax(W_e^T f); returns a 1-based id.
pub fn sample_label(w_e: &Matrix, f_value: &[f64], stream: &mut RngStream) -> Result<usize> {
    let logits: Vec<f64> = (0..w_e.cols)
        .map(|c| (0..w_e.rows).map(|r| w_e.get(r, c) * f_value[r]).sum())
        .collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample_label logits".into()));
    }
    Ok(stream.categorical(&softmax_vec(&logits)))
}

fn sample_context_from_fn(
    spec: &GeneratorSpec,
    w_e: &Matrix,
    truth: &TrueFunction,
    covariates: Matrix,
    stream: &mut RngStream,
) -> Result<ContextSet> {
    let n = spec.n;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(sample_label(w_e, &truth.eval(w_e, &covariates.column(i)), stream)?);
    }
    let query_label = sample_label(w_e, &truth.eval(w_e, &covariates.column(n)), stream)?;
    Ok(ContextSet {
        covariates,
        labels,
        query_label: Some(query_label),
        meta: serde_json::to_value(truth)?,
    })
}

/// Anchor-mixture context: M categories drawn without replacement, standard
/// normal anchors, and per-anchor bandwidth solving
/// exp(-sigma_m^2 * dist(anchor_m, nearest anchor)) = 0.1.
pub fn gen_rbf_mixture_context(
    spec: &GeneratorSpec,
    w_e: &Matrix,
    stream: &mut RngStream,
) -> Result<(ContextSet, TrueFunction)> {
    spec.validate()?;
    if spec.family != GeneratorFamily::RbfMixture {
        return Err(Error::InvalidArgument("spec family is not rbf_mixture".into()));
    }
    let m = spec.anchors;
    let d = spec.d;
    let categories = stream.sample_without_replacement(spec.c, m);

    let mut anchors = Matrix::zeros(d, m);
    let mut ok = false;
    for _attempt in 0..100 {
        anchors = Matrix::from_vec(d, m, stream.normals(d * m));
        let mut min_dist = f64::INFINITY;
        for i in 0..m {
            for j in i + 1..m {
                let dist: f64 = (0..d)
                    .map(|r| (anchors.get(r, i) - anchors.get(r, j)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if m < 2 || min_dist >= 1e-9 {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::InvalidArgument(
            "could not draw mutually distinct anchors in 100 attempts".into(),
        ));
    }

    let mut sigma_sq = Vec::with_capacity(m);
    for i in 0..m {
        let mut nearest = f64::INFINITY;
        for j in 0..m {
            if i == j {
                continue;
            }
            let dist_sq: f64 = (0..d)
                .map(|r| (anchors.get(r, i) - anchors.get(r, j)).powi(2))
                .sum();
            let dist = if spec.squared_exponent {
                dist_sq
            } else {
                dist_sq.sqrt()
            };
            nearest = nearest.min(dist);
        }
        if m < 2 {
            nearest = 1.0;
        }
        // the kernel must equal 0.1 at the nearest other anchor
        sigma_sq.push(-(0.1f64.ln()) / nearest);
    }

    let truth = TrueFunction::RbfMixture {
        anchors,
        sigma_sq,
        categories,
        gain: spec.lambda_gain,
        squared: spec.squared_exponent,
    };
    let covariates = Matrix::from_vec(d, spec.n + 1, stream.normals(d * (spec.n + 1)));
    let ctx = sample_context_from_fn(spec, w_e, &truth, covariates, stream)?;
    Ok((ctx, truth))
}

/// Planar quadrant context: four categories without replacement, covariates
/// uniform on [-1,1]^2, f constant per quadrant.
pub fn gen_quadrant_context(
    spec: &GeneratorSpec,
    w_e: &Matrix,
    stream: &mut RngStream,
) -> Result<(ContextSet, TrueFunction)> {
    spec.validate()?;
    if spec.family != GeneratorFamily::Quadrant {
        return Err(Error::InvalidArgument("spec family is not quadrant".into()));
    }
    let categories = stream.sample_without_replacement(spec.c, 4);
    let truth = TrueFunction::Quadrant { categories };
    let mut covariates = Matrix::zeros(2, spec.n + 1);
    for j in 0..=spec.n {
        for r in 0..2 {
            covariates.set(r, j, stream.uniform_range(-1.0, 1.0));
        }
    }
    let ctx = sample_context_from_fn(spec, w_e, &truth, covariates, stream)?;
    Ok((ctx, truth))
}

/// Rotationally invariant context: standard normal covariates and a latent
/// function built from inner products with the context covariates, so a
/// common rotation of all points leaves it unchanged.
pub fn gen_rot_invariant_context(
    spec: &GeneratorSpec,
    w_e: &Matrix,
    stream: &mut RngStream,
) -> Result<(ContextSet, TrueFunction)> {
    spec.validate()?;
    if spec.family != GeneratorFamily::RotInvariant {
        return Err(Error::InvalidArgument("spec family is not rot_invariant".into()));
    }
    let d = spec.d;
    let covariates = Matrix::from_vec(d, spec.n + 1, stream.normals(d * (spec.n + 1)));
    let base = covariates.slice_cols(0, spec.n);
    let coeffs =
        Matrix::from_vec(spec.d_prime, spec.n, stream.normals(spec.d_prime * spec.n))
            .scale(spec.coeff_scale);
    let truth = TrueFunction::RotInvariant {
        base,
        coeffs,
        beta: spec.beta,
    };
    let ctx = sample_context_from_fn(spec, w_e, &truth, covariates, stream)?;
    Ok((ctx, truth))
}

/// Generate one context with the spec's family.
pub fn gen_context(
    spec: &GeneratorSpec,
    w_e: &Matrix,
    stream: &mut RngStream,
) -> Result<(ContextSet, TrueFunction)> {
    match spec.family {
        GeneratorFamily::RbfMixture => gen_rbf_mixture_context(spec, w_e, stream),
        GeneratorFamily::Quadrant => gen_quadrant_context(spec, w_e, stream),
        GeneratorFamily::RotInvariant => gen_rot_invariant_context(spec, w_e, stream),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: GeneratorSpec,
    pub w_e: Matrix,
    pub contexts: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub contexts: Vec<ContextSet>,
}

/// Generate a whole dataset. The embedding matrix comes from a dedicated
/// stream; each context gets its own derived stream, keyed by index, so the
/// result does not depend on worker count or scheduling.
pub fn generate_dataset(spec: &GeneratorSpec, num_contexts: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut emb_stream = derive_tagged_stream(spec.seed, "embedding", 0);
    let w_e = gen_embedding_matrix(spec.c, spec.d_prime, &mut emb_stream);
    let contexts: Vec<ContextSet> = (0..num_contexts)
        .into_par_iter()
        .map(|i| {
            let mut stream = derive_tagged_stream(spec.seed, "context", i as u64);
            gen_context(spec, &w_e, &mut stream).map(|(ctx, _)| ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            spec: spec.clone(),
            w_e,
            contexts: num_contexts,
        },
        contexts,
    })
}

/// One JSON line per context: context covariates as row vectors, labels,
/// query covariate and label, plus the serialized latent function in meta.
#[derive(Debug, Serialize, Deserialize)]
struct LineRecord {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    qx: Vec<f64>,
    qy: usize,
    meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".header.json");
    path.with_file_name(name)
}

/// Write the JSON-lines dataset plus the sidecar header file.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ctx in &dataset.contexts {
        let n = ctx.num_context();
        let record = LineRecord {
            x: (0..n).map(|i| ctx.covariates.column(i)).collect(),
            y: ctx.labels.clone(),
            qx: ctx.covariates.column(n),
            qy: ctx.query_label.ok_or_else(|| {
                Error::InvalidArgument("cannot serialize a context without a query label".into())
            })?,
            meta: ctx.meta.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let header = serde_json::to_string_pretty(&dataset.header)?;
    std::fs::write(sidecar_path(path), header + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let header: DatasetHeader =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut contexts = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LineRecord = serde_json::from_str(&line)?;
        let n = record.y.len();
        let d = record.qx.len();
        let mut covariates = Matrix::zeros(d, n + 1);
        for (i, col) in record.x.iter().enumerate() {
            covariates.set_column(i, col);
        }
        covariates.set_column(n, &record.qx);
        contexts.push(ContextSet {
            covariates,
            labels: record.y,
            query_label: Some(record.qy),
            meta: record.meta,
        });
    }
    Ok(Dataset { header, contexts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;

    fn rbf_setup(seed: u64) -> (GeneratorSpec, Matrix, RngStream) {
        let spec = GeneratorSpec::rbf_mixture(seed);
        let mut emb = derive_tagged_stream(seed, "embedding", 0);
        let w_e = gen_embedding_matrix(spec.c, spec.d_prime, &mut emb);
        let stream = derive_tagged_stream(seed, "context", 0);
        (spec, w_e, stream)
    }

    #[test]
    fn embedding_mean_within_clt_bound() {
        let mut s = derive_stream(9, 0);
        let m = gen_embedding_matrix(25, 5, &mut s);
        let mean = m.sum() / 125.0;
        assert!(mean.abs() <= 3.0 / (125.0f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn bandwidth_solves_defining_equation() {
        let (spec, w_e, mut stream) = rbf_setup(3);
        let (_, truth) = gen_rbf_mixture_context(&spec, &w_e, &mut stream).unwrap();
        let TrueFunction::RbfMixture {
            anchors, sigma_sq, ..
        } = &truth
        else {
            panic!("wrong family");
        };
        for i in 0..anchors.cols {
            let mut nearest = f64::INFINITY;
            for j in 0..anchors.cols {
                if i != j {
                    let dist: f64 = (0..anchors.rows)
                        .map(|r| (anchors.get(r, i) - anchors.get(r, j)).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    nearest = nearest.min(dist);
                }
            }
            let v = (-sigma_sq[i] * nearest).exp();
            assert!((v - 0.1).abs() <= 1e-12, "kernel at nearest anchor: {v}");
        }
    }

    #[test]
    fn anchor_category_most_probable_at_anchor() {
        let mut hits = 0;
        for seed in 0..100 {
            let (spec, w_e, mut stream) = rbf_setup(seed);
            let (_, truth) = gen_rbf_mixture_context(&spec, &w_e, &mut stream).unwrap();
            let TrueFunction::RbfMixture {
                anchors, categories, ..
            } = &truth
            else {
                panic!("wrong family");
            };
            // within the mixture's own categories the anchor's category must
            // dominate at the anchor point
            let f = truth.eval(&w_e, &anchors.column(0));
            let best = categories
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let la: f64 = (0..w_e.rows).map(|r| w_e.get(r, a - 1) * f[r]).sum();
                    let lb: f64 = (0..w_e.rows).map(|r| w_e.get(r, b - 1) * f[r]).sum();
                    la.partial_cmp(&lb).unwrap()
                })
                .unwrap();
            if best == categories[0] {
                hits += 1;
            }
        }
        // random embedding cross-correlations leave a nontrivial failure
        // rate even at the anchor itself; ~85% is the measured level for
        // the default gain, so assert a level with margin below it
        assert!(hits >= 75, "anchor category dominant in only {hits}/100");
    }

    #[test]
    fn label_frequencies_match_softmax_oracle() {
        let (spec, w_e, mut stream) = rbf_setup(12);
        let (ctx, truth) = gen_rbf_mixture_context(&spec, &w_e, &mut stream).unwrap();
        let x = ctx.covariates.column(0);
        let f = truth.eval(&w_e, &x);
        let logits: Vec<f64> = (0..w_e.cols)
            .map(|c| (0..w_e.rows).map(|r| w_e.get(r, c) * f[r]).sum())
            .collect();
        let probs = softmax_vec(&logits);
        let draws = 100_000;
        let mut counts = vec![0usize; spec.c];
        let mut s = derive_stream(777, 0);
        for _ in 0..draws {
            counts[sample_label(&w_e, &f, &mut s).unwrap() - 1] += 1;
        }
        for c in 0..spec.c {
            // the normal approximation only holds away from the Poisson tail
            if probs[c] * (draws as f64) < 20.0 {
                continue;
            }
            let freq = counts[c] as f64 / draws as f64;
            let sigma = (probs[c] * (1.0 - probs[c]) / draws as f64).sqrt();
            assert!(
                (freq - probs[c]).abs() <= 3.0 * sigma,
                "class {c}: freq {freq} vs prob {}",
                probs[c]
            );
        }
    }

    #[test]
    fn quadrant_covariates_in_square_and_f_constant_per_quadrant() {
        let spec = GeneratorSpec::quadrant(8);
        let mut emb = derive_tagged_stream(8, "embedding", 0);
        let w_e = gen_embedding_matrix(spec.c, spec.d_prime, &mut emb);
        let mut stream = derive_tagged_stream(8, "context", 0);
        let (ctx, truth) = gen_quadrant_context(&spec, &w_e, &mut stream).unwrap();
        for j in 0..=spec.n {
            for r in 0..2 {
                let v = ctx.covariates.get(r, j);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        let a = truth.eval(&w_e, &[0.5, 0.5]);
        let b = truth.eval(&w_e, &[0.01, 0.99]);
        assert_eq!(a, b);
        // boundary points belong to the positive side
        let c = truth.eval(&w_e, &[0.0, 0.0]);
        assert_eq!(a, c);
    }

    #[test]
    fn rot_invariant_function_is_rotation_invariant() {
        let spec = GeneratorSpec::rot_invariant(4, 5);
        let mut emb = derive_tagged_stream(5, "embedding", 0);
        let w_e = gen_embedding_matrix(spec.c, spec.d_prime, &mut emb);
        let mut stream = derive_tagged_stream(5, "context", 0);
        let (ctx, truth) = gen_rot_invariant_context(&spec, &w_e, &mut stream).unwrap();
        let TrueFunction::RotInvariant { base, coeffs, beta } = &truth else {
            panic!("wrong family");
        };

        // rotate everything by a product of Givens rotations
        let rotate = |v: &[f64]| -> Vec<f64> {
            let mut v = v.to_vec();
            let pairs = [(0usize, 1usize, 0.7f64), (1, 2, -1.1), (2, 3, 0.4)];
            for (i, j, theta) in pairs {
                let (s, c) = theta.sin_cos();
                let (a, b) = (v[i], v[j]);
                v[i] = c * a - s * b;
                v[j] = s * a + c * b;
            }
            v
        };
        let mut rot_base = Matrix::zeros(4, base.cols);
        for i in 0..base.cols {
            rot_base.set_column(i, &rotate(&base.column(i)));
        }
        let rotated = TrueFunction::RotInvariant {
            base: rot_base,
            coeffs: coeffs.clone(),
            beta: *beta,
        };
        for j in 0..=spec.n {
            let x = ctx.covariates.column(j);
            let a = truth.eval(&w_e, &x);
            let b = rotated.eval(&w_e, &rotate(&x));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-10, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn rot_invariant_scale_keeps_max_probability_moderate() {
        let spec = GeneratorSpec::rot_invariant(6, 21);
        let mut emb = derive_tagged_stream(21, "embedding", 0);
        let w_e = gen_embedding_matrix(spec.c, spec.d_prime, &mut emb);
        let trials = 300;
        let mut total = 0.0;
        for i in 0..trials {
            let mut stream = derive_tagged_stream(21, "context", i);
            let (ctx, truth) = gen_rot_invariant_context(&spec, &w_e, &mut stream).unwrap();
            let f = truth.eval(&w_e, &ctx.covariates.column(spec.n));
            let logits: Vec<f64> = (0..w_e.cols)
                .map(|c| (0..w_e.rows).map(|r| w_e.get(r, c) * f[r]).sum())
                .collect();
            total += softmax_vec(&logits)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let avg = total / trials as f64;
        assert!((0.3..=0.9).contains(&avg), "average max probability {avg}");
    }

    #[test]
    fn uniform_labels_at_zero_function() {
        let mut s = derive_stream(2, 0);
        let w_e = gen_embedding_matrix(10, 4, &mut s);
        let draws = 100_000;
        let mut counts = vec![0usize; 10];
        for _ in 0..draws {
            counts[sample_label(&w_e, &[0.0; 4], &mut s).unwrap() - 1] += 1;
        }
        let sigma = (0.1 * 0.9 / draws as f64).sqrt();
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 3.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let spec = GeneratorSpec::rbf_mixture(99);
        let ds = generate_dataset(&spec, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_dataset(&p1, &ds).unwrap();
        let reread = read_dataset(&p1).unwrap();
        write_dataset(&p2, &reread).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "dataset bytes changed across a read/write cycle"
        );
        assert_eq!(
            std::fs::read(sidecar_path(&p1)).unwrap(),
            std::fs::read(sidecar_path(&p2)).unwrap()
        );
    }

    #[test]
    fn generation_is_thread_count_invariant() {
        let spec = GeneratorSpec::quadrant(4);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| generate_dataset(&spec, 16)).unwrap();
        let b = pool4.install(|| generate_dataset(&spec, 16)).unwrap();
        for (ca, cb) in a.contexts.iter().zip(&b.contexts) {
            assert_eq!(ca.covariates, cb.covariates);
            assert_eq!(ca.labels, cb.labels);
            assert_eq!(ca.query_label, cb.query_label);
        }
    }

    #[test]
    fn distinct_categories_and_anchors_per_context() {
        for seed in 0..20 {
            let (spec, w_e, mut stream) = rbf_setup(seed);
            let (_, truth) = gen_rbf_mixture_context(&spec, &w_e, &mut stream).unwrap();
            let TrueFunction::RbfMixture {
                anchors, categories, ..
            } = &truth
            else {
                panic!("wrong family");
            };
            let mut sorted = categories.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
            for i in 0..anchors.cols {
                for j in i + 1..anchors.cols {
                    let dist: f64 = (0..anchors.rows)
                        .map(|r| (anchors.get(r, i) - anchors.get(r, j)).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 1e-9);
                }
            }
        }
    }
}


