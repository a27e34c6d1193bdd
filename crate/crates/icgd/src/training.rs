//! Meta-training over collections of contexts by minimizing the query
//! negative log-likelihood. Two parameterizations share the trainer: the
//! GD-constrained model (embedding matrix, step size, and kernel parameter
//! only) and the free single-layer attention model (all matrices learned).

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{ArchMeta, BlockWeights, CrossAttention, ErasureHead, HeadWeights,
    ModelCheckpoint, ModelMode};
use crate::error::{Error, Result};
use crate::gd_oracle::ContextSet;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::numerics::{derive_tagged_stream, Graph, Matrix, NodeId, RngStream};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { lr: f64 },
    PlainGd { lr: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ModelMode,
    pub layers: usize,
    pub kernel: KernelFamily,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub init_seed: u64,
    /// Evaluate on held-out data every this many epochs (and at the end).
    pub eval_every: usize,
    /// Stop when eval NLL has not improved for this many checkpoints.
    pub early_stop_patience: Option<usize>,
}

impl TrainConfig {
    pub fn new(mode: ModelMode, layers: usize, kernel: KernelFamily, init_seed: u64) -> Self {
        TrainConfig {
            mode,
            layers,
            kernel,
            epochs: 500,
            batch_size: 64,
            optimizer: OptimizerKind::Adam { lr: 1e-3 },
            init_seed,
            eval_every: 10,
            early_stop_patience: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match self.optimizer {
            OptimizerKind::Adam { lr } | OptimizerKind::PlainGd { lr } => lr,
        };
        if lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.layers == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "layers, epochs, batch size and eval cadence must be positive".into(),
            ));
        }
        match self.mode {
            ModelMode::GdTrainable => Ok(()),
            ModelMode::FreeTf => {
                if self.layers != 1 {
                    return Err(Error::InvalidArgument(
                        "the free attention trainer is single-layer".into(),
                    ));
                }
                if self.kernel != KernelFamily::Softmax {
                    return Err(Error::InvalidArgument(
                        "the free attention trainer uses softmax attention".into(),
                    ));
                }
                Ok(())
            }
            other => Err(Error::InvalidArgument(format!(
                "mode {other:?} is not trainable"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: Option<f64>,
    pub eval_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: ModelCheckpoint,
    pub trainable_parameter_count: usize,
    pub free_parameter_count: usize,
    /// Set to the epoch index if the loss went non-finite; the checkpoint is
    /// then the last finite one.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    /// Plot-ready CSV: epoch, train loss, and eval columns where measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_top1,eval_nll\n");
        for r in &self.records {
            let t1 = r.eval_top1.map(|v| v.to_string()).unwrap_or_default();
            let nll = r.eval_nll.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, t1, nll));
        }
        out
    }
}

/// Names and shapes of the trainable leaves for a mode.
fn parameter_names(cfg: &TrainConfig) -> Vec<&'static str> {
    match cfg.mode {
        ModelMode::GdTrainable => vec!["w_e", "alpha", "log_param"],
        ModelMode::FreeTf => vec!["w_e", "w_q", "w_k", "w_v", "proj", "readout"],
        _ => vec![],
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, rng.normals(rows * cols)).scale(std)
}

/// Initial parameter bindings for a mode, drawn from the init seed.
pub fn init_parameters(cfg: &TrainConfig, arch: &ArchMeta) -> HashMap<String, Matrix> {
    let mut rng = derive_tagged_stream(cfg.init_seed, "train-init", 0);
    let mut params = HashMap::new();
    let w_e = Matrix::from_vec(
        arch.d_prime,
        arch.c,
        rng.normals(arch.d_prime * arch.c),
    )
    .scale(0.1);
    params.insert("w_e".to_string(), w_e);
    match cfg.mode {
        ModelMode::GdTrainable => {
            params.insert("alpha".to_string(), Matrix::scalar(1.0));
            params.insert("log_param".to_string(), Matrix::scalar(0.0));
        }
        ModelMode::FreeTf => {
            let width = arch.d + 2 * arch.d_prime;
            for name in ["w_q", "w_k", "w_v", "proj"] {
                params.insert(name.to_string(), glorot(width, width, &mut rng));
            }
            params.insert("readout".to_string(), glorot(arch.d_prime, width, &mut rng));
        }
        _ => {}
    }
    params
}

/// One-hot selection matrix S with S[y_i - 1, i] = 1 over context columns.
pub(crate) fn label_onehot(ctx: &ContextSet, c: usize) -> Matrix {
    let n = ctx.num_context();
    let mut s = Matrix::zeros(c, n);
    for (i, &y) in ctx.labels.iter().enumerate() {
        s.set(y - 1, i, 1.0);
    }
    s
}

/// Centered label selection over all N+1 columns: one-hot minus 1/C for
/// context columns, all-zero for the query column.
fn label_onehot_centered(ctx: &ContextSet, c: usize) -> Matrix {
    let n = ctx.num_context();
    let mut s = Matrix::zeros(c, n + 1);
    for (i, &y) in ctx.labels.iter().enumerate() {
        for r in 0..c {
            s.set(r, i, if r == y - 1 { 1.0 } else { 0.0 } - 1.0 / c as f64);
        }
    }
    s
}

fn pairwise_sq_dists(ctx: &ContextSet) -> Matrix {
    let n = ctx.num_context();
    let d = ctx.dim();
    let mut m = Matrix::zeros(n, n + 1);
    for j in 0..=n {
        for i in 0..n {
            let v: f64 = (0..d)
                .map(|r| (ctx.covariates.get(r, i) - ctx.covariates.get(r, j)).powi(2))
                .sum();
            m.set(i, j, v);
        }
    }
    m
}

fn pairwise_l1_dists(ctx: &ContextSet) -> Matrix {
    let n = ctx.num_context();
    let d = ctx.dim();
    let mut m = Matrix::zeros(n, n + 1);
    for j in 0..=n {
        for i in 0..n {
            let v: f64 = (0..d)
                .map(|r| (ctx.covariates.get(r, i) - ctx.covariates.get(r, j)).abs())
                .sum();
            m.set(i, j, v);
        }
    }
    m
}

pub(crate) fn key_gram(ctx: &ContextSet) -> Matrix {
    let n = ctx.num_context();
    let d = ctx.dim();
    let mut m = Matrix::zeros(n, n + 1);
    for j in 0..=n {
        for i in 0..n {
            let v: f64 = (0..d)
                .map(|r| ctx.covariates.get(r, i) * ctx.covariates.get(r, j))
                .sum();
            m.set(i, j, v);
        }
    }
    m
}

struct SharedLeaves {
    w_e: NodeId,
    alpha: Option<NodeId>,
    param: Option<NodeId>,
    free: Option<FreeLeaves>,
}

struct FreeLeaves {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    proj: NodeId,
    readout: NodeId,
}

fn make_leaves(g: &mut Graph, cfg: &TrainConfig) -> SharedLeaves {
    let w_e = g.leaf("w_e");
    match cfg.mode {
        ModelMode::GdTrainable => {
            let alpha = g.leaf("alpha");
            let param = if cfg.kernel == KernelFamily::Linear {
                None
            } else {
                let log_param = g.leaf("log_param");
                Some(g.exp(log_param))
            };
            SharedLeaves {
                w_e,
                alpha: Some(alpha),
                param,
                free: None,
            }
        }
        _ => SharedLeaves {
            w_e,
            alpha: None,
            param: None,
            free: Some(FreeLeaves {
                w_q: g.leaf("w_q"),
                w_k: g.leaf("w_k"),
                w_v: g.leaf("w_v"),
                proj: g.leaf("proj"),
                readout: g.leaf("readout"),
            }),
        },
    }
}

/// Kernel weight matrix between context keys and all positions, as a graph
/// node. Non-softmax families use raw similarities; softmax normalizes over
/// the key rows.
fn kernel_node(g: &mut Graph, cfg: &TrainConfig, leaves: &SharedLeaves, ctx: &ContextSet) -> NodeId {
    match cfg.kernel {
        KernelFamily::Linear => g.constant(key_gram(ctx)),
        KernelFamily::Rbf => {
            let c = g.constant(pairwise_sq_dists(ctx).scale(-1.0));
            let scaled = g.scale_node(c, leaves.param.expect("rbf needs a kernel parameter"));
            g.exp(scaled)
        }
        KernelFamily::Laplacian => {
            let c = g.constant(pairwise_l1_dists(ctx).scale(-1.0));
            let scaled = g.scale_node(c, leaves.param.expect("laplacian needs a kernel parameter"));
            g.exp(scaled)
        }
        KernelFamily::Exponential => {
            let c = g.constant(key_gram(ctx));
            let scaled = g.scale_node(c, leaves.param.expect("exponential needs a kernel parameter"));
            g.exp(scaled)
        }
        KernelFamily::Softmax => {
            let c = g.constant(key_gram(ctx));
            let scaled = g.scale_node(c, leaves.param.expect("softmax needs a temperature"));
            g.col_softmax(scaled)
        }
    }
}

/// Query NLL of one context under the GD-constrained model, as a graph node.
fn gd_context_loss_node(
    g: &mut Graph,
    cfg: &TrainConfig,
    leaves: &SharedLeaves,
    ctx: &ContextSet,
    c: usize,
) -> Result<NodeId> {
    let n = ctx.num_context();
    let kmat = kernel_node(g, cfg, leaves, ctx);
    let onehot = g.constant(label_onehot(ctx, c));
    let w_labels = g.matmul(leaves.w_e, onehot);
    // F0 = W_e * 0 keeps the node shape tied to the runtime d'
    let zero_sel = g.constant(Matrix::zeros(c, n + 1));
    let mut f = g.matmul(leaves.w_e, zero_sel);
    let alpha = leaves.alpha.expect("gd mode has an alpha leaf");
    let alpha_over_n = g.scale_const(alpha, 1.0 / n as f64);
    for _ in 0..cfg.layers {
        let f_keys = g.slice_cols(f, 0, n);
        let w_e_t = g.transpose(leaves.w_e);
        let logits = g.matmul(w_e_t, f_keys);
        let probs = g.col_softmax(logits);
        let expect = g.matmul(leaves.w_e, probs);
        let resid = g.sub(w_labels, expect);
        let update = g.matmul(resid, kmat);
        let scaled = g.scale_node(update, alpha_over_n);
        f = g.add(f, scaled);
    }
    let f_query = g.slice_cols(f, n, 1);
    let w_e_t = g.transpose(leaves.w_e);
    let logits_q = g.matmul(w_e_t, f_query);
    let y = ctx.query_label.ok_or_else(|| {
        Error::InvalidArgument("training requires contexts with query labels".into())
    })?;
    let lse = g.log_sum_exp(logits_q);
    let true_logit = g.slice_rows(logits_q, y - 1, 1);
    Ok(g.sub(lse, true_logit))
}

/// Query NLL of one context under the free single-layer attention model.
fn free_context_loss_node(
    g: &mut Graph,
    leaves: &SharedLeaves,
    ctx: &ContextSet,
    c: usize,
    d_prime: usize,
) -> Result<NodeId> {
    let n = ctx.num_context();
    let free = leaves.free.as_ref().expect("free mode leaves");
    let x = g.constant(ctx.covariates.clone());
    let centered = g.constant(label_onehot_centered(ctx, c));
    let labels = g.matmul(leaves.w_e, centered);
    let zeros = g.constant(Matrix::zeros(d_prime, n + 1));
    let top = g.concat_rows(x, labels);
    let e0 = g.concat_rows(top, zeros);

    let e0_keys = g.slice_cols(e0, 0, n);
    let keys = g.matmul(free.w_k, e0_keys);
    let queries = g.matmul(free.w_q, e0);
    let keys_t = g.transpose(keys);
    let attn_logits = g.matmul(keys_t, queries);
    let attn = g.col_softmax(attn_logits);
    let values = g.matmul(free.w_v, e0_keys);
    let mixed = g.matmul(values, attn);
    let out = g.matmul(free.proj, mixed);
    let out = g.scale_const(out, 1.0 / n as f64);
    let e1 = g.add(e0, out);

    let e_query = g.slice_cols(e1, n, 1);
    let f_q = g.matmul(free.readout, e_query);
    let w_e_t = g.transpose(leaves.w_e);
    let logits_q = g.matmul(w_e_t, f_q);
    let y = ctx.query_label.ok_or_else(|| {
        Error::InvalidArgument("training requires contexts with query labels".into())
    })?;
    let lse = g.log_sum_exp(logits_q);
    let true_logit = g.slice_rows(logits_q, y - 1, 1);
    Ok(g.sub(lse, true_logit))
}

/// Mean query negative log-likelihood over a batch of contexts, as one
/// differentiable graph sharing the trainable leaves.
pub fn batch_objective(
    cfg: &TrainConfig,
    arch: &ArchMeta,
    contexts: &[&ContextSet],
) -> Result<Graph> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("batch objective needs contexts".into()));
    }
    let mut g = Graph::new();
    let leaves = make_leaves(&mut g, cfg);
    let mut total: Option<NodeId> = None;
    for ctx in contexts {
        let loss = match cfg.mode {
            ModelMode::GdTrainable => gd_context_loss_node(&mut g, cfg, &leaves, ctx, arch.c)?,
            ModelMode::FreeTf => {
                free_context_loss_node(&mut g, &leaves, ctx, arch.c, arch.d_prime)?
            }
            _ => unreachable!("validated above"),
        };
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    let mean = g.scale_const(total.unwrap(), 1.0 / contexts.len() as f64);
    g.set_output(mean);
    Ok(g)
}

/// Adam with bias correction; parameters updated in sorted name order so the
/// result is independent of map iteration order.
struct Adam {
    lr: f64,
    t: usize,
    m: HashMap<String, Matrix>,
    v: HashMap<String, Matrix>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64) -> Self {
        Adam {
            lr,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    fn step(&mut self, params: &mut HashMap<String, Matrix>, grads: &HashMap<String, Matrix>) {
        self.t += 1;
        let mut names: Vec<&String> = params.keys().collect();
        names.sort();
        let names: Vec<String> = names.into_iter().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
            let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
            for i in 0..g.data().len() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

fn plain_gd_step(lr: f64, params: &mut HashMap<String, Matrix>, grads: &HashMap<String, Matrix>) {
    let mut names: Vec<String> = params.keys().cloned().collect();
    names.sort();
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).unwrap();
        for i in 0..g.data().len() {
            p.data_mut()[i] -= lr * g.data()[i];
        }
    }
}

/// Build a checkpoint from the current parameter bindings.
pub fn checkpoint_from_params(
    cfg: &TrainConfig,
    arch: &ArchMeta,
    params: &HashMap<String, Matrix>,
) -> ModelCheckpoint {
    let w_e = params["w_e"].clone();
    // The training graph depth is cfg.layers; carry it into the checkpoint so
    // prediction runs the same number of steps regardless of arch defaults.
    let arch = ArchMeta { layers: cfg.layers, ..arch.clone() };
    let arch = &arch;
    match cfg.mode {
        ModelMode::GdTrainable => {
            let alpha = params["alpha"].get(0, 0);
            let param = if cfg.kernel == KernelFamily::Linear {
                1.0
            } else {
                params["log_param"].get(0, 0).exp()
            };
            ModelCheckpoint::gd(
                ModelMode::GdTrainable,
                arch.clone(),
                KernelSpec::new(cfg.kernel, param),
                alpha,
                w_e,
            )
        }
        _ => {
            let block = BlockWeights {
                self_heads: vec![HeadWeights {
                    w_q: params["w_q"].clone(),
                    w_k: params["w_k"].clone(),
                    w_v: params["w_v"].clone(),
                    proj: params["proj"].clone(),
                    kernel: KernelSpec::new(KernelFamily::Softmax, 1.0),
                }],
                erasure: None::<ErasureHead>,
                cross: None::<CrossAttention>,
            };
            ModelCheckpoint {
                mode: ModelMode::FreeTf,
                arch: arch.clone(),
                kernel: KernelSpec::new(KernelFamily::Softmax, 1.0),
                alpha: f64::NAN,
                w_e,
                blocks: vec![block],
                readout: params["readout"].clone(),
            }
        }
    }
}

fn count_params(names: &[&str], params: &HashMap<String, Matrix>) -> usize {
    names.iter().map(|n| params[*n].data().len()).sum()
}

/// Full training loop: shuffled batches, first-order updates, periodic
/// held-out evaluation. Deterministic given the config's seed.
pub fn train(
    cfg: &TrainConfig,
    arch: &ArchMeta,
    train_data: &[ContextSet],
    eval_data: &[ContextSet],
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let start = Instant::now();
    let names = parameter_names(cfg);
    let mut params = init_parameters(cfg, arch);
    let trainable_count = count_params(&names, &params);
    let free_count = {
        let free_cfg = TrainConfig::new(ModelMode::FreeTf, 1, KernelFamily::Softmax, 0);
        let free_params = init_parameters(&free_cfg, arch);
        count_params(&parameter_names(&free_cfg), &free_params)
    };

    let mut adam = Adam::new(match cfg.optimizer {
        OptimizerKind::Adam { lr } => lr,
        OptimizerKind::PlainGd { lr } => lr,
    });

    let mut records = Vec::new();
    let mut last_good = checkpoint_from_params(cfg, arch, &params);
    let mut diverged_at = None;
    let mut best_nll = f64::INFINITY;
    let mut stale_checkpoints = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle = derive_tagged_stream(cfg.init_seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = (shuffle.uniform() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ContextSet> = chunk.iter().map(|&i| &train_data[i]).collect();
            let graph = batch_objective(cfg, arch, &batch)?;
            let loss = graph.evaluate(&params)?;
            if !loss.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            let grads = graph.gradient(&params, &names)?;
            match cfg.optimizer {
                OptimizerKind::Adam { .. } => adam.step(&mut params, &grads),
                OptimizerKind::PlainGd { lr } => plain_gd_step(lr, &mut params, &grads),
            }
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        if !train_loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        last_good = checkpoint_from_params(cfg, arch, &params);

        let (eval_top1, eval_nll) =
            if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
                if eval_data.is_empty() {
                    (None, None)
                } else {
                    let (top1, nll) = crate::verify::evaluate_metrics(&last_good, eval_data)?;
                    (Some(top1), Some(nll))
                }
            } else {
                (None, None)
            };
        records.push(EpochRecord {
            epoch,
            train_loss,
            eval_top1,
            eval_nll,
        });

        if let (Some(nll), Some(patience)) = (eval_nll, cfg.early_stop_patience) {
            if nll < best_nll - 1e-9 {
                best_nll = nll;
                stale_checkpoints = 0;
            } else {
                stale_checkpoints += 1;
                if stale_checkpoints >= patience {
                    break;
                }
            }
        }
    }

    Ok(TrainReport {
        records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        final_checkpoint: last_good,
        trainable_parameter_count: trainable_count,
        free_parameter_count: free_count,
        diverged_at,
    })
}
