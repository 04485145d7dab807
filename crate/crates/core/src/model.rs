//! Multi-exit network: a stack of dense ReLU blocks with a two-layer MLP
//! classifier after every block and the original linear classifier on top
//! of the last block.
//!
//! Training minimizes `Σₖ αₖ·(l_tᵏ + λ·l_sᵏ)` over all internal exits and
//! the final exit, where `l_t` is cross-entropy and `l_s` a fairness
//! regularizer evaluated on the features the exit's head reads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairness::{self, KernelSpec, Regularizer};
use crate::tensor::{dense_forward, nn, relu, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Output width of each backbone block; one internal exit per block.
    pub block_widths: Vec<usize>,
    /// Hidden width of the internal classifier MLPs.
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            num_classes: 3,
            block_widths: vec![16; 4],
            head_hidden: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Number of internal exits `n` (one per block).
    pub fn num_internal_exits(&self) -> usize {
        self.block_widths.len()
    }

    /// Internal exits plus the final exit.
    pub fn num_exits(&self) -> usize {
        self.block_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_widths.is_empty() {
            return Err(Error::config("model.block_widths: at least one block (internal exit) is required"));
        }
        if self.block_widths.contains(&0) {
            return Err(Error::config("model.block_widths: widths must be positive"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim: must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes: must be at least 2"));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("model.head_hidden: must be positive"));
        }
        Ok(())
    }
}

/// Exit weights that grow linearly with depth from 0.3 to 0.9:
/// `αₖ = 0.3 + 0.6·(k-1)/n` for internal exit `k`, and 0.9 for the final
/// exit. For four internal exits this is `[0.3, 0.45, 0.6, 0.75, 0.9]`.
pub fn default_alphas(num_internal: usize) -> Vec<f64> {
    let n = num_internal.max(1) as f64;
    (0..num_internal)
        .map(|k| 0.3 + 0.6 * k as f64 / n)
        .chain(std::iter::once(0.9))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// One weight per internal exit followed by the final-exit weight.
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub regularizer: Regularizer,
    /// Kernel on exit features for MMD and HSIC.
    pub kernel: KernelSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_exits(num_internal: usize) -> Self {
        Self {
            alphas: default_alphas(num_internal),
            lambda: 0.01,
            regularizer: Regularizer::Mmd,
            kernel: KernelSpec::default(),
            learning_rate: 1e-2,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }

    /// Same settings with every internal exit weighted 0, which trains a
    /// conventional single-exit network.
    pub fn final_exit_only(&self) -> Self {
        let mut cfg = self.clone();
        let n = cfg.alphas.len().saturating_sub(1);
        cfg.alphas[..n].fill(0.0);
        cfg
    }

    pub fn validate(&self, num_internal: usize) -> Result<()> {
        if self.alphas.len() != num_internal + 1 {
            return Err(Error::config(format!(
                "train.alphas: expected {} weights ({num_internal} internal exits + final), got {}",
                num_internal + 1,
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("train.alphas: weights must be non-negative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("train.lambda: must be non-negative, got {}", self.lambda)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "train.learning_rate: must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size: must be positive"));
        }
        self.kernel.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct MlpHead {
    hidden: Dense,
    out: Dense,
}

/// Logits and head-input features of every exit, shallow to deep, final last.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitOutputs {
    pub logits: Vec<Matrix>,
    pub features: Vec<Matrix>,
}

/// Tape handles for the same quantities as [`ExitOutputs`].
#[derive(Clone, Debug)]
pub struct TapeOutputs {
    pub logits: Vec<Var>,
    pub features: Vec<Var>,
}

/// Rewrites trained weights in place, e.g. a pruning pass. Applied through
/// [`MultiExitModel::apply_pass`] after training.
pub trait ParamPass {
    fn apply(&mut self, config: &ModelConfig, params: &mut ParamStore) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitModel {
    config: ModelConfig,
    params: ParamStore,
    blocks: Vec<Dense>,
    heads: Vec<MlpHead>,
    final_head: Dense,
}

impl MultiExitModel {
    /// Builds and initializes a model. Initialization depends only on the config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut dense = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let (w, b) = nn::init_dense(&mut rng, fan_in, fan_out);
            Dense {
                weight: params.add(format!("{name}.weight"), w),
                bias: params.add(format!("{name}.bias"), b),
            }
        };

        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut width = config.input_dim;
        for (k, &out) in config.block_widths.iter().enumerate() {
            blocks.push(dense(&mut params, &format!("block{}", k + 1), width, out));
            width = out;
        }
        for (k, &w) in config.block_widths.iter().enumerate() {
            heads.push(MlpHead {
                hidden: dense(&mut params, &format!("exit{}.hidden", k + 1), w, config.head_hidden),
                out: dense(&mut params, &format!("exit{}.out", k + 1), config.head_hidden, config.num_classes),
            });
        }
        let final_head = dense(&mut params, "final", width, config.num_classes);
        Ok(Self {
            config,
            params,
            blocks,
            heads,
            final_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_exits(&self) -> usize {
        self.config.num_exits()
    }

    pub fn apply_pass<P: ParamPass + ?Sized>(&mut self, pass: &mut P) -> Result<()> {
        pass.apply(&self.config, &mut self.params)
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::dim(format!(
                "model expects {} input features, batch has {}",
                self.config.input_dim,
                batch.cols()
            )));
        }
        Ok(())
    }

    fn eager_dense(&self, d: Dense, x: &Matrix) -> Result<Matrix> {
        dense_forward(x, self.params.value(d.weight), self.params.value(d.bias))
    }

    /// Forward pass returning all `n+1` logit matrices and the features
    /// each head consumed. The final head reads the last block's output.
    pub fn forward_all(&self, batch: &Matrix) -> Result<ExitOutputs> {
        self.check_input(batch)?;
        let mut logits = Vec::with_capacity(self.num_exits());
        let mut features = Vec::with_capacity(self.num_exits());
        let mut h = batch.clone();
        for (block, head) in self.blocks.iter().zip(&self.heads) {
            h = relu(&self.eager_dense(*block, &h)?);
            let hidden = relu(&self.eager_dense(head.hidden, &h)?);
            logits.push(self.eager_dense(head.out, &hidden)?);
            features.push(h.clone());
        }
        logits.push(self.eager_dense(self.final_head, &h)?);
        features.push(h);
        Ok(ExitOutputs { logits, features })
    }

    /// The same forward pass recorded on `tape` for differentiation.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &Matrix) -> Result<TapeOutputs> {
        self.check_input(batch)?;
        let dense = |tape: &mut Tape, d: Dense, x: Var| -> Result<Var> {
            let w = tape.param(&self.params, d.weight);
            let b = tape.param(&self.params, d.bias);
            tape.dense(x, w, b)
        };
        let mut logits = Vec::with_capacity(self.num_exits());
        let mut features = Vec::with_capacity(self.num_exits());
        let mut h = tape.constant(batch.clone());
        for (block, head) in self.blocks.iter().zip(&self.heads) {
            let z = dense(tape, *block, h)?;
            h = tape.relu(z);
            let z = dense(tape, head.hidden, h)?;
            let hidden = tape.relu(z);
            logits.push(dense(tape, head.out, hidden)?);
            features.push(h);
        }
        logits.push(dense(tape, self.final_head, h)?);
        features.push(h);
        Ok(TapeOutputs { logits, features })
    }
}

/// Per-exit loss terms and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy `l_t` per exit, final last.
    pub target: Vec<f64>,
    /// Fairness regularizer `l_s` per exit (0 when disabled or degenerate).
    pub fairness: Vec<f64>,
    pub total: f64,
    /// Set when the batch held a single sensitive group, so `l_s` was taken as 0.
    pub degenerate: bool,
}

impl LossBreakdown {
    /// Recomputes `Σₖ αₖ·(l_tᵏ + λ·l_sᵏ)` from the stored terms.
    pub fn recombine(&self, alphas: &[f64], lambda: f64) -> f64 {
        alphas
            .iter()
            .zip(self.target.iter().zip(&self.fairness))
            .map(|(a, (t, s))| a * (t + lambda * s))
            .sum()
    }
}

/// Records the joint loss on `tape` and returns its root node.
///
/// A batch drawn from one sensitive group gives `l_s = 0` at every exit and
/// sets [`LossBreakdown::degenerate`].
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    outputs: &TapeOutputs,
    targets: &[usize],
    sensitive: &[u8],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let exits = outputs.logits.len();
    if outputs.features.len() != exits {
        return Err(Error::dim("logits and features disagree on the number of exits"));
    }
    if cfg.alphas.len() != exits {
        return Err(Error::config(format!(
            "train.alphas: expected {exits} weights, got {}",
            cfg.alphas.len()
        )));
    }
    if targets.len() != sensitive.len() {
        return Err(Error::dim("targets and sensitive attributes differ in length"));
    }
    let groups = [
        sensitive.iter().filter(|&&a| a == 0).count(),
        sensitive.iter().filter(|&&a| a == 1).count(),
    ];
    let regularize = cfg.regularizer != Regularizer::None;
    let degenerate = regularize && (groups[0] == 0 || groups[1] == 0);

    let mut terms = Vec::with_capacity(2 * exits);
    let mut target = Vec::with_capacity(exits);
    let mut fairness_terms = Vec::with_capacity(exits);
    for k in 0..exits {
        let lt = tape.softmax_cross_entropy(outputs.logits[k], targets)?;
        target.push(tape.scalar(lt));
        terms.push((cfg.alphas[k], lt));

        if regularize && !degenerate {
            let feats = tape.value(outputs.features[k]);
            let (value, grad) = match cfg.regularizer {
                Regularizer::Mmd => fairness::mmd2_with_grad(feats, sensitive, cfg.kernel)?,
                Regularizer::Hsic => {
                    fairness::hsic_with_grad(feats, sensitive, cfg.kernel, KernelSpec::Linear)?
                }
                Regularizer::None => unreachable!(),
            };
            let ls = tape.fused_scalar(outputs.features[k], value, grad)?;
            fairness_terms.push(value);
            terms.push((cfg.alphas[k] * cfg.lambda, ls));
        } else {
            fairness_terms.push(0.0);
        }
    }
    let root = tape.combine(&terms)?;
    let breakdown = LossBreakdown {
        target,
        fairness: fairness_terms,
        total: tape.scalar(root),
        degenerate,
    };
    Ok((root, breakdown))
}

/// Joint loss of precomputed exit outputs.
pub fn joint_loss(outputs: &ExitOutputs, targets: &[usize], sensitive: &[u8], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = TapeOutputs {
        logits: outputs.logits.iter().map(|l| tape.constant(l.clone())).collect(),
        features: outputs.features.iter().map(|f| tape.constant(f.clone())).collect(),
    };
    joint_loss_on_tape(&mut tape, &vars, targets, sensitive, cfg).map(|(_, b)| b)
}

impl MultiExitModel {
    /// Joint loss on a batch and the parameter gradients it induces.
    pub fn loss_and_grad(&mut self, batch: &Matrix, targets: &[usize], sensitive: &[u8], cfg: &TrainConfig) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let outputs = self.forward_tape(&mut tape, batch)?;
        let (root, breakdown) = joint_loss_on_tape(&mut tape, &outputs, targets, sensitive, cfg)?;
        tape.backward(root, &mut self.params)?;
        Ok(breakdown)
    }
}

/// Mean loss terms over one epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub degenerate_batches: usize,
}

/// Mini-batch SGD on the joint loss. Batches come from a seeded
/// Fisher–Yates shuffle each epoch; the last partial batch is kept.
pub fn train(model: &mut MultiExitModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let n = model.config().num_internal_exits();
    cfg.validate(n)?;
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if data.dim() != model.config().input_dim {
        return Err(Error::data(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.config().input_dim
        )));
    }
    if let Some(t) = data.targets().iter().find(|&&t| t >= model.config().num_classes) {
        return Err(Error::data(format!(
            "target {t} out of range for a {}-class model",
            model.config().num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let exits = n + 1;
        let mut sum_t = vec![0.0; exits];
        let mut sum_s = vec![0.0; exits];
        let mut sum_total = 0.0;
        let mut batches = 0usize;
        let mut degenerate = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.targets()[i]).collect();
            let a: Vec<u8> = chunk.iter().map(|&i| data.sensitive()[i]).collect();
            let b = model.loss_and_grad(&x, &y, &a, cfg)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!("loss diverged in epoch {epoch}")));
            }
            nn::sgd_step(&mut model.params, cfg.learning_rate)?;
            for k in 0..exits {
                sum_t[k] += b.target[k];
                sum_s[k] += b.fairness[k];
            }
            sum_total += b.total;
            batches += 1;
            degenerate += usize::from(b.degenerate);
        }
        let scale = 1.0 / batches as f64;
        history.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                target: sum_t.iter().map(|v| v * scale).collect(),
                fairness: sum_s.iter().map(|v| v * scale).collect(),
                total: sum_total * scale,
                degenerate: degenerate > 0,
            },
            degenerate_batches: degenerate,
        });
    }
    Ok(history)
}
