//! Optimization loop, evaluation and inference.

mod ablation;
mod adam;
mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use ablation::{
    median, run_ablation, write_runs_csv, write_table_csv, AblationConfig, AblationOutcome,
    AblationRow, RunResult, TABLE_HEADER,
};
pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use eval::{evaluate, infer, predict, write_prediction, Prediction};

use crate::data::{augment, mix64, AugmentConfig, Augmented, SplitMix64, StereoSample};
use crate::error::{Error, Result};
use crate::image_ops::SsimConfig;
use crate::losses::{
    total_loss, LossInputs, LossMode, LossReport, LossWeights, SemanticTarget, Semantics,
    IGNORE_LABEL,
};
use crate::metrics::{aggregate, EvalConfig, MetricRow};
use crate::network::{forward_with, save_checkpoint, Heads, ModelConfig, ModelParams, ParamGroup};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub mode: LossMode,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates after the last epoch
    /// only. Ignored without an eval set.
    pub eval_interval: usize,
    pub eval: EvalConfig,
    /// Flip-average post-processing during evaluation.
    pub eval_pp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr0: 1e-4,
            adam: AdamConfig::default(),
            mode: LossMode::DSCdd,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_interval: 0,
            eval: EvalConfig::default(),
            eval_pp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr0
            )));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.ssim.validate()?;
        self.augment.validate()?;
        self.eval.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr0, epoch, self.epochs)
    }
}

/// Learning rate for `epoch` (0-based) of a run of `total` epochs: halved
/// once from `floor(0.6 * total)` and again from `floor(0.8 * total)`.
/// Milestones that fall on epoch 0 are dropped.
pub fn lr_at(lr0: f64, epoch: usize, total: usize) -> f64 {
    let milestones = [total * 3 / 5, total * 4 / 5];
    let halvings = milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
    lr0 * 0.5f64.powi(halvings as i32)
}

/// Decoders whose output `mode` consumes.
pub fn heads_for(mode: LossMode) -> Heads {
    if mode.uses_semantic() {
        Heads::Both
    } else {
        Heads::DepthOnly
    }
}

/// Stacked inputs of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// (batch, H, W) labels; flipped samples are entirely ignored.
    pub labels: Vec<u8>,
    pub flipped: Vec<bool>,
}

impl Batch {
    pub fn new(items: &[Augmented]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("batch", "no samples"));
        }
        let left: Vec<_> = items.iter().map(|a| a.sample.left.clone()).collect();
        let right: Vec<_> = items.iter().map(|a| a.sample.right.clone()).collect();
        let mut labels = Vec::new();
        for a in items {
            if a.flipped {
                labels.extend(std::iter::repeat_n(IGNORE_LABEL, a.sample.semantic.len()));
            } else {
                labels.extend_from_slice(&a.sample.semantic);
            }
        }
        Ok(Batch {
            left: Tensor::stack(&left)?,
            right: Tensor::stack(&right)?,
            labels,
            flipped: items.iter().map(|a| a.flipped).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.flipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    fn target(&self, num_classes: usize) -> Result<Option<SemanticTarget>> {
        if self.labels.iter().all(|&l| l == IGNORE_LABEL) {
            return Ok(None);
        }
        let s = self.left.shape();
        SemanticTarget::new(
            s.batch(),
            s.height(),
            s.width(),
            self.labels.clone(),
            num_classes,
        )
        .map(Some)
    }
}

/// Box-filtered copies of `image` at each disparity scale, registered as
/// constants.
fn pyramid_constants<T: Float>(
    g: &mut Graph<T>,
    image: &Tensor<f32>,
    scales: usize,
) -> Result<Vec<Var>> {
    let mut level = image.clone();
    let mut out = Vec::with_capacity(scales);
    for s in 0..scales {
        if s > 0 {
            level = level.downsample2()?;
        }
        out.push(g.constant(level.cast::<T>()));
    }
    Ok(out)
}

/// Forward pass and total loss for `batch` on already-registered parameter
/// handles.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Float>(
    g: &mut Graph<T>,
    model: &ModelConfig,
    params: &[Option<Var>],
    batch: &Batch,
    mode: LossMode,
    weights: &LossWeights,
    ssim: &SsimConfig,
) -> Result<(Var, LossReport)> {
    let scales = model.num_disparity_scales();
    let left = pyramid_constants(g, &batch.left, scales)?;
    let right = pyramid_constants(g, &batch.right, scales)?;
    let (pyramid, logits) = forward_with(g, model, params, left[0], heads_for(mode))?;
    let target = batch.target(model.num_classes)?;
    let semantics = match &target {
        Some(t) => Semantics::Labels(t),
        None if batch.flipped.iter().any(|&f| f) => Semantics::Flipped,
        None => Semantics::Unavailable,
    };
    let inputs = LossInputs {
        pyramid: &pyramid,
        left: &left,
        right: &right,
        logits,
        semantics,
    };
    total_loss(g, &inputs, mode, weights, ssim)
}

/// Registers `params` (skipping decoders `heads` leaves out) as trainable
/// leaves of `g`.
pub fn register_params<T: Float>(
    g: &mut Graph<T>,
    params: &ModelParams,
    heads: Heads,
) -> Vec<Option<Var>> {
    params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let skip =
                heads == Heads::DepthOnly && params.group_of(i) == ParamGroup::SemanticDecoder;
            (!skip).then(|| g.param(t.cast::<T>()))
        })
        .collect()
}

/// Loss report and per-tensor gradients (`None` where the loss does not
/// depend on the tensor) for one batch.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &Batch,
    mode: LossMode,
    weights: &LossWeights,
    ssim: &SsimConfig,
) -> Result<(LossReport, Vec<Option<Tensor<f32>>>)> {
    let mut g = Graph::<f32>::new();
    let vars = register_params(&mut g, params, heads_for(mode));
    let (loss, report) = batch_loss(&mut g, params.config(), &vars, batch, mode, weights, ssim)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|v| v.and_then(|v| g.grad(v).cloned()))
        .collect();
    Ok((report, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means over the epoch's steps; `scales` is left empty.
    pub loss: LossReport,
    pub eval: Option<MetricRow>,
}

/// Per-epoch training history. Wall-clock times are kept apart from the
/// records so the CSV log is reproducible bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub seconds: Vec<f64>,
}

pub const RUN_LOG_HEADER: &str = "epoch,lr,steps,total,depth,semantic,cdd,\
eval_abs_rel,eval_sq_rel,eval_rmse,eval_rmse_log,eval_delta1,eval_delta2,eval_delta3,eval_semantic_accuracy";

impl RunLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{RUN_LOG_HEADER}")?;
        for r in &self.records {
            write!(
                w,
                "{},{:e},{},{:.9},{:.9},{:.9},{:.9}",
                r.epoch, r.lr, r.steps, r.loss.total, r.loss.depth, r.loss.semantic, r.loss.cdd
            )?;
            match &r.eval {
                Some(e) => {
                    for v in e.depth.values() {
                        write!(w, ",{v:.6}")?;
                    }
                    match e.semantic_accuracy {
                        Some(a) => writeln!(w, ",{a:.6}")?,
                        None => writeln!(w, ",")?,
                    }
                }
                None => writeln!(w, ",,,,,,,,")?,
            }
        }
        Ok(())
    }

    pub fn write_timing<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,seconds")?;
        for (r, s) in self.records.iter().zip(&self.seconds) {
            writeln!(w, "{},{s:.3}", r.epoch)?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: OptimizerState,
    pub log: RunLog,
    /// Rows of the last evaluation, if any.
    pub eval_rows: Vec<MetricRow>,
}

/// File names inside a training output directory.
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub run_log: PathBuf,
    pub timing: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            checkpoint: dir.join("checkpoint.bin"),
            run_log: dir.join("run_log.csv"),
            timing: dir.join("timing.csv"),
        }
    }
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn check_samples(model: &ModelConfig, samples: &[StereoSample], what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        if (s.height(), s.width()) != (model.height, model.width) {
            return Err(Error::Config(format!(
                "{what} sample {i} is {}x{}, model expects {}x{}",
                s.width(),
                s.height(),
                model.width,
                model.height
            )));
        }
        if let Some(&bad) = s
            .semantic
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= model.num_classes)
        {
            return Err(Error::Config(format!(
                "{what} sample {i} has label {bad} but the model has {} classes",
                model.num_classes
            )));
        }
    }
    Ok(())
}

/// Seeded epochs of augment, forward, loss, backward and Adam over
/// `train_set`, starting from `params`. With `out_dir`, the checkpoint and
/// run log are rewritten after every epoch.
pub fn train(
    cfg: &TrainConfig,
    mut params: ModelParams,
    train_set: &[StereoSample],
    eval_set: &[StereoSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Manifest("training set is empty".into()));
    }
    let model = params.config().clone();
    check_samples(&model, train_set, "training")?;
    check_samples(&model, eval_set, "evaluation")?;
    let files = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(RunFiles::in_dir(dir))
        }
        None => None,
    };

    let mut state = OptimizerState::new(params.tensors());
    let mut log = RunLog::default();
    let mut eval_rows = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        SplitMix64::derive(cfg.seed, epoch as u64).shuffle(&mut order);

        let mut sum = LossReport::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Augmented> = chunk
                .iter()
                .map(|&i| {
                    let aug_seed = mix64(cfg.seed ^ mix64(((epoch as u64) << 32) | i as u64));
                    augment(&train_set[i], &cfg.augment, aug_seed)
                })
                .collect();
            let batch = Batch::new(&items)?;
            let (report, grads) =
                compute_gradients(&params, &batch, cfg.mode, &cfg.weights, &cfg.ssim)?;
            adam_step(params.tensors_mut(), &grads, &mut state, lr, &cfg.adam)?;
            sum.total += report.total;
            sum.depth += report.depth;
            sum.semantic += report.semantic;
            sum.cdd += report.cdd;
            steps += 1;
        }
        let n = steps as f64;
        let loss = LossReport {
            total: sum.total / n,
            depth: sum.depth / n,
            semantic: sum.semantic / n,
            cdd: sum.cdd / n,
            scales: Vec::new(),
        };

        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0;
        let eval = if !eval_set.is_empty() && (last || due) {
            eval_rows = evaluate(&params, eval_set, &cfg.eval, cfg.eval_pp)?;
            aggregate(&eval_rows, "mean")
        } else {
            None
        };
        log::info!(
            "epoch {}/{} lr {lr:.2e} loss {:.5} (depth {:.5} sem {:.5} cdd {:.5}){}",
            epoch + 1,
            cfg.epochs,
            loss.total,
            loss.depth,
            loss.semantic,
            loss.cdd,
            eval.as_ref().map_or(String::new(), |e| format!(
                " eval abs_rel {:.4}",
                e.depth.abs_rel
            )),
        );
        log.records.push(EpochRecord {
            epoch,
            lr,
            steps,
            loss,
            eval,
        });
        log.seconds.push(started.elapsed().as_secs_f64());

        if let Some(f) = &files {
            save_checkpoint(&f.checkpoint, &params)?;
            write_with(&f.run_log, |w| log.write_csv(w))?;
            write_with(&f.timing, |w| log.write_timing(w))?;
        }
    }
    Ok(TrainOutcome {
        params,
        state,
        log,
        eval_rows,
    })
}
