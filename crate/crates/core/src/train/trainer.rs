//! Mini-batch AdamW training with per-epoch validation, best-checkpoint
//! selection, early stopping and exact resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWH;
use crate::graph::{top_n, ProposalGraph};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{forward, ModelConfig, ModelInput};
use crate::objectives::{cls_target, loss_on_tape, LossWeights};
use crate::tensor::{write_checkpoint, AdamW, ParamStore, Scalar, Tape};

use super::RunConfig;

/// Seed offset separating parameter initialization from scene generation.
const INIT_SEED_SALT: u64 = 0x6d62_6f72_6573;
const SHUFFLE_STREAM: u64 = 1 << 50;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const STATE_FILE: &str = "state.bin";
pub const LOG_FILE: &str = "train.log";

/// One training example after top-N filtering.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image_id: String,
    pub input: ModelInput<T>,
    pub target: usize,
    pub gt: BoxCxCyWH,
}

/// Filters each graph to its top-N proposals and computes the
/// classification target.
pub fn prepare<T: Scalar>(graphs: &[ProposalGraph], n: usize) -> Result<Vec<Sample<T>>> {
    graphs
        .iter()
        .map(|g| {
            let g = top_n(g, n);
            Ok(Sample {
                image_id: g.image_id.clone(),
                input: ModelInput::from_graph(&g)?,
                target: cls_target(&g.boxes(), &g.gt_box),
                gt: g.gt_box,
            })
        })
        .collect()
}

pub fn init_seed(seed: u64) -> u64 {
    seed ^ INIT_SEED_SALT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: MetricsReport,
}

/// Serializable training progress, everything except tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    next_epoch: usize,
    optimizer_steps: u64,
    best_epoch: Option<usize>,
    best_mean_iou: f64,
    bad_epochs: usize,
    history: Vec<EpochLog>,
    step_losses: Vec<f64>,
    precision: String,
    param_names: Vec<String>,
}

/// Complete resumable trainer state.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    meta: StateMeta,
    params: ParamStore<T>,
    best: ParamStore<T>,
    optimizer: AdamW<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn next_epoch(&self) -> usize {
        self.meta.next_epoch
    }

    /// Writes the state: `u32 version | u64 meta_len | meta JSON | f64 LE
    /// arrays (value, first moment, second moment, best value) per parameter`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).expect("state metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        let (m1, m2) = self.optimizer.moments();
        for (i, p) in self.params.iter().enumerate() {
            let best = self.best.get_index(i).value.data();
            for arr in [p.value.data(), &m1[i], &m2[i], best] {
                for v in arr {
                    buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        crate::io_util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = || Error::Dimension(format!("{}: truncated or corrupt trainer state", path.display()));
        if bytes.len() < 12 || bytes[0..4] != 1u32.to_le_bytes() {
            return Err(corrupt());
        }
        let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let meta_end = 12usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(corrupt)?;
        let meta: StateMeta = serde_json::from_slice(&bytes[12..meta_end]).map_err(|_| corrupt())?;
        if meta.precision != T::NAME {
            return Err(Error::Config(format!(
                "trainer state was saved in {} precision, run is {}",
                meta.precision,
                T::NAME
            )));
        }
        let mut params: ParamStore<T> = cfg.model().init_params(init_seed(cfg.seed))?;
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        if names != meta.param_names {
            return Err(Error::Dimension("trainer state parameter layout differs from the configured model".into()));
        }
        let mut best = params.clone();
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut pos = meta_end;
        let mut read = |n: usize| -> Result<Vec<T>> {
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(corrupt());
            }
            let out = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            pos = end;
            Ok(out)
        };
        for (p, b) in params.iter_mut().zip(best.iter_mut()) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&read(n)?);
            first.push(read(n)?);
            second.push(read(n)?);
            b.value.data_mut().copy_from_slice(&read(n)?);
        }
        if pos != bytes.len() {
            return Err(corrupt());
        }
        let mut optimizer = AdamW::new(cfg.optimizer(), &params);
        optimizer.restore(meta.optimizer_steps, first, second)?;
        Ok(Self {
            meta,
            params,
            best,
            optimizer,
        })
    }
}

#[derive(Default)]
pub struct TrainOptions {
    /// Directory for checkpoints, trainer state and the log.
    pub out_dir: Option<PathBuf>,
    /// State to continue from instead of a fresh initialization.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many epochs of the current invocation.
    pub max_epochs_this_run: Option<usize>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch.
    pub params: ParamStore<T>,
    pub history: Vec<EpochLog>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<MetricsReport>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Refined boxes for every sample, paired with ground truth.
pub fn predict_boxes<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    samples: &[Sample<T>],
) -> Result<Vec<(BoxCxCyWH, BoxCxCyWH)>> {
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let v = forward(&mut tape, store, cfg, &s.input)?;
            let b = tape.value(v.refined_box).to_f64_vec();
            Ok((BoxCxCyWH::new(b[0], b[1], b[2], b[3]), s.gt))
        })
        .collect()
}

/// Mean loss of one mini-batch; gradients are accumulated into `store`
/// scaled by `1/len`.
pub fn batch_step<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    batch: &[&Sample<T>],
) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, store, cfg, &s.input)?;
        let loss = loss_on_tape(&mut tape, &fwd, s.target, &s.gt, weights)?;
        let value = tape.value(loss.total).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss on `{}`", s.image_id)));
        }
        total += value;
        let grads = tape.backward(loss.total)?;
        tape.accumulate_param_grads(&grads, store);
    }
    store.scale_grads(T::from_f64(1.0 / batch.len() as f64));
    Ok(total / batch.len() as f64)
}

fn log_line(out: Option<&Path>, verbose: bool, line: &str) -> Result<()> {
    if verbose {
        eprintln!("{line}");
    }
    if let Some(dir) = out {
        let path = dir.join(LOG_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Trains on `train`, selecting the epoch with the best validation meanIoU.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    train: &[ProposalGraph],
    val: &[ProposalGraph],
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training needs non-empty train and val splits".into()));
    }
    let model = cfg.model();
    let weights = cfg.loss_weights();
    let train_samples = prepare::<T>(train, cfg.top_n)?;
    let val_samples = prepare::<T>(val, cfg.top_n)?;
    let out = opts.out_dir.as_deref();

    let mut state = match &opts.resume_from {
        Some(path) => TrainState::load(path, cfg)?,
        None => {
            let params: ParamStore<T> = model.init_params(init_seed(cfg.seed))?;
            let optimizer = AdamW::new(cfg.optimizer(), &params);
            TrainState {
                meta: StateMeta {
                    next_epoch: 0,
                    optimizer_steps: 0,
                    best_epoch: None,
                    best_mean_iou: f64::NEG_INFINITY,
                    bad_epochs: 0,
                    history: Vec::new(),
                    step_losses: Vec::new(),
                    precision: T::NAME.to_string(),
                    param_names: params.iter().map(|p| p.name.clone()).collect(),
                },
                best: params.clone(),
                params,
                optimizer,
            }
        }
    };

    let mut stopped_early = state.meta.bad_epochs >= cfg.patience && state.meta.best_epoch.is_some();
    let mut ran = 0;
    while state.meta.next_epoch < cfg.epochs && !stopped_early {
        if opts.max_epochs_this_run.is_some_and(|m| ran >= m) {
            break;
        }
        let epoch = state.meta.next_epoch;
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM | epoch as u64);
        order.shuffle(&mut rng);
        // drawn after the shuffle so runs without resampling are unaffected
        let mut resampled: Vec<Sample<T>> = Vec::new();
        let lo = cfg.min_train_top_n.min(cfg.top_n);
        if lo > 0 && lo < cfg.top_n {
            for g in train {
                let n = rng.random_range(lo..=cfg.top_n);
                resampled.extend(prepare::<T>(std::slice::from_ref(g), n)?);
            }
        }
        let pool = if resampled.is_empty() { &train_samples } else { &resampled };

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &pool[i]).collect();
            let loss = match batch_step(&mut state.params, &model, &weights, &batch) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        write_checkpoint(&state.params, &dir.join(LAST_GOOD_CHECKPOINT))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = state.optimizer.step(&mut state.params) {
                if let Some(dir) = out {
                    write_checkpoint(&state.params, &dir.join(LAST_GOOD_CHECKPOINT))?;
                }
                return Err(e);
            }
            state.meta.step_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
        }

        let val_report = evaluate(&predict_boxes(&state.params, &model, &val_samples)?)?;
        let log = EpochLog {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            val: val_report.clone(),
        };
        log_line(
            out,
            opts.verbose,
            &format!(
                "epoch {epoch:>3}  loss {:>10.4}  val meanIoU {:.4}  cmuIoU {:.4}  Pr@0.5 {:.4}",
                log.mean_loss,
                val_report.mean_iou,
                val_report.cmu_iou,
                val_report.pr_at[0]
            ),
        )?;
        state.meta.history.push(log);

        if val_report.mean_iou > state.meta.best_mean_iou {
            state.meta.best_mean_iou = val_report.mean_iou;
            state.meta.best_epoch = Some(epoch);
            state.meta.bad_epochs = 0;
            state.best = state.params.clone();
            if let Some(dir) = out {
                write_checkpoint(&state.best, &dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            state.meta.bad_epochs += 1;
        }
        state.meta.next_epoch = epoch + 1;
        state.meta.optimizer_steps = state.optimizer.steps_taken();
        if let Some(dir) = out {
            state.save(&dir.join(STATE_FILE))?;
        }
        ran += 1;
        stopped_early = state.meta.bad_epochs >= cfg.patience;
    }

    let best_val = state
        .meta
        .best_epoch
        .and_then(|e| state.meta.history.iter().find(|h| h.epoch == e))
        .map(|h| h.val.clone());
    Ok(TrainOutcome {
        params: state.best,
        epochs_run: state.meta.next_epoch,
        history: state.meta.history,
        step_losses: state.meta.step_losses,
        best_epoch: state.meta.best_epoch,
        best_val,
        stopped_early,
    })
}
