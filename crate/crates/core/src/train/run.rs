//! Command implementations: dataset generation, training runs with
//! manifests, and evaluation with per-sample dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::graph::{read_graphs, top_n, write_graphs, GraphHeader, ProposalGraph};
use crate::io_util::write_atomic;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{predict, ModelConfig};
use crate::synth::{SceneGenerator, Split};
use crate::tensor::{read_checkpoint, ParamStore, Scalar};

use super::trainer::{self, init_seed, TrainOptions, TrainOutcome, BEST_CHECKPOINT};
use super::{Precision, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Known departures from the reference method, recorded in every manifest.
pub const DEVIATIONS: [&str; 4] = [
    "box refinement head is seeded-randomly initialized; no pretrained detector regression head is available",
    "text tokens are synthetic embeddings rather than outputs of a pretrained language encoder",
    "desk-scale defaults (N=32, D_obj=64, d_t=32) replace N=300, D_obj=256",
    "fixed learning rate with epoch-level early stopping on validation meanIoU",
];

/// [`DEVIATIONS`] plus those enabled by `cfg`.
pub fn deviations(cfg: &RunConfig) -> Vec<String> {
    let mut out: Vec<String> = DEVIATIONS.iter().map(|s| s.to_string()).collect();
    let lo = cfg.min_train_top_n.min(cfg.top_n);
    if lo > 0 && lo < cfg.top_n {
        out.push(format!(
            "training graphs are re-filtered every epoch to a random top-N in {lo}..={}",
            cfg.top_n
        ));
    }
    out
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Creates `dir`, refusing an existing one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(Error::Usage(format!(
            "output directory {} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub counts: SplitCounts,
    pub created_unix: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and a manifest into `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    let generator = SceneGenerator::new(cfg.scene())?;
    prepare_out_dir(out, force)?;
    let header = GraphHeader::new(cfg.d_obj, cfg.d_t);
    for (split, count) in [
        (Split::Train, cfg.train_scenes),
        (Split::Val, cfg.val_scenes),
        (Split::Test, cfg.test_scenes),
    ] {
        let graphs = generator.generate_split(split, count);
        write_graphs(&graphs, &header, &split_file(out, split))?;
    }
    let manifest = DatasetManifest {
        tool: "mbores".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        counts: SplitCounts {
            train: cfg.train_scenes,
            val: cfg.val_scenes,
            test: cfg.test_scenes,
        },
        created_unix: now_unix(),
    };
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Graphs of all three splits, read from `dir` or generated from `cfg`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ProposalGraph>,
    pub val: Vec<ProposalGraph>,
    pub test: Vec<ProposalGraph>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let g = SceneGenerator::new(cfg.scene())?;
        Ok(Self {
            train: g.generate_split(Split::Train, cfg.train_scenes),
            val: g.generate_split(Split::Val, cfg.val_scenes),
            test: g.generate_split(Split::Test, cfg.test_scenes),
        })
    }

    /// Reads the split files, checking their feature widths against `cfg`.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let read = |split| -> Result<Vec<ProposalGraph>> {
            let path = split_file(dir, split);
            let reader = read_graphs(&path)?;
            if let Some(h) = reader.header() {
                if h.d_obj != cfg.d_obj || h.d_t != cfg.d_t {
                    return Err(Error::Dimension(format!(
                        "{}: dataset has d_obj={}, d_t={}; config expects d_obj={}, d_t={}",
                        path.display(),
                        h.d_obj,
                        h.d_t,
                        cfg.d_obj,
                        cfg.d_t
                    )));
                }
            }
            reader.collect()
        };
        Ok(Self {
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub seed: u64,
    pub config: RunConfig,
    pub deviations: Vec<String>,
    pub parameter_count: usize,
    pub parameter_tensors: usize,
    pub counts: SplitCounts,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub stopped_early: Option<bool>,
    pub best_val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    /// Copy with wall-clock fields cleared, for reproducibility comparisons.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix: 0,
            finished_unix: None,
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            field: "manifest".into(),
            msg: e.to_string(),
        })
    }
}

/// Result of a training run: the manifest plus best parameters in f64.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub manifest: RunManifest,
    pub params: ParamStore<f64>,
    pub step_losses: Vec<f64>,
}

/// Trains with the configured precision. When `out` is given the resolved
/// config and a preliminary manifest are written before training, and
/// checkpoints, trainer state, the log and the final manifest after.
pub fn cmd_train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, opts: TrainOptions) -> Result<TrainRun> {
    cfg.validate()?;
    let model = cfg.model();
    let probe: ParamStore<f32> = model.init_params(init_seed(cfg.seed))?;
    let mut manifest = RunManifest {
        tool: "mbores".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        status: "running".into(),
        seed: cfg.seed,
        config: cfg.clone(),
        deviations: deviations(cfg),
        parameter_count: probe.num_scalars(),
        parameter_tensors: probe.len(),
        counts: SplitCounts {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
        epochs_run: None,
        best_epoch: None,
        stopped_early: None,
        best_val: None,
        test: None,
        started_unix: now_unix(),
        finished_unix: None,
    };
    let opts = TrainOptions {
        out_dir: out.map(Path::to_path_buf),
        ..opts
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
        write_json(&manifest, &dir.join(MANIFEST_FILE))?;
        if opts.verbose {
            eprintln!(
                "training {} parameters in {} tensors (multi_branch={})",
                manifest.parameter_count, manifest.parameter_tensors, cfg.multi_branch
            );
        }
    }
    let (outcome, params) = match cfg.precision {
        Precision::F32 => {
            let o: TrainOutcome<f32> = trainer::train(cfg, &data.train, &data.val, &opts)?;
            let p = o.params.cast();
            (strip(o), p)
        }
        Precision::F64 => {
            let o: TrainOutcome<f64> = trainer::train(cfg, &data.train, &data.val, &opts)?;
            let p = o.params.clone();
            (strip(o), p)
        }
    };
    manifest.epochs_run = Some(outcome.epochs_run);
    manifest.best_epoch = outcome.best_epoch;
    manifest.stopped_early = Some(outcome.stopped_early);
    manifest.best_val = outcome.best_val;
    if !data.test.is_empty() {
        manifest.test = Some(match cfg.precision {
            Precision::F32 => eval_store(&params.cast::<f32>(), &model, &data.test, cfg.top_n)?.0,
            Precision::F64 => eval_store(&params, &model, &data.test, cfg.top_n)?.0,
        });
    }
    manifest.status = "complete".into();
    manifest.finished_unix = Some(now_unix());
    if let Some(dir) = out {
        write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    }
    Ok(TrainRun {
        manifest,
        params,
        step_losses: outcome.step_losses,
    })
}

/// Fields of a [`TrainOutcome`] that do not depend on the precision.
struct OutcomeSummary {
    epochs_run: usize,
    best_epoch: Option<usize>,
    stopped_early: bool,
    best_val: Option<MetricsReport>,
    step_losses: Vec<f64>,
}

fn strip<T>(o: TrainOutcome<T>) -> OutcomeSummary {
    OutcomeSummary {
        epochs_run: o.epochs_run,
        best_epoch: o.best_epoch,
        stopped_early: o.stopped_early,
        best_val: o.best_val,
        step_losses: o.step_losses,
    }
}

/// Audit row of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub image_id: String,
    pub probs: Vec<f64>,
    pub argmax: usize,
    pub refined_box: [f64; 4],
    pub gt_box: [f64; 4],
    pub iou: f64,
}

/// Top-N filtering then a full forward pass on every graph.
pub fn eval_store<T: Scalar>(
    store: &ParamStore<T>,
    model: &ModelConfig,
    graphs: &[ProposalGraph],
    n: usize,
) -> Result<(MetricsReport, Vec<SampleDump>)> {
    let mut pairs = Vec::with_capacity(graphs.len());
    let mut dump = Vec::with_capacity(graphs.len());
    for g in graphs {
        let g = top_n(g, n);
        let out = predict(store, model, &g)?;
        pairs.push((out.refined_box, g.gt_box));
        dump.push(SampleDump {
            image_id: g.image_id.clone(),
            argmax: out.argmax(),
            refined_box: out.refined_box.to_array(),
            gt_box: g.gt_box.to_array(),
            iou: geometry::iou(&out.refined_box, &g.gt_box),
            probs: out.probs,
        });
    }
    Ok((evaluate(&pairs)?, dump))
}

/// Loads a checkpoint into the model described by `cfg`; any mismatch in
/// parameter names or shapes is a dimension error.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ParamStore<f64>> {
    let mut store: ParamStore<f64> = cfg.model().init_params(0)?;
    let loaded: ParamStore<f64> = read_checkpoint(checkpoint)?;
    store.load_values(&loaded).map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("{}: {m}", checkpoint.display())),
        other => other,
    })?;
    Ok(store)
}

/// One report per requested `top_n`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    graphs: &[ProposalGraph],
    top_ns: &[usize],
) -> Result<Vec<(usize, MetricsReport, Vec<SampleDump>)>> {
    let store = load_model(cfg, checkpoint)?;
    let model = cfg.model();
    if let Some(g) = graphs.first() {
        if g.d_obj() != cfg.d_obj || g.text.d_t() != cfg.d_t {
            return Err(Error::Dimension(format!(
                "dataset has d_obj={}, d_t={}; checkpoint model expects d_obj={}, d_t={}",
                g.d_obj(),
                g.text.d_t(),
                cfg.d_obj,
                cfg.d_t
            )));
        }
    }
    top_ns
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Usage("top_n must be >= 1".into()));
            }
            let (report, dump) = match cfg.precision {
                Precision::F32 => eval_store(&store.cast::<f32>(), &model, graphs, n)?,
                Precision::F64 => eval_store(&store, &model, graphs, n)?,
            };
            Ok((n, report, dump))
        })
        .collect()
}

/// Writes `report_top{n}.txt` and `dump_top{n}.jsonl` into `dir`.
pub fn write_eval_outputs(dir: &Path, n: usize, report: &MetricsReport, dump: &[SampleDump]) -> Result<()> {
    write_atomic(&dir.join(format!("report_top{n}.txt")), report.to_kv().as_bytes())?;
    let mut text = String::new();
    for row in dump {
        text.push_str(&serde_json::to_string(row).expect("dump row serializes"));
        text.push('\n');
    }
    write_atomic(&dir.join(format!("dump_top{n}.jsonl")), text.as_bytes())
}

/// Path of the best checkpoint inside a training output directory.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join(BEST_CHECKPOINT)
}
