//! Reverse-mode gradients against central finite differences, per parameter.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::objectives::{loss_on_tape, LossWeights};
use crate::synth::{SceneGenerator, Split};
use crate::tensor::{ParamStore, Tape};

use super::trainer::{init_seed, prepare, Sample};
use super::RunConfig;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences of a loss of
/// magnitude ~10² carry ~1e-9 absolute roundoff, so gradients below the floor
/// are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub graphs: usize,
    /// Entries sampled per parameter; `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Test hook: adds the given offset to the analytic gradient of the named
    /// parameter before comparison.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            graphs: 2,
            max_entries: None,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn failures(&self) -> Vec<&GradcheckRow> {
        self.rows.iter().filter(|r| !r.passed()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>12}  {:>12}  result", "parameter", "checked", "max_rel", "max_abs");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}  {}",
                r.name,
                r.checked,
                r.max_rel_error,
                r.max_abs_error,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} of {} parameters pass (tolerance {TOLERANCE:e}, step {FD_STEP:e})",
            self.rows.len() - self.failures().len(),
            self.rows.len()
        );
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn total_loss(store: &ParamStore<f64>, model: &ModelConfig, w: &LossWeights, samples: &[Sample<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, store, model, &s.input)?;
        let l = loss_on_tape(&mut tape, &fwd, s.target, &s.gt, w)?;
        sum += tape.value(l.total).data()[0];
    }
    Ok(sum)
}

/// Compares analytic and finite-difference gradients of the summed loss over
/// a few generated scenes, in double precision.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let model = cfg.model();
    let weights = cfg.loss_weights();
    let generator = SceneGenerator::new(cfg.scene())?;
    let graphs = generator.generate_split(Split::Train, opts.graphs.max(1));
    let samples = prepare::<f64>(&graphs, cfg.top_n)?;
    let mut store: ParamStore<f64> = model.init_params(init_seed(cfg.seed))?;

    for s in &samples {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &store, &model, &s.input)?;
        let l = loss_on_tape(&mut tape, &fwd, s.target, &s.gt, &weights)?;
        let grads = tape.backward(l.total)?;
        tape.accumulate_param_grads(&grads, &mut store);
    }
    if let Some((name, offset)) = &opts.corrupt {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named `{name}`")))?;
        for g in p.grad.iter_mut() {
            *g += offset;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let n = store.get_index(pi).value.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut row = GradcheckRow {
            name: store.get_index(pi).name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &e in &entries {
            let orig = store.get_index(pi).value.data()[e];
            let analytic = store.get_index(pi).grad[e];
            let mut eval_at = |x: f64| -> Result<f64> {
                store.iter_mut().nth(pi).unwrap().value.data_mut()[e] = x;
                total_loss(&store, &model, &weights, &samples)
            };
            let plus = eval_at(orig + FD_STEP)?;
            let minus = eval_at(orig - FD_STEP)?;
            store.iter_mut().nth(pi).unwrap().value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            row.max_abs_error = row.max_abs_error.max((analytic - numeric).abs());
            row.max_rel_error = row.max_rel_error.max(relative_error(analytic, numeric));
        }
        rows.push(row);
    }
    Ok(GradcheckReport { rows })
}
