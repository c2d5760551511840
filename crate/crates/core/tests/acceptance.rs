//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 5 to 7 train the standard benchmark and take minutes.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mbores::geometry::{giou, iou, BoxCxCyWH};
use mbores::metrics::{evaluate, MetricsReport};
use mbores::model::{multi_branch_forward, predict, ModelConfig, ModelInput};
use mbores::objectives::{box_losses, cls_loss, total_loss, LossWeights};
use mbores::synth::{SceneConfig, SceneGenerator, Split};
use mbores::tensor::{ParamStore, Tape};
use mbores::train::{cmd_train, eval_store, gradcheck, Dataset, GradcheckOptions, RunConfig, TrainOptions, TrainRun};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Targets on the standard benchmark.
const TARGET_PR50: f64 = 0.90;
const TARGET_MEAN_IOU: f64 = 0.75;
/// Seeded results of the first full run, pinned with a 0.02 tolerance.
const PINNED_PR50: f64 = 0.938;
const PINNED_MEAN_IOU: f64 = 0.7831;
const PIN_TOLERANCE: f64 = 0.02;
const ABLATION_GAP: f64 = 0.03;
const TOP_N_DROP: f64 = 0.02;
/// Training is single-threaded, so wall time bounds CPU time from above.
const TRAIN_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(id: u32, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id}: {} {title}: {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let opts = GradcheckOptions {
        max_entries: None,
        ..Default::default()
    };
    let report = gradcheck(&RunConfig::gradcheck_default(), &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let checked: usize = report.rows.iter().map(|r| r.checked).sum();
    verdict(
        report.all_passed() && secs < 120.0,
        format!(
            "{}/{} parameters, {checked} scalars, worst rel. error {:.2e} (< 1e-4), {secs:.1}s (< 120s)",
            report.rows.len() - report.failures().len(),
            report.rows.len(),
            report.worst()
        ),
    )
}

fn geometry_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut b = || {
            let w = rng.random_range(0.02..0.6);
            let h = rng.random_range(0.02..0.6);
            BoxCxCyWH::new(
                rng.random_range(w / 2.0..1.0 - w / 2.0),
                rng.random_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
            )
        };
        let (a, c) = (b(), b());
        let (ri, rg) = common::raster_iou_giou(&a, &c, 2000, 1.0);
        worst = worst.max((iou(&a, &c) - ri).abs()).max((giou(&a, &c) - rg).abs());
    }
    let a = BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5);
    let b = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
    let p = BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0);
    let q = BoxCxCyWH::new(1.5, 1.5, 1.0, 1.0);
    let hand = [
        (iou(&a, &b), 1.0 / 7.0),
        (giou(&p, &q), -0.5),
        (giou(&a, &b), 1.0 / 7.0 - 0.125 / 0.5625),
    ];
    let hand_err = hand.iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 2e-2 && hand_err < 1e-6 && (giou(&a, &b) + 0.07937).abs() < 1e-5 && secs < 60.0,
        format!("raster max dev {worst:.2e} (< 2e-2), hand max dev {hand_err:.1e} (< 1e-6), {secs:.1}s"),
    )
}

fn permutation_suite() -> Verdict {
    let model = ModelConfig::default();
    let store: ParamStore<f64> = model.init_params(31).unwrap();
    let scene = SceneConfig {
        seed: 31,
        ..Default::default()
    };
    let graphs = SceneGenerator::new(scene).unwrap().generate_split(Split::Test, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut dp, mut dsel, mut dtok) = (0.0f64, 0.0f64, 0.0f64);
    for g in &graphs {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.shuffle(&mut rng);
        let base = predict(&store, &model, g).unwrap();
        let perm = predict(&store, &model, &g.permuted(&order)).unwrap();
        for (new_i, &old_i) in order.iter().enumerate() {
            dp = dp.max((perm.probs[new_i] - base.probs[old_i]).abs());
        }
        dsel = dsel
            .max(common::max_abs_diff(&perm.o_ref, &base.o_ref))
            .max(common::max_abs_diff(&perm.refined_box.to_array(), &base.refined_box.to_array()));

        let mut tokens: Vec<usize> = (0..g.text.n_k()).collect();
        tokens.shuffle(&mut rng);
        let mut shuffled = g.clone();
        shuffled.text = g.text.permuted(&tokens);
        let branches = |g: &mbores::graph::ProposalGraph| {
            let input = ModelInput::<f64>::from_graph(g).unwrap();
            let mut tape = Tape::new();
            let q = tape.constant(input.queries);
            let b = tape.constant(input.boxes);
            let c = tape.constant(input.class_embs);
            let t = tape.constant(input.tokens);
            let (outs, _) = multi_branch_forward(&mut tape, &store, &model, q, b, c, t).unwrap();
            outs.iter().flat_map(|&v| tape.value(v).to_f64_vec()).collect::<Vec<_>>()
        };
        dtok = dtok.max(common::max_abs_diff(&branches(g), &branches(&shuffled)));
    }
    verdict(
        dp < 1e-6 && dsel < 1e-6 && dtok < 1e-6,
        format!("100 graphs: p dev {dp:.1e}, o_ref/box dev {dsel:.1e}, token-permuted branch dev {dtok:.1e} (all < 1e-6)"),
    )
}

fn metric_formulas() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: Vec<(BoxCxCyWH, BoxCxCyWH)> = (0..1000)
        .map(|_| {
            let g = BoxCxCyWH::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
            );
            let s = rng.random_range(0.0..0.1);
            let p = BoxCxCyWH::new(
                g.cx + rng.random_range(-s..=s),
                g.cy + rng.random_range(-s..=s),
                g.w * rng.random_range(0.7..1.4),
                g.h * rng.random_range(0.7..1.4),
            );
            (p, g)
        })
        .collect();
    let r = evaluate(&pairs).unwrap();
    let (pr, mean, cmu) = common::brute_metrics(&pairs);
    let dev = (0..5)
        .map(|k| (r.pr_at[k] - pr[k]).abs())
        .fold((r.mean_iou - mean).abs().max((r.cmu_iou - cmu).abs()), f64::max);
    let gt = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.25);
    let half = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
    let h1 = evaluate(&[(half, gt), (gt, gt)]).unwrap();
    let h2 = MetricsReport::from_areas(&[(1.0, 2.0), (2.0, 4.0)]).unwrap();
    let hand_ok = (h1.mean_iou - 0.75).abs() < 1e-12 && h1.pr_at[0] == 1.0 && (h2.cmu_iou - 0.5).abs() < 1e-12;
    verdict(
        dev < 1e-9 && hand_ok,
        format!("1000 samples: max dev {dev:.1e} (< 1e-9); hand cases meanIoU {} cmuIoU {}", h1.mean_iou, h2.cmu_iou),
    )
}

fn loss_units() -> Verdict {
    let uniform = cls_loss(&[0.25; 4], 0);
    let a = BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5);
    let b = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
    let (l_giou, _) = box_losses(&a, &b);
    let composite = LossWeights::default().lambda_cls * uniform + LossWeights::default().lambda_giou * l_giou + 0.2;
    let pred = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
    let gt = BoxCxCyWH::new(0.5, 0.5, 0.4, 0.6);
    let (_, l1) = box_losses(&pred, &gt);
    let perfect = total_loss(&[0.0, 1.0], 1, &a, &a, &LossWeights::default());
    verdict(
        (uniform - 4f64.ln()).abs() < 1e-9 && (composite - 144.226).abs() < 1e-3 && (l1 - 0.2).abs() < 1e-12 && perfect == 0.0,
        format!("ln4 term {uniform:.9}, composite {composite:.4}, perfect {perfect}"),
    )
}

fn determinism() -> Verdict {
    let cfg = RunConfig {
        train_scenes: 48,
        val_scenes: 16,
        test_scenes: 16,
        epochs: 4,
        ..RunConfig::gradcheck_default()
    };
    let data = Dataset::generate(&cfg).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = cmd_train(&cfg, &data, Some(d1.path()), TrainOptions::default()).unwrap();
    let b = cmd_train(&cfg, &data, Some(d2.path()), TrainOptions::default()).unwrap();
    let (ta, tb) = (a.manifest.test.clone().unwrap(), b.manifest.test.clone().unwrap());
    let same_metrics = ta.mean_iou.to_bits() == tb.mean_iou.to_bits() && ta == tb;
    let same_manifest = a.manifest.without_timestamps() == b.manifest.without_timestamps();
    verdict(
        same_metrics && same_manifest,
        format!(
            "f64 test meanIoU {} vs {}; manifests equal modulo timestamps: {same_manifest}",
            ta.mean_iou, tb.mean_iou
        ),
    )
}

/// The standard synthetic benchmark: seed 0 and every default.
fn standard() -> RunConfig {
    RunConfig::default()
}

fn train_standard(multi_branch: bool) -> (TrainRun, Dataset, f64) {
    let cfg = RunConfig {
        multi_branch,
        ..standard()
    };
    let data = Dataset::generate(&cfg).unwrap();
    let start = Instant::now();
    let run = cmd_train(&cfg, &data, None, TrainOptions::default()).unwrap();
    (run, data, start.elapsed().as_secs_f64())
}

fn main() {
    let mut all = true;
    all &= run(1, "gradient correctness", gradient_correctness);
    all &= run(2, "geometry oracle", geometry_oracle);
    all &= run(3, "permutation suite", permutation_suite);
    all &= run(4, "metric formulas", metric_formulas);

    let trained = catch_unwind(|| train_standard(true));
    let on = trained.as_ref().ok();
    all &= run(5, "learning capability", || {
        let (run, _, secs) = on.expect("training the standard benchmark failed");
        let t = run.manifest.test.as_ref().unwrap();
        let pr50 = t.pr_at[0];
        let pass = pr50 >= TARGET_PR50
            && t.mean_iou >= TARGET_MEAN_IOU
            && pr50 >= PINNED_PR50 - PIN_TOLERANCE
            && t.mean_iou >= PINNED_MEAN_IOU - PIN_TOLERANCE
            && *secs < TRAIN_BUDGET_SECS;
        verdict(
            pass,
            format!(
                "test Pr@0.5 {pr50:.4} (>= {TARGET_PR50}, pinned {PINNED_PR50}), meanIoU {:.4} (>= {TARGET_MEAN_IOU}, pinned {PINNED_MEAN_IOU}), {} epochs in {:.1} min",
                t.mean_iou,
                run.manifest.epochs_run.unwrap_or(0),
                secs / 60.0
            ),
        )
    });
    all &= run(6, "ablation direction", || {
        let (run_on, _, _) = on.expect("training the standard benchmark failed");
        let (run_off, _, _) = train_standard(false);
        let m_on = run_on.manifest.test.as_ref().unwrap().mean_iou;
        let m_off = run_off.manifest.test.as_ref().unwrap().mean_iou;
        verdict(
            m_on - m_off >= ABLATION_GAP,
            format!("meanIoU on {m_on:.4}, off {m_off:.4}, gap {:.4} (>= {ABLATION_GAP})", m_on - m_off),
        )
    });
    all &= run(7, "top-N robustness", || {
        let (run, data, _) = on.expect("training the standard benchmark failed");
        let cfg = standard();
        let n = cfg.num_proposals;
        let params = run.params.cast::<f32>();
        let full = eval_store(&params, &cfg.model(), &data.test, n).unwrap().0.mean_iou;
        let quarter = eval_store(&params, &cfg.model(), &data.test, n / 4).unwrap().0.mean_iou;
        verdict(
            full - quarter < TOP_N_DROP,
            format!("meanIoU top_n={n} {full:.4}, top_n={} {quarter:.4}, drop {:.4} (< {TOP_N_DROP})", n / 4, full - quarter),
        )
    });
    all &= run(8, "loss unit values", loss_units);
    all &= run(9, "determinism", determinism);

    if !all {
        std::process::exit(1);
    }
}
