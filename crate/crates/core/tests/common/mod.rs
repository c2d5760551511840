#![allow(dead_code)]

use mbores::geometry::BoxCxCyWH;
use mbores::tensor::{ParamStore, Tape, Var};

/// Cells whose centers fall inside `[lo, hi]` on a `res`-cell unit axis.
fn covered(lo: f64, hi: f64, res: usize) -> Vec<bool> {
    (0..res)
        .map(|i| {
            let c = (i as f64 + 0.5) / res as f64;
            c >= lo && c <= hi
        })
        .collect()
}

/// Intersection, union and hull areas by counting grid cells of a `res × res`
/// raster over the frame `[0, extent]²`.
pub fn raster_areas(a: &BoxCxCyWH, b: &BoxCxCyWH, res: usize, extent: f64) -> (f64, f64, f64) {
    let span = |b: &BoxCxCyWH| {
        let c = b.to_array().map(|v| v / extent);
        ((c[0] - c[2] / 2.0, c[0] + c[2] / 2.0), (c[1] - c[3] / 2.0, c[1] + c[3] / 2.0))
    };
    let ((ax0, ax1), (ay0, ay1)) = span(a);
    let ((bx0, bx1), (by0, by1)) = span(b);
    let (axs, ays) = (covered(ax0, ax1, res), covered(ay0, ay1, res));
    let (bxs, bys) = (covered(bx0, bx1, res), covered(by0, by1, res));
    let (hxs, hys) = (
        covered(ax0.min(bx0), ax1.max(bx1), res),
        covered(ay0.min(by0), ay1.max(by1), res),
    );
    // Every region is a product of axis intervals, so its 2-D cell count is
    // the product of the per-axis counts.
    let count = |xs: &[bool], ys: &[bool]| -> u64 {
        xs.iter().filter(|&&v| v).count() as u64 * ys.iter().filter(|&&v| v).count() as u64
    };
    let both = |p: &[bool], q: &[bool]| -> Vec<bool> { p.iter().zip(q).map(|(a, b)| *a && *b).collect() };
    let inter = count(&both(&axs, &bxs), &both(&ays, &bys));
    let uni = count(&axs, &ays) + count(&bxs, &bys) - inter;
    let hull = count(&hxs, &hys);
    let cell = (extent / res as f64).powi(2);
    (inter as f64 * cell, uni as f64 * cell, hull as f64 * cell)
}

pub fn raster_iou_giou(a: &BoxCxCyWH, b: &BoxCxCyWH, res: usize, extent: f64) -> (f64, f64) {
    let (i, u, h) = raster_areas(a, b, res, extent);
    let iou = if u > 0.0 { i / u } else { 0.0 };
    let giou = if h > 0.0 { iou - (h - u) / h } else { iou };
    (iou, giou)
}

/// Scalar brute-force metrics: `(pr_at, mean_iou, cmu_iou)`.
pub fn brute_metrics(pairs: &[(BoxCxCyWH, BoxCxCyWH)]) -> ([f64; 5], f64, f64) {
    let taus = [0.5, 0.6, 0.7, 0.8, 0.9];
    let mut pr = [0.0; 5];
    let mut ratio_sum = 0.0;
    let mut inter_sum = 0.0;
    let mut union_sum = 0.0;
    for (p, g) in pairs {
        let (px1, px2) = (p.cx - p.w / 2.0, p.cx + p.w / 2.0);
        let (py1, py2) = (p.cy - p.h / 2.0, p.cy + p.h / 2.0);
        let (gx1, gx2) = (g.cx - g.w / 2.0, g.cx + g.w / 2.0);
        let (gy1, gy2) = (g.cy - g.h / 2.0, g.cy + g.h / 2.0);
        let mut iw = px2.min(gx2) - px1.max(gx1);
        if iw < 0.0 {
            iw = 0.0;
        }
        let mut ih = py2.min(gy2) - py1.max(gy1);
        if ih < 0.0 {
            ih = 0.0;
        }
        let i = iw * ih;
        let u = p.w * p.h + g.w * g.h - i;
        let r = if u > 0.0 { i / u } else { 0.0 };
        for k in 0..5 {
            if r >= taus[k] {
                pr[k] += 1.0;
            }
        }
        ratio_sum += r;
        inter_sum += i;
        union_sum += u;
    }
    let n = pairs.len() as f64;
    for v in &mut pr {
        *v /= n;
    }
    (pr, ratio_sum / n, inter_sum / union_sum)
}

/// Largest relative error between reverse-mode gradients of the scalar built
/// by `f` and central differences with step `h`, over every entry of every
/// parameter whose name passes `select`. Denominator floored at `floor`.
pub fn fd_max_rel_error<F>(store: &mut ParamStore<f64>, select: impl Fn(&str) -> bool, h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    tape.accumulate_param_grads(&grads, store);
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut checked = 0;
    for name in names.iter().filter(|n| select(n)) {
        let n = store.get(name).unwrap().value.len();
        for e in 0..n {
            let orig = store.get(name).unwrap().value.data()[e];
            let analytic = store.get(name).unwrap().grad[e];
            store.get_mut(name).unwrap().value.data_mut()[e] = orig + h;
            let plus = eval(store);
            store.get_mut(name).unwrap().value.data_mut()[e] = orig - h;
            let minus = eval(store);
            store.get_mut(name).unwrap().value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor));
            checked += 1;
        }
    }
    assert!(checked > 0, "no parameters selected");
    worst
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
