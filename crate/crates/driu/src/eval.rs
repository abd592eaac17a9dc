//! Evaluation: thresholded precision/recall curves pooled over a test set,
//! ODS (single dataset-wide optimal threshold), Dice overlap, human
//! agreement points, and boundary-distance statistics.

use crate::error::{Error, Result};
use crate::loss::GroundTruthMask;
use crate::tensor::Tensor;

/// One evaluated image: probability map, gold mask, optional region of
/// interest restricting which pixels are counted.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    pub prob: Tensor<f32>,
    pub gold: GroundTruthMask,
    pub fov: Option<GroundTruthMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// The evaluation threshold grid: k/256 for k in 1..=255.
pub fn thresholds() -> Vec<f64> {
    (1..=255).map(|k| k as f64 / 256.0).collect()
}

/// Strict comparison: a pixel is predicted foreground iff p > t.
pub fn binarize(prob: &Tensor<f32>, threshold: f64) -> Result<GroundTruthMask> {
    if prob.shape().len() != 3 || prob.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "probability map must be [1,H,W], got {:?}",
            prob.shape()
        )));
    }
    let (h, w) = (prob.shape()[1], prob.shape()[2]);
    GroundTruthMask::new(
        h,
        w,
        prob.data().iter().map(|&p| p as f64 > threshold).collect(),
    )
}

fn check_same_size(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{} size mismatch: {:?} vs {:?}",
            what, a, b
        )));
    }
    Ok(())
}

/// Integer confusion counts between a predicted and a gold mask, optionally
/// restricted to a region of interest.
pub fn confusion(
    pred: &GroundTruthMask,
    gold: &GroundTruthMask,
    fov: Option<&GroundTruthMask>,
) -> Result<Counts> {
    check_same_size(
        (pred.height(), pred.width()),
        (gold.height(), gold.width()),
        "pred/gold",
    )?;
    if let Some(f) = fov {
        check_same_size(
            (pred.height(), pred.width()),
            (f.height(), f.width()),
            "pred/fov",
        )?;
    }
    let mut c = Counts::default();
    for i in 0..pred.foreground().len() {
        if let Some(f) = fov {
            if !f.foreground()[i] {
                continue;
            }
        }
        match (pred.foreground()[i], gold.foreground()[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

fn counts_at(images: &[EvalImage], threshold: f64) -> Result<Counts> {
    let mut total = Counts::default();
    for img in images {
        let pred = binarize(&img.prob, threshold)?;
        total.add(confusion(&pred, &img.gold, img.fov.as_ref())?);
    }
    Ok(total)
}

fn thread_count() -> usize {
    match std::env::var("DRIU_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1).min(64),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1),
    }
}

/// Pooled precision/recall curve over the full threshold grid. Confusion
/// counts are summed over all images before computing each metric.
pub fn pr_curve(images: &[EvalImage]) -> Result<Vec<PrPoint>> {
    pr_curve_with_threads(images, thread_count())
}

pub fn pr_curve_with_threads(images: &[EvalImage], threads: usize) -> Result<Vec<PrPoint>> {
    let grid = thresholds();
    let counts: Vec<Result<Counts>> = if threads <= 1 {
        grid.iter().map(|&t| counts_at(images, t)).collect()
    } else {
        let chunk = grid.len().div_ceil(threads);
        let mut out: Vec<Result<Counts>> = Vec::with_capacity(grid.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = grid
                .chunks(chunk)
                .map(|ts| scope.spawn(move || ts.iter().map(|&t| counts_at(images, t)).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked"));
            }
        });
        out
    };
    grid.iter()
        .zip(counts)
        .map(|(&t, c)| {
            let c = c?;
            Ok(PrPoint {
                threshold: t,
                counts: c,
                precision: c.precision(),
                recall: c.recall(),
                f: c.f_measure(),
            })
        })
        .collect()
}

/// Optimal dataset-scale point: the grid threshold maximizing pooled F.
/// Ties resolve to the lower threshold.
pub fn ods(curve: &[PrPoint]) -> Result<PrPoint> {
    let mut best: Option<PrPoint> = None;
    for p in curve {
        match &best {
            Some(b) if p.f < b.f || (p.f == b.f && p.threshold >= b.threshold) => {}
            _ => best = Some(*p),
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty precision/recall curve".into()))
}

/// Dice overlap 2|A∩B| / (|A|+|B|); defined as 1 when both masks are empty.
pub fn dice(a: &GroundTruthMask, b: &GroundTruthMask) -> Result<f64> {
    check_same_size((a.height(), a.width()), (b.height(), b.width()), "dice")?;
    let inter = a
        .foreground()
        .iter()
        .zip(b.foreground())
        .filter(|(&x, &y)| x && y)
        .count();
    let total = a.foreground_count() + b.foreground_count();
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanPoint {
    pub image_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Second-annotator agreement: per-image points plus one pooled point.
/// Images without a second annotation are skipped.
pub fn human_points(
    images: &[(String, GroundTruthMask, Option<GroundTruthMask>, Option<GroundTruthMask>)],
) -> Result<(Vec<HumanPoint>, Option<HumanPoint>)> {
    let mut per_image = Vec::new();
    let mut pooled = Counts::default();
    let mut any = false;
    for (id, gold, second, fov) in images {
        let Some(second) = second else { continue };
        any = true;
        let c = confusion(second, gold, fov.as_ref())?;
        pooled.add(c);
        per_image.push(HumanPoint {
            image_id: id.clone(),
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_measure(),
        });
    }
    let pooled_point = any.then(|| HumanPoint {
        image_id: "pooled".into(),
        precision: pooled.precision(),
        recall: pooled.recall(),
        f: pooled.f_measure(),
    });
    Ok((per_image, pooled_point))
}

// ---------------------------------------------------------------------------
// boundary distance
// ---------------------------------------------------------------------------

/// Boundary pixels: foreground pixels with at least one 4-neighbor that is
/// background or outside the image.
pub fn boundary(mask: &GroundTruthMask) -> GroundTruthMask {
    let (h, w) = (mask.height(), mask.width());
    let fg = mask.foreground();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            let edge = (y == 0 || !fg[i - w])
                || (y + 1 == h || !fg[i + w])
                || (x == 0 || !fg[i - 1])
                || (x + 1 == w || !fg[i + 1]);
            if edge {
                out[i] = true;
            }
        }
    }
    GroundTruthMask::new(h, w, out).expect("boundary preserves dimensions")
}

/// 1D squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = f[p] + dq * dq;
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel, by the
/// two-pass (rows then columns) parabola-envelope transform.
pub fn distance_transform_sq(mask: &GroundTruthMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut grid: Vec<f64> = mask
        .foreground()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut buf_in = vec![0.0f64; h.max(w)];
    let mut buf_out = vec![0.0f64; h.max(w)];
    for y in 0..h {
        buf_in[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt1d(&buf_in[..w], &mut buf_out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = grid[y * w + x];
        }
        dt1d(&buf_in[..h], &mut buf_out[..h]);
        for y in 0..h {
            grid[y * w + x] = buf_out[y];
        }
    }
    grid
}

/// Symmetric mean boundary distance in pixels: average of each boundary
/// pixel's Euclidean distance to the other mask's nearest boundary pixel,
/// over both directions. Zero when both boundaries are empty.
pub fn boundary_error(pred: &GroundTruthMask, gold: &GroundTruthMask) -> Result<f64> {
    check_same_size(
        (pred.height(), pred.width()),
        (gold.height(), gold.width()),
        "boundary_error",
    )?;
    let bp = boundary(pred);
    let bg = boundary(gold);
    let np = bp.foreground_count();
    let ng = bg.foreground_count();
    if np == 0 && ng == 0 {
        return Ok(0.0);
    }
    if np == 0 || ng == 0 {
        return Err(Error::Consistency(format!(
            "one boundary is empty ({} vs {} pixels); distance undefined",
            np, ng
        )));
    }
    let dg = distance_transform_sq(&bg);
    let dp = distance_transform_sq(&bp);
    let mut sum_pred = 0.0;
    for (i, &b) in bp.foreground().iter().enumerate() {
        if b {
            sum_pred += dg[i].sqrt();
        }
    }
    let mut sum_gold = 0.0;
    for (i, &b) in bg.foreground().iter().enumerate() {
        if b {
            sum_gold += dp[i].sqrt();
        }
    }
    Ok((sum_pred / np as f64 + sum_gold / ng as f64) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linear-interpolation quartiles
/// (position h = (n-1)p on the sorted data).
pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quartiles of an empty set".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("quartiles input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN after check"));
    let at = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Ok(Quartiles {
        min: sorted[0],
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
        max: sorted[sorted.len() - 1],
    })
}

// ---------------------------------------------------------------------------
// report emitters
// ---------------------------------------------------------------------------

/// Summary block: the ODS operating point plus the boundary-error
/// distribution at that threshold (when defined).
pub fn summary_text(best: &PrPoint, boundary: Option<&Quartiles>, undefined: usize) -> String {
    let mut out = format!(
        "ods_threshold = {:.6}\nods_precision = {:.6}\nods_recall = {:.6}\nods_f = {:.6}\n",
        best.threshold, best.precision, best.recall, best.f
    );
    if let Some(q) = boundary {
        out.push_str(&format!(
            "boundary_min = {:.6}\nboundary_q1 = {:.6}\nboundary_median = {:.6}\nboundary_q3 = {:.6}\nboundary_max = {:.6}\n",
            q.min, q.q1, q.median, q.q3, q.max
        ));
    }
    if undefined > 0 {
        out.push_str(&format!("boundary_undefined_images = {}\n", undefined));
    }
    out
}

pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,tp,fp,fn,precision,recall,f\n");
    for p in curve {
        out.push_str(&format!(
            "{:.6},{},{},{},{:.6},{:.6},{:.6}\n",
            p.threshold, p.counts.tp, p.counts.fp, p.counts.fn_, p.precision, p.recall, p.f
        ));
    }
    out
}

pub fn human_points_csv(per_image: &[HumanPoint], pooled: Option<&HumanPoint>) -> String {
    let mut out = String::from("image_id,precision,recall,f\n");
    for p in per_image.iter().chain(pooled) {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            p.image_id, p.precision, p.recall, p.f
        ));
    }
    out
}

pub fn boundary_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("image_id,mean_boundary_error_px\n");
    for (id, e) in rows {
        out.push_str(&format!("{},{:.6}\n", id, e));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, fg: &[usize]) -> GroundTruthMask {
        let mut v = vec![false; h * w];
        for &i in fg {
            v[i] = true;
        }
        GroundTruthMask::new(h, w, v).unwrap()
    }

    #[test]
    fn threshold_grid() {
        let g = thresholds();
        assert_eq!(g.len(), 255);
        assert_eq!(g[0], 1.0 / 256.0);
        assert_eq!(g[254], 255.0 / 256.0);
    }

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::from_vec(&[1, 1, 3], vec![0.25f32, 0.5, 0.75]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m.foreground(), &[false, false, true]);
    }

    #[test]
    fn confusion_counts_example() {
        let pred = mask(2, 2, &[0, 1]);
        let gold = mask(2, 2, &[1, 2]);
        let c = confusion(&pred, &gold, None).unwrap();
        assert_eq!(c, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 0.5);
        assert_eq!(c.f_measure(), 0.5);
    }

    #[test]
    fn confusion_respects_fov() {
        let pred = mask(2, 2, &[0, 1]);
        let gold = mask(2, 2, &[1, 2]);
        let fov = mask(2, 2, &[1, 3]);
        let c = confusion(&pred, &gold, Some(&fov)).unwrap();
        assert_eq!(c, Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn degenerate_precision_recall() {
        let c = Counts { tp: 0, fp: 0, fn_: 0 };
        assert_eq!(c.precision(), 1.0);
        assert_eq!(c.recall(), 1.0);
        let none_pred = Counts { tp: 0, fp: 0, fn_: 3 };
        assert_eq!(none_pred.precision(), 1.0);
        assert_eq!(none_pred.recall(), 0.0);
        assert_eq!(Counts { tp: 0, fp: 2, fn_: 2 }.f_measure(), 0.0);
    }

    fn random_images(n: usize, seed: u64) -> Vec<EvalImage> {
        let mut rng = CounterRng::new(seed, "eval-images");
        (0..n)
            .map(|i| {
                let (h, w) = (6 + rng.below(5) as usize, 6 + rng.below(5) as usize);
                let prob = Tensor::from_vec(
                    &[1, h, w],
                    (0..h * w).map(|_| rng.next_f64() as f32).collect(),
                )
                .unwrap();
                let gold = GroundTruthMask::new(
                    h,
                    w,
                    (0..h * w).map(|_| rng.next_f64() < 0.3).collect(),
                )
                .unwrap();
                let fov = (i % 2 == 0).then(|| {
                    GroundTruthMask::new(
                        h,
                        w,
                        (0..h * w).map(|_| rng.next_f64() < 0.8).collect(),
                    )
                    .unwrap()
                });
                EvalImage {
                    id: format!("img{}", i),
                    prob,
                    gold,
                    fov,
                }
            })
            .collect()
    }

    #[test]
    fn pr_curve_serial_equals_parallel() {
        let images = random_images(5, 3);
        let serial = pr_curve_with_threads(&images, 1).unwrap();
        let parallel = pr_curve_with_threads(&images, 4).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn pr_curve_recall_nonincreasing() {
        let images = random_images(4, 7);
        let curve = pr_curve(&images).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].recall <= w[0].recall + 1e-12);
            assert!(w[1].counts.tp <= w[0].counts.tp);
        }
    }

    #[test]
    fn pr_curve_pools_counts() {
        // pooled counts must equal the sum of per-image counts, not an
        // average of per-image metrics
        let images = random_images(3, 11);
        let curve = pr_curve(&images).unwrap();
        let t = curve[100].threshold;
        let mut total = Counts::default();
        for img in &images {
            let pred = binarize(&img.prob, t).unwrap();
            let c = confusion(&pred, &img.gold, img.fov.as_ref()).unwrap();
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
        assert_eq!(curve[100].counts, total);
    }

    #[test]
    fn ods_takes_max_f_lower_tie() {
        let mk = |t: f64, f: f64| PrPoint {
            threshold: t,
            counts: Counts::default(),
            precision: 0.0,
            recall: 0.0,
            f,
        };
        let curve = vec![mk(0.1, 0.5), mk(0.2, 0.8), mk(0.3, 0.8), mk(0.4, 0.6)];
        let best = ods(&curve).unwrap();
        assert_eq!(best.threshold, 0.2);
        assert!(ods(&[]).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = mask(2, 2, &[0, 1]);
        let b = mask(2, 2, &[1, 2]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let empty = mask(2, 2, &[]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn human_points_per_image_and_pooled() {
        let gold = mask(2, 2, &[0, 1]);
        let second = mask(2, 2, &[0]);
        let rows = vec![
            ("a".to_string(), gold.clone(), Some(second.clone()), None),
            ("b".to_string(), gold.clone(), None, None),
            ("c".to_string(), gold.clone(), Some(gold.clone()), None),
        ];
        let (per, pooled) = human_points(&rows).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].precision, 1.0);
        assert_eq!(per[0].recall, 0.5);
        let pooled = pooled.unwrap();
        // pooled: tp = 1 + 2 = 3, fp = 0, fn = 1
        assert_eq!(pooled.precision, 1.0);
        assert_eq!(pooled.recall, 0.75);
    }

    #[test]
    fn boundary_of_filled_square() {
        let full = GroundTruthMask::new(3, 3, vec![true; 9]).unwrap();
        let b = boundary(&full);
        // every pixel but the center touches the outside
        assert_eq!(b.foreground_count(), 8);
        assert!(!b.foreground()[4]);
        // interior-only square in a 5x5 frame
        let sq = mask(5, 5, &[6, 7, 8, 11, 12, 13, 16, 17, 18]);
        let bsq = boundary(&sq);
        assert_eq!(bsq.foreground_count(), 8);
        assert!(!bsq.foreground()[12]);
    }

    fn edt_all_pairs(mask: &GroundTruthMask) -> Vec<f64> {
        let (h, w) = (mask.height(), mask.width());
        let sites: Vec<(f64, f64)> = mask
            .foreground()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
            .collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                sites
                    .iter()
                    .map(|&(sy, sx)| (y - sy) * (y - sy) + (x - sx) * (x - sx))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_all_pairs_oracle() {
        let mut rng = CounterRng::new(17, "edt");
        for case in 0..40 {
            let (h, w) = (1 + rng.below(14) as usize, 1 + rng.below(14) as usize);
            let density = 0.05 + rng.next_f64() * 0.5;
            let mut fg: Vec<bool> = (0..h * w).map(|_| rng.next_f64() < density).collect();
            if !fg.iter().any(|&b| b) {
                fg[0] = true;
            }
            let m = GroundTruthMask::new(h, w, fg).unwrap();
            let fast = distance_transform_sq(&m);
            let oracle = edt_all_pairs(&m);
            for i in 0..h * w {
                assert!(
                    (fast[i] - oracle[i]).abs() < 1e-9,
                    "case {} pixel {}: {} vs {}",
                    case,
                    i,
                    fast[i],
                    oracle[i]
                );
            }
        }
    }

    #[test]
    fn boundary_error_cases() {
        let a = mask(5, 5, &[12]);
        assert_eq!(boundary_error(&a, &a).unwrap(), 0.0);
        // single pixels two columns apart: all cross distances are 2
        let b = mask(5, 5, &[14]);
        assert_eq!(boundary_error(&a, &b).unwrap(), 2.0);
        assert_eq!(boundary_error(&b, &a).unwrap(), 2.0);
        let empty = mask(5, 5, &[]);
        assert_eq!(boundary_error(&empty, &empty).unwrap(), 0.0);
        assert!(boundary_error(&a, &empty).is_err());
    }

    #[test]
    fn quartiles_oracle() {
        let q = quartiles(&[4.0, 2.0, 1.0, 3.0]).unwrap();
        assert_eq!(q.q1, 1.75);
        assert_eq!(q.median, 2.5);
        assert_eq!(q.q3, 3.25);
        assert_eq!((q.min, q.max), (1.0, 4.0));
        let odd = quartiles(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((odd.min, odd.median, odd.max), (1.0, 3.0, 5.0));
        let constant = quartiles(&[2.0; 6]).unwrap();
        assert_eq!(constant, quartiles(&[2.0]).unwrap());
        assert!(quartiles(&[]).is_err());
        assert!(quartiles(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn dice_equals_f_measure() {
        let mut rng = CounterRng::new(23, "dice-f");
        for _ in 0..100 {
            let n = 6usize;
            let a = GroundTruthMask::new(n, n, (0..n * n).map(|_| rng.next_f64() < 0.4).collect())
                .unwrap();
            let b = GroundTruthMask::new(n, n, (0..n * n).map(|_| rng.next_f64() < 0.4).collect())
                .unwrap();
            let c = confusion(&a, &b, None).unwrap();
            let f = if a.foreground_count() + b.foreground_count() == 0 {
                1.0
            } else {
                c.f_measure()
            };
            assert!((dice(&a, &b).unwrap() - f).abs() < 1e-12);
        }
    }

    #[test]
    fn ods_invariant_under_permutation() {
        let images = random_images(3, 19);
        let curve = pr_curve(&images).unwrap();
        let mut shuffled = curve.clone();
        shuffled.reverse();
        assert_eq!(ods(&curve).unwrap(), ods(&shuffled).unwrap());
        // exhaustive-scan oracle
        let best = ods(&curve).unwrap();
        let max_f = curve.iter().map(|p| p.f).fold(0.0, f64::max);
        assert_eq!(best.f, max_f);
        assert!(curve
            .iter()
            .filter(|p| p.f == max_f)
            .all(|p| best.threshold <= p.threshold));
    }

    #[test]
    fn boundary_error_directional_mean() {
        // pred: single pixel; gold: two pixels at distances 2 and 3 from it
        let pred = mask(1, 6, &[0]);
        let gold = mask(1, 6, &[2, 3]);
        // pred->gold mean = 2; gold->pred mean = (2+3)/2 = 2.5
        assert_eq!(boundary_error(&pred, &gold).unwrap(), (2.0 + 2.5) / 2.0);
        // 3-4-5 example
        let a = mask(4, 5, &[0]);
        let b = mask(4, 5, &[3 * 5 + 4]);
        assert_eq!(boundary_error(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn csv_headers() {
        let curve = pr_curve(&random_images(1, 2)).unwrap();
        let csv = pr_curve_csv(&curve);
        assert!(csv.starts_with("threshold,tp,fp,fn,precision,recall,f\n"));
        assert_eq!(csv.lines().count(), 256);
        assert!(human_points_csv(&[], None).starts_with("image_id,precision,recall,f\n"));
        let b = boundary_csv(&[("x".into(), 1.5)]);
        assert_eq!(b, "image_id,mean_boundary_error_px\nx,1.500000\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn boundary_error_symmetric(seed in 0u64..500) {
            let mut rng = CounterRng::new(seed, "sym");
            let n = 8usize;
            let fg_a: Vec<bool> = (0..n * n).map(|_| rng.next_f64() < 0.3).collect();
            let fg_b: Vec<bool> = (0..n * n).map(|_| rng.next_f64() < 0.3).collect();
            prop_assume!(fg_a.iter().any(|&b| b) && fg_b.iter().any(|&b| b));
            let a = GroundTruthMask::new(n, n, fg_a).unwrap();
            let b = GroundTruthMask::new(n, n, fg_b).unwrap();
            let ab = boundary_error(&a, &b).unwrap();
            let ba = boundary_error(&b, &a).unwrap();
            // identical up to summation order
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        }

        #[test]
        fn dice_bounds(seed in 0u64..200) {
            let mut rng = CounterRng::new(seed, "dice");
            let n = 6usize;
            let a = GroundTruthMask::new(n, n, (0..n * n).map(|_| rng.next_f64() < 0.4).collect()).unwrap();
            let b = GroundTruthMask::new(n, n, (0..n * n).map(|_| rng.next_f64() < 0.4).collect()).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
