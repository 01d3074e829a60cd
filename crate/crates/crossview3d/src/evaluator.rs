//! Detection evaluation: confidence filtering without NMS, average precision
//! at 40 recall positions for 3D and bird's-eye-view IoU at two thresholds
//! across cumulative difficulty bands, plus a top-down plot of boxes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_3d, iou_bev, unproject_center, Box2D, Box3D, CameraModel, Detection, Difficulty};
use crate::interaction::HeadValues;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Ap3D,
    ApBev,
}

/// Decodes raw per-query outputs into scored detections, keeping queries
/// whose foreground probability reaches `threshold`. No NMS: overlapping
/// confident predictions all survive.
pub fn filter_predictions(
    values: &HeadValues,
    cam: &CameraModel,
    threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for i in 0..values.len() {
        let score = values.p_car[i];
        if score < threshold {
            continue;
        }
        let depth = values.depth[i];
        let center = unproject_center(values.center3d[i], depth, cam);
        let yaw = values.orientation[i][0].atan2(values.orientation[i][1]);
        let b = values.box2d[i];
        out.push(Detection {
            box3d: Box3D::new(center, values.dims[i], yaw),
            box2d: Box2D::new(b[0], b[1], b[2], b[3]),
            score,
        });
    }
    out
}

/// One evaluation frame: predictions and ground truths in the same camera
/// frame. GT difficulty tags drive the cumulative bands.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub detections: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

fn band_accepts(band: Difficulty, gt: Difficulty) -> bool {
    gt <= band
}

/// Per-detection outcome after greedy matching, sorted by descending score.
fn match_frames(
    frames: &[EvalFrame],
    iou_fn: fn(&Box3D, &Box3D) -> f64,
    iou_thr: f64,
    band: Difficulty,
) -> (Vec<(f64, bool, bool)>, usize) {
    let mut outcomes = Vec::new(); // (score, tp, ignored)
    let mut n_target = 0usize;
    for f in frames {
        n_target += f.gts.iter().filter(|g| band_accepts(band, g.difficulty)).count();
        let mut order: Vec<usize> = (0..f.detections.len()).collect();
        order.sort_by(|a, b| {
            f.detections[*b]
                .score
                .partial_cmp(&f.detections[*a].score)
                .unwrap()
                .then(a.cmp(b))
        });
        let mut taken = vec![false; f.gts.len()];
        for di in order {
            let d = &f.detections[di];
            let mut best = -1.0;
            let mut best_g = None;
            for (gi, g) in f.gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou_fn(&d.box3d, g);
                if v >= iou_thr && v > best {
                    best = v;
                    best_g = Some(gi);
                }
            }
            match best_g {
                Some(gi) => {
                    taken[gi] = true;
                    if band_accepts(band, f.gts[gi].difficulty) {
                        outcomes.push((d.score, true, false));
                    } else {
                        // matched a harder-band object: neither TP nor FP
                        outcomes.push((d.score, false, true));
                    }
                }
                None => outcomes.push((d.score, false, false)),
            }
        }
    }
    outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    (outcomes, n_target)
}

/// Average precision sampled at recalls {1/40, ..., 40/40} and scaled by
/// 100. Returns None when the band holds no ground truth.
pub fn ap_at_40(
    frames: &[EvalFrame],
    iou_fn: fn(&Box3D, &Box3D) -> f64,
    iou_thr: f64,
    band: Difficulty,
) -> Option<f64> {
    let (outcomes, n_target) = match_frames(frames, iou_fn, iou_thr, band);
    if n_target == 0 {
        return None;
    }
    // precision/recall after each non-ignored detection
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp, ignored) in outcomes {
        if ignored {
            continue;
        }
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((
            tp as f64 / n_target as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut acc = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        acc += p;
    }
    Some(100.0 * acc / 40.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub metric: Metric,
    pub iou: f64,
    pub difficulty: Difficulty,
    /// None when the band has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ReportCell>,
    pub n_frames: usize,
    pub n_detections: usize,
    pub n_gt: usize,
    pub score_threshold: f64,
}

pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.7];
pub const BANDS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

/// Full metric grid: {AP3D, APBEV} x {IoU 0.5, 0.7} x {easy, mod, hard}.
pub fn evaluate_frames(frames: &[EvalFrame], score_threshold: f64) -> EvalReport {
    let mut cells = Vec::with_capacity(12);
    for (metric, f) in [(Metric::Ap3D, iou_3d as fn(&Box3D, &Box3D) -> f64), (Metric::ApBev, iou_bev)] {
        for iou in IOU_THRESHOLDS {
            for band in BANDS {
                cells.push(ReportCell {
                    metric,
                    iou,
                    difficulty: band,
                    ap: ap_at_40(frames, f, iou, band),
                });
            }
        }
    }
    EvalReport {
        cells,
        n_frames: frames.len(),
        n_detections: frames.iter().map(|f| f.detections.len()).sum(),
        n_gt: frames.iter().map(|f| f.gts.len()).sum(),
        score_threshold,
    }
}

impl EvalReport {
    pub fn get(&self, metric: Metric, iou: f64, difficulty: Difficulty) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.iou == iou && c.difficulty == difficulty)
            .and_then(|c| c.ap)
    }

    /// Aligned text table: one row per metric/IoU, columns easy/mod/hard.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<14} {:>8} {:>8} {:>8}\n",
            "metric", "easy", "mod", "hard"
        ));
        for (metric, name) in [(Metric::Ap3D, "AP3D"), (Metric::ApBev, "APBEV")] {
            for iou in IOU_THRESHOLDS {
                let mut row = format!("{:<14}", format!("{name}@{iou}"));
                for band in BANDS {
                    match self.get(metric, iou, band) {
                        Some(ap) => row.push_str(&format!(" {ap:>8.2}")),
                        None => row.push_str(&format!(" {:>8}", "-")),
                    }
                }
                s.push_str(&row);
                s.push('\n');
            }
        }
        s
    }
}

const PLOT_W: usize = 400;
const PLOT_H: usize = 400;
const PLOT_X_RANGE: [f64; 2] = [-30.0, 30.0];
const PLOT_Z_RANGE: [f64; 2] = [-5.0, 70.0];

fn plot_px(x: f64, z: f64) -> (i64, i64) {
    let u = (x - PLOT_X_RANGE[0]) / (PLOT_X_RANGE[1] - PLOT_X_RANGE[0]) * (PLOT_W - 1) as f64;
    // z grows upward in the plot
    let v = (1.0 - (z - PLOT_Z_RANGE[0]) / (PLOT_Z_RANGE[1] - PLOT_Z_RANGE[0])) * (PLOT_H - 1) as f64;
    (u.round() as i64, v.round() as i64)
}

fn draw_line(buf: &mut [u8], a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 as f64 + t * (b.0 - a.0) as f64).round() as i64;
        let y = (a.1 as f64 + t * (b.1 - a.1) as f64).round() as i64;
        if (0..PLOT_W as i64).contains(&x) && (0..PLOT_H as i64).contains(&y) {
            let idx = (y as usize * PLOT_W + x as usize) * 3;
            buf[idx..idx + 3].copy_from_slice(&color);
        }
    }
}

fn draw_footprint(buf: &mut [u8], b: &Box3D, color: [u8; 3]) {
    let c = b.bev_corners();
    for i in 0..4 {
        let p = plot_px(c[i][0], c[i][1]);
        let q = plot_px(c[(i + 1) % 4][0], c[(i + 1) % 4][1]);
        draw_line(buf, p, q, color);
    }
}

pub const PLOT_GT_COLOR: [u8; 3] = [40, 200, 40];
pub const PLOT_DET_COLOR: [u8; 3] = [220, 40, 40];

/// Deterministic top-down plot: labels green, predictions red, camera
/// frustum and origin marker gray.
pub fn bev_plot_image(dets: &[Detection], gts: &[Box3D], cam: &CameraModel) -> Vec<u8> {
    let mut buf = vec![15u8; PLOT_W * PLOT_H * 3];
    // frustum edges out to the far end of the plot range
    let half_fov = (cam.image_size.0 as f64 / 2.0 / cam.fx).atan();
    let zf = PLOT_Z_RANGE[1];
    let origin = plot_px(0.0, 0.0);
    let gray = [110, 110, 110];
    draw_line(&mut buf, origin, plot_px(zf * half_fov.tan(), zf), gray);
    draw_line(&mut buf, origin, plot_px(-zf * half_fov.tan(), zf), gray);
    // origin marker
    draw_line(&mut buf, (origin.0 - 4, origin.1), (origin.0 + 4, origin.1), [255, 255, 255]);
    draw_line(&mut buf, (origin.0, origin.1 - 4), (origin.0, origin.1 + 4), [255, 255, 255]);
    for g in gts {
        draw_footprint(&mut buf, g, PLOT_GT_COLOR);
    }
    for d in dets {
        draw_footprint(&mut buf, &d.box3d, PLOT_DET_COLOR);
    }
    buf
}

pub fn bev_plot(
    dets: &[Detection],
    gts: &[Box3D],
    cam: &CameraModel,
    out_path: &Path,
) -> Result<(), EvalError> {
    let buf = bev_plot_image(dets, gts, cam);
    let img = image::RgbImage::from_raw(PLOT_W as u32, PLOT_H as u32, buf).expect("plot size");
    img.save(out_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt_at(x: f64, z: f64, d: Difficulty) -> Box3D {
        Box3D::new([x, 0.75, z], [1.5, 1.8, 4.2], 0.0).with_difficulty(d)
    }

    fn det_from(b: &Box3D, score: f64) -> Detection {
        Detection {
            box3d: *b,
            box2d: Box2D::new(0.5, 0.5, 0.1, 0.1),
            score,
        }
    }

    fn cam() -> CameraModel {
        CameraModel {
            fx: 70.4,
            fy: 70.4,
            cx: 32.0,
            cy: 16.0,
            height_above_ground: 1.5,
            pitch: 0.0,
            image_size: (64, 32),
        }
    }

    #[test]
    fn threshold_filters_without_nms() {
        let mk = |scores: Vec<f64>| HeadValues {
            box2d: vec![[0.5, 0.5, 0.2, 0.2]; scores.len()],
            center3d: vec![[0.5, 0.55]; scores.len()],
            dims: vec![[1.5, 1.8, 4.2]; scores.len()],
            orientation: vec![[0.0, 1.0]; scores.len()],
            depth: vec![10.0; scores.len()],
            p_car: scores,
        };
        let kept = filter_predictions(&mk(vec![0.9, 0.19, 0.21]), &cam(), 0.2);
        assert_eq!(kept.len(), 2);
        // two overlapping confident predictions both survive
        let both = filter_predictions(&mk(vec![0.9, 0.85]), &cam(), 0.2);
        assert_eq!(both.len(), 2);
        assert!(filter_predictions(&mk(vec![]), &cam(), 0.2).is_empty());
        // decoded detection sits at the requested depth
        assert!((kept[0].box3d.center[2] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_detector_scores_100() {
        let g = gt_at(0.0, 10.0, Difficulty::Easy);
        let frames = vec![EvalFrame {
            detections: vec![det_from(&g, 0.95)],
            gts: vec![g],
        }];
        for f in [iou_3d as fn(&Box3D, &Box3D) -> f64, iou_bev] {
            for thr in IOU_THRESHOLDS {
                assert_eq!(ap_at_40(&frames, f, thr, Difficulty::Hard), Some(100.0));
            }
        }
    }

    #[test]
    fn low_iou_detection_scores_zero() {
        let g = gt_at(0.0, 10.0, Difficulty::Easy);
        let off = gt_at(8.0, 30.0, Difficulty::Easy);
        let frames = vec![EvalFrame {
            detections: vec![det_from(&off, 0.95)],
            gts: vec![g],
        }];
        assert_eq!(ap_at_40(&frames, iou_3d, 0.5, Difficulty::Hard), Some(0.0));
    }

    #[test]
    fn no_gt_reports_absent() {
        let frames = vec![EvalFrame {
            detections: vec![det_from(&gt_at(0.0, 10.0, Difficulty::Easy), 0.9)],
            gts: vec![],
        }];
        assert_eq!(ap_at_40(&frames, iou_3d, 0.5, Difficulty::Hard), None);
    }

    #[test]
    fn hand_case_two_gt_with_false_positive() {
        let g1 = gt_at(-2.5, 10.0, Difficulty::Easy);
        let g2 = gt_at(2.5, 20.0, Difficulty::Easy);
        let fp = gt_at(-2.5, 40.0, Difficulty::Easy);
        let frames = vec![EvalFrame {
            detections: vec![det_from(&g1, 0.9), det_from(&fp, 0.8), det_from(&g2, 0.7)],
            gts: vec![g1, g2],
        }];
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
        // interpolated precision: 1.0 for r <= 0.5, 2/3 above
        let expect = 100.0 * (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
        let got = ap_at_40(&frames, iou_3d, 0.5, Difficulty::Hard).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    /// Brute-force oracle: same greedy matching written independently as
    /// per-frame nested loops, then a full PR sweep over every score cut.
    fn ap_oracle(frames: &[EvalFrame], iou_fn: fn(&Box3D, &Box3D) -> f64, thr: f64, band: Difficulty) -> Option<f64> {
        let mut rows: Vec<(f64, i32)> = Vec::new(); // (score, +1 tp / 0 fp / -1 ignore)
        let mut npos = 0;
        for f in frames {
            for g in &f.gts {
                if g.difficulty <= band {
                    npos += 1;
                }
            }
            let mut by_score: Vec<&Detection> = f.detections.iter().collect();
            by_score.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; f.gts.len()];
            for d in by_score {
                let mut pick: Option<usize> = None;
                for gi in 0..f.gts.len() {
                    if used[gi] {
                        continue;
                    }
                    let v = iou_fn(&d.box3d, &f.gts[gi]);
                    if v >= thr {
                        let better = match pick {
                            None => true,
                            Some(p) => v > iou_fn(&d.box3d, &f.gts[p]),
                        };
                        if better {
                            pick = Some(gi);
                        }
                    }
                }
                match pick {
                    Some(gi) => {
                        used[gi] = true;
                        rows.push((d.score, if f.gts[gi].difficulty <= band { 1 } else { -1 }));
                    }
                    None => rows.push((d.score, 0)),
                }
            }
        }
        if npos == 0 {
            return None;
        }
        rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut acc = 0.0;
        for i in 1..=40 {
            let r = i as f64 / 40.0;
            // best precision over all cuts achieving recall >= r
            let mut best = 0.0f64;
            let (mut tp, mut fp) = (0, 0);
            for (_, kind) in &rows {
                match kind {
                    1 => tp += 1,
                    0 => fp += 1,
                    _ => continue,
                }
                let rec = tp as f64 / npos as f64;
                let prec = tp as f64 / (tp + fp) as f64;
                if rec >= r - 1e-12 {
                    best = best.max(prec);
                }
            }
            acc += best;
        }
        Some(100.0 * acc / 40.0)
    }

    fn random_frames(rng: &mut ChaCha8Rng) -> Vec<EvalFrame> {
        let nf = rng.gen_range(1..=10usize);
        (0..nf)
            .map(|_| {
                let ng = rng.gen_range(0..=5usize);
                let gts: Vec<Box3D> = (0..ng)
                    .map(|_| {
                        let d = match rng.gen_range(0..3) {
                            0 => Difficulty::Easy,
                            1 => Difficulty::Moderate,
                            _ => Difficulty::Hard,
                        };
                        gt_at(rng.gen_range(-10.0..10.0), rng.gen_range(5.0..50.0), d)
                    })
                    .collect();
                let nd = rng.gen_range(0..=5usize);
                let detections = (0..nd)
                    .map(|_| {
                        // sometimes near a GT, sometimes random
                        let b = if !gts.is_empty() && rng.gen_bool(0.6) {
                            let mut b = gts[rng.gen_range(0..gts.len())];
                            b.center[0] += rng.gen_range(-1.0..1.0);
                            b.center[2] += rng.gen_range(-1.0..1.0);
                            b
                        } else {
                            gt_at(rng.gen_range(-10.0..10.0), rng.gen_range(5.0..50.0), Difficulty::Easy)
                        };
                        det_from(&b, rng.gen_range(0.0..1.0))
                    })
                    .collect();
                EvalFrame { detections, gts }
            })
            .collect()
    }

    #[test]
    fn matches_pr_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..80 {
            let frames = random_frames(&mut rng);
            for f in [iou_3d as fn(&Box3D, &Box3D) -> f64, iou_bev] {
                for thr in IOU_THRESHOLDS {
                    for band in BANDS {
                        let a = ap_at_40(&frames, f, thr, band);
                        let b = ap_oracle(&frames, f, thr, band);
                        match (a, b) {
                            (None, None) => {}
                            (Some(x), Some(y)) => {
                                assert!((x - y).abs() < 1e-9, "{x} vs {y}")
                            }
                            other => panic!("presence mismatch {other:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stricter_iou_never_scores_higher() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..40 {
            let frames = random_frames(&mut rng);
            let r = evaluate_frames(&frames, 0.2);
            for metric in [Metric::Ap3D, Metric::ApBev] {
                for band in BANDS {
                    if let (Some(a5), Some(a7)) =
                        (r.get(metric, 0.5, band), r.get(metric, 0.7, band))
                    {
                        assert!(a7 <= a5 + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn score_transform_and_weak_fp_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..30 {
            let frames = random_frames(&mut rng);
            let base = ap_at_40(&frames, iou_bev, 0.5, Difficulty::Hard);
            // strictly monotone score transform
            let warped: Vec<EvalFrame> = frames
                .iter()
                .map(|f| EvalFrame {
                    detections: f
                        .detections
                        .iter()
                        .map(|d| Detection {
                            score: 0.1 + 0.9 * d.score.powi(3),
                            ..d.clone()
                        })
                        .collect(),
                    gts: f.gts.clone(),
                })
                .collect();
            let w = ap_at_40(&warped, iou_bev, 0.5, Difficulty::Hard);
            match (base, w) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
            // a false positive below every existing score never helps
            let mut with_fp = frames.clone();
            with_fp[0].detections.push(Detection {
                box3d: gt_at(25.0, 60.0, Difficulty::Easy),
                box2d: Box2D::new(0.5, 0.5, 0.1, 0.1),
                score: 0.001,
            });
            let worse = ap_at_40(&with_fp, iou_bev, 0.5, Difficulty::Hard);
            if let (Some(a), Some(b)) = (base, worse) {
                assert!(b <= a + 1e-9);
            }
        }
    }

    #[test]
    fn gt_as_predictions_everywhere_100_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut frames: Vec<EvalFrame> = (0..6)
            .map(|i| {
                let gts: Vec<Box3D> = (0..=(i % 3))
                    .map(|j| {
                        gt_at(
                            -5.0 + 4.0 * j as f64,
                            8.0 + 6.0 * (i + j) as f64,
                            BANDS[(i + j) % 3],
                        )
                    })
                    .collect();
                EvalFrame {
                    detections: gts.iter().map(|g| det_from(g, 1.0)).collect(),
                    gts,
                }
            })
            .collect();
        let r = evaluate_frames(&frames, 0.2);
        for cell in &r.cells {
            assert_eq!(cell.ap, Some(100.0), "{cell:?}");
        }
        // shuffle frame order: identical report
        for _ in 0..5 {
            let k = rng.gen_range(0..frames.len());
            frames.swap(0, k);
        }
        let r2 = evaluate_frames(&frames, 0.2);
        for (a, b) in r.cells.iter().zip(&r2.cells) {
            assert_eq!(a.ap, b.ap);
        }
        // table renders all twelve cells
        let t = r.table();
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("AP3D@0.7"));
    }

    #[test]
    fn harder_gt_is_ignored_not_fp() {
        // one easy GT detected, one hard GT also detected; in the easy band
        // the hard match must not count as a false positive
        let ge = gt_at(-2.5, 10.0, Difficulty::Easy);
        let gh = gt_at(2.5, 30.0, Difficulty::Hard);
        let frames = vec![EvalFrame {
            detections: vec![det_from(&gh, 0.95), det_from(&ge, 0.9)],
            gts: vec![ge, gh],
        }];
        assert_eq!(ap_at_40(&frames, iou_3d, 0.5, Difficulty::Easy), Some(100.0));
    }

    #[test]
    fn bev_plot_deterministic_and_geometry_consistent() {
        let near = gt_at(0.0, 10.0, Difficulty::Easy);
        let far = gt_at(0.0, 40.0, Difficulty::Easy);
        let dets = vec![det_from(&near, 0.9), det_from(&far, 0.8)];
        let gts = vec![near, far];
        let a = bev_plot_image(&dets, &gts, &cam());
        let b = bev_plot_image(&dets, &gts, &cam());
        assert_eq!(a, b);
        // red pixels of the near box sit lower (closer to the origin row)
        let red_rows: Vec<usize> = (0..PLOT_H)
            .filter(|y| {
                (0..PLOT_W).any(|x| {
                    let i = (y * PLOT_W + x) * 3;
                    a[i..i + 3] == PLOT_DET_COLOR
                })
            })
            .collect();
        let (oy, _) = (plot_px(0.0, 0.0).1, 0);
        let near_row = *red_rows.iter().max().unwrap() as i64; // larger y = nearer
        let far_row = *red_rows.iter().min().unwrap() as i64;
        assert!((oy - near_row).abs() < (oy - far_row).abs());
        // without detections there is green but no red
        let only_gt = bev_plot_image(&[], &gts, &cam());
        let has = |col: [u8; 3]| {
            (0..PLOT_W * PLOT_H).any(|p| only_gt[p * 3..p * 3 + 3] == col)
        };
        assert!(has(PLOT_GT_COLOR));
        assert!(!has(PLOT_DET_COLOR));
        // file write round
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        bev_plot(&dets, &gts, &cam(), &p1).unwrap();
        bev_plot(&dets, &gts, &cam(), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
