//! Keypoint similarity, multi-level keypoint aggregation, RMSE and PCK.

use crate::error::{Error, Result};
use crate::heatmap::{argmax_plane, to_image_coord, Heatmap, Keypoint, KeypointSet};

#[derive(Debug, Clone, PartialEq)]
pub struct OksConfig {
    /// Per-part falloff constants in pixels.
    pub k: Vec<f64>,
    /// Candidate selection threshold on single-keypoint similarity.
    pub threshold: f64,
}

impl OksConfig {
    /// `k_i = factor * max(w, h)` for every part.
    pub fn for_image(
        image_w: usize,
        image_h: usize,
        parts: usize,
        factor: f64,
        threshold: f64,
    ) -> Self {
        OksConfig {
            k: vec![factor * image_w.max(image_h) as f64; parts],
            threshold,
        }
    }

    fn validate(&self, parts: usize) -> Result<()> {
        if self.k.len() != parts || self.k.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "OKS needs {parts} positive falloff constants, got {:?}",
                self.k
            )));
        }
        Ok(())
    }
}

/// `exp(-d^2 / k^2)` between two keypoints.
pub fn keypoint_similarity(a: &Keypoint, b: &Keypoint, k: f64) -> f64 {
    let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    (-d2 / (k * k)).exp()
}

fn check_aligned(a: &KeypointSet, b: &KeypointSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "keypoint sets of size {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean similarity over the keypoints visible in `gt`.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, cfg: &OksConfig) -> Result<f64> {
    check_aligned(pred, gt)?;
    cfg.validate(gt.len())?;
    let mut sum = 0.0;
    let mut visible = 0usize;
    for ((p, g), &k) in pred.parts.iter().zip(&gt.parts).zip(&cfg.k) {
        if g.visible {
            sum += keypoint_similarity(p, g, k);
            visible += 1;
        }
    }
    if visible == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(sum / visible as f64)
}

/// Decoded predictions of one supervision head for one image, in image
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLevel {
    pub stage_id: String,
    /// Output stride of the head.
    pub scale: usize,
    pub keypoints: KeypointSet,
    /// The head's heatmap for this image (one sample, K channels), used by
    /// heatmap averaging.
    pub heatmap: Option<Heatmap>,
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub levels: Vec<CandidateLevel>,
}

impl CandidateSet {
    pub fn reference(&self) -> Result<&CandidateLevel> {
        let mut refs = self.levels.iter().filter(|l| l.reference);
        match (refs.next(), refs.next()) {
            (Some(r), None) => Ok(r),
            _ => Err(Error::InvalidArgument(
                "candidate set must flag exactly one reference level".into(),
            )),
        }
    }

    /// Per part, the non-reference levels whose keypoint is similar enough
    /// to the reference keypoint.
    pub fn selected(&self, cfg: &OksConfig) -> Result<Vec<Vec<usize>>> {
        let r = self.reference()?;
        cfg.validate(r.keypoints.len())?;
        for l in &self.levels {
            check_aligned(&l.keypoints, &r.keypoints)?;
        }
        Ok((0..r.keypoints.len())
            .map(|part| {
                let anchor = &r.keypoints.parts[part];
                self.levels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| !l.reference)
                    .filter(|(_, l)| {
                        keypoint_similarity(&l.keypoints.parts[part], anchor, cfg.k[part])
                            >= cfg.threshold
                    })
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect())
    }
}

/// Per part, the mean of the reference keypoint and every selected
/// candidate. Visibility comes from the reference.
pub fn mlka_aggregate(cands: &CandidateSet, cfg: &OksConfig) -> Result<KeypointSet> {
    let r = cands.reference()?;
    let selected = cands.selected(cfg)?;
    let parts = r
        .keypoints
        .parts
        .iter()
        .enumerate()
        .map(|(part, anchor)| {
            let (mut sx, mut sy) = (anchor.x, anchor.y);
            for &i in &selected[part] {
                let p = &cands.levels[i].keypoints.parts[part];
                sx += p.x;
                sy += p.y;
            }
            let n = (selected[part].len() + 1) as f64;
            Keypoint::new(sx / n, sy / n, anchor.visible)
        })
        .collect();
    Ok(KeypointSet::new(
        parts,
        r.keypoints.image_w,
        r.keypoints.image_h,
    ))
}

/// Heatmap variant: per part, the reference and selected heatmaps are
/// resampled (nearest) to the finest stride among them, averaged, and
/// decoded by argmax.
pub fn mlka_aggregate_heatmaps(cands: &CandidateSet, cfg: &OksConfig) -> Result<KeypointSet> {
    let r = cands.reference()?;
    let selected = cands.selected(cfg)?;
    let (iw, ih) = (r.keypoints.image_w, r.keypoints.image_h);
    let mut parts = Vec::with_capacity(r.keypoints.len());
    for (part, anchor) in r.keypoints.parts.iter().enumerate() {
        let ref_index = cands
            .levels
            .iter()
            .position(|l| l.reference)
            .expect("reference checked");
        let members: Vec<&CandidateLevel> = std::iter::once(ref_index)
            .chain(selected[part].iter().copied())
            .map(|i| &cands.levels[i])
            .collect();
        let maps: Vec<&Heatmap> = members
            .iter()
            .map(|l| {
                l.heatmap.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("level `{}` carries no heatmap", l.stage_id))
                })
            })
            .collect::<Result<_>>()?;
        let stride = maps
            .iter()
            .map(|m| m.stride)
            .min()
            .expect("reference present")
            .max(1);
        let (ow, oh) = (iw / stride, ih / stride);
        let mut acc = vec![0.0; ow * oh];
        for m in &maps {
            let s = m.maps.shape();
            let c = if s.c == 1 { 0 } else { part };
            let plane = m.maps.plane(0, c);
            for row in 0..oh {
                let src_r = resample_index(row, stride, m.stride, s.h);
                for col in 0..ow {
                    let src_c = resample_index(col, stride, m.stride, s.w);
                    acc[row * ow + col] += plane[src_r * s.w + src_c];
                }
            }
        }
        let idx = argmax_plane(&acc);
        parts.push(Keypoint::new(
            to_image_coord((idx % ow) as f64, stride),
            to_image_coord((idx / ow) as f64, stride),
            anchor.visible,
        ));
    }
    Ok(KeypointSet::new(parts, iw, ih))
}

fn resample_index(idx: usize, from_stride: usize, to_stride: usize, len: usize) -> usize {
    let image = to_image_coord(idx as f64, from_stride);
    let src = ((image + 0.5) / to_stride as f64 - 0.5).round();
    src.clamp(0.0, (len - 1) as f64) as usize
}

fn check_lists(preds: &[KeypointSet], gts: &[KeypointSet]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    preds
        .iter()
        .zip(gts)
        .try_for_each(|(p, g)| check_aligned(p, g))
}

/// Root mean squared Euclidean error over visible ground-truth keypoints.
pub fn rmse(preds: &[KeypointSet], gts: &[KeypointSet]) -> Result<f64> {
    check_lists(preds, gts)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for (a, b) in p.parts.iter().zip(&g.parts) {
            if b.visible {
                sum += (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckScores {
    /// Fraction correct per part; `None` when the part is never visible.
    pub per_part: Vec<Option<f64>>,
    /// Unweighted mean over present parts.
    pub mean: f64,
}

/// Fraction of visible keypoints whose error, divided componentwise by
/// `norm` (each image's size when `None`), has length strictly below `t`.
pub fn pck(
    preds: &[KeypointSet],
    gts: &[KeypointSet],
    t: f64,
    norm: Option<(f64, f64)>,
) -> Result<PckScores> {
    check_lists(preds, gts)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PCK threshold {t} must be nonnegative"
        )));
    }
    if let Some((cx, cy)) = norm {
        if !(cx > 0.0 && cy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "PCK normalization ({cx}, {cy}) must be positive"
            )));
        }
    }
    let parts = gts.first().map_or(0, |g| g.len());
    let mut correct = vec![0usize; parts];
    let mut total = vec![0usize; parts];
    for (p, g) in preds.iter().zip(gts) {
        if g.len() != parts {
            return Err(Error::InvalidArgument(
                "ground truths disagree on part count".into(),
            ));
        }
        let (cx, cy) = norm.unwrap_or((g.image_w as f64, g.image_h as f64));
        for (i, (a, b)) in p.parts.iter().zip(&g.parts).enumerate() {
            if b.visible {
                total[i] += 1;
                if ((a.x - b.x) / cx).hypot((a.y - b.y) / cy) < t {
                    correct[i] += 1;
                }
            }
        }
    }
    let per_part: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_part.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(PckScores {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_part,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub rows: Vec<PckScores>,
}

pub fn pck_curve(
    preds: &[KeypointSet],
    gts: &[KeypointSet],
    norm: Option<(f64, f64)>,
    thresholds: &[f64],
) -> Result<PckCurve> {
    if thresholds.is_empty() {
        return Err(Error::EmptyInput { op: "pck_curve" });
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "PCK curve thresholds must increase".into(),
        ));
    }
    let rows = thresholds
        .iter()
        .map(|&t| pck(preds, gts, t, norm))
        .collect::<Result<_>>()?;
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        rows,
    })
}

/// `n + 1` evenly spaced thresholds from 0 to `max`.
pub fn threshold_grid(max: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| max * i as f64 / n.max(1) as f64).collect()
}

impl PckCurve {
    /// CSV with header `threshold,<part...>,mean`; absent parts print `nan`.
    pub fn to_csv(&self, part_names: &[&str]) -> String {
        let mut s = String::from("threshold");
        for name in part_names {
            s.push(',');
            s.push_str(name);
        }
        s.push_str(",mean\n");
        for (t, row) in self.thresholds.iter().zip(&self.rows) {
            s.push_str(&format!("{t:.6}"));
            for v in &row.per_part {
                match v {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push_str(",nan"),
                }
            }
            s.push_str(&format!(",{:.6}\n", row.mean));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(points: &[(f64, f64, bool)], w: usize, h: usize) -> KeypointSet {
        KeypointSet::new(
            points
                .iter()
                .map(|&(x, y, v)| Keypoint::new(x, y, v))
                .collect(),
            w,
            h,
        )
    }

    fn cfg(k: f64, parts: usize) -> OksConfig {
        OksConfig {
            k: vec![k; parts],
            threshold: 0.2,
        }
    }

    #[test]
    fn oks_examples() {
        let g = set(&[(5.0, 5.0, true), (9.0, 1.0, true)], 20, 20);
        assert_eq!(oks(&g, &g, &cfg(2.0, 2)).unwrap(), 1.0);
        let one = set(&[(0.0, 0.0, true)], 20, 20);
        let off = set(&[(3.0, 0.0, true)], 20, 20);
        assert!((oks(&off, &one, &cfg(3.0, 1)).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!((oks(&off, &one, &cfg(3.0, 1)).unwrap() - 0.36788).abs() < 1e-5);
        let gt = set(&[(1.0, 1.0, true), (1.0, 1.0, false)], 20, 20);
        let pred = set(&[(1.0, 1.0, true), (900.0, -40.0, true)], 20, 20);
        assert_eq!(oks(&pred, &gt, &cfg(1.0, 2)).unwrap(), 1.0);
        let hidden = set(&[(1.0, 1.0, false)], 20, 20);
        assert!(matches!(
            oks(&hidden, &hidden, &cfg(1.0, 1)),
            Err(Error::NoVisibleKeypoints)
        ));
    }

    fn level(id: &str, kp: KeypointSet, reference: bool) -> CandidateLevel {
        CandidateLevel {
            stage_id: id.into(),
            scale: 4,
            keypoints: kp,
            heatmap: None,
            reference,
        }
    }

    #[test]
    fn mlka_examples() {
        let r = set(&[(10.0, 10.0, true)], 64, 64);
        let same = CandidateSet {
            levels: vec![
                level("a", r.clone(), false),
                level("ref", r.clone(), true),
                level("b", r.clone(), false),
            ],
        };
        assert_eq!(mlka_aggregate(&same, &cfg(10.0, 1)).unwrap(), r);
        let near = CandidateSet {
            levels: vec![
                level("ref", r.clone(), true),
                level("c", set(&[(12.0, 10.0, true)], 64, 64), false),
            ],
        };
        assert!(
            (keypoint_similarity(&near.levels[1].keypoints.parts[0], &r.parts[0], 10.0) - 0.9608)
                .abs()
                < 1e-4
        );
        let out = mlka_aggregate(&near, &cfg(10.0, 1)).unwrap();
        assert_eq!((out.parts[0].x, out.parts[0].y), (11.0, 10.0));
        // exp(-d^2/100) < 0.2 for d = 13.
        let far = CandidateSet {
            levels: vec![
                level("ref", r.clone(), true),
                level("c", set(&[(23.0, 10.0, true)], 64, 64), false),
            ],
        };
        assert_eq!(mlka_aggregate(&far, &cfg(10.0, 1)).unwrap(), r);
        let none = CandidateSet {
            levels: vec![level("c", r.clone(), false)],
        };
        assert!(mlka_aggregate(&none, &cfg(10.0, 1)).is_err());
    }

    #[test]
    fn mlka_threshold_one_keeps_reference() {
        let r = set(&[(10.0, 10.0, true), (3.0, 4.0, false)], 64, 64);
        let c = CandidateSet {
            levels: vec![
                level("ref", r.clone(), true),
                level(
                    "c",
                    set(&[(10.5, 10.0, true), (3.0, 4.2, true)], 64, 64),
                    false,
                ),
            ],
        };
        let strict = OksConfig {
            k: vec![3.0; 2],
            threshold: 1.0,
        };
        assert_eq!(mlka_aggregate(&c, &strict).unwrap(), r);
    }

    #[test]
    fn heatmap_averaging_picks_shared_peak() {
        use crate::tensor::{Shape, Tensor};
        let mut coarse = Tensor::zeros(Shape::new(1, 1, 4, 4));
        coarse.set(0, 0, 1, 2, 1.0);
        let mut fine = Tensor::zeros(Shape::new(1, 1, 8, 8));
        fine.set(0, 0, 2, 5, 1.0);
        let lv = |id: &str, t: Tensor, stride: usize, reference: bool| {
            let hm = Heatmap::prediction(t, stride);
            let kp = crate::heatmap::decode_argmax(&hm).remove(0);
            CandidateLevel {
                stage_id: id.into(),
                scale: stride,
                keypoints: kp,
                heatmap: Some(hm),
                reference,
            }
        };
        let cands = CandidateSet {
            levels: vec![lv("ref", fine, 2, true), lv("coarse", coarse, 4, false)],
        };
        let out = mlka_aggregate_heatmaps(&cands, &cfg(3.2, 1)).unwrap();
        assert_eq!((out.parts[0].x, out.parts[0].y), (10.5, 4.5));
    }

    #[test]
    fn rmse_examples() {
        let g = set(&[(1.0, 1.0, true), (2.0, 2.0, false)], 10, 10);
        assert_eq!(
            rmse(std::slice::from_ref(&g), std::slice::from_ref(&g)).unwrap(),
            0.0
        );
        let p = set(&[(4.0, 5.0, true), (100.0, 2.0, true)], 10, 10);
        assert_eq!(rmse(&[p], &[g]).unwrap(), 5.0);
    }

    #[test]
    fn pck_examples() {
        let g = set(&[(50.0, 50.0, true)], 100, 100);
        assert_eq!(
            pck(
                std::slice::from_ref(&g),
                std::slice::from_ref(&g),
                0.2,
                None
            )
            .unwrap()
            .mean,
            1.0
        );
        let p = set(&[(80.0, 50.0, true)], 100, 100);
        assert_eq!(
            pck(
                std::slice::from_ref(&p),
                std::slice::from_ref(&g),
                0.2,
                Some((100.0, 100.0))
            )
            .unwrap()
            .mean,
            0.0
        );
        let gts = vec![g.clone(); 4];
        let preds = vec![g.clone(), p.clone(), p.clone(), p];
        assert_eq!(
            pck(&preds, &gts, 0.2, None).unwrap().per_part,
            vec![Some(0.25)]
        );
        let hidden = set(&[(50.0, 50.0, true), (1.0, 1.0, false)], 100, 100);
        let s = pck(
            std::slice::from_ref(&hidden),
            std::slice::from_ref(&hidden),
            0.2,
            None,
        )
        .unwrap();
        assert_eq!(s.per_part, vec![Some(1.0), None]);
        assert_eq!(s.mean, 1.0);
    }

    #[test]
    fn curve_edges_and_csv() {
        let g = set(&[(50.0, 50.0, true), (10.0, 10.0, true)], 100, 100);
        let p = set(&[(51.0, 50.0, true), (90.0, 90.0, true)], 100, 100);
        let c = pck_curve(&[p], &[g], None, &[0.0, 0.1, 2.0]).unwrap();
        assert_eq!(c.rows[0].mean, 0.0);
        assert_eq!(c.rows[2].mean, 1.0);
        let csv = c.to_csv(&["a", "b"]);
        assert!(
            csv.starts_with("threshold,a,b,mean\n0.000000,0.000000,0.000000,0.000000\n"),
            "{csv}"
        );
        assert!(pck_curve(&[], &[], None, &[]).is_err());
        assert!(pck_curve(&[], &[], None, &[0.2, 0.1]).is_err());
    }

    proptest! {
        #[test]
        fn oks_in_unit_interval_and_monotone(dt in 0u32..500, extra in 0.0f64..10.0, k in 2.0f64..20.0) {
            let d = dt as f64 * 0.1;
            let g = set(&[(0.0, 0.0, true)], 64, 64);
            let near = set(&[(d, 0.0, true)], 64, 64);
            let far = set(&[(d + extra, 0.0, true)], 64, 64);
            let c = cfg(k, 1);
            let a = oks(&near, &g, &c).unwrap();
            let b = oks(&far, &g, &c).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(b <= a);
            prop_assert_eq!(a == 1.0, d == 0.0);
        }

        #[test]
        fn aggregate_stays_in_hull(pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 2..6)) {
            let levels: Vec<CandidateLevel> = pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| level("l", set(&[(x, y, true)], 64, 64), i == 0))
                .collect();
            let cands = CandidateSet { levels };
            let out = mlka_aggregate(&cands, &cfg(10.0, 1)).unwrap();
            let sel = &cands.selected(&cfg(10.0, 1)).unwrap()[0];
            let xs: Vec<f64> = std::iter::once(0).chain(sel.iter().copied()).map(|i| pts[i].0).collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.parts[0].x >= lo - 1e-9 && out.parts[0].x <= hi + 1e-9);
        }

        #[test]
        fn rmse_ignores_order(pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0), 1..8)) {
            let preds: Vec<KeypointSet> = pts.iter().map(|&(x, y, _, _)| set(&[(x, y, true)], 64, 64)).collect();
            let gts: Vec<KeypointSet> = pts.iter().map(|&(_, _, x, y)| set(&[(x, y, true)], 64, 64)).collect();
            let a = rmse(&preds, &gts).unwrap();
            let (mut rp, mut rg) = (preds.clone(), gts.clone());
            rp.reverse();
            rg.reverse();
            prop_assert!((a - rmse(&rp, &rg).unwrap()).abs() < 1e-9);
        }
    }
}
