//! Frozen-feature evaluation: k-NN classification, attention-mass masks,
//! boxes, Jaccard and CorLoc.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{DoraError, Result};
use crate::frame::Frame;
use crate::tensor::Scalar;
use crate::tracker::{cls_attention, upsample_map, ObjectMask};

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(DoraError::InvalidInput(format!("box ({x0},{y0},{x1},{y1}) has negative extent")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(DoraError::Shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Pixels above one half.
    pub fn from_frame(frame: &Frame) -> Self {
        Self::from_fn(frame.height(), frame.width(), |y, x| frame.get(y, x, 0) > 0.5)
    }

    pub fn to_frame(&self) -> Frame {
        Frame::from_fn(self.height, self.width, 1, |y, x, _| if self.get(y, x) { 1.0 } else { 0.0 })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight box over all set pixels, `None` if empty.
    pub fn tight_box(&self) -> Option<BoxRect> {
        let mut b: Option<BoxRect> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, v)| **v) {
            let (y, x) = (i / self.width, i % self.width);
            b = Some(match b {
                None => BoxRect { x0: x, y0: y, x1: x, y1: y },
                Some(r) => BoxRect { x0: r.x0.min(x), y0: r.y0.min(y), x1: r.x1.max(x), y1: r.y1.max(y) },
            });
        }
        b
    }
}

/// L2-normalized features with class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DoraError::InvalidInput("non-finite feature".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(DoraError::InvalidInput("zero feature vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, feature: &[f64], label: usize) -> Result<()> {
        if feature.len() != self.dim {
            return Err(DoraError::Shape(format!("feature of length {} in a {}-d bank", feature.len(), self.dim)));
        }
        self.features.push(normalized(feature)?);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Majority label of the `k` nearest bank rows by cosine distance.
///
/// Ties in the vote go to the class with the smaller mean distance, then to
/// the lower class id. Equidistant neighbours are ordered by bank index.
pub fn knn_classify(bank: &FeatureBank, query: &[f64], k: usize) -> Result<usize> {
    if k == 0 || bank.len() < k {
        return Err(DoraError::InvalidInput(format!("bank of {} cannot serve k = {k}", bank.len())));
    }
    if query.len() != bank.dim {
        return Err(DoraError::Shape(format!("query of length {} in a {}-d bank", query.len(), bank.dim)));
    }
    let q = normalized(query)?;
    let mut dist: Vec<(f64, usize)> = bank
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (1.0 - f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let classes = bank.labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![(0usize, 0.0f64); classes];
    for &(d, i) in &dist[..k] {
        let v = &mut votes[bank.labels[i]];
        v.0 += 1;
        v.1 += d;
    }
    let best = votes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.0 > 0)
        .min_by(|(ca, a), (cb, b)| {
            b.0.cmp(&a.0)
                .then((a.1 / a.0 as f64).total_cmp(&(b.1 / b.0 as f64)))
                .then(ca.cmp(cb))
        })
        .map(|(c, _)| c)
        .expect("k >= 1 votes were cast");
    Ok(best)
}

/// Fraction of queries whose k-NN label matches.
pub fn knn_accuracy(bank: &FeatureBank, queries: &[(Vec<f64>, usize)], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(DoraError::InvalidInput("no queries".into()));
    }
    let mut correct = 0;
    for (q, label) in queries {
        if knn_classify(bank, q, k)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Keeps the largest values until they hold `mass` of the total. Equal values
/// are taken in index order, so a uniform map keeps exactly the prefix needed.
pub fn attention_to_mask(values: &[f64], mass: f64) -> Result<Vec<bool>> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(DoraError::InvalidInput(format!("mass {mass} outside (0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DoraError::InvalidInput("attention map must be finite and nonnegative".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| values[i]).sum();
    if total <= 0.0 {
        return Err(DoraError::InvalidInput("attention map sums to zero".into()));
    }
    // slack absorbs summation rounding, e.g. 0.5 + 0.3 against 0.8
    let target = mass * total - 1e-12 * total;
    let mut keep = vec![false; values.len()];
    let mut cum = 0.0;
    for &i in &order {
        if values[i] == 0.0 {
            break;
        }
        keep[i] = true;
        cum += values[i];
        if cum >= target {
            break;
        }
    }
    Ok(keep)
}

pub fn attention_to_binary_mask(map: &ObjectMask, mass: f64) -> Result<BinaryMask> {
    let values: Vec<f64> = map.values.iter().map(|&v| v as f64).collect();
    BinaryMask::new(map.height, map.width, attention_to_mask(&values, mass)?)
}

/// Tight box around the largest 4-connected component; ties go to the
/// component met first in raster order.
pub fn bounding_box(mask: &BinaryMask) -> Result<BoxRect> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BoxRect)> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut b = BoxRect { x0: start % w, y0: start / w, x1: start % w, y1: start / w };
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            b = BoxRect { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) };
            let mut visit = |j: usize| {
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, b));
        }
    }
    best.map(|(_, b)| b).ok_or_else(|| DoraError::InvalidInput("empty mask has no box".into()))
}

pub fn iou(a: &BoxRect, b: &BoxRect) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    let inter = if ix0 <= ix1 && iy0 <= iy1 { (ix1 - ix0 + 1) * (iy1 - iy0 + 1) } else { 0 };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Mask intersection over union; two empty masks agree perfectly.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(DoraError::Shape(format!(
            "masks {}x{} and {}x{} differ in size",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over ground-truth objects of the best Jaccard any prediction reaches.
pub fn matched_jaccard(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if gts.is_empty() {
        return Err(DoraError::InvalidInput("no ground-truth objects".into()));
    }
    let mut total = 0.0;
    for g in gts {
        let mut best = 0.0f64;
        for p in preds {
            best = best.max(jaccard(p, g)?);
        }
        total += best;
    }
    Ok(total / gts.len() as f64)
}

pub const CORLOC_IOU: f64 = 0.5;

/// Whether `pred` hits any ground-truth box at IoU ≥ 0.5.
pub fn box_correct(pred: &BoxRect, gts: &[BoxRect]) -> bool {
    gts.iter().any(|g| iou(pred, g) >= CORLOC_IOU)
}

/// Percentage of images whose single predicted box is correct.
pub fn corloc(predictions: &[BoxRect], gts: &[Vec<BoxRect>]) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(DoraError::InvalidInput(format!(
            "{} predictions for {} images",
            predictions.len(),
            gts.len()
        )));
    }
    if predictions.is_empty() {
        return Err(DoraError::InvalidInput("no images".into()));
    }
    let hits = predictions.iter().zip(gts).filter(|(p, g)| box_correct(p, g)).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Final [CLS] embedding as a frozen feature.
pub fn frozen_feature<T: Scalar>(cfg: &EncoderConfig, params: &EncoderParams<T>, frame: &Frame) -> Result<Vec<f64>> {
    let out = encode(cfg, params, frame)?;
    Ok(out.cls().iter().map(|v| v.to_f64().unwrap()).collect())
}

/// [CLS] attention over patches averaged across all heads of the tracker block,
/// upsampled to the frame.
pub fn mean_attention_map<T: Scalar>(cfg: &EncoderConfig, params: &EncoderParams<T>, frame: &Frame) -> Result<ObjectMask> {
    let out = encode(cfg, params, frame)?;
    let rows = cls_attention(&out.attention)?;
    let n = out.n();
    let mean: Vec<f64> = (0..n)
        .map(|i| rows.iter().map(|r| r[i].to_f64().unwrap()).sum::<f64>() / rows.len() as f64)
        .collect();
    upsample_map(&mean, out.grid_rows, out.grid_cols, frame.height(), frame.width())
}

/// Single-image discovery box: attention mass mask, then the largest component.
pub fn predict_box<T: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<T>,
    frame: &Frame,
    mass: f64,
) -> Result<BoxRect> {
    bounding_box(&attention_to_binary_mask(&mean_attention_map(cfg, params, frame)?, mass)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetail {
    pub image: String,
    pub iou: f64,
    pub correct: bool,
}

/// Summary metrics plus optional per-image rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<(String, f64)>,
    pub details: Vec<ImageDetail>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, value) in &self.metrics {
            s.push_str(&format!("{name},{value}\n"));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.details
            .iter()
            .map(|d| serde_json::json!({"image": d.image, "iou": d.iou, "correct": d.correct}).to_string() + "\n")
            .collect()
    }

    /// Writes `report.csv` and, when there are per-image rows, `report.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DoraError::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::File::create(&csv)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| DoraError::io(&csv, e))?;
        if !self.details.is_empty() {
            let jl = dir.join("report.jsonl");
            fs::write(&jl, self.to_jsonl()).map_err(|e| DoraError::io(&jl, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> BoxRect {
        BoxRect::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn matched_jaccard_takes_best_prediction_per_object() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let b = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
        let half = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(matched_jaccard(&[b.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap(), 1.0);
        assert_eq!(matched_jaccard(&[half], &[a.clone(), b]).unwrap(), 0.25);
        assert!(matched_jaccard(&[a], &[]).is_err());
    }

    fn bank(rows: &[(&[f64], usize)]) -> FeatureBank {
        let mut bank = FeatureBank::new(rows[0].0.len());
        for (f, l) in rows {
            bank.push(f, *l).unwrap();
        }
        bank
    }

    #[test]
    fn knn_basic_geometry() {
        let bk = bank(&[(&[1.0, 0.0], 0), (&[-1.0, 0.0], 1), (&[0.0, 1.0], 2)]);
        assert_eq!(knn_classify(&bk, &[0.9, 0.0], 1).unwrap(), 0);
        assert_eq!(knn_classify(&bk, &[-1.0, 0.0], 1).unwrap(), 1);
        assert_eq!(knn_classify(&bk, &[0.0, 3.0], 1).unwrap(), 2);
        assert!(knn_classify(&bk, &[1.0, 0.0], 4).is_err());
    }

    #[test]
    fn knn_vote_tie_uses_mean_distance_then_class() {
        // one vote each; class 1 is closer
        let bk = bank(&[(&[1.0, 0.2], 0), (&[1.0, 0.1], 1)]);
        assert_eq!(knn_classify(&bk, &[1.0, 0.0], 2).unwrap(), 1);
        // one vote each at equal distance
        let bk = bank(&[(&[1.0, -0.1], 1), (&[1.0, 0.1], 0)]);
        assert_eq!(knn_classify(&bk, &[1.0, 0.0], 2).unwrap(), 0);
    }

    #[test]
    fn mass_mask_examples() {
        assert_eq!(attention_to_mask(&[0.5, 0.3, 0.2], 0.8).unwrap(), vec![true, true, false]);
        let uniform = attention_to_mask(&[0.1; 10], 0.8).unwrap();
        assert_eq!(uniform, [[true; 8].as_slice(), &[false; 2]].concat());
        assert_eq!(attention_to_mask(&[1.0; 10], 0.8).unwrap().iter().filter(|b| **b).count(), 8);
        let distinct: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        // 10+9+8+7+6 = 40 < 44, adding 5 reaches 45
        assert_eq!(attention_to_mask(&distinct, 0.8).unwrap().iter().filter(|b| **b).count(), 6);
        assert_eq!(attention_to_mask(&[0.0, 2.0, 0.0, 1.0], 1.0).unwrap(), vec![false, true, false, true]);
        assert!(attention_to_mask(&[0.0, 0.0], 0.8).is_err());
    }

    #[test]
    fn box_examples() {
        let single = BinaryMask::from_fn(8, 8, |y, x| (x, y) == (3, 4));
        assert_eq!(bounding_box(&single).unwrap(), b(3, 4, 3, 4));
        let full = BinaryMask::from_fn(5, 7, |_, _| true);
        assert_eq!(bounding_box(&full).unwrap(), b(0, 0, 6, 4));
        // 12-pixel block and 5-pixel bar
        let two = BinaryMask::from_fn(10, 10, |y, x| (y < 3 && x < 4) || (y == 8 && (3..8).contains(&x)));
        assert_eq!(bounding_box(&two).unwrap(), b(0, 0, 3, 2));
        assert!(bounding_box(&BinaryMask::from_fn(3, 3, |_, _| false)).is_err());
        // diagonal pixels are separate components
        let diag = BinaryMask::from_fn(4, 4, |y, x| y == x);
        assert_eq!(bounding_box(&diag).unwrap(), b(0, 0, 0, 0));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(1, 1, 4, 4), &b(1, 1, 4, 4)), 1.0);
        assert_eq!(iou(&b(0, 0, 1, 1), &b(5, 5, 6, 6)), 0.0);
        assert!((iou(&b(0, 0, 9, 9), &b(5, 0, 14, 9)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jaccard_examples() {
        let m = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let n = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
        let empty = BinaryMask::from_fn(4, 4, |_, _| false);
        assert_eq!(jaccard(&m, &m).unwrap(), 1.0);
        assert_eq!(jaccard(&m, &n).unwrap(), 0.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert!(jaccard(&m, &BinaryMask::from_fn(3, 4, |_, _| true)).is_err());
    }

    #[test]
    fn corloc_examples() {
        let g = b(0, 0, 9, 9);
        let half = b(0, 0, 9, 4); // IoU 0.5
        let forty = b(0, 0, 3, 9); // IoU 0.4
        let away = b(20, 20, 25, 25);
        let gts = vec![vec![g]; 4];
        assert_eq!(corloc(&[g, half, forty, away], &gts).unwrap(), 50.0);
        assert_eq!(corloc(&[g; 4], &gts).unwrap(), 100.0);
        assert_eq!(corloc(&[away; 4], &gts).unwrap(), 0.0);
        assert!(corloc(&[g], &gts).is_err());
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            metrics: vec![("corloc".into(), 50.0)],
            details: vec![ImageDetail { image: "a\"b".into(), iou: 0.25, correct: false }],
        };
        assert_eq!(r.to_csv(), "metric,value\ncorloc,50\n");
        assert_eq!(r.to_jsonl(), "{\"correct\":false,\"image\":\"a\\\"b\",\"iou\":0.25}\n");
    }

    proptest! {
        #[test]
        fn knn_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(Vec<f64>, usize)> =
                (0..15).map(|_| ((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0..3))).collect();
            let mut a = FeatureBank::new(4);
            let mut s = FeatureBank::new(4);
            for (i, (f, l)) in rows.iter().enumerate() {
                a.push(f, *l).unwrap();
                let scaled: Vec<f64> = f.iter().map(|v| if i % 2 == 0 { v * c } else { *v }).collect();
                s.push(&scaled, *l).unwrap();
            }
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert_eq!(knn_classify(&a, &q, 5).unwrap(), knn_classify(&s, &q, 5).unwrap());
        }

        #[test]
        fn mass_mask_scale_invariant(vals in proptest::collection::vec(0u32..20, 1..30), c in 1u32..50) {
            prop_assume!(vals.iter().any(|v| *v > 0));
            let a: Vec<f64> = vals.iter().map(|v| *v as f64).collect();
            let s: Vec<f64> = vals.iter().map(|v| (*v * c) as f64).collect();
            prop_assert_eq!(attention_to_mask(&a, 0.8).unwrap(), attention_to_mask(&s, 0.8).unwrap());
        }

        #[test]
        fn iou_symmetric_in_unit_range(a in (0usize..10, 0usize..10, 0usize..6, 0usize..6), b2 in (0usize..10, 0usize..10, 0usize..6, 0usize..6)) {
            let p = b(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let q = b(b2.0, b2.1, b2.0 + b2.2, b2.1 + b2.3);
            let v = iou(&p, &q);
            prop_assert_eq!(v, iou(&q, &p));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
