//! Panoptic inference and PQ / SQ / RQ / mIoU evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{argmax_over, sigmoid, ClassId, ModelOutput, SegmentLabel};
use crate::error::{LabError, Result};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

/// Per-pixel class and instance ids; 0 means unlabeled in both maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class_map: Vec<u16>,
    pub instance_map: Vec<u16>,
}

impl PanopticMap {
    pub fn empty(height: usize, width: usize) -> Self {
        PanopticMap {
            height,
            width,
            class_map: vec![0; height * width],
            instance_map: vec![0; height * width],
        }
    }

    /// Ground-truth map from non-overlapping labels; instances are numbered in label order.
    pub fn from_labels(height: usize, width: usize, labels: &[SegmentLabel]) -> Result<Self> {
        let mut map = PanopticMap::empty(height, width);
        for (i, l) in labels.iter().enumerate() {
            if l.mask.height != height || l.mask.width != width {
                return Err(LabError::DimensionMismatch("label mask size".into()));
            }
            let id = u16::try_from(i + 1)
                .map_err(|_| LabError::InvalidArgument("too many segments".into()))?;
            for (p, &b) in l.mask.bits.iter().enumerate() {
                if b {
                    if map.instance_map[p] != 0 {
                        return Err(LabError::InvalidArgument("overlapping labels".into()));
                    }
                    map.class_map[p] = l.class_id.0;
                    map.instance_map[p] = id;
                }
            }
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.class_map.len() != n || self.instance_map.len() != n {
            return Err(LabError::DimensionMismatch("panoptic map size".into()));
        }
        let mut class_of: HashMap<u16, u16> = HashMap::new();
        for (&c, &i) in self.class_map.iter().zip(&self.instance_map) {
            if (c == 0) != (i == 0) {
                return Err(LabError::InvalidArgument(
                    "instance id present exactly where a class is".into(),
                ));
            }
            if i != 0 && *class_of.entry(i).or_insert(c) != c {
                return Err(LabError::InvalidArgument(format!("instance {i} spans two classes")));
            }
        }
        Ok(())
    }

    /// `(instance id, class, area)` for every segment, ordered by instance id.
    pub fn segments(&self) -> Vec<(u16, u16, usize)> {
        let mut seg: BTreeMap<u16, (u16, usize)> = BTreeMap::new();
        for (&c, &i) in self.class_map.iter().zip(&self.instance_map) {
            if i != 0 {
                seg.entry(i).or_insert((c, 0)).1 += 1;
            }
        }
        seg.into_iter().map(|(i, (c, a))| (i, c, a)).collect()
    }
}

/// Mask-classification inference: keep confident non-no-obj queries, assign
/// each pixel to the query maximizing `conf * sigmoid(mask)`, and drop
/// segments that keep too little of their own thresholded mask.
pub fn panoptic_inference(
    output: &ModelOutput,
    score_threshold: f64,
    overlap_threshold: f64,
) -> Result<PanopticMap> {
    for t in [score_threshold, overlap_threshold] {
        if !(t > 0.0 && t < 1.0) {
            return Err(LabError::InvalidArgument(format!("threshold {t} outside (0, 1)")));
        }
    }
    let (h, w) = (output.height, output.width);
    let hw = h * w;
    if output.mask_logits.cols != hw || output.mask_logits.rows != output.class_logits.rows {
        return Err(LabError::DimensionMismatch("model output shapes".into()));
    }
    let logits = &output.class_logits;
    let mut map = PanopticMap::empty(h, w);
    if logits.rows == 0 {
        return Ok(map);
    }
    let no_obj = logits.cols - 1;
    let active: Vec<usize> = (1..logits.cols).filter(|&c| logits.get(0, c).is_finite()).collect();
    let probs = output.class_probs()?;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for q in 0..logits.rows {
        let Some(c) = argmax_over(probs.row(q), &active) else { continue };
        let conf = probs.get(q, c);
        if c == no_obj || conf < score_threshold {
            continue;
        }
        kept.push((q, c, conf));
    }
    if kept.is_empty() {
        return Ok(map);
    }
    let mut winner = vec![0usize; hw];
    for (pix, slot) in winner.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, &(q, _, conf)) in kept.iter().enumerate() {
            let s = conf * sigmoid(output.mask_logits.get(q, pix));
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        *slot = best;
    }
    let mut next_id = 0u16;
    for (k, &(q, c, _)) in kept.iter().enumerate() {
        let row = output.mask_logits.row(q);
        let original = row.iter().filter(|&&x| sigmoid(x) >= 0.5).count();
        let won = winner.iter().filter(|&&wk| wk == k).count();
        let keep: Vec<usize> = (0..hw)
            .filter(|&p| winner[p] == k && sigmoid(row[p]) >= 0.5)
            .collect();
        if won == 0 || original == 0 || keep.is_empty() {
            continue;
        }
        if (won as f64) / (original as f64) < overlap_threshold {
            continue;
        }
        next_id += 1;
        for p in keep {
            map.class_map[p] = c as u16;
            map.instance_map[p] = next_id;
        }
    }
    Ok(map)
}

/// Named class groups for aggregate scores (`base`, `incremental`, `all`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSubsets {
    pub groups: Vec<(String, BTreeSet<ClassId>)>,
}

impl ClassSubsets {
    /// `base = C^1`, `incremental = C^{2:t}`, `all = C^{1:t}`.
    pub fn from_steps(step_classes: &[Vec<ClassId>]) -> Self {
        let base: BTreeSet<ClassId> = step_classes.first().into_iter().flatten().copied().collect();
        let inc: BTreeSet<ClassId> = step_classes.iter().skip(1).flatten().copied().collect();
        let all: BTreeSet<ClassId> = base.union(&inc).copied().collect();
        ClassSubsets {
            groups: vec![
                ("base".to_string(), base),
                ("incremental".to_string(), inc),
                ("all".to_string(), all),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
    pub pixel_tp: u64,
    pub pixel_fp: u64,
    pub pixel_fn: u64,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
}

impl ClassMetrics {
    fn finish(&mut self) {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom > 0.0 {
            let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
            let rq = self.tp as f64 / denom;
            self.sq = Some(sq);
            self.rq = Some(rq);
            self.pq = Some(sq * rq);
        }
        let pix = self.pixel_tp + self.pixel_fp + self.pixel_fn;
        if pix > 0 {
            self.iou = Some(self.pixel_tp as f64 / pix as f64);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: BTreeMap<ClassId, ClassMetrics>,
    pub groups: BTreeMap<String, GroupMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    fn finish(mut self, subsets: &ClassSubsets) -> Self {
        for m in self.per_class.values_mut() {
            m.finish();
        }
        for (name, classes) in &subsets.groups {
            let members = || classes.iter().filter_map(|c| self.per_class.get(c));
            let g = GroupMetrics {
                pq: mean(members().filter_map(|m| m.pq)),
                sq: mean(members().filter_map(|m| m.sq)),
                rq: mean(members().filter_map(|m| m.rq)),
                miou: mean(members().filter_map(|m| m.iou)),
            };
            self.groups.insert(name.clone(), g);
        }
        self
    }

    pub fn group(&self, name: &str) -> GroupMetrics {
        self.groups.get(name).cloned().unwrap_or_default()
    }
}

fn check_pairs(preds: &[PanopticMap], gts: &[PanopticMap]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(LabError::DimensionMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(LabError::DimensionMismatch("prediction and ground-truth sizes".into()));
        }
        p.validate()?;
        g.validate()?;
    }
    Ok(())
}

fn accumulate_pq(report: &mut MetricReport, pred: &PanopticMap, gt: &PanopticMap) {
    let pseg = pred.segments();
    let gseg = gt.segments();
    let mut inter: HashMap<(u16, u16), usize> = HashMap::new();
    for (&pi, &gi) in pred.instance_map.iter().zip(&gt.instance_map) {
        if pi != 0 && gi != 0 {
            *inter.entry((pi, gi)).or_default() += 1;
        }
    }
    let parea: HashMap<u16, (u16, usize)> = pseg.iter().map(|&(i, c, a)| (i, (c, a))).collect();
    let garea: HashMap<u16, (u16, usize)> = gseg.iter().map(|&(i, c, a)| (i, (c, a))).collect();
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    let mut pairs: Vec<(&(u16, u16), &usize)> = inter.iter().collect();
    pairs.sort_unstable();
    for (&(pi, gi), &i) in pairs {
        let (pc, pa) = parea[&pi];
        let (gc, ga) = garea[&gi];
        if pc != gc {
            continue;
        }
        let iou = i as f64 / (pa + ga - i) as f64;
        if iou > 0.5 {
            // IoU > 0.5 can hold for at most one partner on each side
            debug_assert!(!matched_p.contains(&pi) && !matched_g.contains(&gi));
            matched_p.insert(pi);
            matched_g.insert(gi);
            let m = report.per_class.entry(ClassId(gc)).or_default();
            m.tp += 1;
            m.iou_sum += iou;
        }
    }
    for &(i, c, _) in &pseg {
        if !matched_p.contains(&i) {
            report.per_class.entry(ClassId(c)).or_default().fp += 1;
        }
    }
    for &(i, c, _) in &gseg {
        if !matched_g.contains(&i) {
            report.per_class.entry(ClassId(c)).or_default().fn_ += 1;
        }
    }
}

fn accumulate_pixels(report: &mut MetricReport, pred: &PanopticMap, gt: &PanopticMap) {
    for (&p, &g) in pred.class_map.iter().zip(&gt.class_map) {
        if g == 0 {
            continue;
        }
        if p == g {
            report.per_class.entry(ClassId(g)).or_default().pixel_tp += 1;
        } else {
            report.per_class.entry(ClassId(g)).or_default().pixel_fn += 1;
            if p != 0 {
                report.per_class.entry(ClassId(p)).or_default().pixel_fp += 1;
            }
        }
    }
}

/// PQ, SQ and RQ per class and per subset.
pub fn panoptic_quality(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    subsets: &ClassSubsets,
) -> Result<MetricReport> {
    check_pairs(preds, gts)?;
    let mut report = MetricReport::default();
    for (p, g) in preds.iter().zip(gts) {
        accumulate_pq(&mut report, p, g);
    }
    Ok(report.finish(subsets))
}

/// Per-class IoU over labeled pixels (unlabeled ground truth is ignored).
pub fn miou(preds: &[PanopticMap], gts: &[PanopticMap], subsets: &ClassSubsets) -> Result<MetricReport> {
    check_pairs(preds, gts)?;
    let mut report = MetricReport::default();
    for (p, g) in preds.iter().zip(gts) {
        accumulate_pixels(&mut report, p, g);
    }
    Ok(report.finish(subsets))
}

/// Both metric families in one report.
pub fn evaluate_maps(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    subsets: &ClassSubsets,
) -> Result<MetricReport> {
    check_pairs(preds, gts)?;
    let mut report = MetricReport::default();
    for (p, g) in preds.iter().zip(gts) {
        accumulate_pq(&mut report, p, g);
        accumulate_pixels(&mut report, p, g);
    }
    Ok(report.finish(subsets))
}

pub const CSV_HEADER: &str = "step,class,pq,sq,rq,iou";

/// One row per (step, class); undefined values are left empty.
pub fn metrics_csv(steps: &[(usize, &MetricReport)]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (step, report) in steps {
        for (c, m) in &report.per_class {
            let _ = writeln!(
                out,
                "{step},{},{},{},{},{}",
                c.0,
                fmt(m.pq),
                fmt(m.sq),
                fmt(m.rq),
                fmt(m.iou)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Mask;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(h: usize, w: usize, segs: &[(u16, &dyn Fn(usize, usize) -> bool)]) -> PanopticMap {
        let labels: Vec<SegmentLabel> = segs
            .iter()
            .map(|(c, f)| SegmentLabel {
                class_id: ClassId(*c),
                mask: Mask::from_fn(h, w, f),
                instance_id: 0,
                is_pseudo: false,
            })
            .collect();
        PanopticMap::from_labels(h, w, &labels).unwrap()
    }

    fn subsets() -> ClassSubsets {
        ClassSubsets::from_steps(&[vec![ClassId(1), ClassId(2)], vec![ClassId(3)]])
    }

    #[test]
    fn single_true_positive() {
        // gt covers 10 pixels, prediction 8 of them: IoU 0.8
        let gt = map_from(2, 5, &[(1, &|_, _| true)]);
        let pred = map_from(2, 5, &[(1, &|_, x| x < 4)]);
        let r = panoptic_quality(&[pred.clone()], &[gt.clone()], &subsets()).unwrap();
        let m = &r.per_class[&ClassId(1)];
        assert!((m.pq.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.sq.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(m.rq, Some(1.0));

        // an extra unmatched gt segment of the same class
        let gt2 = map_from(2, 5, &[(1, &|_, _| true)]);
        let extra = map_from(2, 2, &[(1, &|_, _| true)]);
        let empty = PanopticMap::empty(2, 2);
        let r = panoptic_quality(&[pred, empty], &[gt2, extra], &subsets()).unwrap();
        let m = &r.per_class[&ClassId(1)];
        assert!((m.pq.unwrap() - 0.8 / 1.5).abs() < 1e-12);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
    }

    #[test]
    fn identical_maps_score_one() {
        let gt = map_from(4, 4, &[(1, &|y, _| y < 2), (3, &|y, x| y >= 2 && x < 2), (1, &|y, x| y >= 2 && x >= 2)]);
        let r = evaluate_maps(&[gt.clone()], &[gt], &subsets()).unwrap();
        for m in r.per_class.values() {
            assert_eq!((m.pq, m.iou), (Some(1.0), Some(1.0)));
        }
        assert_eq!(r.group("all").pq, Some(1.0));
        assert_eq!(r.group("incremental").miou, Some(1.0));
    }

    #[test]
    fn pixel_iou_formula() {
        // 8 TP, 2 FP on labeled pixels of another class, 0 FN for class 1
        let gt = map_from(2, 5, &[(1, &|y, x| y == 0 || x < 3), (2, &|y, x| y == 1 && x >= 3)]);
        let pred = map_from(2, 5, &[(1, &|_, _| true)]);
        let r = miou(&[pred], &[gt], &subsets()).unwrap();
        let m = &r.per_class[&ClassId(1)];
        assert_eq!((m.pixel_tp, m.pixel_fp, m.pixel_fn), (8, 2, 0));
        assert!((m.iou.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(r.per_class[&ClassId(2)].iou, Some(0.0));
    }

    #[test]
    fn background_is_ignored_by_miou() {
        let gt = map_from(2, 2, &[(1, &|y, _| y == 0)]);
        let pred = map_from(2, 2, &[(1, &|_, _| true)]);
        let r = miou(&[pred], &[gt], &subsets()).unwrap();
        assert_eq!(r.per_class[&ClassId(1)].iou, Some(1.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = map_from(2, 2, &[(1, &|_, _| true)]);
        let r = evaluate_maps(&[gt.clone()], &[gt], &subsets()).unwrap();
        assert!(!r.per_class.contains_key(&ClassId(2)));
        assert_eq!(r.group("base").pq, Some(1.0));
        assert_eq!(r.group("incremental").pq, None);
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PanopticMap {
        let mut map = PanopticMap::empty(h, w);
        let n = rng.random_range(0..5);
        for id in 1..=n {
            let c = rng.random_range(1..4);
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    map.class_map[y * w + x] = c;
                    map.instance_map[y * w + x] = id;
                }
            }
        }
        // overwritten instances may have vanished; class consistency still holds
        map
    }

    /// Pairwise segment enumeration and per-pixel counting.
    fn oracle(preds: &[PanopticMap], gts: &[PanopticMap]) -> BTreeMap<u16, (usize, usize, usize, f64, u64, u64, u64)> {
        let mut out: BTreeMap<u16, (usize, usize, usize, f64, u64, u64, u64)> = BTreeMap::new();
        for (p, g) in preds.iter().zip(gts) {
            let seg = |m: &PanopticMap| {
                let ids: BTreeSet<u16> = m.instance_map.iter().copied().filter(|&i| i != 0).collect();
                ids.into_iter()
                    .map(|i| {
                        let pix: Vec<bool> = m.instance_map.iter().map(|&v| v == i).collect();
                        let c = m.class_map[pix.iter().position(|&b| b).unwrap()];
                        (c, pix)
                    })
                    .collect::<Vec<_>>()
            };
            let (ps, gs) = (seg(p), seg(g));
            let mut pm = vec![false; ps.len()];
            let mut gm = vec![false; gs.len()];
            for (a, (pc, pp)) in ps.iter().enumerate() {
                for (b, (gc, gp)) in gs.iter().enumerate() {
                    if pc != gc {
                        continue;
                    }
                    let i = pp.iter().zip(gp).filter(|(x, y)| **x && **y).count();
                    let u = pp.iter().zip(gp).filter(|(x, y)| **x || **y).count();
                    let iou = i as f64 / u as f64;
                    if iou > 0.5 {
                        pm[a] = true;
                        gm[b] = true;
                        let e = out.entry(*gc).or_default();
                        e.0 += 1;
                        e.3 += iou;
                    }
                }
            }
            for (a, (c, _)) in ps.iter().enumerate() {
                if !pm[a] {
                    out.entry(*c).or_default().1 += 1;
                }
            }
            for (b, (c, _)) in gs.iter().enumerate() {
                if !gm[b] {
                    out.entry(*c).or_default().2 += 1;
                }
            }
            for c in 1..4u16 {
                for (&pc, &gc) in p.class_map.iter().zip(&g.class_map) {
                    if gc == 0 {
                        continue;
                    }
                    let e = out.entry(c).or_default();
                    match (pc == c, gc == c) {
                        (true, true) => e.4 += 1,
                        (true, false) => e.5 += 1,
                        (false, true) => e.6 += 1,
                        _ => {}
                    }
                }
            }
        }
        out
    }

    #[test]
    fn random_maps_match_oracle_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.random_range(1..4);
            let preds: Vec<PanopticMap> = (0..k).map(|_| random_map(&mut rng, 5, 6)).collect();
            let gts: Vec<PanopticMap> = (0..k).map(|_| random_map(&mut rng, 5, 6)).collect();
            let r = evaluate_maps(&preds, &gts, &subsets()).unwrap();
            let want = oracle(&preds, &gts);
            for (c, m) in &r.per_class {
                let o = want[&c.0];
                assert_eq!((m.tp, m.fp, m.fn_), (o.0, o.1, o.2));
                assert!((m.iou_sum - o.3).abs() < 1e-12);
                assert_eq!((m.pixel_tp, m.pixel_fp, m.pixel_fn), (o.4, o.5, o.6));
                if let (Some(pq), Some(sq), Some(rq)) = (m.pq, m.sq, m.rq) {
                    assert!((pq - sq * rq).abs() < 1e-9);
                    assert!(pq <= sq.min(rq) + 1e-12 && sq.min(rq) <= 1.0);
                }
            }
            for (c, o) in &want {
                if o.0 + o.1 + o.2 > 0 {
                    assert!(r.per_class[&ClassId(*c)].pq.is_some());
                }
            }
            let self_r = miou(&gts, &gts, &subsets()).unwrap();
            assert!(self_r.per_class.values().all(|m| m.iou == Some(1.0)));
        }
    }

    fn output(class_rows: &[Vec<f64>], masks: &[Vec<f64>], h: usize, w: usize) -> ModelOutput {
        ModelOutput {
            queries_per_layer: vec![],
            class_logits: Matrix::from_rows(class_rows),
            mask_logits: Matrix::from_rows(masks),
            refined_flags: vec![false; class_rows.len()],
            height: h,
            width: w,
        }
    }

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn no_obj_queries_yield_empty_map() {
        let out = output(&[vec![NEG, 0.0, 0.0, 9.0]], &[vec![5.0; 4]], 2, 2);
        let map = panoptic_inference(&out, 0.5, 0.5).unwrap();
        assert_eq!(map, PanopticMap::empty(2, 2));
    }

    #[test]
    fn one_confident_query_keeps_its_mask() {
        let mask: Vec<f64> = (0..9).map(|i| if i % 3 == 0 { 4.0 } else { -4.0 }).collect();
        let out = output(&[vec![NEG, 9.0, 0.0, 0.0]], &[mask.clone()], 3, 3);
        let map = panoptic_inference(&out, 0.5, 0.5).unwrap();
        for (p, &m) in mask.iter().enumerate() {
            assert_eq!(map.class_map[p], if m > 0.0 { 1 } else { 0 });
            assert_eq!(map.instance_map[p], if m > 0.0 { 1 } else { 0 });
        }
    }

    #[test]
    fn thresholds_are_validated() {
        let out = output(&[vec![NEG, 9.0, 0.0]], &[vec![0.0; 4]], 2, 2);
        assert!(panoptic_inference(&out, 0.0, 0.5).is_err());
        assert!(panoptic_inference(&out, 0.5, 1.0).is_err());
    }

    #[test]
    fn overlapping_queries_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let n = rng.random_range(1..5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![NEG, rng.random_range(-2.0..4.0), rng.random_range(-2.0..4.0), NEG, rng.random_range(-2.0..2.0)])
                .collect();
            let masks: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let out = output(&rows, &masks, 4, 4);
            let map = panoptic_inference(&out, 0.5, 0.5).unwrap();
            map.validate().unwrap();

            // brute force
            let sm = |r: &[f64]| {
                let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let mut kept = vec![];
            for q in 0..n {
                let p = sm(&rows[q]);
                let mut best = 1;
                for c in [2, 4] {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                if best != 4 && p[best] >= 0.5 {
                    kept.push((q, best, p[best]));
                }
            }
            let mut want_class = vec![0u16; 16];
            let mut seg_count = 0;
            if !kept.is_empty() {
                let win: Vec<usize> = (0..16)
                    .map(|pix| {
                        let mut b = 0;
                        for k in 1..kept.len() {
                            if kept[k].2 * sig(masks[kept[k].0][pix]) > kept[b].2 * sig(masks[kept[b].0][pix]) {
                                b = k;
                            }
                        }
                        b
                    })
                    .collect();
                for (k, &(q, c, _)) in kept.iter().enumerate() {
                    let orig = (0..16).filter(|&p| sig(masks[q][p]) >= 0.5).count();
                    let won = (0..16).filter(|&p| win[p] == k).count();
                    let keep: Vec<usize> = (0..16).filter(|&p| win[p] == k && sig(masks[q][p]) >= 0.5).collect();
                    if won > 0 && orig > 0 && !keep.is_empty() && won as f64 / orig as f64 >= 0.5 {
                        seg_count += 1;
                        for p in keep {
                            want_class[p] = c as u16;
                        }
                    }
                }
            }
            assert_eq!(map.class_map, want_class);
            assert_eq!(map.segments().len(), seg_count);
        }
    }

    #[test]
    fn csv_has_stable_columns() {
        let gt = map_from(2, 2, &[(1, &|_, _| true)]);
        let r = evaluate_maps(&[gt.clone()], &[gt], &subsets()).unwrap();
        let csv = metrics_csv(&[(1, &r), (2, &r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "1,1,1.000000,1.000000,1.000000,1.000000");
        assert_eq!(lines.len(), 3);
    }
}
