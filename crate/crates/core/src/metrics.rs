//! Overlap and boundary-distance scores for binary masks.

use std::fmt::Write as _;

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return shape_err("mask", format!("{} values for {h}x{w}", data.len()));
        }
        Ok(Self { h, w, data })
    }

    /// `values > threshold` over the last two axes of a single-plane tensor.
    pub fn from_threshold<T: Scalar>(t: &Tensor<T>, threshold: T) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return shape_err("mask", format!("expected a single plane, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(h, w, t.data().iter().map(|&v| v > threshold).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.h
            && (x as usize) < self.w
            && self.data[y as usize * self.w + x as usize]
    }

    /// Pixels with at least one 4-neighbour outside the mask; the image
    /// border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                let (yi, xi) = (y as isize, x as isize);
                if self.data[y * self.w + x]
                    && !(self.at(yi - 1, xi)
                        && self.at(yi + 1, xi)
                        && self.at(yi, xi - 1)
                        && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskPair<'a> {
    pub pred: &'a Mask,
    pub truth: &'a Mask,
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a Mask, truth: &'a Mask) -> Result<Self> {
        if (pred.h, pred.w) != (truth.h, truth.w) {
            return shape_err(
                "mask pair",
                format!("{}x{} vs {}x{}", pred.h, pred.w, truth.h, truth.w),
            );
        }
        Ok(Self { pred, truth })
    }

    /// `(|P & T|, |P|, |T|)`.
    fn counts(&self) -> (usize, usize, usize) {
        let mut inter = 0;
        for (&p, &t) in self.pred.data.iter().zip(&self.truth.data) {
            inter += (p && t) as usize;
        }
        (inter, self.pred.count(), self.truth.count())
    }
}

pub fn dice_score(pair: MaskPair<'_>) -> f64 {
    let (i, p, t) = pair.counts();
    if p + t == 0 {
        return 1.0;
    }
    2.0 * i as f64 / (p + t) as f64
}

pub fn iou_score(pair: MaskPair<'_>) -> f64 {
    let (i, p, t) = pair.counts();
    let union = p + t - i;
    if union == 0 {
        return 1.0;
    }
    i as f64 / union as f64
}

/// Harmonic mean of pixel precision and recall. Algebraically equal to
/// [`dice_score`] on binary masks.
pub fn f1_score(pair: MaskPair<'_>) -> f64 {
    let (i, p, t) = pair.counts();
    if p + t == 0 {
        return 1.0;
    }
    if i == 0 {
        return 0.0;
    }
    let precision = i as f64 / p as f64;
    let recall = i as f64 / t as f64;
    2.0 * precision * recall / (precision + recall)
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                // z[0] is -inf, so this never underflows.
                if s <= z[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest point
/// of `points`.
pub fn squared_distance_map(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&row, &mut grid[y * w..(y + 1) * w]);
    }
    grid
}

/// Nearest-rank percentile of `d` (which it sorts), `pct` in `(0, 100]`.
fn percentile(d: &mut [f64], pct: f64) -> f64 {
    d.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * d.len() as f64).ceil().max(1.0) as usize;
    d[rank.min(d.len()) - 1]
}

fn directed(from: &[(usize, usize)], to_map: &[f64], w: usize, pct: f64) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| to_map[y * w + x].sqrt())
        .collect();
    percentile(&mut d, pct)
}

/// Symmetric boundary Hausdorff distance in pixels at the given percentile
/// (100 is the classical maximum). `None` when exactly one mask is empty;
/// two empty masks are at distance 0.
pub fn hausdorff(pair: MaskPair<'_>, pct: f64) -> Result<Option<f64>> {
    if !(pct > 0.0 && pct <= 100.0) {
        return arg_err("hausdorff", format!("percentile {pct} outside (0, 100]"));
    }
    let (a, b) = (pair.pred.boundary(), pair.truth.boundary());
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (h, w) = (pair.pred.h, pair.pred.w);
    let da = squared_distance_map(h, w, &a);
    let db = squared_distance_map(h, w, &b);
    Ok(Some(
        directed(&a, &db, w, pct).max(directed(&b, &da, w, pct)),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub hd: Option<f64>,
}

pub fn score_pair(
    id: impl Into<String>,
    pair: MaskPair<'_>,
    hd_percentile: f64,
) -> Result<ImageScores> {
    Ok(ImageScores {
        id: id.into(),
        dice: dice_score(pair),
        iou: iou_score(pair),
        f1: f1_score(pair),
        hd: hausdorff(pair, hd_percentile)?,
    })
}

/// Per-image scores plus their means. Overlap scores are fractions here and
/// percentages in the CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageScores>,
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.mean(|s| s.dice)
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean(|s| s.iou)
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean(|s| s.f1)
    }

    fn mean(&self, f: impl Fn(&ImageScores) -> f64) -> f64 {
        if self.images.is_empty() {
            return f64::NAN;
        }
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    /// Mean over images with a defined distance.
    pub fn mean_hd(&self) -> Option<f64> {
        let v: Vec<f64> = self.images.iter().filter_map(|s| s.hd).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn hd_missing(&self) -> usize {
        self.images.iter().filter(|s| s.hd.is_none()).count()
    }

    pub fn to_csv(&self) -> String {
        let hd = |v: Option<f64>| v.map(|d| format!("{d:.6}")).unwrap_or_default();
        let mut out = String::from("image_id,dice,iou,f1,hd\n");
        for s in &self.images {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                s.id,
                100.0 * s.dice,
                100.0 * s.iou,
                100.0 * s.f1,
                hd(s.hd)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6},{}",
            100.0 * self.mean_dice(),
            100.0 * self.mean_iou(),
            100.0 * self.mean_f1(),
            hd(self.mean_hd())
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut d = vec![false; h * w];
        for &(y, x) in on {
            d[y * w + x] = true;
        }
        Mask::new(h, w, d).unwrap()
    }

    fn brute_hd(a: &Mask, b: &Mask) -> f64 {
        let (ba, bb) = (a.boundary(), b.boundary());
        let dir = |p: &[(usize, usize)], q: &[(usize, usize)]| {
            p.iter()
                .map(|&(y, x)| {
                    q.iter()
                        .map(|&(v, u)| {
                            ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        dir(&ba, &bb).max(dir(&bb, &ba))
    }

    #[test]
    fn hand_counts() {
        let p = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let t = mask(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        let pair = MaskPair::new(&p, &t).unwrap();
        assert_eq!(dice_score(pair), 0.5);
        assert_eq!(iou_score(pair), 2.0 / 6.0);
        assert_eq!(dice_score(MaskPair::new(&p, &p).unwrap()), 1.0);
        assert_eq!(iou_score(MaskPair::new(&p, &p).unwrap()), 1.0);
        let far = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(MaskPair::new(&p, &far).unwrap()), 0.0);
    }

    #[test]
    fn f1_superset_case() {
        let t = mask(2, 4, &[(0, 0), (0, 1)]);
        let p = mask(2, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pair = MaskPair::new(&p, &t).unwrap();
        assert!((f1_score(pair) - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1_score(pair) - dice_score(pair)).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let e = mask(3, 3, &[]);
        let one = mask(3, 3, &[(1, 1)]);
        let both = MaskPair::new(&e, &e).unwrap();
        assert_eq!(
            (dice_score(both), iou_score(both), f1_score(both)),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(hausdorff(both, 100.0).unwrap(), Some(0.0));
        assert_eq!(
            hausdorff(MaskPair::new(&one, &e).unwrap(), 100.0).unwrap(),
            None
        );
        assert!(MaskPair::new(&one, &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn hausdorff_triangle() {
        let a = mask(6, 6, &[(0, 0)]);
        let b = mask(6, 6, &[(3, 4)]);
        assert_eq!(
            hausdorff(MaskPair::new(&a, &b).unwrap(), 100.0).unwrap(),
            Some(5.0)
        );
        assert_eq!(
            hausdorff(MaskPair::new(&a, &a).unwrap(), 100.0).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn boundary_excludes_interior() {
        let m = mask(
            5,
            5,
            &[
                (1, 1),
                (1, 2),
                (1, 3),
                (2, 1),
                (2, 2),
                (2, 3),
                (3, 1),
                (3, 2),
                (3, 3),
            ],
        );
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        let full = Mask::new(3, 3, vec![true; 9]).unwrap();
        assert_eq!(full.boundary().len(), 8);
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let pts = [(0, 3), (5, 1), (6, 6), (2, 2)];
        let d = squared_distance_map(7, 8, &pts);
        for y in 0..7 {
            for x in 0..8 {
                let want = pts
                    .iter()
                    .map(|&(v, u)| {
                        ((y as i64 - v as i64).pow(2) + (x as i64 - u as i64).pow(2)) as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[y * 8 + x], want);
            }
        }
    }

    #[test]
    fn csv_has_aggregate_row() {
        let a = mask(3, 3, &[(0, 0)]);
        let e = mask(3, 3, &[]);
        let report = MetricsReport {
            images: vec![
                score_pair("a", MaskPair::new(&a, &a).unwrap(), 100.0).unwrap(),
                score_pair("b", MaskPair::new(&a, &e).unwrap(), 100.0).unwrap(),
            ],
        };
        assert_eq!(report.hd_missing(), 1);
        assert_eq!(report.mean_hd(), Some(0.0));
        let csv = report.to_csv();
        assert!(csv.starts_with("image_id,dice,iou,f1,hd\na,100.000000,"));
        assert!(csv.ends_with("mean,50.000000,50.000000,50.000000,0.000000\n"));
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(a in arb_mask(6, 7), b in arb_mask(6, 7)) {
            let (ab, ba) = (MaskPair::new(&a, &b).unwrap(), MaskPair::new(&b, &a).unwrap());
            prop_assert_eq!(dice_score(ab), dice_score(ba));
            prop_assert_eq!(iou_score(ab), iou_score(ba));
            prop_assert!((f1_score(ab) - f1_score(ba)).abs() < 1e-15);
            prop_assert_eq!(hausdorff(ab, 100.0).unwrap(), hausdorff(ba, 100.0).unwrap());
            let (d, u) = (dice_score(ab), iou_score(ab));
            prop_assert!((d - 2.0 * u / (1.0 + u)).abs() < 1e-12);
        }

        #[test]
        fn hausdorff_matches_all_pairs(a in arb_mask(9, 8), b in arb_mask(9, 8)) {
            let got = hausdorff(MaskPair::new(&a, &b).unwrap(), 100.0).unwrap();
            if a.count() > 0 && b.count() > 0 {
                prop_assert_eq!(got, Some(brute_hd(&a, &b)));
            }
        }

        #[test]
        fn hausdorff_translation_invariant(dy in 0usize..3, dx in 0usize..3, pts in prop::collection::vec((0usize..5, 0usize..5), 1..6), qts in prop::collection::vec((0usize..5, 0usize..5), 1..6)) {
            let shift = |p: &[(usize, usize)]| p.iter().map(|&(y, x)| (y + 1 + dy, x + 1 + dx)).collect::<Vec<_>>();
            let base = |p: &[(usize, usize)]| p.iter().map(|&(y, x)| (y + 1, x + 1)).collect::<Vec<_>>();
            let (a, b) = (mask(10, 10, &base(&pts)), mask(10, 10, &base(&qts)));
            let (sa, sb) = (mask(10, 10, &shift(&pts)), mask(10, 10, &shift(&qts)));
            prop_assert_eq!(
                hausdorff(MaskPair::new(&a, &b).unwrap(), 100.0).unwrap(),
                hausdorff(MaskPair::new(&sa, &sb).unwrap(), 100.0).unwrap()
            );
        }
    }
}
