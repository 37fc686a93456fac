//! Semantic and instance metrics: Dice, AJI and PQ, plus connected
//! components and run-length encoding of binary masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::neighbours4;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// 4-connected components labelled 1..K in raster-scan discovery order.
pub fn connected_components(mask: &Grid<bool>) -> Grid<u32> {
    let (h, w) = mask.dims();
    let mut labels = Grid::<u32>::new(h, w);
    let mut next = 0;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || labels.get(r, c) != 0 {
                continue;
            }
            next += 1;
            labels.set(r, c, next);
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                for (ny, nx) in neighbours4(y, x, h, w) {
                    if mask.get(ny, nx) && labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, next);
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    labels
}

/// Relabels instances 1..K by the raster position of their first pixel.
pub fn canonicalize(labels: &Grid<u32>) -> Grid<u32> {
    let mut map = HashMap::new();
    let mut next = 0;
    labels.map(|v| {
        if v == 0 {
            return 0;
        }
        *map.entry(v).or_insert_with(|| {
            next += 1;
            next
        })
    })
}

fn check_dims<A: Copy, B: Copy>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, with two empty masks scoring 1.
pub fn dice(pred: &Grid<bool>, gt: &Grid<bool>) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Areas and pairwise intersections of two canonical label maps.
struct Overlap {
    gt_area: Vec<usize>,
    pred_area: Vec<usize>,
    /// `inter[g][p]`, 1-based labels shifted to 0-based indices.
    inter: Vec<HashMap<usize, usize>>,
}

impl Overlap {
    fn new(pred: &Grid<u32>, gt: &Grid<u32>) -> Self {
        let pred = canonicalize(pred);
        let gt = canonicalize(gt);
        let kp = pred.data().iter().copied().max().unwrap_or(0) as usize;
        let kg = gt.data().iter().copied().max().unwrap_or(0) as usize;
        let mut o = Self {
            gt_area: vec![0; kg],
            pred_area: vec![0; kp],
            inter: vec![HashMap::new(); kg],
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p > 0 {
                o.pred_area[p as usize - 1] += 1;
            }
            if g > 0 {
                o.gt_area[g as usize - 1] += 1;
            }
            if p > 0 && g > 0 {
                *o.inter[g as usize - 1].entry(p as usize - 1).or_insert(0) += 1;
            }
        }
        o
    }

    fn union(&self, g: usize, p: usize, i: usize) -> usize {
        self.gt_area[g] + self.pred_area[p] - i
    }
}

/// Aggregated Jaccard Index. Ground-truth instances are visited in
/// canonical order; each takes the unused prediction of highest IoU (ties to
/// the lower canonical label). Unmatched instances of both maps add their
/// area to the denominator. Two empty maps score 1.
pub fn aji(pred: &Grid<u32>, gt: &Grid<u32>) -> Result<f64> {
    check_dims(pred, gt)?;
    let o = Overlap::new(pred, gt);
    if o.gt_area.is_empty() && o.pred_area.is_empty() {
        return Ok(1.0);
    }
    let mut used = vec![false; o.pred_area.len()];
    let (mut num, mut den) = (0usize, 0usize);
    for g in 0..o.gt_area.len() {
        let mut best: Option<(usize, usize, usize)> = None;
        let mut cands: Vec<_> = o.inter[g].iter().filter(|(&p, _)| !used[p]).collect();
        cands.sort_unstable_by_key(|(&p, _)| p);
        for (&p, &i) in cands {
            let u = o.union(g, p, i);
            // i/u > bi/bu  ⇔  i·bu > bi·u
            if best.map_or(true, |(_, bi, bu)| i * bu > bi * u) {
                best = Some((p, i, u));
            }
        }
        match best {
            Some((p, i, u)) => {
                used[p] = true;
                num += i;
                den += u;
            }
            None => den += o.gt_area[g],
        }
    }
    den += o
        .pred_area
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(&a, _)| a)
        .sum::<usize>();
    Ok(if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Panoptic quality with matches at IoU strictly above 0.5.
pub fn pq(pred: &Grid<u32>, gt: &Grid<u32>) -> Result<PanopticQuality> {
    check_dims(pred, gt)?;
    let o = Overlap::new(pred, gt);
    let (kg, kp) = (o.gt_area.len(), o.pred_area.len());
    if kg == 0 && kp == 0 {
        log::debug!("pq on two empty maps scored as 1");
        return Ok(PanopticQuality {
            pq: 1.0,
            sq: 1.0,
            rq: 1.0,
        });
    }
    let (mut tp, mut iou_sum) = (0usize, 0.0);
    for g in 0..kg {
        for (&p, &i) in &o.inter[g] {
            let u = o.union(g, p, i);
            if 2 * i > u {
                tp += 1;
                iou_sum += i as f64 / u as f64;
            }
        }
    }
    let (fp, fn_) = (kp - tp, kg - tp);
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let rq = tp as f64 / denom;
    Ok(PanopticQuality {
        pq: sq * rq,
        sq,
        rq,
    })
}

/// Binary run-length encoding: row-major, zero-indexed `(start, length)`
/// runs of foreground in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<[usize; 2]>,
}

impl Rle {
    pub fn encode(mask: &Grid<bool>) -> Self {
        let mut runs: Vec<[usize; 2]> = Vec::new();
        for (i, &v) in mask.data().iter().enumerate() {
            if !v {
                continue;
            }
            match runs.last_mut() {
                Some([s, l]) if *s + *l == i => *l += 1,
                _ => runs.push([i, 1]),
            }
        }
        Self {
            height: mask.height(),
            width: mask.width(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<Grid<bool>> {
        let n = self.height * self.width;
        let mut data = vec![false; n];
        let mut end = 0;
        for &[s, l] in &self.runs {
            if s < end || l == 0 || s + l > n {
                return Err(Error::invalid("malformed run-length encoding"));
            }
            data[s..s + l].iter_mut().for_each(|v| *v = true);
            end = s + l;
        }
        Grid::from_vec(self.height, self.width, data)
    }
}
