//! ROI-weight heat maps: every raster cell sums the weights of the boxes
//! that contain its center.

use serde::Serialize;

use crate::error::{Error, Result};

/// Box as `[x, y, w, h]`.
pub type BBox = [f64; 4];

fn contains(b: &BBox, x: f64, y: f64) -> bool {
    x >= b[0] && x < b[0] + b[2] && y >= b[1] && y < b[1] + b[3]
}

/// Smallest box covering all inputs.
pub fn union_extent(boxes: &[BBox]) -> Option<BBox> {
    let first = boxes.first()?;
    let (mut x0, mut y0) = (first[0], first[1]);
    let (mut x1, mut y1) = (first[0] + first[2], first[1] + first[3]);
    for b in &boxes[1..] {
        x0 = x0.min(b[0]);
        y0 = y0.min(b[1]);
        x1 = x1.max(b[0] + b[2]);
        y1 = y1.max(b[1] + b[3]);
    }
    Some([x0, y0, x1 - x0, y1 - y0])
}

/// `height x width` raster over `extent`, row-major from the top.
pub fn rasterize(boxes: &[BBox], weights: &[f64], extent: BBox, width: usize, height: usize) -> Result<Vec<Vec<f64>>> {
    if boxes.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: boxes.len(),
            got: weights.len(),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::Config("raster must have at least one cell".into()));
    }
    if !(extent[2] > 0.0 && extent[3] > 0.0) {
        return Err(Error::Unsupported(format!("degenerate raster extent {extent:?}")));
    }
    let cw = extent[2] / width as f64;
    let ch = extent[3] / height as f64;
    let raster = (0..height)
        .map(|r| {
            let y = extent[1] + (r as f64 + 0.5) * ch;
            (0..width)
                .map(|c| {
                    let x = extent[0] + (c as f64 + 0.5) * cw;
                    boxes
                        .iter()
                        .zip(weights)
                        .filter(|(b, _)| contains(b, x, y))
                        .map(|(_, w)| w)
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(raster)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[0, 1]`; values outside are clamped.
pub fn weight_histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_box_gives_ones() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let r = rasterize(&[b], &[1.0], b, 4, 3).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_boxes_keep_their_weights() {
        let a = [0.0, 0.0, 5.0, 10.0];
        let b = [5.0, 0.0, 5.0, 10.0];
        let ext = union_extent(&[a, b]).unwrap();
        assert_eq!(ext, [0.0, 0.0, 10.0, 10.0]);
        let r = rasterize(&[a, b], &[0.7, 0.3], ext, 10, 2).unwrap();
        for row in &r {
            assert!(row[..5].iter().all(|&v| v == 0.7));
            assert!(row[5..].iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn overlaps_sum() {
        let a = [0.0, 0.0, 10.0, 10.0];
        let b = [0.0, 0.0, 5.0, 5.0];
        let r = rasterize(&[a, b], &[0.5, 0.25], a, 2, 2).unwrap();
        assert_eq!(r[0][0], 0.75);
        assert_eq!(r[1][1], 0.5);
    }

    #[test]
    fn bad_inputs() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert!(rasterize(&[a], &[], a, 2, 2).is_err());
        assert!(rasterize(&[a], &[1.0], a, 0, 2).is_err());
        assert!(rasterize(&[a], &[1.0], [0.0, 0.0, 0.0, 1.0], 2, 2).is_err());
    }

    #[test]
    fn histogram_counts() {
        let h = weight_histogram(&[0.0, 0.05, 0.5, 1.0, 1.0], 4);
        let counts: Vec<usize> = h.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![2, 0, 1, 2]);
        assert_eq!(h[3].hi, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn extent_box_adds_its_weight_everywhere(
            boxes in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..50.0, 1.0f64..50.0), 1..6),
            w in 0.0f64..2.0,
        ) {
            let mut boxes: Vec<BBox> = boxes.into_iter().map(|(x, y, bw, bh)| [x, y, bw, bh]).collect();
            let weights: Vec<f64> = (0..boxes.len()).map(|i| 0.1 * (i + 1) as f64).collect();
            let extent = union_extent(&boxes).unwrap();
            let base = rasterize(&boxes, &weights, extent, 7, 5).unwrap();
            boxes.push(extent);
            let mut with = weights.clone();
            with.push(w);
            let more = rasterize(&boxes, &with, extent, 7, 5).unwrap();
            let total: f64 = weights.iter().sum();
            for (a, b) in base.iter().flatten().zip(more.iter().flatten()) {
                proptest::prop_assert!((b - a - w).abs() < 1e-12);
                proptest::prop_assert!(*a >= 0.0 && *a <= total + 1e-12);
            }
        }
    }
}
