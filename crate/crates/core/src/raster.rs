//! Pixel-center rasterization on the unit grid.
//!
//! Pixel `(i, j)` is covered by a ring when its center `(i + 0.5, j + 0.5)`
//! lies inside under the even-odd rule. Rows are scanned with edge
//! crossings, so the cost is linear in rows times edges.

use crate::geom::{BBox, Point};

/// Half-open pixel column ranges `[lo, hi)` covered on one row.
fn row_ranges(ring: &[Point], y: f64, out: &mut Vec<(i64, i64)>) {
    out.clear();
    let mut xs: Vec<f64> = Vec::new();
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if (a.y > y) != (b.y > y) {
            xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
    }
    xs.sort_by(f64::total_cmp);
    for pair in xs.chunks_exact(2) {
        // centers i + 0.5 with pair[0] <= c < pair[1]
        let lo = (pair[0] - 0.5).ceil() as i64;
        let hi = (pair[1] - 0.5).ceil() as i64;
        if hi > lo {
            out.push((lo, hi));
        }
    }
}

fn row_span(b: &BBox) -> (i64, i64) {
    ((b.min_y - 0.5).floor() as i64, (b.max_y + 0.5).ceil() as i64)
}

fn ranges_len(r: &[(i64, i64)]) -> u64 {
    r.iter().map(|(a, b)| (b - a) as u64).sum()
}

fn ranges_overlap(a: &[(i64, i64)], b: &[(i64, i64)]) -> u64 {
    let (mut i, mut j, mut acc) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            acc += (hi - lo) as u64;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    acc
}

/// Number of pixel centers inside `ring`.
pub fn pixel_count(ring: &[Point]) -> u64 {
    if ring.len() < 3 {
        return 0;
    }
    let (r0, r1) = row_span(&BBox::of(ring));
    let mut buf = Vec::new();
    let mut acc = 0;
    for r in r0..r1 {
        row_ranges(ring, r as f64 + 0.5, &mut buf);
        acc += ranges_len(&buf);
    }
    acc
}

/// Pixel counts `(|a and b|, |a|, |b|)`.
pub fn pixel_overlap(a: &[Point], b: &[Point]) -> (u64, u64, u64) {
    if a.len() < 3 || b.len() < 3 {
        return (0, pixel_count(a), pixel_count(b));
    }
    let (ba, bb) = (BBox::of(a), BBox::of(b));
    if !ba.intersects(&bb) {
        return (0, pixel_count(a), pixel_count(b));
    }
    let (r0, r1) = row_span(&ba.union(&bb));
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for r in r0..r1 {
        let y = r as f64 + 0.5;
        row_ranges(a, y, &mut ra);
        row_ranges(b, y, &mut rb);
        na += ranges_len(&ra);
        nb += ranges_len(&rb);
        inter += ranges_overlap(&ra, &rb);
    }
    (inter, na, nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{point_in_ring, Segment};

    fn brute(ring: &[Point]) -> u64 {
        let b = BBox::of(ring);
        let mut n = 0;
        for j in (b.min_y.floor() as i64 - 1)..=(b.max_y.ceil() as i64) {
            for i in (b.min_x.floor() as i64 - 1)..=(b.max_x.ceil() as i64) {
                if point_in_ring(ring, Point::new(i as f64 + 0.5, j as f64 + 0.5)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn axis_aligned_rectangle_counts_exactly() {
        let s = Segment::new(10.0, 10.0, 8.0, 4.0, 0.0).unwrap();
        assert_eq!(pixel_count(&s.vertices()), 32);
    }

    #[test]
    fn matches_point_in_polygon_on_rotated_rects() {
        for (k, t) in [0.1, 0.7, -1.2, 1.5].iter().enumerate() {
            let s = Segment::new(20.3 + k as f64, 17.9, 23.0, 9.5, *t).unwrap();
            let v = s.vertices();
            assert_eq!(pixel_count(&v), brute(&v));
        }
    }

    #[test]
    fn overlap_of_half_shifted_rectangles() {
        let a = Segment::new(10.0, 10.0, 10.0, 10.0, 0.0).unwrap();
        let b = Segment::new(15.0, 10.0, 10.0, 10.0, 0.0).unwrap();
        assert_eq!(pixel_overlap(&a.vertices(), &b.vertices()), (50, 100, 100));
    }
}
