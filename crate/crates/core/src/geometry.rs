//! Axis-aligned box arithmetic, IoU, and the five-child region hierarchy.
//!
//! Boxes live in continuous pixel coordinates with the origin at the top-left
//! corner; `x1`/`y1` are exclusive. The hierarchy descends by splitting a box
//! into five children in the frozen order `[top-left, top-right, bottom-left,
//! bottom-right, center]` — movement action `i` always means "zoom into
//! child `i`".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite())
            || x0 >= x1
            || y0 >= y1
        {
            return Err(Error::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn shorter_side(&self) -> f64 {
        self.width().min(self.height())
    }

    /// Overlap area with `other`; 0 when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// The overlapping sub-box, if any.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x0 < x1 && y0 < y1 {
            Some(BBox { x0, y0, x1, y1 })
        } else {
            None
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Intersection over union; symmetric, in `[0, 1]`, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// How a parent box splits into five children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierarchyScheme {
    /// Four 2x2 quarters plus a half-size centered region.
    NonOverlapped,
    /// Five regions each 3/4 of the parent per side: four corner-anchored
    /// plus one centered. Scale shrinks slower than with quarters.
    Overlapped,
}

impl HierarchyScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "overlapped" => Ok(HierarchyScheme::Overlapped),
            "non-overlapped" => Ok(HierarchyScheme::NonOverlapped),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected 'overlapped' or 'non-overlapped')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HierarchyScheme::NonOverlapped => "non-overlapped",
            HierarchyScheme::Overlapped => "overlapped",
        }
    }
}

impl std::fmt::Display for HierarchyScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five child regions of `parent`, in the frozen order
/// `[top-left, top-right, bottom-left, bottom-right, center]`.
pub fn children(parent: &BBox, scheme: HierarchyScheme) -> [BBox; 5] {
    let (x0, y0, x1, y1) = (parent.x0, parent.y0, parent.x1, parent.y1);
    let w = parent.width();
    let h = parent.height();
    match scheme {
        HierarchyScheme::NonOverlapped => {
            let xm = x0 + w / 2.0;
            let ym = y0 + h / 2.0;
            [
                BBox { x0, y0, x1: xm, y1: ym },
                BBox { x0: xm, y0, x1, y1: ym },
                BBox { x0, y0: ym, x1: xm, y1 },
                BBox { x0: xm, y0: ym, x1, y1 },
                // Half-size box centered in the parent; same area as a quarter.
                BBox {
                    x0: x0 + w / 4.0,
                    y0: y0 + h / 4.0,
                    x1: x1 - w / 4.0,
                    y1: y1 - h / 4.0,
                },
            ]
        }
        HierarchyScheme::Overlapped => {
            let cw = 0.75 * w;
            let ch = 0.75 * h;
            [
                BBox { x0, y0, x1: x0 + cw, y1: y0 + ch },
                BBox { x0: x1 - cw, y0, x1, y1: y0 + ch },
                BBox { x0, y0: y1 - ch, x1: x0 + cw, y1 },
                BBox { x0: x1 - cw, y0: y1 - ch, x1, y1 },
                BBox {
                    x0: x0 + w / 8.0,
                    y0: y0 + h / 8.0,
                    x1: x0 + w / 8.0 + cw,
                    y1: y0 + h / 8.0 + ch,
                },
            ]
        }
    }
}

/// All hierarchy nodes from the root down to `depth` levels, breadth-first.
/// Node count is (5^(depth+1) - 1) / 4; errors out past `node_cap`.
pub fn enumerate_nodes(
    root: &BBox,
    scheme: HierarchyScheme,
    depth: usize,
    node_cap: usize,
) -> Result<Vec<BBox>> {
    let mut expected: usize = 1;
    let mut level: usize = 1;
    for _ in 0..depth {
        level = level.saturating_mul(5);
        expected = expected.saturating_add(level);
    }
    if expected > node_cap {
        return Err(Error::TreeTooLarge { nodes: expected, cap: node_cap });
    }
    let mut nodes = vec![*root];
    let mut frontier = vec![*root];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * 5);
        for parent in &frontier {
            next.extend_from_slice(&children(parent, scheme));
        }
        nodes.extend_from_slice(&next);
        frontier = next;
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Brute-force IoU by counting unit pixels on integer-coordinate boxes.
    fn pixel_count_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bbox: &BBox, px: i64, py: i64| {
            px as f64 >= bbox.x0
                && (px + 1) as f64 <= bbox.x1
                && py as f64 >= bbox.y0
                && (py + 1) as f64 <= bbox.y1
        };
        let x_lo = a.x0.min(b.x0) as i64;
        let x_hi = a.x1.max(b.x1) as i64;
        let y_lo = a.y0.min(b.y0) as i64;
        let y_hi = a.y1.max(b.y1) as i64;
        let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let ia = inside(a, px, py);
                let ib = inside(b, px, py);
                na += ia as u64;
                nb += ib as u64;
                nab += (ia && ib) as u64;
            }
        }
        if nab == 0 {
            return 0.0;
        }
        nab as f64 / (na + nb - nab) as f64
    }

    fn random_int_box(rng: &mut ChaCha8Rng, max: i64) -> BBox {
        let x0 = rng.gen_range(0..max - 1);
        let x1 = rng.gen_range(x0 + 1..max);
        let y0 = rng.gen_range(0..max - 1);
        let y1 = rng.gen_range(y0 + 1..max);
        bx(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    }

    #[test]
    fn box_invariants_enforced() {
        assert!(BBox::new(0.0, 0.0, 10.0, 10.0).is_ok());
        assert!(BBox::new(10.0, 0.0, 10.0, 5.0).is_err());
        assert!(BBox::new(3.0, 5.0, 2.0, 9.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_quarter_overlap() {
        // intersection 2500, union 17500
        let a = bx(0.0, 0.0, 100.0, 100.0);
        let b = bx(50.0, 50.0, 150.0, 150.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert!((pixel_count_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_pixel_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = random_int_box(&mut rng, 48);
            let b = random_int_box(&mut rng, 48);
            let fast = iou(&a, &b);
            let slow = pixel_count_iou(&a, &b);
            let denom = slow.max(1e-12);
            assert!(
                ((fast - slow) / denom).abs() < 1e-9,
                "iou mismatch: {fast} vs {slow} for {a:?} {b:?}"
            );
        }
    }

    #[test]
    fn iou_symmetric_bounded_and_reflexive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let a = random_int_box(&mut rng, 64);
            let b = random_int_box(&mut rng, 64);
            let ab = iou(&a, &b);
            assert!((0.0..=1.0).contains(&ab));
            assert_eq!(ab, iou(&b, &a));
            assert_eq!(iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn children_non_overlapped_examples() {
        let parent = bx(0.0, 0.0, 160.0, 160.0);
        let kids = children(&parent, HierarchyScheme::NonOverlapped);
        assert_eq!(kids[0], bx(0.0, 0.0, 80.0, 80.0));
        assert_eq!(kids[1], bx(80.0, 0.0, 160.0, 80.0));
        assert_eq!(kids[2], bx(0.0, 80.0, 80.0, 160.0));
        assert_eq!(kids[3], bx(80.0, 80.0, 160.0, 160.0));
        assert_eq!(kids[4], bx(40.0, 40.0, 120.0, 120.0));
    }

    #[test]
    fn children_overlapped_examples() {
        let parent = bx(0.0, 0.0, 160.0, 160.0);
        let kids = children(&parent, HierarchyScheme::Overlapped);
        assert_eq!(kids[0], bx(0.0, 0.0, 120.0, 120.0));
        assert_eq!(kids[1], bx(40.0, 0.0, 160.0, 120.0));
        assert_eq!(kids[2], bx(0.0, 40.0, 120.0, 160.0));
        assert_eq!(kids[3], bx(40.0, 40.0, 160.0, 160.0));
        assert_eq!(kids[4], bx(20.0, 20.0, 140.0, 140.0));
        for k in &kids {
            assert!((k.width() - 120.0).abs() < 1e-12);
            assert!((k.height() - 120.0).abs() < 1e-12);
        }
    }

    #[test]
    fn children_contained_and_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1_000 {
            let x0 = rng.gen_range(-50.0..50.0);
            let y0 = rng.gen_range(-50.0..50.0);
            let parent = bx(x0, y0, x0 + rng.gen_range(1.0..200.0), y0 + rng.gen_range(1.0..200.0));
            for scheme in [HierarchyScheme::NonOverlapped, HierarchyScheme::Overlapped] {
                for child in &children(&parent, scheme) {
                    assert!(parent.contains(child), "{child:?} not in {parent:?}");
                    assert!(child.area() < parent.area());
                }
            }
        }
    }

    #[test]
    fn quarters_tile_parent_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1_000 {
            let x0 = rng.gen_range(-20.0..20.0);
            let y0 = rng.gen_range(-20.0..20.0);
            let parent = bx(x0, y0, x0 + rng.gen_range(1.0..100.0), y0 + rng.gen_range(1.0..100.0));
            let kids = children(&parent, HierarchyScheme::NonOverlapped);
            let quarters = &kids[..4];
            let total: f64 = quarters.iter().map(|q| q.area()).sum();
            assert!((total - parent.area()).abs() < 1e-9 * parent.area());
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert_eq!(quarters[i].intersection_area(&quarters[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn overlapped_children_are_three_quarter_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..1_000 {
            let parent = bx(0.0, 0.0, rng.gen_range(1.0..300.0), rng.gen_range(1.0..300.0));
            for child in &children(&parent, HierarchyScheme::Overlapped) {
                assert!((child.width() - 0.75 * parent.width()).abs() < 1e-9);
                assert!((child.height() - 0.75 * parent.height()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn area_decay_per_descent() {
        let root = bx(0.0, 0.0, 64.0, 64.0);
        let mut region = root;
        for k in 1..=4 {
            region = children(&region, HierarchyScheme::NonOverlapped)[0];
            assert!((region.area() - root.area() * 0.25f64.powi(k)).abs() < 1e-9);
        }
        let mut region = root;
        for k in 1..=4 {
            region = children(&region, HierarchyScheme::Overlapped)[3];
            assert!((region.area() - root.area() * (9.0 / 16.0f64).powi(k)).abs() < 1e-9);
        }
    }

    #[test]
    fn enumerate_counts_and_cap() {
        let root = bx(0.0, 0.0, 64.0, 64.0);
        let nodes = enumerate_nodes(&root, HierarchyScheme::Overlapped, 3, 1_000).unwrap();
        assert_eq!(nodes.len(), 156); // 1 + 5 + 25 + 125
        assert_eq!(nodes[0], root);
        match enumerate_nodes(&root, HierarchyScheme::Overlapped, 8, 100_000) {
            Err(crate::error::Error::TreeTooLarge { nodes, cap }) => {
                assert!(nodes > cap);
            }
            other => panic!("expected TreeTooLarge, got {other:?}"),
        }
    }
}
