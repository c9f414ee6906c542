//! Bulk-loaded bounding-box tree over parcels with exact nearest-parcel
//! queries.
//!
//! The tree is packed once with sort-tile-recursive loading and never
//! mutated, so concurrent read-only queries need no synchronization.
//! Nearest lookup is branch-and-bound: subtree lower bounds come from the
//! node rectangle scaled by the smallest cosine factor of any descendant
//! parcel's local projection, which keeps the bound valid under every
//! per-parcel metric. Equal distances are broken by the lowest parcel id,
//! so results are independent of build order and worker count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geo::{Point, Rect, KM_PER_DEG};
use crate::landuse::Parcel;

/// Entries per leaf and fan-out of inner nodes.
const NODE_CAPACITY: usize = 8;

#[derive(Debug)]
struct Node {
    rect: Rect,
    min_cos: f64,
    /// Range into `item_order` for leaves, into `nodes` for inner nodes.
    range: std::ops::Range<usize>,
    is_leaf: bool,
}

/// Immutable spatial index over a parcel set.
#[derive(Debug)]
pub struct SpatialIndex {
    parcels: Vec<Parcel>,
    /// Parcel indices in packed leaf order.
    item_order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

/// Bulk-load an index. Fails on an empty parcel set.
pub fn build_index(parcels: Vec<Parcel>) -> Result<SpatialIndex> {
    SpatialIndex::build(parcels)
}

/// Nearest parcel to `point` as `(parcel_id, distance_km)`.
pub fn nearest_parcel(index: &SpatialIndex, point: Point) -> (&str, f64) {
    let (parcel, distance) = index.nearest(point);
    (&parcel.parcel_id, distance)
}

impl SpatialIndex {
    pub fn build(parcels: Vec<Parcel>) -> Result<Self> {
        if parcels.is_empty() {
            return Err(Error::insufficient("cannot index an empty parcel set"));
        }

        // sort-tile-recursive packing over bbox centers
        let mut order: Vec<u32> = (0..parcels.len() as u32).collect();
        let center = |i: u32| {
            let b = parcels[i as usize].bbox();
            (
                (b.min_lon + b.max_lon) / 2.0,
                (b.min_lat + b.max_lat) / 2.0,
            )
        };
        order.sort_by(|&a, &b| {
            let (ax, ay) = center(a);
            let (bx, by) = center(b);
            ax.total_cmp(&bx)
                .then(ay.total_cmp(&by))
                .then_with(|| parcels[a as usize].parcel_id.cmp(&parcels[b as usize].parcel_id))
        });

        let n = order.len();
        let leaf_count = n.div_ceil(NODE_CAPACITY);
        let slices = (leaf_count as f64).sqrt().ceil() as usize;
        let slice_len = n.div_ceil(slices.max(1));
        for slab in order.chunks_mut(slice_len.max(1)) {
            slab.sort_by(|&a, &b| {
                let (ax, ay) = center(a);
                let (bx, by) = center(b);
                ay.total_cmp(&by)
                    .then(ax.total_cmp(&bx))
                    .then_with(|| parcels[a as usize].parcel_id.cmp(&parcels[b as usize].parcel_id))
            });
        }

        let mut nodes: Vec<Node> = Vec::with_capacity(2 * leaf_count + 2);
        let mut level: Vec<usize> = Vec::with_capacity(leaf_count);
        let mut start = 0;
        while start < n {
            let end = (start + NODE_CAPACITY).min(n);
            let mut rect = Rect::empty();
            let mut min_cos = f64::INFINITY;
            for &i in &order[start..end] {
                let p = &parcels[i as usize];
                rect.expand(&p.bbox());
                min_cos = min_cos.min(p.projection().cos_factor());
            }
            level.push(nodes.len());
            nodes.push(Node {
                rect,
                min_cos,
                range: start..end,
                is_leaf: true,
            });
            start = end;
        }

        // pack consecutive nodes into parents until one root remains
        while level.len() > 1 {
            let mut next: Vec<usize> = Vec::with_capacity(level.len().div_ceil(NODE_CAPACITY));
            for group in level.chunks(NODE_CAPACITY) {
                let mut rect = Rect::empty();
                let mut min_cos = f64::INFINITY;
                for &ni in group {
                    rect.expand(&nodes[ni].rect);
                    min_cos = min_cos.min(nodes[ni].min_cos);
                }
                // children of one parent are contiguous by construction
                let range = group[0]..group[group.len() - 1] + 1;
                next.push(nodes.len());
                nodes.push(Node {
                    rect,
                    min_cos,
                    range,
                    is_leaf: false,
                });
            }
            level = next;
        }
        let root = level[0];

        Ok(SpatialIndex {
            parcels,
            item_order: order,
            nodes,
            root,
        })
    }

    pub fn parcels(&self) -> &[Parcel] {
        &self.parcels
    }

    pub fn len(&self) -> usize {
        self.parcels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parcels.is_empty()
    }

    /// Lower bound in km on the distance from `p` to any parcel under `node`.
    fn node_bound_km(&self, node: &Node, p: Point) -> f64 {
        let (dx, dy) = node.rect.gap_deg(p);
        let x = dx * node.min_cos;
        (x * x + dy * dy).sqrt() * KM_PER_DEG
    }

    /// Exact nearest parcel: zero distance for containment, otherwise the
    /// minimum boundary distance; ties broken by the lowest parcel id.
    pub fn nearest(&self, p: Point) -> (&Parcel, f64) {
        let mut best_dist = f64::INFINITY;
        let mut best_idx: usize = usize::MAX;

        let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
        heap.push(Candidate {
            bound: self.node_bound_km(&self.nodes[self.root], p),
            node: self.root,
        });

        while let Some(cand) = heap.pop() {
            if cand.bound > best_dist {
                break; // min-heap: nothing left can improve or tie
            }
            let node = &self.nodes[cand.node];
            if node.is_leaf {
                for &i in &self.item_order[node.range.clone()] {
                    let parcel = &self.parcels[i as usize];
                    let d = parcel.distance_km(p);
                    if d < best_dist
                        || (d == best_dist
                            && best_idx != usize::MAX
                            && parcel.parcel_id < self.parcels[best_idx].parcel_id)
                    {
                        best_dist = d;
                        best_idx = i as usize;
                    }
                }
            } else {
                for child in node.range.clone() {
                    let bound = self.node_bound_km(&self.nodes[child], p);
                    if bound <= best_dist {
                        heap.push(Candidate { bound, node: child });
                    }
                }
            }
        }

        (&self.parcels[best_idx], best_dist)
    }
}

/// Heap entry ordered so the smallest bound pops first.
struct Candidate {
    bound: f64,
    node: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.node == other.node
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.node.cmp(&self.node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Polygon, Ring};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(lon0: f64, lat0: f64, side: f64) -> Polygon {
        let ring: Ring = vec![
            Point::new(lon0, lat0),
            Point::new(lon0 + side, lat0),
            Point::new(lon0 + side, lat0 + side),
            Point::new(lon0, lat0 + side),
            Point::new(lon0, lat0),
        ];
        Polygon::new(ring, vec![])
    }

    fn parcel(id: &str, lon0: f64, lat0: f64, side: f64) -> Parcel {
        Parcel::new(id, square(lon0, lat0, side), "X", 1).unwrap()
    }

    /// Exhaustive scan with the same tie rule, used as the oracle.
    fn brute_force(parcels: &[Parcel], p: Point) -> (String, f64) {
        let mut best: Option<(f64, &str)> = None;
        for parcel in parcels {
            let d = parcel.distance_km(p);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && parcel.parcel_id.as_str() < bid),
            };
            if better {
                best = Some((d, &parcel.parcel_id));
            }
        }
        let (d, id) = best.unwrap();
        (id.to_string(), d)
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(
            SpatialIndex::build(vec![]),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn single_parcel_answers_every_query() {
        let index = SpatialIndex::build(vec![parcel("only", 0.0, 0.0, 1.0)]).unwrap();
        let (p, d) = index.nearest(Point::new(0.5, 0.5));
        assert_eq!(p.parcel_id, "only");
        assert_eq!(d, 0.0);
        let (p, d) = index.nearest(Point::new(50.0, 0.5));
        assert_eq!(p.parcel_id, "only");
        assert!(d > 0.0);
    }

    #[test]
    fn containment_gives_zero_distance() {
        let parcels = vec![parcel("a", 0.0, 0.0, 1.0), parcel("b", 3.0, 0.0, 1.0)];
        let index = SpatialIndex::build(parcels).unwrap();
        let (p, d) = index.nearest(Point::new(3.5, 0.5));
        assert_eq!(p.parcel_id, "b");
        assert_eq!(d, 0.0);
    }

    #[test]
    fn equidistant_tie_breaks_to_lowest_parcel_id() {
        // two unit squares, gap from x=1 to x=2; probe exactly between
        let parcels = vec![parcel("b", 2.0, 0.0, 1.0), parcel("a", -1.0, 0.0, 1.0)];
        let index = SpatialIndex::build(parcels).unwrap();
        let (p, d) = index.nearest(Point::new(0.5, 0.5));
        assert_eq!(p.parcel_id, "a");
        assert!(d > 0.0);
    }

    #[test]
    fn duplicate_rectangles_tie_break_by_id() {
        let parcels = vec![
            parcel("p2", 0.0, 0.0, 1.0),
            parcel("p1", 0.0, 0.0, 1.0),
            parcel("p3", 0.0, 0.0, 1.0),
        ];
        let index = SpatialIndex::build(parcels).unwrap();
        let (p, _) = index.nearest(Point::new(4.0, 4.0));
        assert_eq!(p.parcel_id, "p1");
        // containment ties resolve the same way
        let (p, d) = index.nearest(Point::new(0.5, 0.5));
        assert_eq!(p.parcel_id, "p1");
        assert_eq!(d, 0.0);
    }

    #[test]
    fn agrees_with_exhaustive_scan_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let parcels: Vec<Parcel> = (0..800)
            .map(|i| {
                let lon0 = rng.gen_range(-88.0..-87.0);
                let lat0 = rng.gen_range(41.0..42.0);
                let side = rng.gen_range(0.001..0.02);
                parcel(&format!("p{i:04}"), lon0, lat0, side)
            })
            .collect();
        let index = SpatialIndex::build(parcels.clone()).unwrap();
        for _ in 0..300 {
            let q = Point::new(rng.gen_range(-88.2..-86.8), rng.gen_range(40.8..42.2));
            let (got, gd) = index.nearest(q);
            let (want_id, wd) = brute_force(&parcels, q);
            assert_eq!(got.parcel_id, want_id, "probe {q:?}");
            assert!((gd - wd).abs() < 1e-9, "probe {q:?}: {gd} vs {wd}");
        }
    }

    #[test]
    fn query_results_independent_of_build_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut parcels: Vec<Parcel> = (0..200)
            .map(|i| {
                parcel(
                    &format!("p{i:03}"),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.001..0.05),
                )
            })
            .collect();
        let forward = SpatialIndex::build(parcels.clone()).unwrap();
        parcels.reverse();
        let backward = SpatialIndex::build(parcels).unwrap();
        for _ in 0..200 {
            let q = Point::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let (fp, fd) = forward.nearest(q);
            let (bp, bd) = backward.nearest(q);
            assert_eq!(fp.parcel_id, bp.parcel_id);
            assert_eq!(fd, bd);
        }
    }

    #[test]
    fn point_inside_hole_measures_distance_to_hole_ring() {
        let outer = square(0.0, 0.0, 1.0).exterior;
        let hole = square(0.4, 0.4, 0.2).exterior;
        let p = Parcel::new("h", Polygon::new(outer, vec![hole]), "X", 1).unwrap();
        let index = SpatialIndex::build(vec![p]).unwrap();
        let (_, d) = index.nearest(Point::new(0.5, 0.5));
        // center of the hole: 0.1 degrees from the hole ring
        let expect = 0.1 * KM_PER_DEG * 1.0; // lat distance, no cosine shrink on y
        assert!((d - expect).abs() / expect < 1e-2, "d = {d}");
        assert!(d > 0.0);
    }
}
