//! Exact k-d tree over fixed-dimension points.
//!
//! The tree is stored implicitly: entries are permuted so that every
//! sub-slice `[lo, hi)` has its splitting entry at the midpoint. Rebuilding
//! is `O(n log n)`, which is cheap at the sizes used here (a few thousand
//! entries at most), so inserts simply rebuild.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::math::sqrt;

#[derive(Clone, Debug)]
struct Entry<const D: usize, K> {
    point: [f64; D],
    key: K,
}

#[derive(Clone, Debug)]
pub struct KdTree<const D: usize, K> {
    entries: Vec<Entry<D, K>>,
}

/// A query hit: key and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<K> {
    pub key: K,
    pub distance: f64,
}

impl<const D: usize, K: Copy + Ord> Default for KdTree<D, K> {
    fn default() -> Self {
        KdTree { entries: Vec::new() }
    }
}

fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize, K: Copy + Ord> KdTree<D, K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build(items: impl IntoIterator<Item = ([f64; D], K)>) -> Self {
        let mut tree = KdTree {
            entries: items
                .into_iter()
                .map(|(point, key)| Entry { point, key })
                .collect(),
        };
        tree.rebuild();
        tree
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, point: [f64; D], key: K) {
        self.entries.push(Entry { point, key });
        self.rebuild();
    }

    fn rebuild(&mut self) {
        // canonical order first so the layout does not depend on insertion order
        self.entries.sort_by(|a, b| a.key.cmp(&b.key));
        let n = self.entries.len();
        build_range(&mut self.entries, 0, n, 0);
    }

    /// Single nearest neighbor, ties broken by the smaller key.
    pub fn nearest(&self, query: &[f64; D]) -> Option<Neighbor<K>> {
        let mut best: Option<(f64, K)> = None;
        self.nearest_in(query, 0, self.entries.len(), 0, &mut best);
        best.map(|(d2, key)| Neighbor {
            key,
            distance: sqrt(d2),
        })
    }

    fn nearest_in(
        &self,
        q: &[f64; D],
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut Option<(f64, K)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let e = &self.entries[mid];
        let d2 = dist_sq(&e.point, q);
        let better = match best {
            None => true,
            Some((bd, bk)) => d2 < *bd || (d2 == *bd && e.key < *bk),
        };
        if better {
            *best = Some((d2, e.key));
        }
        let axis = depth % D;
        let diff = q[axis] - e.point[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(q, near.0, near.1, depth + 1, best);
        if best.is_none_or(|(bd, _)| diff * diff <= bd) {
            self.nearest_in(q, far.0, far.1, depth + 1, best);
        }
    }

    /// Up to `k` nearest entries with distance `<= max_dist`, sorted by
    /// ascending distance then key.
    pub fn knn(&self, query: &[f64; D], k: usize, max_dist: f64) -> Vec<Neighbor<K>> {
        if k == 0 || max_dist < 0.0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, K)> = Vec::with_capacity(k + 1);
        self.knn_in(query, 0, self.entries.len(), 0, k, max_dist * max_dist, &mut heap);
        heap.into_iter()
            .map(|(d2, key)| Neighbor {
                key,
                distance: sqrt(d2),
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn knn_in(
        &self,
        q: &[f64; D],
        lo: usize,
        hi: usize,
        depth: usize,
        k: usize,
        max_sq: f64,
        heap: &mut Vec<(f64, K)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let e = &self.entries[mid];
        let d2 = dist_sq(&e.point, q);
        if d2 <= max_sq {
            let cand = (d2, e.key);
            let pos = heap.partition_point(|h| cmp_hit(h, &cand) == Ordering::Less);
            if pos < k {
                heap.insert(pos, cand);
                heap.truncate(k);
            }
        }
        let axis = depth % D;
        let diff = q[axis] - e.point[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(q, near.0, near.1, depth + 1, k, max_sq, heap);
        let bound = if heap.len() == k {
            heap[k - 1].0.min(max_sq)
        } else {
            max_sq
        };
        if diff * diff <= bound {
            self.knn_in(q, far.0, far.1, depth + 1, k, max_sq, heap);
        }
    }
}

fn cmp_hit<K: Ord>(a: &(f64, K), b: &(f64, K)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

fn build_range<const D: usize, K>(entries: &mut [Entry<D, K>], lo: usize, hi: usize, depth: usize) {
    if hi - lo <= 1 {
        return;
    }
    let axis = depth % D;
    let mid = lo + (hi - lo) / 2;
    entries[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a.point[axis].total_cmp(&b.point[axis]));
    build_range(entries, lo, mid, depth + 1);
    build_range(entries, mid + 1, hi, depth + 1);
}
