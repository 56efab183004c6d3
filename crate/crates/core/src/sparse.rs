//! Block-sparse symmetric solver for the normal equations of a pose graph.
//!
//! Poses are reordered with reverse Cuthill-McKee so that chains and sparse
//! loop closures keep a narrow profile, then the system is factorized with an
//! envelope (skyline) Cholesky decomposition.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use crate::linalg::Mat3;
use crate::math::{abs, sqrt};

/// `H x = b` with `H` made of 3x3 blocks.
#[derive(Clone, Debug)]
pub(crate) struct BlockSystem {
    pub n: usize,
    pub diag: Vec<Mat3>,
    /// Lower off-diagonal blocks keyed by `(row, col)` with `row > col`.
    pub off: BTreeMap<(usize, usize), Mat3>,
    pub rhs: Vec<[f64; 3]>,
}

impl BlockSystem {
    pub fn new(n: usize) -> BlockSystem {
        BlockSystem {
            n,
            diag: alloc::vec![Mat3::ZERO; n],
            off: BTreeMap::new(),
            rhs: alloc::vec![[0.0; 3]; n],
        }
    }

    /// Adds `block` at `(i, j)`; for `i != j` the transposed block is implied.
    pub fn add_block(&mut self, i: usize, j: usize, block: &Mat3) {
        if i == j {
            self.diag[i] = self.diag[i] + *block;
        } else if i > j {
            let e = self.off.entry((i, j)).or_insert(Mat3::ZERO);
            *e = *e + *block;
        } else {
            let e = self.off.entry((j, i)).or_insert(Mat3::ZERO);
            *e = *e + block.transpose();
        }
    }

    pub fn add_rhs(&mut self, i: usize, v: &[f64; 3]) {
        for k in 0..3 {
            self.rhs[i][k] += v[k];
        }
    }
}

/// Reverse Cuthill-McKee permutation: `order[new] = old`.
fn rcm_order(n: usize, off: &BTreeMap<(usize, usize), Mat3>) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); n];
    for &(i, j) in off.keys() {
        adj[i].insert(j);
        adj[j].insert(i);
    }
    let mut visited = alloc::vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        let start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (adj[v].len(), v));
        let Some(start) = start else { break };
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (adj[u].len(), u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct NotPositiveDefinite;

/// Solves `(H + damping * diag(H)) x = rhs`.
pub(crate) fn solve(sys: &BlockSystem, damping: f64) -> Result<Vec<[f64; 3]>, NotPositiveDefinite> {
    let n = sys.n;
    let order = rcm_order(n, &sys.off);
    let mut pos = alloc::vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    // first nonzero block column of every permuted block row
    let mut first_block: Vec<usize> = (0..n).collect();
    for &(i, j) in sys.off.keys() {
        let (a, b) = (pos[i], pos[j]);
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        first_block[hi] = first_block[hi].min(lo);
    }
    let dim = 3 * n;
    let first: Vec<usize> = (0..dim).map(|r| 3 * first_block[r / 3]).collect();
    let mut rows: Vec<Vec<f64>> = (0..dim).map(|r| alloc::vec![0.0; r - first[r] + 1]).collect();

    let put = |r: usize, c: usize, v: f64, rows: &mut Vec<Vec<f64>>| {
        // lower triangle only
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        rows[r][c - first[r]] += v;
    };
    for (old, d) in sys.diag.iter().enumerate() {
        let b = 3 * pos[old];
        for k in 0..3 {
            for l in 0..=k {
                let mut v = d.0[k][l];
                if k == l {
                    v *= 1.0 + damping;
                }
                put(b + k, b + l, v, &mut rows);
            }
        }
    }
    for (&(i, j), blk) in &sys.off {
        let (bi, bj) = (3 * pos[i], 3 * pos[j]);
        for k in 0..3 {
            for l in 0..3 {
                let (r, c) = (bi + k, bj + l);
                if r > c {
                    put(r, c, blk.0[k][l], &mut rows);
                } else {
                    // block stored as (i, j) with i > j in the original order
                    put(c, r, blk.0[k][l], &mut rows);
                }
            }
        }
    }

    // envelope Cholesky in place
    for i in 0..dim {
        let fi = first[i];
        for j in fi..=i {
            let fj = first[j];
            let start = fi.max(fj);
            let mut s = rows[i][j - fi];
            for k in start..j {
                s -= rows[i][k - fi] * rows[j][k - fj];
            }
            if i == j {
                let scale = abs(rows[i][i - fi]).max(1e-300);
                let orig = original_diag(sys, &order, i, damping);
                if !(s > 1e-12 * orig.max(scale)) {
                    return Err(NotPositiveDefinite);
                }
                rows[i][i - fi] = sqrt(s);
            } else {
                rows[i][j - fi] = s / rows[j][j - fj];
            }
        }
    }

    let mut y: Vec<f64> = (0..dim).map(|r| sys.rhs[order[r / 3]][r % 3]).collect();
    for i in 0..dim {
        let fi = first[i];
        let mut s = y[i];
        for k in fi..i {
            s -= rows[i][k - fi] * y[k];
        }
        y[i] = s / rows[i][i - fi];
    }
    for i in (0..dim).rev() {
        let fi = first[i];
        y[i] /= rows[i][i - fi];
        let xi = y[i];
        for k in fi..i {
            y[k] -= rows[i][k - fi] * xi;
        }
    }
    let mut out = alloc::vec![[0.0; 3]; n];
    for r in 0..dim {
        out[order[r / 3]][r % 3] = y[r];
    }
    Ok(out)
}

fn original_diag(sys: &BlockSystem, order: &[usize], row: usize, damping: f64) -> f64 {
    let d = sys.diag[order[row / 3]].0[row % 3][row % 3];
    abs(d * (1.0 + damping))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense(sys: &BlockSystem, damping: f64) -> Vec<Vec<f64>> {
        let dim = 3 * sys.n;
        let mut m = alloc::vec![alloc::vec![0.0; dim]; dim];
        for (i, d) in sys.diag.iter().enumerate() {
            for k in 0..3 {
                for l in 0..3 {
                    m[3 * i + k][3 * i + l] = d.0[k][l] * if k == l { 1.0 + damping } else { 1.0 };
                }
            }
        }
        for (&(i, j), b) in &sys.off {
            for k in 0..3 {
                for l in 0..3 {
                    m[3 * i + k][3 * j + l] = b.0[k][l];
                    m[3 * j + l][3 * i + k] = b.0[k][l];
                }
            }
        }
        m
    }

    #[test]
    fn matches_dense_product_on_random_spd_systems() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 2 + trial * 3;
            let mut sys = BlockSystem::new(n);
            // chain plus random long edges, each contributing a PSD term J^T J
            let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i, i - 1)).collect();
            for _ in 0..n / 3 {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b {
                    edges.push((a.max(b), a.min(b)));
                }
            }
            for (a, b) in edges {
                let ja = Mat3(core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0))));
                let jb = Mat3(core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0))));
                sys.add_block(a, a, &(ja.transpose() * ja));
                sys.add_block(b, b, &(jb.transpose() * jb));
                sys.add_block(a, b, &(ja.transpose() * jb));
            }
            sys.add_block(0, 0, &Mat3::IDENTITY);
            for i in 0..n {
                sys.add_rhs(i, &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                sys.add_block(i, i, &Mat3::IDENTITY.scale(0.1));
            }
            let x = solve(&sys, 1e-3).unwrap();
            let m = dense(&sys, 1e-3);
            for r in 0..3 * n {
                let ax: f64 = (0..3 * n).map(|c| m[r][c] * x[c / 3][c % 3]).sum();
                assert!((ax - sys.rhs[r / 3][r % 3]).abs() < 1e-8, "trial {trial} row {r}");
            }
        }
    }

    #[test]
    fn singular_system_is_reported() {
        let mut sys = BlockSystem::new(2);
        let j = Mat3::IDENTITY;
        sys.add_block(0, 0, &j);
        sys.add_block(1, 1, &j);
        sys.add_block(1, 0, &j.scale(-1.0));
        assert_eq!(solve(&sys, 0.0), Err(NotPositiveDefinite));
    }
}
