//! Per-slice Betti numbers of label masks.
//!
//! Each 2D slice is binarized per label and treated as a union of closed unit
//! squares (one per foreground pixel). Under that cubical complex, foreground
//! connectivity is 8-adjacency and the complement is 4-connected, so
//! `β0 - β1 = χ = V - E + F` holds exactly. β1 counts background components
//! that do not touch the slice border.

use ndarray::{ArrayView2, ArrayView3, Axis};

use crate::error::{LadError, Result};
use crate::volume::{LabelMask, NUM_LABELS};

/// Disjoint-set forest with path compression and union by rank.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Returns true when `a` and `b` were in different sets.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// `(β0, β1)` of a binary slice.
pub fn betti_2d(slice: ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = slice.dim();
    let idx = |y: usize, x: usize| y * w + x;

    let mut fg = UnionFind::new(h * w);
    let mut fg_count = 0usize;
    let mut merges = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !slice[[y, x]] {
                continue;
            }
            fg_count += 1;
            // already-scanned 8-neighbours: W, NW, N, NE
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push((y, x - 1));
            }
            if y > 0 {
                if x > 0 {
                    nb.push((y - 1, x - 1));
                }
                nb.push((y - 1, x));
                if x + 1 < w {
                    nb.push((y - 1, x + 1));
                }
            }
            for (ny, nx) in nb {
                if slice[[ny, nx]] && fg.union(idx(y, x), idx(ny, nx)) {
                    merges += 1;
                }
            }
        }
    }
    let beta0 = fg_count - merges;

    let mut bg = UnionFind::new(h * w);
    for y in 0..h {
        for x in 0..w {
            if slice[[y, x]] {
                continue;
            }
            if x > 0 && !slice[[y, x - 1]] {
                bg.union(idx(y, x), idx(y, x - 1));
            }
            if y > 0 && !slice[[y - 1, x]] {
                bg.union(idx(y, x), idx(y - 1, x));
            }
        }
    }
    let mut roots = vec![false; h * w];
    let mut touches_border = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if slice[[y, x]] {
                continue;
            }
            let r = bg.find(idx(y, x));
            roots[r] = true;
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                touches_border[r] = true;
            }
        }
    }
    let beta1 = (0..h * w).filter(|&r| roots[r] && !touches_border[r]).count();
    (beta0, beta1)
}

/// Euler characteristic `V - E + F` of the union of closed unit squares, one
/// per foreground pixel. Vertices and edges shared by several squares count once.
pub fn euler_characteristic(slice: ArrayView2<bool>) -> i64 {
    let (h, w) = slice.dim();
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && slice[[y as usize, x as usize]];
    let faces = slice.iter().filter(|v| **v).count() as i64;
    let mut vertices = 0i64;
    for vy in 0..=h as isize {
        for vx in 0..=w as isize {
            if on(vy - 1, vx - 1) || on(vy - 1, vx) || on(vy, vx - 1) || on(vy, vx) {
                vertices += 1;
            }
        }
    }
    let mut edges = 0i64;
    // horizontal edges on lattice row vy between columns vx and vx+1
    for vy in 0..=h as isize {
        for vx in 0..w as isize {
            if on(vy - 1, vx) || on(vy, vx) {
                edges += 1;
            }
        }
    }
    // vertical edges on lattice column vx between rows vy and vy+1
    for vy in 0..h as isize {
        for vx in 0..=w as isize {
            if on(vy, vx - 1) || on(vy, vx) {
                edges += 1;
            }
        }
    }
    vertices - edges + faces
}

/// `(β0, β1)` for labels 0, 1, 2 in that order.
pub type SliceTopoVector = [u32; 6];

pub fn structure_vector_slice(slice: ArrayView2<u8>) -> Result<SliceTopoVector> {
    if let Some(v) = slice.iter().find(|v| **v as usize >= NUM_LABELS) {
        return Err(LadError::Data(format!("label {v} outside {{0,1,2}}")));
    }
    let mut out = [0u32; 6];
    for label in 0..NUM_LABELS as u8 {
        let bin = slice.mapv(|v| v == label);
        let (b0, b1) = betti_2d(bin.view());
        out[2 * label as usize] = b0 as u32;
        out[2 * label as usize + 1] = b1 as u32;
    }
    Ok(out)
}

/// Concatenation of per-slice vectors in increasing depth; length `6 * D`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeTopoVector(pub Vec<u32>);

impl VolumeTopoVector {
    pub fn slice(&self, z: usize) -> &[u32] {
        &self.0[6 * z..6 * z + 6]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn structure_vector_volume(mask: &LabelMask) -> VolumeTopoVector {
    structure_vector_view(mask.data().view()).expect("LabelMask holds only valid labels")
}

pub(crate) fn structure_vector_view(data: ArrayView3<u8>) -> Result<VolumeTopoVector> {
    let mut out = Vec::with_capacity(6 * data.len_of(Axis(0)));
    for slice in data.axis_iter(Axis(0)) {
        out.extend_from_slice(&structure_vector_slice(slice)?);
    }
    Ok(VolumeTopoVector(out))
}
