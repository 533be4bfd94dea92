//! Uniform quadtree over a `2^L x 2^L` grid: Morton ordering, near/far
//! classification and precomputed per-level interaction tables.
//!
//! Boxes at every level are stored in Morton order, so a box's index at its
//! level *is* its Morton code. Two boxes of the same level are neighbors when
//! their centers are less than two box widths apart in the L-infinity metric,
//! which gives the 3x3 neighborhood. The interaction list `U` of a box holds
//! the children of its parent's neighbors that are not its own neighbors.

use std::sync::Arc;

use crate::autodiff::PAD;
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::tensor::Tensor;

/// Minimum tree depth; levels 0 and 1 have no well-separated boxes.
pub const MIN_DEPTH: usize = 2;

fn spread(v: u32) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

fn compact(v: u64) -> u32 {
    let mut x = v & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x >> 16)) & 0x0000_0000_FFFF_FFFF;
    x as u32
}

/// Interleaves the bits of a box coordinate at `level`: `x` takes the even
/// (low) bits, `y` the odd bits.
pub fn morton_encode(x: u32, y: u32, level: u32) -> Result<u64> {
    let side = 1u64 << level;
    if x as u64 >= side {
        return Err(Error::Index {
            index: x as usize,
            len: side as usize,
        });
    }
    if y as u64 >= side {
        return Err(Error::Index {
            index: y as usize,
            len: side as usize,
        });
    }
    Ok(spread(x) | (spread(y) << 1))
}

pub fn morton_decode(code: u64) -> (u32, u32) {
    (compact(code), compact(code >> 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeometry {
    pub level: usize,
    pub boxes_per_side: usize,
    pub box_side: f64,
    /// Box centers in Morton order.
    pub centers: Vec<[f64; 2]>,
}

impl LevelGeometry {
    pub fn box_count(&self) -> usize {
        self.centers.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeGeometry {
    pub depth: usize,
    pub domain_side: f64,
    pub origin: [f64; 2],
    pub levels: Vec<LevelGeometry>,
}

impl TreeGeometry {
    pub fn resolution(&self) -> usize {
        1 << self.depth
    }

    pub fn leaf_count(&self) -> usize {
        1 << (2 * self.depth)
    }

    pub fn grid_spacing(&self) -> f64 {
        self.domain_side / self.resolution() as f64
    }

    pub fn total_boxes(&self) -> usize {
        self.levels.iter().map(LevelGeometry::box_count).sum()
    }

    /// Leaf pixel centers in grid (row-major) order.
    pub fn pixel_center(&self, x: usize, y: usize) -> [f64; 2] {
        let h = self.grid_spacing();
        [
            self.origin[0] + (x as f64 + 0.5) * h,
            self.origin[1] + (y as f64 + 0.5) * h,
        ]
    }

    /// Same tree translated so its lower-left corner sits at `origin`.
    pub fn with_origin(mut self, origin: [f64; 2]) -> Self {
        let shift = [origin[0] - self.origin[0], origin[1] - self.origin[1]];
        for lvl in &mut self.levels {
            for c in &mut lvl.centers {
                c[0] += shift[0];
                c[1] += shift[1];
            }
        }
        self.origin = origin;
        self
    }
}

/// Geometry of a depth-`depth` tree over `[0, domain_side]^2`.
pub fn build_geometry(depth: usize, domain_side: f64) -> Result<TreeGeometry> {
    if depth < MIN_DEPTH {
        return Err(Error::Config(format!(
            "tree depth must be at least {MIN_DEPTH}, got {depth}"
        )));
    }
    if depth > 15 {
        return Err(Error::Config(format!("tree depth {depth} is too large")));
    }
    if !(domain_side > 0.0) {
        return Err(Error::Config(format!(
            "domain side must be positive, got {domain_side}"
        )));
    }
    let levels = (0..=depth)
        .map(|level| {
            let per_side = 1usize << level;
            let b = domain_side / per_side as f64;
            let centers = (0..per_side * per_side)
                .map(|code| {
                    let (x, y) = morton_decode(code as u64);
                    [(x as f64 + 0.5) * b, (y as f64 + 0.5) * b]
                })
                .collect();
            LevelGeometry {
                level,
                boxes_per_side: per_side,
                box_side: b,
                centers,
            }
        })
        .collect();
    Ok(TreeGeometry {
        depth,
        domain_side,
        origin: [0.0, 0.0],
        levels,
    })
}

/// Near/far tables for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTables {
    pub level: usize,
    /// `N` per box, self included, sorted by Morton index.
    pub neighbors: Vec<Vec<usize>>,
    /// `U` per box, sorted by Morton index.
    pub interactions: Vec<Vec<usize>>,
    /// Parent index at level - 1.
    pub parent: Arc<[usize]>,
    /// Flattened `(target, source)` pairs of all interaction lists,
    /// target-major. These are the aggregation masks of the downward pass.
    pub pair_target: Arc<[usize]>,
    pub pair_source: Arc<[usize]>,
    /// `(dx, dy)` of each pair in box units, source minus target.
    pub pair_offset: Vec<(i32, i32)>,
    /// Morton index of the source minus that of the target.
    pub pair_morton_delta: Arc<[i64]>,
}

impl LevelTables {
    pub fn box_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn pair_count(&self) -> usize {
        self.pair_target.len()
    }

    fn rebuild_pairs(&mut self) {
        let mut t = Vec::new();
        let mut s = Vec::new();
        let mut off = Vec::new();
        let mut dm = Vec::new();
        for (tau, list) in self.interactions.iter().enumerate() {
            let (tx, ty) = morton_decode(tau as u64);
            for &sigma in list {
                let (sx, sy) = morton_decode(sigma as u64);
                t.push(tau);
                s.push(sigma);
                off.push((sx as i32 - tx as i32, sy as i32 - ty as i32));
                dm.push(sigma as i64 - tau as i64);
            }
        }
        self.pair_target = t.into();
        self.pair_source = s.into();
        self.pair_offset = off;
        self.pair_morton_delta = dm.into();
    }
}

/// Offsets of the leaf near-field stencil, row-major over `dy` then `dx`.
pub const STENCIL: [(i32, i32); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTables {
    pub depth: usize,
    /// Indexed by level; entries below level 2 carry neighbors and parents
    /// only (their interaction lists are empty).
    pub levels: Vec<LevelTables>,
    /// For each leaf (Morton order) the 9 stencil neighbors, `PAD` outside
    /// the domain. Length `4^L * 9`.
    pub near_stencil: Arc<[usize]>,
    /// `grid_order[m]` is the row-major grid index of Morton leaf `m`.
    pub grid_order: Arc<[usize]>,
    /// `morton_order[g]` is the Morton index of grid pixel `g`.
    pub morton_order: Arc<[usize]>,
}

impl InteractionTables {
    pub fn level(&self, k: usize) -> &LevelTables {
        &self.levels[k]
    }

    pub fn resolution(&self) -> usize {
        1 << self.depth
    }

    /// Drops `source` from the interaction list of `target` at `level`.
    /// Exists so verification can demonstrate that a corrupted table is
    /// caught; returns whether an entry was removed.
    pub fn remove_interaction(&mut self, level: usize, target: usize, source: usize) -> bool {
        let lt = &mut self.levels[level];
        let list = &mut lt.interactions[target];
        let Some(pos) = list.iter().position(|&s| s == source) else {
            return false;
        };
        list.remove(pos);
        lt.rebuild_pairs();
        true
    }
}

fn level_neighbors(level: usize) -> Vec<Vec<usize>> {
    let side = 1i64 << level;
    (0..(side * side) as usize)
        .map(|code| {
            let (x, y) = morton_decode(code as u64);
            let mut out = Vec::with_capacity(9);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (0..side).contains(&nx) && (0..side).contains(&ny) {
                        out.push(spread(nx as u32) as usize | (spread(ny as u32) as usize) << 1);
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

pub fn build_interaction_tables(g: &TreeGeometry) -> InteractionTables {
    let depth = g.depth;
    let mut levels: Vec<LevelTables> = Vec::with_capacity(depth + 1);
    let mut prev_neighbors: Vec<Vec<usize>> = Vec::new();
    for k in 0..=depth {
        let neighbors = level_neighbors(k);
        let n = neighbors.len();
        let parent: Vec<usize> = (0..n).map(|i| if k == 0 { 0 } else { i >> 2 }).collect();
        let interactions: Vec<Vec<usize>> = if k < MIN_DEPTH {
            vec![Vec::new(); n]
        } else {
            (0..n)
                .map(|tau| {
                    let mine = &neighbors[tau];
                    let mut list: Vec<usize> = prev_neighbors[tau >> 2]
                        .iter()
                        .flat_map(|&p| (0..4).map(move |c| 4 * p + c))
                        .filter(|s| mine.binary_search(s).is_err())
                        .collect();
                    list.sort_unstable();
                    list
                })
                .collect()
        };
        let mut lt = LevelTables {
            level: k,
            neighbors,
            interactions,
            parent: parent.into(),
            pair_target: Arc::from(Vec::new()),
            pair_source: Arc::from(Vec::new()),
            pair_offset: Vec::new(),
            pair_morton_delta: Arc::from(Vec::new()),
        };
        lt.rebuild_pairs();
        prev_neighbors = lt.neighbors.clone();
        levels.push(lt);
    }

    let side = 1i64 << depth;
    let leaves = (side * side) as usize;
    let mut stencil = Vec::with_capacity(leaves * 9);
    for code in 0..leaves {
        let (x, y) = morton_decode(code as u64);
        for (dx, dy) in STENCIL {
            let (nx, ny) = (x as i64 + dx as i64, y as i64 + dy as i64);
            if (0..side).contains(&nx) && (0..side).contains(&ny) {
                stencil.push(spread(nx as u32) as usize | (spread(ny as u32) as usize) << 1);
            } else {
                stencil.push(PAD);
            }
        }
    }
    let grid_order: Vec<usize> = (0..leaves)
        .map(|code| {
            let (x, y) = morton_decode(code as u64);
            y as usize * side as usize + x as usize
        })
        .collect();
    let mut morton_order = vec![0; leaves];
    for (m, &gidx) in grid_order.iter().enumerate() {
        morton_order[gidx] = m;
    }
    InteractionTables {
        depth,
        levels,
        near_stencil: stencil.into(),
        grid_order: grid_order.into(),
        morton_order: morton_order.into(),
    }
}

/// Leaf rows `[4^L x channels]` in Morton order.
pub fn grid_to_leaves(field: &GridField, g: &TreeGeometry) -> Result<Tensor> {
    let n = g.resolution();
    if field.resolution() != n {
        return Err(Error::shape(
            "grid_to_leaves",
            &[field.resolution(), field.resolution()],
            &[n, n],
        ));
    }
    let c = field.channels();
    let mut data = Vec::with_capacity(n * n * c);
    for code in 0..n * n {
        let (x, y) = morton_decode(code as u64);
        for ch in 0..c {
            data.push(field.get(x as usize, y as usize, ch));
        }
    }
    Tensor::new(vec![n * n, c], data)
}

/// Inverse of [`grid_to_leaves`].
pub fn leaves_to_grid(leaves: &Tensor, g: &TreeGeometry) -> Result<GridField> {
    let n = g.resolution();
    if leaves.rows() != n * n || leaves.shape().len() != 2 {
        return Err(Error::shape("leaves_to_grid", leaves.shape(), &[n * n]));
    }
    let c = leaves.cols();
    let mut field = GridField::zeros(n, c);
    for code in 0..n * n {
        let (x, y) = morton_decode(code as u64);
        for ch in 0..c {
            field.set(x as usize, y as usize, ch, leaves.row(code)[ch]);
        }
    }
    Ok(field)
}

/// Ancestor of leaf `leaf` at `level` (Morton indices).
pub fn ancestor(leaf: usize, depth: usize, level: usize) -> usize {
    leaf >> (2 * (depth - level))
}

/// Brute-force check of the FMM partition property: every ordered leaf pair
/// `(t, s)`, `t != s`, must be delivered exactly once, either by the leaf
/// neighbor list or by exactly one `(level, U)` membership of their
/// ancestors. Returns the offending pairs with their delivery counts.
pub fn partition_violations(tables: &InteractionTables) -> Vec<(usize, usize, usize)> {
    let depth = tables.depth;
    let leaves = 1usize << (2 * depth);
    let mut bad = Vec::new();
    for t in 0..leaves {
        for s in 0..leaves {
            if t == s {
                continue;
            }
            let mut count = usize::from(tables.levels[depth].neighbors[t].contains(&s));
            for k in MIN_DEPTH..=depth {
                let (at, as_) = (ancestor(t, depth, k), ancestor(s, depth, k));
                if tables.levels[k].interactions[at].contains(&as_) {
                    count += 1;
                }
            }
            if count != 1 {
                bad.push((t, s, count));
            }
        }
    }
    bad
}
