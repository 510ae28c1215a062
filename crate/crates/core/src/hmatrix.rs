//! Hierarchical matrices: cluster tree over collocation points with
//! basis-support boxes, admissible block partition, partially pivoted ACA,
//! compressed matvec and a near-field LU preconditioner.

use std::io::Write as _;
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use rayon::prelude::*;

use crate::bem::{point_kernels, BemGeometry, SourcePoints};
use crate::coupling::{BoundaryOperators, Preconditioner};
use crate::error::{Error, Result};
use crate::scalar::Vec3;
use crate::C64;

pub const DEFAULT_ETA: f64 = 2.0;
pub const DEFAULT_N_MIN: usize = 32;
pub const DEFAULT_EPSILON: f64 = 1e-6;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] }
    }

    pub fn point(p: Vec3<f64>) -> Self {
        Self { min: p, max: p }
    }

    /// Box around a ball.
    pub fn ball(c: Vec3<f64>, r: f64) -> Self {
        Self { min: c.map(|x| x - r), max: c.map(|x| x + r) }
    }

    pub fn grow(&mut self, o: &Aabb) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(o.min[i]);
            self.max[i] = self.max[i].max(o.max[i]);
        }
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0).powi(2)).sum::<f64>().sqrt()
    }

    pub fn distance(&self, o: &Aabb) -> f64 {
        (0..3)
            .map(|i| (o.min[i] - self.max[i]).max(self.min[i] - o.max[i]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.min[i] && o.max[i] <= self.max[i])
    }

    fn longest_axis(&self) -> usize {
        let ext = [0, 1, 2].map(|i| self.max[i] - self.min[i]);
        (0..3).fold(0, |b, i| if ext[i] > ext[b] { i } else { b })
    }
}

#[derive(Clone, Debug)]
pub struct Cluster {
    /// Range into `ClusterTree::perm`.
    pub start: usize,
    pub end: usize,
    /// Union of the member support boxes.
    pub bbox: Aabb,
    pub children: Option<[usize; 2]>,
    pub level: usize,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Binary cluster tree; node 0 is the root.
#[derive(Clone, Debug)]
pub struct ClusterTree {
    pub perm: Vec<usize>,
    pub nodes: Vec<Cluster>,
    pub n_min: usize,
}

/// Support box of every basis function: the union of the bounding balls of
/// the elements in its support.
pub fn support_boxes(geom: &BemGeometry) -> Vec<Aabb> {
    (0..geom.num_dofs())
        .map(|v| {
            let mut b = Aabb::point(geom.table.points[v]);
            for &e in geom.support(v) {
                let (c, r) = geom.element_ball(e);
                b.grow(&Aabb::ball(c, r));
            }
            b
        })
        .collect()
}

/// Longest-axis median bisection of the points until clusters hold at most
/// `n_min` indices.
pub fn build_cluster_tree(points: &[Vec3<f64>], boxes: &[Aabb], n_min: usize) -> Result<ClusterTree> {
    if points.len() != boxes.len() || points.is_empty() {
        return Err(Error::Dimension(format!("{} points, {} boxes", points.len(), boxes.len())));
    }
    let n_min = n_min.max(1);
    let mut tree = ClusterTree { perm: (0..points.len()).collect(), nodes: Vec::new(), n_min };
    let mut warned = false;
    tree.split(points, boxes, 0, points.len(), 0, &mut warned);
    Ok(tree)
}

impl ClusterTree {
    fn split(&mut self, points: &[Vec3<f64>], boxes: &[Aabb], start: usize, end: usize, level: usize, warned: &mut bool) -> usize {
        let mut bbox = Aabb::empty();
        let mut pbox = Aabb::empty();
        for &i in &self.perm[start..end] {
            bbox.grow(&boxes[i]);
            pbox.grow(&Aabb::point(points[i]));
        }
        let id = self.nodes.len();
        self.nodes.push(Cluster { start, end, bbox, children: None, level });
        if end - start <= self.n_min {
            return id;
        }
        if pbox.diameter() == 0.0 {
            if !*warned {
                log::warn!("{} coincident collocation points kept in one leaf", end - start);
                *warned = true;
            }
            return id;
        }
        let axis = pbox.longest_axis();
        self.perm[start..end].sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let mid = start + (end - start) / 2;
        let l = self.split(points, boxes, start, mid, level + 1, warned);
        let r = self.split(points, boxes, mid, end, level + 1, warned);
        self.nodes[id].children = Some([l, r]);
        id
    }

    pub fn indices(&self, node: usize) -> &[usize] {
        let c = &self.nodes[node];
        &self.perm[c.start..c.end]
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|c| c.level).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].children.is_none())
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// min(diam) <= eta dist.
pub fn admissible(a: &Aabb, b: &Aabb, eta: f64) -> bool {
    let d = a.distance(b);
    d > 0.0 && a.diameter().min(b.diameter()) <= eta * d
}

/// Leaves of the block tree as (row cluster, column cluster, admissible).
pub fn block_partition(tree: &ClusterTree, eta: f64) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0usize)];
    while let Some((s, t)) = stack.pop() {
        let (cs, ct) = (&tree.nodes[s], &tree.nodes[t]);
        if admissible(&cs.bbox, &ct.bbox, eta) {
            out.push((s, t, true));
            continue;
        }
        match (cs.children, ct.children) {
            (None, None) => out.push((s, t, false)),
            (Some(a), None) => stack.extend(a.iter().map(|&c| (c, t))),
            (None, Some(b)) => stack.extend(b.iter().map(|&c| (s, c))),
            (Some(a), Some(b)) => {
                for &x in &a {
                    for &y in &b {
                        stack.push((x, y));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Entry access for compression.
pub trait EntryOracle: Sync {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<C64>;
    fn row(&self, i: usize, cols: &[usize], out: &mut [C64]);
    fn col(&self, rows: &[usize], j: usize, out: &mut [C64]);
}

/// Rank-r factors with block ~ u v^T.
#[derive(Clone, Debug)]
pub struct LowRank {
    pub u: Mat<C64>,
    pub v: Mat<C64>,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

/// Partially pivoted ACA. Stops when ||u_r|| ||v_r|| <= eps ||S_r||_F;
/// returns `None` if the rank would exceed half the smaller dimension or
/// no pivot can be found on a block that is not identically zero.
pub fn aca(m: usize, n: usize, oracle: &dyn EntryOracle, rows: &[usize], cols: &[usize], eps: f64) -> Option<LowRank> {
    let max_rank = (m.min(n) / 2).max(1);
    let mut us: Vec<Vec<C64>> = Vec::new();
    let mut vs: Vec<Vec<C64>> = Vec::new();
    let mut used_rows = vec![false; m];
    let mut s2 = 0.0f64;
    let mut i = 0usize;
    let mut row = vec![ZERO; n];
    let mut col = vec![ZERO; m];
    let mut zero_rows = 0usize;
    loop {
        used_rows[i] = true;
        oracle.row(rows[i], cols, &mut row);
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[i];
            for (r, vj) in row.iter_mut().zip(v) {
                *r -= ui * vj;
            }
        }
        let (j, piv) = row.iter().enumerate().fold((0, 0.0), |b, (j, r)| if r.norm() > b.1 { (j, r.norm()) } else { b });
        if piv <= 1e-14 * s2.sqrt() / ((m * n) as f64).sqrt() || piv == 0.0 {
            zero_rows += 1;
            match used_rows.iter().position(|u| !u) {
                Some(next) if zero_rows < m.min(8) || !us.is_empty() => {
                    if !us.is_empty() && zero_rows >= 2 {
                        break;
                    }
                    i = next;
                    continue;
                }
                _ => {
                    if us.is_empty() {
                        // sampled rows vanish; only a full assembly can tell
                        return None;
                    }
                    break;
                }
            }
        }
        zero_rows = 0;
        let inv = C64::new(1.0, 0.0) / row[j];
        let v: Vec<C64> = row.iter().map(|r| r * inv).collect();
        oracle.col(rows, cols[j], &mut col);
        for (u, vv) in us.iter().zip(&vs) {
            let vj = vv[j];
            for (c, ui) in col.iter_mut().zip(u) {
                *c -= vj * ui;
            }
        }
        let u = col.clone();
        let un = u.iter().map(|x| x.norm_sqr()).sum::<f64>();
        let vn = v.iter().map(|x| x.norm_sqr()).sum::<f64>();
        let mut cross = 0.0;
        for (ul, vl) in us.iter().zip(&vs) {
            let a: C64 = ul.iter().zip(&u).map(|(x, y)| x.conj() * y).sum();
            let b: C64 = vl.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
            cross += (a * b).re;
        }
        s2 = (s2 + un * vn + 2.0 * cross).max(0.0);
        us.push(u);
        vs.push(v);
        if (un * vn).sqrt() <= eps * s2.sqrt() {
            break;
        }
        if us.len() >= max_rank {
            return None;
        }
        let last = us.last().expect("pushed");
        match (0..m).filter(|&r| !used_rows[r]).max_by(|&a, &b| last[a].norm().total_cmp(&last[b].norm())) {
            Some(next) => i = next,
            None => break,
        }
    }
    let r = us.len();
    Some(LowRank { u: Mat::from_fn(m, r, |a, l| us[l][a]), v: Mat::from_fn(n, r, |b, l| vs[l][b]) })
}

#[derive(Clone, Debug)]
pub enum BlockData {
    Dense(Mat<C64>),
    LowRank(LowRank),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub data: BlockData,
}

#[derive(Clone, Debug)]
pub struct HMatrix {
    pub tree: ClusterTree,
    pub blocks: Vec<Block>,
    pub epsilon: f64,
    pub eta: f64,
}

/// Compresses one matrix given by an entry oracle.
pub fn build_hmatrix(tree: &ClusterTree, oracle: &dyn EntryOracle, eps: f64, eta: f64) -> HMatrix {
    let parts = block_partition(tree, eta);
    let blocks = parts
        .par_iter()
        .map(|&(s, t, adm)| {
            let (ri, ci) = (tree.indices(s), tree.indices(t));
            let data = if adm {
                match aca(ri.len(), ci.len(), oracle, ri, ci, eps) {
                    Some(lr) => BlockData::LowRank(lr),
                    None => BlockData::Dense(oracle.block(ri, ci)),
                }
            } else {
                BlockData::Dense(oracle.block(ri, ci))
            };
            Block { rows: s, cols: t, data }
        })
        .collect();
    HMatrix { tree: tree.clone(), blocks, epsilon: eps, eta }
}

impl HMatrix {
    pub fn dim(&self) -> usize {
        self.tree.len()
    }

    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        let parts: Vec<(usize, Vec<C64>)> = self
            .blocks
            .par_iter()
            .map(|b| {
                let ri = self.tree.indices(b.rows);
                let ci = self.tree.indices(b.cols);
                let mut out = vec![ZERO; ri.len()];
                match &b.data {
                    BlockData::Dense(d) => {
                        for (j, &c) in ci.iter().enumerate() {
                            let xc = x[c];
                            let colj = d.col(j);
                            for (o, v) in out.iter_mut().zip(colj.iter()) {
                                *o += v * xc;
                            }
                        }
                    }
                    BlockData::LowRank(lr) => {
                        for l in 0..lr.rank() {
                            let t: C64 = ci.iter().enumerate().map(|(j, &c)| lr.v[(j, l)] * x[c]).sum();
                            for (a, o) in out.iter_mut().enumerate() {
                                *o += lr.u[(a, l)] * t;
                            }
                        }
                    }
                }
                (b.rows, out)
            })
            .collect();
        y.iter_mut().for_each(|v| *v = ZERO);
        for (s, out) in parts {
            for (&r, v) in self.tree.indices(s).iter().zip(out) {
                y[r] += v;
            }
        }
    }

    /// Stored complex numbers.
    pub fn storage(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match &b.data {
                BlockData::Dense(d) => d.nrows() * d.ncols(),
                BlockData::LowRank(lr) => lr.rank() * (lr.u.nrows() + lr.v.nrows()),
            })
            .sum()
    }

    /// Storage relative to the dense matrix.
    pub fn compression_ratio(&self) -> f64 {
        self.storage() as f64 / (self.dim() as f64).powi(2)
    }

    pub fn max_rank(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| match &b.data {
                BlockData::LowRank(lr) => Some(lr.rank()),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_dense(&self) -> Mat<C64> {
        let n = self.dim();
        let mut m = Mat::<C64>::zeros(n, n);
        for b in &self.blocks {
            let ri = self.tree.indices(b.rows);
            let ci = self.tree.indices(b.cols);
            for (a, &r) in ri.iter().enumerate() {
                for (j, &c) in ci.iter().enumerate() {
                    m[(r, c)] = match &b.data {
                        BlockData::Dense(d) => d[(a, j)],
                        BlockData::LowRank(lr) => (0..lr.rank()).map(|l| lr.u[(a, l)] * lr.v[(j, l)]).sum(),
                    };
                }
            }
        }
        m
    }

    /// Block structure as CSV: extents in the permuted ordering, kind and rank.
    pub fn write_block_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "row_start,row_end,col_start,col_end,kind,rank")?;
        for b in &self.blocks {
            let (r, c) = (&self.tree.nodes[b.rows], &self.tree.nodes[b.cols]);
            let (kind, rank) = match &b.data {
                BlockData::Dense(d) => ("dense", d.nrows().min(d.ncols())),
                BlockData::LowRank(lr) => ("lowrank", lr.rank()),
            };
            writeln!(f, "{},{},{},{},{kind},{rank}", r.start, r.end, c.start, c.end)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Entries of H and G computed together.
pub struct BemOracle<'a> {
    pub geom: &'a BemGeometry,
    pub k: f64,
}

impl BemOracle<'_> {
    fn both_block(&self, rows: &[usize], cols: &[usize]) -> (Mat<C64>, Mat<C64>) {
        let mut h = Mat::<C64>::zeros(rows.len(), cols.len());
        let mut g = Mat::<C64>::zeros(rows.len(), cols.len());
        let mut hr = vec![ZERO; cols.len()];
        let mut gr = vec![ZERO; cols.len()];
        for (i, &a) in rows.iter().enumerate() {
            self.geom.row_block(a, cols, self.k, &mut hr, &mut gr);
            for j in 0..cols.len() {
                h[(i, j)] = hr[j];
                g[(i, j)] = gr[j];
            }
        }
        (h, g)
    }
}

/// One of H and G, with the samples of both memoised so that compressing
/// the second matrix of a block reuses rows and columns of the first.
struct Part<'a, 'b> {
    inner: &'a BemOracle<'b>,
    g: bool,
    rows: &'a std::sync::Mutex<std::collections::HashMap<usize, (Vec<C64>, Vec<C64>)>>,
    cols: &'a std::sync::Mutex<std::collections::HashMap<usize, (Vec<C64>, Vec<C64>)>>,
}

impl EntryOracle for Part<'_, '_> {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<C64> {
        let (h, g) = self.inner.both_block(rows, cols);
        if self.g {
            g
        } else {
            h
        }
    }

    fn row(&self, i: usize, cols: &[usize], out: &mut [C64]) {
        let mut cache = self.rows.lock().expect("cache");
        let (h, g) = cache.entry(i).or_insert_with(|| {
            let mut h = vec![ZERO; cols.len()];
            let mut g = vec![ZERO; cols.len()];
            self.inner.geom.row_block(i, cols, self.inner.k, &mut h, &mut g);
            (h, g)
        });
        out.copy_from_slice(if self.g { g } else { h });
    }

    fn col(&self, rows: &[usize], j: usize, out: &mut [C64]) {
        let mut cache = self.cols.lock().expect("cache");
        let (h, g) = cache.entry(j).or_insert_with(|| {
            let mut h = vec![ZERO; rows.len()];
            let mut g = vec![ZERO; rows.len()];
            self.inner.geom.col_block(rows, j, self.inner.k, &mut h, &mut g);
            (h, g)
        });
        out.copy_from_slice(if self.g { g } else { h });
    }
}

/// Kernel between collocation points and quadrature points.
struct PointKernel<'a> {
    xs: Vec<Vec3<f64>>,
    src: &'a SourcePoints,
    k: f64,
    g: bool,
}

impl PointKernel<'_> {
    fn entry(&self, a: usize, i: usize) -> C64 {
        let (h, g) = point_kernels(self.xs[a], self.src.y[i], self.src.nw[i], self.src.w[i], self.k);
        if self.g {
            g
        } else {
            h
        }
    }
}

impl EntryOracle for PointKernel<'_> {
    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<C64> {
        Mat::from_fn(rows.len(), cols.len(), |a, i| self.entry(rows[a], cols[i]))
    }

    fn row(&self, a: usize, cols: &[usize], out: &mut [C64]) {
        for (o, &i) in out.iter_mut().zip(cols) {
            *o = self.entry(a, i);
        }
    }

    fn col(&self, rows: &[usize], i: usize, out: &mut [C64]) {
        for (o, &a) in out.iter_mut().zip(rows) {
            *o = self.entry(a, i);
        }
    }
}

/// ACA of the point kernel, mapped to basis columns. `None` when the
/// result would not be cheaper than the dense block.
fn point_aca(geom: &BemGeometry, rows: &[usize], ncols: usize, src: &SourcePoints, k: f64, g: bool, eps: f64) -> Option<LowRank> {
    let m = rows.len();
    let nq = src.y.len();
    let pk = PointKernel { xs: rows.iter().map(|&a| geom.table.points[a]).collect(), src, k, g };
    let local_rows: Vec<usize> = (0..m).collect();
    let local_cols: Vec<usize> = (0..nq).collect();
    let lr = aca(m, nq, &pk, &local_rows, &local_cols, eps)?;
    let r = lr.rank();
    if r * (m + ncols) >= m * ncols {
        return None;
    }
    let mut v = Mat::<C64>::zeros(ncols, r);
    for &(p, j, w) in &src.weights {
        for l in 0..r {
            v[(j, l)] += lr.v[(p, l)] * w;
        }
    }
    Some(LowRank { u: lr.u, v })
}

/// Low-rank H and G blocks, through the quadrature points when the
/// column supports allow it.
fn far_block(oracle: &BemOracle, ri: &[usize], ci: &[usize], eps: f64) -> Option<(LowRank, LowRank)> {
    use std::collections::HashMap;
    use std::sync::Mutex;
    let (geom, k) = (oracle.geom, oracle.k);
    if let Some(src) = geom.source_points(ri, ci, k) {
        let h = point_aca(geom, ri, ci.len(), &src, k, false, eps)?;
        let g = point_aca(geom, ri, ci.len(), &src, k, true, eps)?;
        return Some((h, g));
    }
    let (rows, cols) = (Mutex::new(HashMap::new()), Mutex::new(HashMap::new()));
    let hp = Part { inner: oracle, g: false, rows: &rows, cols: &cols };
    let h = aca(ri.len(), ci.len(), &hp, ri, ci, eps)?;
    let gp = Part { inner: oracle, g: true, rows: &rows, cols: &cols };
    let g = aca(ri.len(), ci.len(), &gp, ri, ci, eps)?;
    Some((h, g))
}

/// Compressed H and G of one wavenumber.
pub struct CompressedOperators {
    pub h: HMatrix,
    pub g: HMatrix,
}

/// Builds H and G on a shared cluster tree; dense blocks are computed once
/// for both matrices.
pub fn compress_bem(geom: &BemGeometry, k: f64, eps: f64, eta: f64, n_min: usize) -> Result<CompressedOperators> {
    use std::collections::HashMap;
    let tree = build_cluster_tree(&geom.table.points, &support_boxes(geom), n_min)?;
    let oracle = BemOracle { geom, k };
    let parts = block_partition(&tree, eta);
    // far field
    let low: Vec<Option<(LowRank, LowRank)>> = parts
        .par_iter()
        .map(|&(s, t, adm)| {
            let (ri, ci) = (tree.indices(s), tree.indices(t));
            // leaf-sized blocks need ranks near the dense break-even
            if !adm || ri.len().min(ci.len()) <= tree.n_min {
                return None;
            }
            far_block(&oracle, ri, ci, eps)
        })
        .collect();
    // near field, one pass over the elements per row
    let mut by_row: HashMap<usize, Vec<usize>> = HashMap::new();
    for (b, &(s, _, _)) in parts.iter().enumerate() {
        if low[b].is_none() {
            by_row.entry(s).or_default().push(b);
        }
    }
    let mut groups: Vec<(usize, Vec<usize>)> = by_row.into_iter().collect();
    groups.sort_unstable();
    let dense: Vec<Vec<(usize, Mat<C64>, Mat<C64>)>> = groups
        .par_iter()
        .map(|(s, blocks)| {
            let ri = tree.indices(*s);
            let mut cols = Vec::new();
            let mut offsets = Vec::with_capacity(blocks.len());
            for &b in blocks {
                offsets.push(cols.len());
                cols.extend_from_slice(tree.indices(parts[b].1));
            }
            let (h, g) = oracle.both_block(ri, &cols);
            blocks
                .iter()
                .zip(offsets)
                .map(|(&b, o)| {
                    let w = tree.nodes[parts[b].1].len();
                    let sub = |m: &Mat<C64>| Mat::from_fn(ri.len(), w, |i, j| m[(i, o + j)]);
                    (b, sub(&h), sub(&g))
                })
                .collect()
        })
        .collect();
    let mut hb: Vec<Option<BlockData>> = vec![None; parts.len()];
    let mut gb: Vec<Option<BlockData>> = vec![None; parts.len()];
    for (b, l) in low.into_iter().enumerate() {
        if let Some((h, g)) = l {
            hb[b] = Some(BlockData::LowRank(h));
            gb[b] = Some(BlockData::LowRank(g));
        }
    }
    for (b, h, g) in dense.into_iter().flatten() {
        hb[b] = Some(BlockData::Dense(h));
        gb[b] = Some(BlockData::Dense(g));
    }
    let collect = |v: Vec<Option<BlockData>>| -> Vec<Block> {
        v.into_iter().zip(&parts).map(|(d, &(s, t, _))| Block { rows: s, cols: t, data: d.expect("every block assembled") }).collect()
    };
    let h = HMatrix { tree: tree.clone(), blocks: collect(hb), epsilon: eps, eta };
    let g = HMatrix { tree, blocks: collect(gb), epsilon: eps, eta };
    log::info!(
        "compressed operators: H {:.1}% (max rank {}), G {:.1}% (max rank {})",
        100.0 * h.compression_ratio(),
        h.max_rank(),
        100.0 * g.compression_ratio(),
        g.max_rank()
    );
    Ok(CompressedOperators { h, g })
}

impl BoundaryOperators for CompressedOperators {
    fn dim(&self) -> usize {
        self.h.dim()
    }

    fn apply_h(&self, x: &[C64], y: &mut [C64]) {
        self.h.matvec(x, y);
    }

    fn apply_g(&self, x: &[C64], y: &mut [C64]) {
        self.g.matvec(x, y);
    }
}

/// Sparse LU of the inadmissible blocks of an H-matrix; an approximate
/// inverse for right preconditioning. Admissible blocks stored dense are
/// left out to limit fill-in.
pub struct NearFieldLu {
    lu: Lu<usize, C64>,
    n: usize,
}

impl NearFieldLu {
    pub fn new(h: &HMatrix) -> Result<Self> {
        let n = h.dim();
        let mut trip = Vec::new();
        for b in &h.blocks {
            if admissible(&h.tree.nodes[b.rows].bbox, &h.tree.nodes[b.cols].bbox, h.eta) {
                continue;
            }
            if let BlockData::Dense(d) = &b.data {
                let (ri, ci) = (h.tree.indices(b.rows), h.tree.indices(b.cols));
                for (a, &r) in ri.iter().enumerate() {
                    for (j, &c) in ci.iter().enumerate() {
                        trip.push(Triplet::new(r, c, d[(a, j)]));
                    }
                }
            }
        }
        // a zero diagonal would make the near field singular
        let diag_scale = trip.iter().map(|t| t.val.norm()).fold(0.0f64, f64::max) * 1e-12;
        let mut has_diag = vec![false; n];
        for t in &trip {
            if t.row == t.col && t.val.norm() > diag_scale {
                has_diag[t.row] = true;
            }
        }
        let missing = has_diag.iter().filter(|d| !**d).count();
        if missing > 0 {
            log::warn!("near-field preconditioner: {missing} weak diagonal entries shifted");
            for (i, _) in has_diag.iter().enumerate().filter(|(_, d)| !**d) {
                trip.push(Triplet::new(i, i, C64::new(diag_scale.max(1e-300) * 1e6, 0.0)));
            }
        }
        let a = SparseColMat::<usize, C64>::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let lu = a.sp_lu().map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { lu, n })
    }
}

impl Preconditioner for NearFieldLu {
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let mut c = Mat::<C64>::from_fn(self.n, 1, |i, _| x[i]);
        self.lu.solve_in_place(c.as_mut());
        for (i, v) in y.iter_mut().enumerate() {
            *v = c[(i, 0)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bem::{assemble_dense, QuadratureSettings, WaveContext};
    use crate::linalg::{dense_apply, gmres, rel_diff, GmresOptions};
    use crate::meshio::{l2_fit_to_target, make_sphere_control_mesh, FitOptions, SphereTarget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point_tree(points: &[Vec3<f64>], n_min: usize) -> ClusterTree {
        let boxes: Vec<Aabb> = points.iter().map(|&p| Aabb::point(p)).collect();
        build_cluster_tree(points, &boxes, n_min).unwrap()
    }

    #[test]
    fn cube_corners_give_balanced_tree() {
        let pts: Vec<Vec3<f64>> = (0..8).map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
        let t = point_tree(&pts, 1);
        assert_eq!(t.depth(), 3);
        assert_eq!(t.leaves().count(), 8);
        assert!(t.leaves().all(|l| t.nodes[l].len() == 1 && t.nodes[l].level == 3));
    }

    #[test]
    fn coincident_points_stay_in_one_leaf() {
        let pts = vec![[1.0, 2.0, 3.0]; 50];
        let t = point_tree(&pts, 4);
        assert_eq!(t.nodes.len(), 1);
    }

    /// Vertices of a subdivided icosahedron projected to the sphere.
    fn sphere_points(levels: usize) -> Vec<Vec3<f64>> {
        make_sphere_control_mesh(levels, 0.5).vertices().to_vec()
    }

    #[test]
    fn tree_invariants_on_sphere() {
        let pts = sphere_points(4);
        let boxes: Vec<Aabb> = pts.iter().map(|&p| Aabb::ball(p, 0.03)).collect();
        let t = build_cluster_tree(&pts, &boxes, 32).unwrap();
        let mut seen = vec![0; pts.len()];
        for l in t.leaves() {
            assert!(t.nodes[l].len() <= 32);
            for &i in t.indices(l) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let bound = ((pts.len() as f64 / 32.0).log2().ceil() as usize) + 3;
        assert!(t.depth() <= bound);
        for c in &t.nodes {
            if let Some([l, r]) = c.children {
                assert_eq!((t.nodes[l].start, t.nodes[l].end, t.nodes[r].end), (c.start, t.nodes[r].start, c.end));
            }
            for &i in &t.perm[c.start..c.end] {
                assert!(c.bbox.contains(&boxes[i]));
            }
        }
        for (s, u, adm) in block_partition(&t, DEFAULT_ETA) {
            if adm {
                let (a, b) = (&t.nodes[s].bbox, &t.nodes[u].bbox);
                assert!(a.diameter().min(b.diameter()) <= DEFAULT_ETA * a.distance(b));
            }
        }
    }

    /// Dense kernel matrix on point sets.
    struct Kernel<F: Fn(usize, usize) -> C64 + Sync>(F);

    impl<F: Fn(usize, usize) -> C64 + Sync> EntryOracle for Kernel<F> {
        fn block(&self, rows: &[usize], cols: &[usize]) -> Mat<C64> {
            Mat::from_fn(rows.len(), cols.len(), |i, j| (self.0)(rows[i], cols[j]))
        }
        fn row(&self, i: usize, cols: &[usize], out: &mut [C64]) {
            for (o, &j) in out.iter_mut().zip(cols) {
                *o = (self.0)(i, j);
            }
        }
        fn col(&self, rows: &[usize], j: usize, out: &mut [C64]) {
            for (o, &i) in out.iter_mut().zip(rows) {
                *o = (self.0)(i, j);
            }
        }
    }

    #[test]
    fn aca_recovers_rank_one() {
        let k = Kernel(|i: usize, j: usize| C64::new(1.0 + i as f64, 0.5) * C64::new(2.0 - j as f64 * 0.1, -1.0));
        let rows: Vec<usize> = (0..40).collect();
        let cols: Vec<usize> = (0..30).collect();
        let lr = aca(40, 30, &k, &rows, &cols, 1e-12).unwrap();
        assert_eq!(lr.rank(), 1);
        for i in 0..40 {
            for j in 0..30 {
                let v = lr.u[(i, 0)] * lr.v[(j, 0)];
                assert!((v - (k.0)(i, j)).norm() < 1e-12 * (k.0)(i, j).norm().max(1.0));
            }
        }
    }

    fn far_point_sets() -> (Vec<Vec3<f64>>, Vec<Vec3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = (0..80).map(|_| [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)]).collect();
        let b = (0..70).map(|_| [3.0 + rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)]).collect();
        (a, b)
    }

    #[test]
    fn aca_far_helmholtz_block() {
        let kk = 1.0;
        let (xa, xb) = far_point_sets();
        let kern = Kernel(|i: usize, j: usize| crate::bem::helmholtz_kernel(xa[i], xb[j], kk).unwrap());
        let rows: Vec<usize> = (0..80).collect();
        let cols: Vec<usize> = (0..70).collect();
        let dense = kern.block(&rows, &cols);
        let fro = |m: &Mat<C64>| (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        let mut last_rank = 0;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let lr = aca(80, 70, &kern, &rows, &cols, eps).unwrap();
            let approx = Mat::from_fn(80, 70, |i, j| (0..lr.rank()).map(|l| lr.u[(i, l)] * lr.v[(j, l)]).sum::<C64>());
            let err = fro(&(&approx - &dense)) / fro(&dense);
            assert!(err <= 10.0 * eps, "eps {eps}: {err:e}");
            assert!(lr.rank() >= last_rank && lr.rank() < 20);
            last_rank = lr.rank();
        }
    }

    #[test]
    fn zero_block_falls_back() {
        let k = Kernel(|_: usize, _: usize| ZERO);
        let idx: Vec<usize> = (0..10).collect();
        assert!(aca(10, 10, &k, &idx, &idx, 1e-6).is_none());
    }

    fn fitted_geometry(levels: usize) -> BemGeometry {
        let m = make_sphere_control_mesh(levels, 0.5);
        let mesh = l2_fit_to_target(&m, &SphereTarget::new(0.5), &FitOptions::default()).unwrap().mesh;
        BemGeometry::new(&mesh, QuadratureSettings::default()).unwrap()
    }

    #[test]
    fn compressed_bem_matches_dense() {
        let geom = fitted_geometry(3);
        let ctx = WaveContext::new(4.0, 1482.0, 1000.0);
        let dense = assemble_dense(&geom, &ctx);
        let n = geom.num_dofs();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Vec<C64>> = (0..10).map(|_| (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).collect();
        let mut last = [f64::INFINITY; 2];
        for eps in [1e-4, 1e-8] {
            // loose admissibility so that a mesh this small has low-rank blocks
            let c = compress_bem(&geom, ctx.k, eps, 8.0, 12).unwrap();
            if eps > 1e-5 {
                assert!(c.h.blocks.iter().any(|b| matches!(b.data, BlockData::LowRank(_))));
            }
            let mut worst = [0.0f64; 2];
            for x in &xs {
                for (w, (hm, dm)) in worst.iter_mut().zip([(&c.h, &dense.h), (&c.g, &dense.g)]) {
                    let mut a = vec![ZERO; n];
                    let mut b = vec![ZERO; n];
                    hm.matvec(x, &mut a);
                    dense_apply(dm, x, &mut b);
                    *w = w.max(rel_diff(&a, &b));
                }
            }
            for i in 0..2 {
                assert!(worst[i] <= 10.0 * eps, "eps {eps}: {worst:?}");
                assert!(worst[i] <= last[i] * 1.0000001);
            }
            last = worst;
        }
    }

    #[test]
    fn far_blocks_match_direct_assembly() {
        let geom = fitted_geometry(4);
        let k = 10.0;
        let tree = build_cluster_tree(&geom.table.points, &support_boxes(&geom), DEFAULT_N_MIN).unwrap();
        let mut far: Vec<(usize, usize)> = block_partition(&tree, DEFAULT_ETA)
            .into_iter()
            .filter(|&(s, t, adm)| adm && tree.nodes[s].len().min(tree.nodes[t].len()) > DEFAULT_N_MIN)
            .map(|(s, t, _)| (s, t))
            .collect();
        // a spread of block distances
        far.sort_by_key(|&(s, t)| (tree.nodes[s].bbox.distance(&tree.nodes[t].bbox) * 1e6) as i64);
        let picks = [far[0], far[far.len() / 2], far[far.len() - 1]];
        let oracle = BemOracle { geom: &geom, k };
        let fro = |m: &Mat<C64>| (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        for (s, t) in picks {
            let (ri, ci) = (tree.indices(s), tree.indices(t));
            let (h, g) = oracle.both_block(ri, ci);
            for eps in [1e-4, 1e-6, 1e-8] {
                let Some((lh, lg)) = far_block(&oracle, ri, ci, eps) else { continue };
                for (lr, d) in [(lh, &h), (lg, &g)] {
                    let approx = Mat::from_fn(ri.len(), ci.len(), |i, j| (0..lr.rank()).map(|l| lr.u[(i, l)] * lr.v[(j, l)]).sum::<C64>());
                    let err = fro(&(&approx - d)) / fro(d);
                    assert!(err <= 10.0 * eps, "block ({s},{t}) eps {eps}: {err:e}");
                }
            }
        }
        assert!(far_block(&oracle, tree.indices(picks[2].0), tree.indices(picks[2].1), 1e-4).is_some());
    }

    #[test]
    fn near_field_preconditioner_reduces_iterations() {
        let geom = fitted_geometry(3);
        let c = compress_bem(&geom, 2.0, 1e-8, DEFAULT_ETA, 12).unwrap();
        let n = geom.num_dofs();
        let b: Vec<C64> = (0..n).map(|i| C64::new(1.0 + (i % 7) as f64, 0.0)).collect();
        let opts = GmresOptions { tol: 1e-8, restart: 200, max_iter: 400 };
        let mut op = |x: &[C64], y: &mut [C64]| c.g.matvec(x, y);
        let plain = gmres(&b, &mut op, None, None, &opts).unwrap();
        let pre = NearFieldLu::new(&c.g).unwrap();
        let mut p = |x: &[C64], y: &mut [C64]| pre.apply(x, y);
        let mut op = |x: &[C64], y: &mut [C64]| c.g.matvec(x, y);
        let precond = gmres(&b, &mut op, Some(&mut p), None, &opts).unwrap();
        assert!(precond.iterations > 1 && 2 * precond.iterations < plain.iterations, "{} vs {}", precond.iterations, plain.iterations);
    }
}
