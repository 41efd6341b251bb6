//! Balanced binary cluster trees over scattered points.
//!
//! Clusters are split along the longest edge of their bounding box at the
//! median coordinate. Nodes are stored in breadth-first order, so parents
//! always precede their children and each level is laid out left to right.

use crate::error::{Error, Result};

/// Point set with a fixed dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    /// Builds a cloud from a list of points of identical dimension.
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty point cloud".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("points must have dimension >= 1".into()));
        }
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            data.extend_from_slice(p);
        }
        Ok(Self { dim, data })
    }

    /// Builds a cloud from row-major coordinates.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("points must have dimension >= 1".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates do not split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.iter().map(|p| p.to_vec()).collect()
    }

    /// Selects a subset of points by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        Self { dim: self.dim, data }
    }
}

/// Euclidean distance between two points.
#[inline]
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        s += t * t;
    }
    s.sqrt()
}

/// Axis-parallel box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Smallest box containing the given points of `cloud`.
    pub fn of_points<I: IntoIterator<Item = usize>>(cloud: &PointCloud, indices: I) -> Self {
        let d = cloud.dim();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for i in indices {
            for (k, &x) in cloud.point(i).iter().enumerate() {
                lower[k] = lower[k].min(x);
                upper[k] = upper[k].max(x);
            }
        }
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn diam(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(i, &x)| self.lower[i] <= x && x <= self.upper[i])
    }

    /// Euclidean distance between two boxes.
    pub fn dist(&self, other: &BoundingBox) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            let a = (self.lower[i] - other.upper[i]).max(0.0);
            let b = (other.lower[i] - self.upper[i]).max(0.0);
            s += a * a + b * b;
        }
        s.sqrt()
    }
}

/// Diameters of two boxes and their distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxMetrics {
    pub diam_a: f64,
    pub diam_b: f64,
    pub dist: f64,
}

pub fn box_metrics(a: &BoundingBox, b: &BoundingBox) -> Result<BoxMetrics> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(BoxMetrics { diam_a: a.diam(), diam_b: b.diam(), dist: a.dist(b) })
}

/// `dist(a, b) >= eta * max(diam a, diam b)`.
pub fn is_admissible(a: &BoundingBox, b: &BoundingBox, eta: f64) -> bool {
    a.dist(b) >= eta * a.diam().max(b.diam())
}

/// One node of a [`ClusterTree`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    /// Start of the node's range in the tree permutation.
    pub start: usize,
    /// End (exclusive) of the node's range.
    pub end: usize,
    pub bbox: BoundingBox,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
}

impl ClusterNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Result of splitting a point slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Indices (into the input slice) of the first son, in input order.
    pub left: Vec<usize>,
    /// Indices of the second son, in input order.
    pub right: Vec<usize>,
    pub direction: usize,
    pub median: f64,
}

/// Splits a point slice along the longest bounding-box edge.
///
/// Points above the median go left. Points equal to the median are promoted
/// left, in input order, until the left son holds `ceil(n/2)` points. All
/// remaining points go right. The median of an even count is the lower
/// middle element. A singleton or empty input yields two empty sons.
pub fn split_cluster(points: &[Vec<f64>]) -> Result<Split> {
    if points.len() < 2 {
        return Ok(Split { left: vec![], right: vec![], direction: 0, median: f64::NAN });
    }
    let cloud = PointCloud::new(points)?;
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    let bbox = BoundingBox::of_points(&cloud, 0..cloud.len());
    let mut scratch = Vec::new();
    let (n_left, direction, median) = split_in_place(&cloud, &mut idx, &bbox, &mut scratch);
    Ok(Split {
        left: idx[..n_left].to_vec(),
        right: idx[n_left..].to_vec(),
        direction,
        median,
    })
}

fn split_in_place(
    cloud: &PointCloud,
    idx: &mut [usize],
    bbox: &BoundingBox,
    scratch: &mut Vec<f64>,
) -> (usize, usize, f64) {
    let n = idx.len();
    let mut direction = 0;
    for k in 1..bbox.dim() {
        if bbox.edge(k) > bbox.edge(direction) {
            direction = k;
        }
    }
    scratch.clear();
    scratch.extend(idx.iter().map(|&i| cloud.point(i)[direction]));
    let mid = (n - 1) / 2;
    let (_, m, _) = scratch.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let median = *m;

    let cap = n.div_ceil(2);
    let above = idx.iter().filter(|&&i| cloud.point(i)[direction] > median).count();
    let mut promote = cap.saturating_sub(above);
    let mut left = Vec::with_capacity(cap);
    let mut right = Vec::with_capacity(n - cap + 1);
    for &i in idx.iter() {
        let x = cloud.point(i)[direction];
        if x > median {
            left.push(i);
        } else if x == median && promote > 0 {
            promote -= 1;
            left.push(i);
        } else {
            right.push(i);
        }
    }
    let n_left = left.len();
    idx[..n_left].copy_from_slice(&left);
    idx[n_left..].copy_from_slice(&right);
    (n_left, direction, median)
}

/// Balanced binary cluster tree.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    points: PointCloud,
    perm: Vec<usize>,
    nodes: Vec<ClusterNode>,
    leaf_threshold: usize,
    depth: usize,
}

impl ClusterTree {
    /// Builds the tree; a cluster is split while it holds at least
    /// `leaf_threshold` points. A threshold above `N` gives a single leaf.
    pub fn new(cloud: &PointCloud, leaf_threshold: usize) -> Result<Self> {
        if leaf_threshold <= 1 {
            return Err(Error::InvalidArgument(format!(
                "leaf threshold must be >= 2, got {leaf_threshold}"
            )));
        }
        if cloud.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        let n = cloud.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut nodes = vec![ClusterNode {
            start: 0,
            end: n,
            bbox: BoundingBox::of_points(cloud, 0..n),
            level: 0,
            parent: None,
            children: None,
        }];
        let mut scratch = Vec::new();
        let mut depth = 0;
        let mut cur = 0;
        while cur < nodes.len() {
            let (start, end, level) = (nodes[cur].start, nodes[cur].end, nodes[cur].level);
            depth = depth.max(level);
            if end - start >= leaf_threshold {
                let bbox = nodes[cur].bbox.clone();
                let (n_left, _, _) =
                    split_in_place(cloud, &mut perm[start..end], &bbox, &mut scratch);
                let mid = start + n_left;
                let first = nodes.len();
                for (s, e) in [(start, mid), (mid, end)] {
                    nodes.push(ClusterNode {
                        start: s,
                        end: e,
                        bbox: BoundingBox::of_points(cloud, perm[s..e].iter().copied()),
                        level: level + 1,
                        parent: Some(cur),
                        children: None,
                    });
                }
                nodes[cur].children = Some([first, first + 1]);
            }
            cur += 1;
        }
        Ok(Self { points: cloud.clone(), perm, nodes, leaf_threshold, depth })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    /// Maps tree position to input index.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Nodes in breadth-first order; the root is node 0.
    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &ClusterNode {
        &self.nodes[i]
    }

    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn leaf_threshold(&self) -> usize {
        self.leaf_threshold
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Input indices of the points of node `i`, in tree order.
    pub fn indices(&self, i: usize) -> &[usize] {
        let n = &self.nodes[i];
        &self.perm[n.start..n.end]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    pub fn is_admissible(&self, a: usize, b: usize, eta: f64) -> bool {
        is_admissible(&self.nodes[a].bbox, &self.nodes[b].bbox, eta)
    }
}

/// Fill distance, separation radius and mesh ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshMetrics {
    pub fill_distance: f64,
    pub separation_radius: f64,
    pub mesh_ratio: f64,
}

/// Computes mesh metrics. The fill distance is the maximum over
/// `domain_samples` of the distance to the nearest point of `cloud`.
pub fn mesh_metrics(cloud: &PointCloud, domain_samples: &[Vec<f64>]) -> Result<MeshMetrics> {
    if cloud.len() < 2 {
        return Err(Error::InvalidArgument("mesh metrics need at least two points".into()));
    }
    if domain_samples.is_empty() {
        return Err(Error::InvalidArgument("no domain samples".into()));
    }
    let d = cloud.dim();
    for s in domain_samples {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
    }
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| cloud.point(a)[0].total_cmp(&cloud.point(b)[0]));
    let xs: Vec<f64> = order.iter().map(|&i| cloud.point(i)[0]).collect();

    let mut min_pair = f64::INFINITY;
    for a in 0..order.len() {
        let p = cloud.point(order[a]);
        for b in a + 1..order.len() {
            if xs[b] - xs[a] >= min_pair {
                break;
            }
            min_pair = min_pair.min(distance(p, cloud.point(order[b])));
        }
    }

    let mut fill: f64 = 0.0;
    for s in domain_samples {
        let pos = xs.partition_point(|&x| x < s[0]);
        let mut best = f64::INFINITY;
        let mut up = pos;
        let mut down = pos;
        loop {
            let mut moved = false;
            if up < xs.len() && xs[up] - s[0] < best {
                best = best.min(distance(s, cloud.point(order[up])));
                up += 1;
                moved = true;
            }
            if down > 0 && s[0] - xs[down - 1] < best {
                down -= 1;
                best = best.min(distance(s, cloud.point(order[down])));
                moved = true;
            }
            if !moved {
                break;
            }
        }
        fill = fill.max(best);
    }

    let separation_radius = 0.5 * min_pair;
    let mesh_ratio = if separation_radius > 0.0 {
        fill / separation_radius
    } else {
        f64::INFINITY
    };
    Ok(MeshMetrics { fill_distance: fill, separation_radius, mesh_ratio })
}

/// `count` Halton points spread over the bounding box of `cloud`.
pub fn default_domain_samples(cloud: &PointCloud, count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    let bbox = BoundingBox::of_points(cloud, 0..cloud.len());
    (1..=count as u64)
        .map(|k| {
            (0..cloud.dim())
                .map(|i| {
                    let u = radical_inverse(k, PRIMES[i % PRIMES.len()]);
                    bbox.lower[i] + u * bbox.edge(i)
                })
                .collect()
        })
        .collect()
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut r = 0.0;
    while k > 0 {
        r += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_split() {
        let s = split_cluster(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(s.left, vec![1]);
        assert_eq!(s.right, vec![0]);
        assert_eq!(s.median, 0.0);
    }

    #[test]
    fn identical_points_split_evenly() {
        let pts = vec![vec![0.5, 0.5]; 7];
        let s = split_cluster(&pts).unwrap();
        assert_eq!(s.direction, 0);
        assert_eq!((s.left.len(), s.right.len()), (4, 3));
    }

    #[test]
    fn singleton_split_is_empty() {
        let s = split_cluster(&[vec![1.0]]).unwrap();
        assert!(s.left.is_empty() && s.right.is_empty());
    }

    #[test]
    fn rejects_small_threshold() {
        let c = PointCloud::new(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(ClusterTree::new(&c, 1).is_err());
    }

    #[test]
    fn box_distance() {
        let a = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = BoundingBox::new(vec![3.0, 3.0], vec![4.0, 4.0]).unwrap();
        let m = box_metrics(&a, &b).unwrap();
        assert!((m.dist - 8f64.sqrt()).abs() < 1e-15);
        assert!((m.diam_a - 2f64.sqrt()).abs() < 1e-15);
        assert!(is_admissible(&a, &b, 1.0));
        assert!(!is_admissible(&a, &a, 1.0));
    }

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }
}
