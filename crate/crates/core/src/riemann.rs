//! Latent geometry of a trained decoder: condition numbers and magnification
//! factors of the metric tensor, observation-space path lengths, graph
//! geodesics, interpolation smoothness, and planar grid fields.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_table;
use crate::error::{Error, Result};
use crate::flatloss::{approx_jacobian, metric_tensor};
use crate::nets::LatentDecoder;
use crate::tensor::Tensor;

/// Smallest eigenvalue accepted by [`condition_number`].
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(g: &Tensor) -> Result<Vec<f64>> {
    if g.rank() != 2 || g.rows() != g.cols() {
        return Err(Error::contract(format!(
            "metric must be square, got {:?}",
            g.shape()
        )));
    }
    let n = g.rows();
    let mut ev = match n {
        1 => vec![g.get(0, 0)],
        2 => {
            let (a, b, d) = (g.get(0, 0), 0.5 * (g.get(0, 1) + g.get(1, 0)), g.get(1, 1));
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mid - rad, mid + rad]
        }
        _ => {
            let m = DMatrix::from_row_slice(n, n, g.data());
            let sym = 0.5 * (&m + m.transpose());
            SymmetricEigen::new(sym).eigenvalues.iter().copied().collect()
        }
    };
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// `S_max / S_min` of the metric.
pub fn condition_number(g: &Tensor) -> Result<f64> {
    let ev = symmetric_eigenvalues(g)?;
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(lo > DEGENERATE_TOLERANCE) {
        return Err(Error::DegenerateMetric(format!(
            "smallest eigenvalue {lo:e} is below {DEGENERATE_TOLERANCE:e}"
        )));
    }
    Ok(hi / lo)
}

/// `√det G`, with negative determinants from rounding clamped to zero.
pub fn magnification_factor(g: &Tensor) -> Result<f64> {
    if g.rank() != 2 || g.rows() != g.cols() {
        return Err(Error::contract(format!(
            "metric must be square, got {:?}",
            g.shape()
        )));
    }
    let n = g.rows();
    let det = match n {
        1 => g.get(0, 0),
        2 => g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0),
        _ => DMatrix::from_row_slice(n, n, g.data()).determinant(),
    };
    Ok(det.max(0.0).sqrt())
}

/// Values divided by their mean.
pub fn normalised_mf(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::contract("normalising an empty list"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateMetric(format!(
            "magnification factors have mean {mean}"
        )));
    }
    Ok(values.iter().map(|v| v / mean).collect())
}

/// Mean and standard deviation (population).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Box-plot statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::contract("summary of an empty list"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let ms = MeanStd::of(&v);
        Ok(Summary {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
            mean: ms.mean,
            std: ms.std,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Condition numbers and magnification factors at a set of latent points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStatistics {
    pub condition_numbers: Vec<f64>,
    pub mf_values: Vec<f64>,
    pub normalised_mf: Vec<f64>,
    pub condition_summary: Summary,
    pub normalised_mf_summary: Summary,
}

/// Evaluates the metric at every row of `z` with forward-difference step `h`.
pub fn metric_statistics(decoder: &dyn LatentDecoder, z: &Tensor, h: f64) -> Result<MetricStatistics> {
    let mut condition_numbers = Vec::with_capacity(z.rows());
    let mut mf_values = Vec::with_capacity(z.rows());
    for j in approx_jacobian(decoder, z, h)? {
        let g = metric_tensor(&j)?;
        condition_numbers.push(condition_number(&g)?);
        mf_values.push(magnification_factor(&g)?);
    }
    let normalised = normalised_mf(&mf_values)?;
    Ok(MetricStatistics {
        condition_summary: Summary::of(&condition_numbers)?,
        normalised_mf_summary: Summary::of(&normalised)?,
        condition_numbers,
        mf_values,
        normalised_mf: normalised,
    })
}

/// A discretised latent trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub waypoints: Vec<Vec<f64>>,
}

impl LatentPath {
    pub fn new(waypoints: Vec<Vec<f64>>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::contract("a path needs at least two waypoints"));
        }
        let d = waypoints[0].len();
        if waypoints.iter().any(|w| w.len() != d || w.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract("path waypoints must be finite and of equal width"));
        }
        Ok(LatentPath { waypoints })
    }

    /// Number of segments `M`.
    pub fn segments(&self) -> usize {
        self.waypoints.len() - 1
    }

    pub fn start(&self) -> &[f64] {
        &self.waypoints[0]
    }

    pub fn end(&self) -> &[f64] {
        &self.waypoints[self.waypoints.len() - 1]
    }

    /// Euclidean length of the latent polyline.
    pub fn latent_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| euclidean(&w[0], &w[1])).sum()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.waypoints).expect("waypoints have equal width")
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `M + 1` evenly spaced points from `a` to `b`.
pub fn straight_line(a: &[f64], b: &[f64], m: usize) -> Result<LatentPath> {
    if m == 0 {
        return Err(Error::contract("a straight line needs M ≥ 1 segments"));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "straight_line",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let waypoints = (0..=m)
        .map(|k| {
            let t = k as f64 / m as f64;
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        })
        .collect();
    LatentPath::new(waypoints)
}

/// `Σ_k ‖f(γ_{k+1}) − f(γ_k)‖`.
pub fn path_length_observation(decoder: &dyn LatentDecoder, path: &LatentPath) -> Result<f64> {
    let f = decoder.decode(&path.as_tensor())?;
    Ok((0..path.segments())
        .map(|k| euclidean(f.row(k), f.row(k + 1)))
        .sum())
}

/// Axis-aligned latent region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::contract(format!("invalid bounding box {lo:?}..{hi:?}")));
        }
        Ok(BoundingBox { lo, hi })
    }

    /// Per-axis extent of the rows of `z`, widened on each side by
    /// `margin` times the extent.
    pub fn around(z: &Tensor, margin: f64) -> Result<Self> {
        if z.rows() == 0 {
            return Err(Error::contract("bounding box of no points"));
        }
        let d = z.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..z.rows() {
            for (a, &v) in z.row(i).iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        for a in 0..d {
            let pad = margin * (hi[a] - lo[a]).max(1e-6);
            lo[a] -= pad;
            hi[a] += pad;
        }
        BoundingBox::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| rng.random_range(l..h))
            .collect()
    }
}

/// Default number of graph nodes.
pub const GRAPH_NODES: usize = 3600;
/// Default number of neighbours per node.
pub const GRAPH_NEIGHBOURS: usize = 12;

/// Latent nodes joined to their nearest neighbours, weighted by the chord
/// length between decoded endpoints.
#[derive(Clone, Debug)]
pub struct GeodesicGraph {
    pub nodes: Vec<Vec<f64>>,
    /// Decoded nodes, `[node_count × N_x]`.
    decoded: Tensor,
    /// Symmetric adjacency lists `(neighbour, weight)`.
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub neighbour_count: usize,
}

/// Sizes of the connected components, largest first.
fn components(adjacency: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let mut seen = vec![false; adjacency.len()];
    let mut sizes = Vec::new();
    for s in 0..adjacency.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut size = 0;
        while let Some(u) = stack.pop() {
            size += 1;
            for &(v, _) in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

impl GeodesicGraph {
    /// Samples `node_count` uniform nodes in `bbox` and links each to its
    /// `neighbour_count` nearest nodes (links are made symmetric).
    pub fn build(
        decoder: &dyn LatentDecoder,
        bbox: &BoundingBox,
        node_count: usize,
        neighbour_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if bbox.dim() != decoder.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "build_geodesic_graph",
                lhs: vec![bbox.dim()],
                rhs: vec![decoder.latent_dim()],
            });
        }
        if node_count < 2 || neighbour_count == 0 {
            return Err(Error::contract("a graph needs at least two nodes and one neighbour"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<Vec<f64>> = (0..node_count).map(|_| bbox.sample(&mut rng)).collect();
        Self::from_nodes(decoder, nodes, neighbour_count)
    }

    /// Links the given nodes; see [`GeodesicGraph::build`].
    pub fn from_nodes(
        decoder: &dyn LatentDecoder,
        nodes: Vec<Vec<f64>>,
        neighbour_count: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        let k = neighbour_count.min(n.saturating_sub(1));
        let decoded = decoder.decode(&Tensor::from_rows(&nodes)?)?;
        let mut linked: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            dist.clear();
            dist.extend((0..n).filter(|&j| j != i).map(|j| {
                let d2: f64 = nodes[i]
                    .iter()
                    .zip(&nodes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, j)
            }));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
            for &(_, j) in &dist[..k] {
                linked[i].push(j);
                linked[j].push(i);
            }
        }
        let adjacency = linked
            .into_iter()
            .enumerate()
            .map(|(i, mut nb)| {
                nb.sort_unstable();
                nb.dedup();
                nb.into_iter()
                    .map(|j| (j, euclidean(decoded.row(i), decoded.row(j))))
                    .collect()
            })
            .collect::<Vec<Vec<(usize, f64)>>>();
        let sizes = components(&adjacency);
        if sizes.len() > 1 {
            return Err(Error::GraphConnectivity {
                components: sizes.len(),
                detail: format!(
                    "{n} nodes with {neighbour_count} neighbours split into components of sizes {:?}",
                    &sizes[..sizes.len().min(5)]
                ),
            });
        }
        Ok(GeodesicGraph {
            nodes,
            decoded,
            adjacency,
            neighbour_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nearest_node(&self, z: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = euclidean(n, z);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Shortest node sequence from `s` to `t` and its length.
    pub fn shortest_path(&self, s: usize, t: usize) -> Result<(Vec<usize>, f64)> {
        let (dist, prev) = dijkstra(&self.adjacency, s);
        if !dist[t].is_finite() {
            return Err(Error::GraphConnectivity {
                components: components(&self.adjacency).len(),
                detail: format!("node {t} is unreachable from node {s}"),
            });
        }
        let mut path = vec![t];
        let mut u = t;
        while u != s {
            u = prev[u];
            path.push(u);
        }
        path.reverse();
        Ok((path, dist[t]))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths over non-negative weights: distances and
/// predecessors (`usize::MAX` for the source and unreachable nodes).
pub fn dijkstra(adjacency: &[Vec<(usize, f64)>], source: usize) -> (Vec<f64>, Vec<usize>) {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier {
        dist: 0.0,
        node: source,
    });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adjacency[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Frontier { dist: nd, node: v });
            }
        }
    }
    (dist, prev)
}

/// A graph geodesic between two latent points.
#[derive(Clone, Debug, PartialEq)]
pub struct Geodesic {
    /// `z_a`, the graph nodes visited, `z_b`.
    pub path: LatentPath,
    /// Observation-space length.
    pub length: f64,
}

/// Approximate geodesic: each endpoint is joined to its nearest node by the
/// chord between decoded points, and the nodes are joined by a shortest path.
pub fn geodesic(
    decoder: &dyn LatentDecoder,
    graph: &GeodesicGraph,
    z_a: &[f64],
    z_b: &[f64],
) -> Result<Geodesic> {
    if z_a == z_b {
        return Ok(Geodesic {
            path: LatentPath::new(vec![z_a.to_vec(), z_b.to_vec()])?,
            length: 0.0,
        });
    }
    let ends = decoder.decode(&Tensor::from_rows(&[z_a, z_b])?)?;
    let (s, t) = (graph.nearest_node(z_a), graph.nearest_node(z_b));
    let (nodes, inner) = graph.shortest_path(s, t)?;
    let length = euclidean(ends.row(0), graph.decoded.row(s))
        + inner
        + euclidean(graph.decoded.row(t), ends.row(1));
    let mut waypoints = Vec::with_capacity(nodes.len() + 2);
    waypoints.push(z_a.to_vec());
    waypoints.extend(nodes.iter().map(|&i| graph.nodes[i].clone()));
    waypoints.push(z_b.to_vec());
    Ok(Geodesic {
        path: LatentPath::new(waypoints)?,
        length,
    })
}

/// Default number of straight-line segments.
pub const PATH_SEGMENTS: usize = 100;

/// Straight-line versus geodesic lengths over a set of endpoint pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    /// Observation length of the straight line over the geodesic length.
    pub observation: Vec<f64>,
    /// Latent distance of the endpoints over the latent length of the
    /// geodesic polyline.
    pub latent: Vec<f64>,
    pub observation_stats: MeanStd,
    pub latent_stats: MeanStd,
}

pub fn ratio_table(
    decoder: &dyn LatentDecoder,
    graph: &GeodesicGraph,
    pairs: &[(Vec<f64>, Vec<f64>)],
    m: usize,
) -> Result<RatioTable> {
    if pairs.is_empty() {
        return Err(Error::contract("ratio table needs at least one pair"));
    }
    let mut observation = Vec::with_capacity(pairs.len());
    let mut latent = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let geo = geodesic(decoder, graph, a, b)?;
        let straight = path_length_observation(decoder, &straight_line(a, b, m)?)?;
        if !(geo.length > 0.0) {
            return Err(Error::contract("ratio table pair has zero geodesic length"));
        }
        observation.push(straight / geo.length);
        latent.push(euclidean(a, b) / geo.path.latent_length());
    }
    Ok(RatioTable {
        observation_stats: MeanStd::of(&observation),
        latent_stats: MeanStd::of(&latent),
        observation,
        latent,
    })
}

/// Per output dimension: mean and standard deviation of
/// `|f(γ_{k+1}) − 2f(γ_k) + f(γ_{k−1})| / Δt²` along straight lines with
/// `t ∈ [0, 1]`, pooled over all pairs and interior waypoints.
pub fn smoothness(
    decoder: &dyn LatentDecoder,
    pairs: &[(Vec<f64>, Vec<f64>)],
    m: usize,
) -> Result<Vec<MeanStd>> {
    if m < 2 {
        return Err(Error::contract("smoothness needs M ≥ 2 segments"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("smoothness needs at least one pair"));
    }
    let inv_dt2 = (m * m) as f64;
    let mut per_dim: Vec<Vec<f64>> = Vec::new();
    for (a, b) in pairs {
        let f = decoder.decode(&straight_line(a, b, m)?.as_tensor())?;
        if per_dim.is_empty() {
            per_dim = vec![Vec::with_capacity(pairs.len() * (m - 1)); f.cols()];
        }
        for k in 1..m {
            let (p, c, n) = (f.row(k - 1), f.row(k), f.row(k + 1));
            for (d, col) in per_dim.iter_mut().enumerate() {
                col.push(((n[d] - 2.0 * c[d] + p[d]) * inv_dt2).abs());
            }
        }
    }
    Ok(per_dim.iter().map(|v| MeanStd::of(v)).collect())
}

/// Mean over output dimensions of the per-dimension smoothness means.
pub fn mean_smoothness(per_dim: &[MeanStd]) -> f64 {
    per_dim.iter().map(|s| s.mean).sum::<f64>() / per_dim.len().max(1) as f64
}

/// Scalar field on a regular planar grid; cell `(i, j)` is at
/// `(z1_i, z2_j)` and stored at `j * resolution + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn resolution(&self) -> usize {
        self.z1.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution() + i]
    }

    /// Bilinear interpolation at `p`; points outside the grid take the value
    /// at the nearest edge.
    pub fn interpolate(&self, p: &[f64]) -> f64 {
        let r = self.resolution();
        let locate = |axis: &[f64], x: f64| -> (usize, f64) {
            let step = (axis[r - 1] - axis[0]) / (r - 1) as f64;
            let u = ((x - axis[0]) / step).clamp(0.0, (r - 1) as f64);
            let i = (u.floor() as usize).min(r - 2);
            (i, u - i as f64)
        };
        let (i, a) = locate(&self.z1, p[0]);
        let (j, b) = locate(&self.z2, p[1]);
        (1.0 - a) * (1.0 - b) * self.at(i, j)
            + a * (1.0 - b) * self.at(i + 1, j)
            + (1.0 - a) * b * self.at(i, j + 1)
            + a * b * self.at(i + 1, j + 1)
    }

    /// CSV with columns `z1,z2,value`, one row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let r = self.resolution();
        let rows = (0..self.values.len()).map(|k| vec![self.z1[k % r], self.z2[k / r], self.values[k]]);
        write_table(BufWriter::new(File::create(path)?), &["z1", "z2", "value"], rows)
    }
}

fn grid_axes(bbox: &BoundingBox, resolution: usize) -> (Vec<f64>, Vec<f64>) {
    let axis = |a: usize| -> Vec<f64> {
        (0..resolution)
            .map(|i| bbox.lo[a] + (bbox.hi[a] - bbox.lo[a]) * i as f64 / (resolution - 1) as f64)
            .collect()
    };
    (axis(0), axis(1))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Grid-graph offsets `(di, dj)` with `|di|, |dj| ≤ radius` and coprime
/// components. Radius 1 is the 8-neighbourhood, radius 3 has 32 offsets.
pub fn stencil(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if (di, dj) != (0, 0) && gcd(di.unsigned_abs(), dj.unsigned_abs()) == 1 {
                out.push((di, dj));
            }
        }
    }
    out
}

/// Default grid-graph stencil radius for distance fields.
pub const DISTANCE_STENCIL: usize = 3;

/// Fields on a planar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFields {
    pub mf: GridField,
    /// `‖J_1(z)‖`, the observation-space speed along the first latent axis.
    pub speed_z1: GridField,
    /// `‖J_2(z)‖`.
    pub speed_z2: GridField,
    /// One observation-space distance field per requested centre.
    pub distance: Vec<GridField>,
}

/// Settings for [`grid_fields`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    /// Centres of the distance fields; each snaps to its nearest cell.
    pub centres: Vec<Vec<f64>>,
    pub stencil_radius: usize,
    pub jacobian_step: f64,
}

/// Magnification factor and axis-speed fields, and distance fields from
/// shortest paths over the grid graph with edge weights
/// `√(Δzᵀ G(z_mid) Δz)`.
pub fn grid_fields(decoder: &dyn LatentDecoder, bbox: &BoundingBox, spec: &GridSpec) -> Result<GridFields> {
    if decoder.latent_dim() != 2 || bbox.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            expected: 2,
            found: decoder.latent_dim(),
        });
    }
    let r = spec.resolution;
    if r < 2 {
        return Err(Error::contract("grid resolution must be at least 2"));
    }
    let (z1, z2) = grid_axes(bbox, r);
    let mut cells = Vec::with_capacity(r * r);
    for &b in &z2 {
        for &a in &z1 {
            cells.push([a, b]);
        }
    }
    let jac = approx_jacobian(decoder, &Tensor::from_rows(&cells)?, spec.jacobian_step)?;
    let mut mf = Vec::with_capacity(r * r);
    let mut s1 = Vec::with_capacity(r * r);
    let mut s2 = Vec::with_capacity(r * r);
    for j in &jac {
        mf.push(magnification_factor(&metric_tensor(j)?)?);
        let (mut a, mut b) = (0.0, 0.0);
        for d in 0..j.rows() {
            a += j.get(d, 0).powi(2);
            b += j.get(d, 1).powi(2);
        }
        s1.push(a.sqrt());
        s2.push(b.sqrt());
    }
    let field = |values: Vec<f64>| GridField {
        z1: z1.clone(),
        z2: z2.clone(),
        values,
    };

    let mut distance = Vec::with_capacity(spec.centres.len());
    if !spec.centres.is_empty() {
        let adjacency = grid_metric_graph(decoder, &z1, &z2, spec.stencil_radius, spec.jacobian_step)?;
        for c in &spec.centres {
            if c.len() != 2 {
                return Err(Error::UnsupportedDimension {
                    expected: 2,
                    found: c.len(),
                });
            }
            let ci = nearest_index(&z1, c[0]);
            let cj = nearest_index(&z2, c[1]);
            let (dist, _) = dijkstra(&adjacency, cj * r + ci);
            distance.push(field(dist));
        }
    }
    Ok(GridFields {
        mf: field(mf),
        speed_z1: field(s1),
        speed_z2: field(s2),
        distance,
    })
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, &a) in axis.iter().enumerate() {
        if (a - v).abs() < best.0 {
            best = ((a - v).abs(), i);
        }
    }
    best.1
}

/// Grid graph over the cells with Riemannian edge lengths evaluated at
/// edge midpoints.
fn grid_metric_graph(
    decoder: &dyn LatentDecoder,
    z1: &[f64],
    z2: &[f64],
    radius: usize,
    h: f64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let r = z1.len();
    let offsets: Vec<(isize, isize)> = stencil(radius.max(1))
        .into_iter()
        .filter(|&(di, dj)| dj > 0 || (dj == 0 && di > 0))
        .collect();
    let mut edges: Vec<(usize, usize, [f64; 2])> = Vec::new();
    for j in 0..r {
        for i in 0..r {
            for &(di, dj) in &offsets {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= r as isize || nj >= r as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                edges.push((j * r + i, nj * r + ni, [z1[ni] - z1[i], z2[nj] - z2[j]]));
            }
        }
    }
    let mut adjacency = vec![Vec::new(); r * r];
    const CHUNK: usize = 4096;
    for chunk in edges.chunks(CHUNK) {
        let mids: Vec<[f64; 2]> = chunk
            .iter()
            .map(|&(u, _, dz)| {
                let (i, j) = (u % r, u / r);
                [z1[i] + 0.5 * dz[0], z2[j] + 0.5 * dz[1]]
            })
            .collect();
        let jac = approx_jacobian(decoder, &Tensor::from_rows(&mids)?, h)?;
        for (&(u, v, dz), jm) in chunk.iter().zip(&jac) {
            let g = metric_tensor(jm)?;
            let q = g.get(0, 0) * dz[0] * dz[0]
                + 2.0 * g.get(0, 1) * dz[0] * dz[1]
                + g.get(1, 1) * dz[1] * dz[1];
            let w = q.max(0.0).sqrt();
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
    }
    Ok(adjacency)
}

/// Everything `analyze` reports, ready for JSON export.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub samples: usize,
    pub condition_numbers: Vec<f64>,
    pub mf_values: Vec<f64>,
    pub normalised_mf: Vec<f64>,
    pub condition_summary: Option<Summary>,
    pub normalised_mf_summary: Option<Summary>,
    pub pairs: usize,
    pub graph_nodes: usize,
    pub graph_neighbours: usize,
    pub ratio_observation: Option<MeanStd>,
    pub ratio_latent: Option<MeanStd>,
    pub smoothness: Vec<MeanStd>,
    pub smoothness_mean: Option<f64>,
}

impl AnalysisReport {
    pub fn set_metric_statistics(&mut self, stats: MetricStatistics) {
        self.samples = stats.condition_numbers.len();
        self.condition_summary = Some(stats.condition_summary);
        self.normalised_mf_summary = Some(stats.normalised_mf_summary);
        self.condition_numbers = stats.condition_numbers;
        self.mf_values = stats.mf_values;
        self.normalised_mf = stats.normalised_mf;
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(|e| Error::Io(e.into()))
    }
}

/// Index of the equal-width bin of `[lo, hi)` holding each value; values at
/// or beyond the edges go to the outer bins.
pub fn bin_labels(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<usize>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::contract(format!("cannot split [{lo}, {hi}) into {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    Ok(values
        .iter()
        .map(|&v| (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1))
        .collect())
}

/// Mean row of `z` for each label, in increasing label order; labels without
/// rows are skipped.
pub fn cluster_centroids(z: &Tensor, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    if labels.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            op: "cluster_centroids",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; z.cols()]; groups];
    let mut counts = vec![0usize; groups];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

/// Midpoint of every unordered pair of distinct points.
pub fn pairwise_midpoints(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (a, p) in points.iter().enumerate() {
        for q in &points[a + 1..] {
            out.push(p.iter().zip(q).map(|(x, y)| 0.5 * (x + y)).collect());
        }
    }
    out
}

/// `n` random pairs of distinct rows of `z`.
pub fn random_pairs(z: &Tensor, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if z.rows() < 2 {
        return Err(Error::contract("pairs need at least two points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let a = rng.random_range(0..z.rows());
            let mut b = rng.random_range(0..z.rows() - 1);
            if b >= a {
                b += 1;
            }
            (z.row(a).to_vec(), z.row(b).to_vec())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::FnDecoder;

    fn m2(a: f64, b: f64, d: f64) -> Tensor {
        Tensor::from_rows(&[[a, b], [b, d]]).unwrap()
    }

    #[test]
    fn condition_number_reference_values() {
        assert_eq!(condition_number(&Tensor::identity(2)).unwrap(), 1.0);
        assert_eq!(condition_number(&m2(1.0, 0.0, 4.0)).unwrap(), 4.0);
        assert!((condition_number(&m2(2.0, 1.0, 2.0)).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(
            condition_number(&m2(1.0, 0.0, 0.0)),
            Err(Error::DegenerateMetric(_))
        ));
        let g3 = Tensor::from_rows(&[[2.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!((condition_number(&g3).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mf_reference_values() {
        assert_eq!(magnification_factor(&Tensor::identity(2)).unwrap(), 1.0);
        assert_eq!(magnification_factor(&m2(4.0, 0.0, 9.0)).unwrap(), 6.0);
        assert_eq!(normalised_mf(&[2.0, 2.0, 2.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(normalised_mf(&[1.0, 3.0]).unwrap(), vec![0.5, 1.5]);
        assert!(normalised_mf(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn straight_line_and_lengths() {
        let p = straight_line(&[0.0, 0.0], &[3.0, 4.0], 1).unwrap();
        assert_eq!(p.waypoints.len(), 2);
        let p = straight_line(&[0.0, 0.0], &[3.0, 4.0], 10).unwrap();
        assert_eq!(p.waypoints[5], vec![1.5, 2.0]);
        assert!((p.latent_length() - 5.0).abs() < 1e-12);
        let double = FnDecoder::new(2, |z: &[f64]| vec![2.0 * z[0], 2.0 * z[1]]);
        let p = straight_line(&[0.0, 0.0], &[0.6, 0.8], 7).unwrap();
        assert!((path_length_observation(&double, &p).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dijkstra_prefers_two_cheap_hops() {
        let adj = vec![
            vec![(1, 1.0), (2, 3.0)],
            vec![(0, 1.0), (2, 1.0)],
            vec![(0, 3.0), (1, 1.0)],
        ];
        let (d, prev) = dijkstra(&adj, 0);
        assert_eq!(d[2], 2.0);
        assert_eq!(prev[2], 1);
    }

    #[test]
    fn two_node_graph_has_one_chord() {
        let id = FnDecoder::new(2, |z: &[f64]| z.to_vec());
        let g = GeodesicGraph::from_nodes(&id, vec![vec![0.0, 0.0], vec![3.0, 4.0]], 1).unwrap();
        assert_eq!(g.adjacency[0], vec![(1, 5.0)]);
        assert_eq!(g.adjacency[1], vec![(0, 5.0)]);
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let id = FnDecoder::new(2, |z: &[f64]| z.to_vec());
        let nodes = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![9.0, 9.0], vec![9.1, 9.0]];
        let err = GeodesicGraph::from_nodes(&id, nodes, 1).unwrap_err();
        assert!(matches!(err, Error::GraphConnectivity { components: 2, .. }));
    }

    #[test]
    fn stencil_sizes() {
        assert_eq!(stencil(1).len(), 8);
        assert_eq!(stencil(2).len(), 16);
        assert_eq!(stencil(3).len(), 32);
    }

    #[test]
    fn grid_fields_need_planar_latents() {
        let dec = FnDecoder::new(3, |z: &[f64]| z.to_vec());
        let bbox = BoundingBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let spec = GridSpec {
            resolution: 4,
            centres: vec![],
            stencil_radius: 1,
            jacobian_step: 1e-4,
        };
        assert!(matches!(
            grid_fields(&dec, &bbox, &spec),
            Err(Error::UnsupportedDimension { expected: 2, found: 3 })
        ));
    }
}
