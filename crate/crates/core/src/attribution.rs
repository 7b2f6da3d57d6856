//! Lesion localization: Integrated Gradients attribution, salient-point
//! extraction, OPTICS density clustering and conversion of clusters into
//! circle annotations.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, GradientModel, InferenceBackend, InputTensor, OutputSelector};
use crate::par::Execution;
use crate::study::{AnnotationCircle, FundusImage};

/// Quadrature nodes used when no step count is given.
pub const DEFAULT_IG_STEPS: usize = 20;
/// Hard cap on salient points handed to clustering.
pub const MAX_SALIENT_POINTS: usize = 5_000;
/// Smallest annotation radius, in pixels.
pub const MIN_ANNOTATION_RADIUS: f64 = 5.0;
const ANNOTATION_PADDING: f64 = 2.0;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let (pn, pn1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out.reverse();
    out
}

/// Per-pixel attribution summed over RGB channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub baseline_id: String,
}

impl AttributionMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Integrated Gradients with an `steps`-node Gauss-Legendre rule on `[0, 1]`.
///
/// Steps are evaluated in batches (in parallel when `exec` allows) and
/// reduced in step order, so both execution modes agree bit for bit.
pub fn integrated_gradients(
    model: &dyn GradientModel,
    input: &InputTensor,
    baseline: &InputTensor,
    baseline_id: &str,
    output: OutputSelector,
    steps: usize,
    exec: Execution,
) -> AttributionMap {
    assert!(input.same_shape(baseline), "baseline shape differs from input");
    let nodes: Vec<(f64, f64)> = gauss_legendre(steps).into_iter().map(|(x, w)| ((x + 1.0) / 2.0, w / 2.0)).collect();
    let len = input.data.len();
    let mut acc = vec![0.0; len];
    const BATCH: usize = 4;
    for batch in nodes.chunks(BATCH) {
        let grads = exec.map(batch, |&(alpha, weight)| {
            let point = InputTensor {
                width: input.width,
                height: input.height,
                data: baseline.data.iter().zip(&input.data).map(|(b, x)| b + alpha * (x - b)).collect(),
            };
            let g = model.gradient(&point, output);
            (weight, g.data)
        });
        for (weight, g) in grads {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += weight * gi;
            }
        }
    }
    let values = acc
        .chunks_exact(3)
        .enumerate()
        .map(|(p, avg)| (0..3).map(|c| (input.data[3 * p + c] - baseline.data[3 * p + c]) * avg[c]).sum())
        .collect();
    AttributionMap { width: input.width, height: input.height, values, baseline_id: baseline_id.to_string() }
}

/// Integrated Gradients of the DR probability against an all-black baseline.
pub fn attribute_dr(
    backend: &dyn InferenceBackend,
    image: &FundusImage,
    steps: usize,
    exec: Execution,
) -> Result<AttributionMap, BackendError> {
    let model = backend.gradient_model().ok_or_else(|| BackendError::Unsupported {
        backend: backend.name().to_string(),
        operation: "gradient_attribution",
    })?;
    let input = InputTensor::from_image(image.rgb());
    let baseline = InputTensor::zeros_like(&input);
    Ok(integrated_gradients(model, &input, &baseline, "black", OutputSelector::DrProbability, steps, exec))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Neighbourhood radius in pixels.
    pub eps: f64,
    /// Minimum neighbourhood size of a core point (self included) and
    /// minimum cluster cardinality.
    pub min_size: usize,
    pub salience_percentile: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { eps: 23.0, min_size: 4, salience_percentile: 99.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalientPoint {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Pixels whose positive attribution reaches the nearest-rank
/// `salience_percentile` of all positive attributions, largest first,
/// capped at [`MAX_SALIENT_POINTS`]. Ties keep row-major order.
pub fn extract_salient_points(map: &AttributionMap, params: &ClusterParams) -> Vec<SalientPoint> {
    let mut positive: Vec<SalientPoint> = map
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &value)| SalientPoint { x: i % map.width, y: i / map.width, value })
        .collect();
    if positive.is_empty() {
        return positive;
    }
    let mut sorted: Vec<f64> = positive.iter().map(|p| p.value).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((params.salience_percentile / 100.0) * n as f64).ceil() as usize;
    let cutoff = sorted[rank.clamp(1, n) - 1];
    positive.retain(|p| p.value >= cutoff);
    // Stable sort keeps row-major order among equal values.
    positive.sort_by(|a, b| b.value.total_cmp(&a.value));
    positive.truncate(MAX_SALIENT_POINTS);
    positive
}

/// Uniform grid over the points with cell side `eps`.
struct GridIndex<'a> {
    points: &'a [(f64, f64)],
    eps: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [(f64, f64)], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            cells.entry(Self::cell(x, y, eps)).or_default().push(i);
        }
        GridIndex { points, eps, cells }
    }

    fn cell(x: f64, y: f64, eps: f64) -> (i64, i64) {
        ((x / eps).floor() as i64, (y / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i` (itself included), with distances.
    fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        let (x, y) = self.points[i];
        let (cx, cy) = Self::cell(x, y, self.eps);
        let mut out = Vec::new();
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(bucket) = self.cells.get(&(gx, gy)) {
                    for &j in bucket {
                        let (px, py) = self.points[j];
                        let d = (px - x).hypot(py - y);
                        if d <= self.eps {
                            out.push((j, d));
                        }
                    }
                }
            }
        }
        out
    }
}

/// OPTICS ordering with reachability and core distances (`INFINITY` = undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct OpticsOrdering {
    pub order: Vec<usize>,
    pub reachability: Vec<f64>,
    pub core_distance: Vec<f64>,
}

#[derive(Debug, PartialEq)]
struct Seed {
    reach: f64,
    index: usize,
}

impl Eq for Seed {}

impl Ord for Seed {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (reach, index).
        other.reach.total_cmp(&self.reach).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Seed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn optics(points: &[(f64, f64)], eps: f64, min_pts: usize) -> OpticsOrdering {
    let n = points.len();
    let index = GridIndex::new(points, eps);
    let neighborhoods: Vec<Vec<(usize, f64)>> = (0..n).map(|i| index.neighbors(i)).collect();
    let core_distance: Vec<f64> = neighborhoods
        .iter()
        .map(|nb| {
            if nb.len() < min_pts {
                f64::INFINITY
            } else {
                let mut d: Vec<f64> = nb.iter().map(|&(_, d)| d).collect();
                d.sort_by(f64::total_cmp);
                d[min_pts - 1]
            }
        })
        .collect();

    let mut reach = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for start in 0..n {
        if done[start] {
            continue;
        }
        let mut heap = BinaryHeap::new();
        heap.push(Seed { reach: f64::INFINITY, index: start });
        while let Some(Seed { reach: r, index: p }) = heap.pop() {
            if done[p] || r > reach[p] && r.is_finite() {
                continue;
            }
            done[p] = true;
            order.push(p);
            if core_distance[p].is_finite() {
                for &(q, d) in &neighborhoods[p] {
                    if done[q] {
                        continue;
                    }
                    let new_reach = core_distance[p].max(d);
                    if new_reach < reach[q] {
                        reach[q] = new_reach;
                        heap.push(Seed { reach: new_reach, index: q });
                    }
                }
            }
        }
    }
    OpticsOrdering { order, reachability: reach, core_distance }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Clustering {
    /// Member indices per cluster, each ascending; clusters ordered by
    /// descending size, then by smallest member coordinates.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Density clustering via OPTICS, extracted at the `eps` cutoff.
///
/// Core points form clusters exactly as density-connected components. A
/// border point joins the cluster of its nearest core point (ties to the
/// lexicographically smaller core coordinates), which keeps the result
/// independent of input order. Clusters smaller than `min_size` are noise.
pub fn cluster_points(points: &[(f64, f64)], params: &ClusterParams) -> Clustering {
    let n = points.len();
    if n == 0 {
        return Clustering::default();
    }
    let ord = optics(points, params.eps, params.min_size);
    let is_core: Vec<bool> = ord.core_distance.iter().map(|&c| c <= params.eps).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    for &p in &ord.order {
        if !is_core[p] {
            continue;
        }
        if ord.reachability[p] > params.eps {
            n_clusters += 1;
        }
        label[p] = Some(n_clusters - 1);
    }

    let index = GridIndex::new(points, params.eps);
    for p in 0..n {
        if is_core[p] {
            continue;
        }
        let nearest = index.neighbors(p).into_iter().filter(|&(q, _)| is_core[q]).min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| points[a.0].0.total_cmp(&points[b.0].0))
                .then_with(|| points[a.0].1.total_cmp(&points[b.0].1))
        });
        label[p] = nearest.and_then(|(q, _)| label[q]);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (p, l) in label.iter().enumerate() {
        match l {
            Some(c) => members[*c].push(p),
            None => noise.push(p),
        }
    }
    let mut clusters = Vec::new();
    for m in members {
        if m.len() >= params.min_size {
            clusters.push(m);
        } else {
            noise.extend(m);
        }
    }
    noise.sort_unstable();
    let min_coord = |c: &Vec<usize>| {
        c.iter().map(|&i| points[i]).min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(&b.1))).unwrap()
    };
    clusters.sort_by(|a, b| {
        b.len().cmp(&a.len()).then_with(|| {
            let (ma, mb) = (min_coord(a), min_coord(b));
            ma.0.total_cmp(&mb.0).then_with(|| ma.1.total_cmp(&mb.1))
        })
    });
    Clustering { clusters, noise }
}

/// One circle per cluster: centroid, radius = farthest member + padding,
/// floored at [`MIN_ANNOTATION_RADIUS`]; largest clusters first.
pub fn clusters_to_annotations(points: &[(f64, f64)], clusters: &[Vec<usize>]) -> Vec<AnnotationCircle> {
    let mut sized: Vec<(usize, AnnotationCircle)> = clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let n = c.len() as f64;
            let cx = c.iter().map(|&i| points[i].0).sum::<f64>() / n;
            let cy = c.iter().map(|&i| points[i].1).sum::<f64>() / n;
            let far = c.iter().map(|&i| (points[i].0 - cx).hypot(points[i].1 - cy)).fold(0.0, f64::max);
            (c.len(), AnnotationCircle { cx, cy, r: MIN_ANNOTATION_RADIUS.max(far + ANNOTATION_PADDING) })
        })
        .collect();
    sized.sort_by_key(|c| std::cmp::Reverse(c.0));
    sized.into_iter().map(|(_, c)| c).collect()
}

/// Attribution map to lesion circles: salient points, clustering, circles.
pub fn annotate_map(map: &AttributionMap, params: &ClusterParams) -> Vec<AnnotationCircle> {
    let salient = extract_salient_points(map, params);
    let points: Vec<(f64, f64)> = salient.iter().map(|p| (p.x as f64, p.y as f64)).collect();
    let clustering = cluster_points(&points, params);
    clusters_to_annotations(&points, &clustering.clusters)
}
