//! Lloyd's k-means as a fixpoint over points stored as non-empty cells.
//!
//! The cluster id is an int64 `label` attribute; the group-by-label
//! aggregate yields one centroid per cluster over a 1-D cluster-id array.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{ArraySchema, Attribute, ChunkedArray, Scalar, ScalarKind};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::Expr;
use crate::fixpoint::{self, nearest, AssignmentFunction, Delta, FixPointSpec, IterationTrace, Outcome};
use crate::ops::{self, AggKind, AggregateSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansParams {
    pub k_clusters: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

impl KMeansParams {
    pub fn new(k_clusters: usize, seed: u64) -> Result<Self> {
        if k_clusters < 1 {
            return Err(Error::BadParams("k must be at least 1".into()));
        }
        Ok(KMeansParams { k_clusters, seed, max_iterations: fixpoint::DEFAULT_MAX_ITERATIONS })
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// (cluster id, centroid per dimension), ascending by id.
    pub centroids: Vec<(i64, Vec<f64>)>,
    pub labeled: ChunkedArray,
    pub trace: IterationTrace,
}

fn centroid_name(dim: &str) -> String {
    format!("c_{dim}")
}

pub fn kmeans_spec(schema: &ArraySchema, max_iterations: usize) -> FixPointSpec {
    let dims: Vec<String> = schema.dims().iter().map(|d| d.name.clone()).collect();
    FixPointSpec::new(
        "P",
        AssignmentFunction::attribute("label"),
        dims.iter().map(|d| AggregateSpec::new(&centroid_name(d), AggKind::Avg, d)).collect(),
        Delta::NearestCentroid {
            label: "label".into(),
            point: dims.clone(),
            centroid: dims.iter().map(|d| centroid_name(d)).collect(),
        },
    )
    .with_max_iterations(max_iterations)
}

fn point_schema(a: &ChunkedArray) -> Result<ArraySchema> {
    let s = a.schema();
    ArraySchema::with_chunking(
        s.dims().to_vec(),
        vec![Attribute::new("label", ScalarKind::Int64)],
        s.chunk_extents().to_vec(),
        vec![0; s.ndim()],
    )
}

fn check_points(a: &ChunkedArray, k: usize) -> Result<()> {
    if a.len() < k {
        return Err(Error::TooFewPoints { needed: k, available: a.len() });
    }
    Ok(())
}

/// Seeded uniform random cluster per point, drawn in canonical order.
/// Clusters left empty by the draw each take one point, picked at random
/// from clusters that can spare one.
pub fn initial_assignment(a: &ChunkedArray, p: &KMeansParams) -> Result<ChunkedArray> {
    check_points(a, p.k_clusters)?;
    let k = p.k_clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cells = a.cells();
    let mut labels: Vec<usize> = cells.iter().map(|_| rng.random_range(0..k)).collect();
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donors: Vec<usize> = (0..labels.len()).filter(|&i| sizes[labels[i]] > 1).collect();
        let i = donors[rng.random_range(0..donors.len())];
        sizes[labels[i]] -= 1;
        labels[i] = empty;
        sizes[empty] = 1;
    }
    let mut out = ChunkedArray::new(point_schema(a)?)?;
    for ((c, _), l) in cells.into_iter().zip(labels) {
        out.put_unchecked(c, Some(vec![Scalar::Int(l as i64)].into()));
    }
    Ok(out)
}

/// Assigns every point to its nearest centroid.
pub fn assign_nearest(a: &ChunkedArray, cents: &[(i64, Vec<f64>)]) -> Result<ChunkedArray> {
    let mut out = ChunkedArray::new(point_schema(a)?)?;
    for (c, _) in a.cells() {
        let p: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        let k = nearest(cents, &p).ok_or_else(|| Error::BadParams("no centroids".into()))?;
        out.put_unchecked(c, Some(vec![Scalar::Int(k)].into()));
    }
    Ok(out)
}

/// Centroids of a labelled point array.
pub fn centroids(labeled: &ChunkedArray) -> Result<Vec<(i64, Vec<f64>)>> {
    let dims: Vec<String> = labeled.schema().dims().iter().map(|d| d.name.clone()).collect();
    let aggs: Vec<AggregateSpec> = dims.iter().map(|d| AggregateSpec::new(&centroid_name(d), AggKind::Avg, d)).collect();
    let g = ops::attribute_groupby(labeled, "label", &aggs)?;
    Ok(g.cells()
        .into_iter()
        .map(|(c, t)| (c[0], t.iter().map(|v| v.as_f64().unwrap_or(f64::NAN)).collect()))
        .collect())
}

fn finish(o: Outcome) -> Result<KMeansResult> {
    Ok(KMeansResult { centroids: centroids(&o.array)?, labeled: o.array, trace: o.trace })
}

/// Runs Lloyd iterations from an explicit labelled assignment.
pub fn kmeans_from(labeled: &ChunkedArray, max_iterations: usize, exec: &Executor) -> Result<KMeansResult> {
    finish(fixpoint::run_array(&kmeans_spec(labeled.schema(), max_iterations), labeled, exec)?)
}

pub fn kmeans_run(a: &ChunkedArray, p: &KMeansParams, exec: &Executor) -> Result<KMeansResult> {
    kmeans_from(&initial_assignment(a, p)?, p.max_iterations, exec)
}

/// Coarse-to-fine k-means. Each coarser level holds one point per block
/// with at least one point; converged centroids are scaled to the finer
/// grid and used to assign its points before iterating there.
pub fn kmeans_multires(
    a: &ChunkedArray,
    p: &KMeansParams,
    levels: usize,
    block: &[i64],
    exec: &Executor,
) -> Result<(KMeansResult, Vec<IterationTrace>)> {
    if levels == 0 || block.len() != a.schema().ndim() || block.iter().any(|&b| b < 1) {
        return Err(Error::BadPyramidSpec(format!("{levels} levels with block {block:?}")));
    }
    check_points(a, p.k_clusters)?;
    let mut pyramid = vec![a.clone()];
    for _ in 1..levels {
        let g = ops::grid(pyramid.last().expect("non-empty"), block, &[AggregateSpec::count("count")])?;
        let kept = ops::filter(&g, &Expr::parse("count >= 1").expect("valid"))?;
        if kept.len() < p.k_clusters {
            break;
        }
        pyramid.push(kept);
    }
    let mut traces = vec![IterationTrace::default(); levels];
    let mut cents: Option<Vec<(i64, Vec<f64>)>> = None;
    let mut result = None;
    for (i, level) in pyramid.iter().enumerate().rev() {
        let start = match &cents {
            None => initial_assignment(level, p)?,
            Some(c) => {
                let lows: Vec<i64> = level.schema().dims().iter().map(|d| d.lower).collect();
                let scaled: Vec<(i64, Vec<f64>)> = c
                    .iter()
                    .map(|(k, v)| {
                        let v = v
                            .iter()
                            .zip(block)
                            .zip(&lows)
                            .map(|((&c, &b), &lo)| lo as f64 + (c - lo as f64) * b as f64 + (b - 1) as f64 / 2.0)
                            .collect();
                        (*k, v)
                    })
                    .collect();
                assign_nearest(level, &scaled)?
            }
        };
        let r = kmeans_from(&start, p.max_iterations, exec)?;
        traces[i] = r.trace.clone();
        cents = Some(r.centroids.clone());
        result = Some(r);
    }
    Ok((result.expect("level 0 ran"), traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Dimension;

    fn points(cells: &[(i64, i64)]) -> ChunkedArray {
        let s = ArraySchema::new(
            vec![Dimension::new("x", 0, 15), Dimension::new("y", 0, 15)],
            vec![Attribute::new("w", ScalarKind::Int64)],
        )
        .unwrap();
        let mut a = ChunkedArray::new(s).unwrap();
        for &(x, y) in cells {
            a.insert(&[x, y], vec![Scalar::Int(1)].into()).unwrap();
        }
        a
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let a = points(&[(0, 0), (2, 0), (4, 6)]);
        let r = kmeans_run(&a, &KMeansParams::new(1, 3).unwrap(), &Executor::sequential()).unwrap();
        assert_eq!(r.centroids, vec![(0, vec![2.0, 2.0])]);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn separated_blobs() {
        let a = points(&[(0, 0), (0, 1), (14, 14), (15, 14)]);
        for seed in 0..20 {
            let r = kmeans_run(&a, &KMeansParams::new(2, seed).unwrap(), &Executor::sequential()).unwrap();
            let l = |x, y| r.labeled.get(&[x, y]).unwrap().unwrap()[0];
            assert_eq!(l(0, 0), l(0, 1));
            assert_eq!(l(14, 14), l(15, 14));
            assert_ne!(l(0, 0), l(14, 14));
        }
    }

    #[test]
    fn too_few_points() {
        let a = points(&[(0, 0)]);
        assert!(matches!(
            kmeans_run(&a, &KMeansParams::new(2, 0).unwrap(), &Executor::sequential()),
            Err(Error::TooFewPoints { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn multires_reaches_a_fixpoint() {
        let a = points(&[(0, 0), (1, 1), (0, 1), (12, 12), (13, 12), (12, 14), (3, 14)]);
        let p = KMeansParams::new(2, 5).unwrap();
        let (r, traces) = kmeans_multires(&a, &p, 2, &[2, 2], &Executor::sequential()).unwrap();
        assert_eq!(traces.len(), 2);
        let again = kmeans_from(&r.labeled, 10, &Executor::sequential()).unwrap();
        assert_eq!(again.trace.len(), 1);
        assert_eq!(again.labeled, r.labeled);
    }
}
