//! Connected-component labelling by iterated window minimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{ArraySchema, Attribute, ChunkedArray, Dimension, Scalar, ScalarKind};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fixpoint::{AssignmentFunction, Delta, FixPointSpec};
use crate::multires::PyramidSpec;
use crate::ops::{self, AggKind, AggregateSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceDetectParams {
    pub r: i64,
    /// Minimum mean flux per pixel for a pixel to be labelled.
    pub threshold: f64,
}

impl SourceDetectParams {
    pub fn new(r: i64, threshold: f64) -> Result<Self> {
        if r < 1 {
            return Err(Error::BadParams(format!("r must be at least 1, got {r}")));
        }
        Ok(SourceDetectParams { r, threshold })
    }
}

pub fn sourcedetect_spec(p: &SourceDetectParams) -> FixPointSpec {
    FixPointSpec::new(
        "L",
        AssignmentFunction::window(&["x", "y"], &[p.r, p.r]),
        vec![AggregateSpec::new("m", AggKind::Min, "label")],
        Delta::Update(vec![Expr::parse("m").expect("valid")]),
    )
}

/// Pyramid keeping only full blocks, carrying the block's minimum label,
/// and seeding fine cells with the upsampled label when there is one.
pub fn pyramid_spec(levels: usize, block: &[i64]) -> PyramidSpec {
    let full: i64 = block.iter().product();
    PyramidSpec {
        levels,
        block: block.to_vec(),
        aggs: vec![AggregateSpec::count("count"), AggregateSpec::new("label", AggKind::Min, "label")],
        keep: Expr::parse(&format!("count == {full}")).expect("valid"),
        seed_merge: vec![Expr::parse("ext.label").expect("valid")],
    }
}

pub fn label_schema(nx: i64, ny: i64, chunks: &[i64]) -> Result<ArraySchema> {
    ArraySchema::with_chunking(
        vec![Dimension::new("x", 0, nx - 1), Dimension::new("y", 0, ny - 1)],
        vec![Attribute::new("label", ScalarKind::Int64)],
        chunks.to_vec(),
        vec![0, 0],
    )
}

/// Labels each given cell with its row-major ordinal.
pub fn labelled(schema: ArraySchema, cells: impl IntoIterator<Item = (i64, i64)>) -> Result<ChunkedArray> {
    let (lx, ly) = (schema.dims()[0].lower, schema.dims()[1].lower);
    let ny = schema.dims()[1].extent();
    let mut a = ChunkedArray::new(schema)?;
    for (x, y) in cells {
        a.insert(&[x, y], vec![Scalar::Int((x - lx) * ny + (y - ly))].into())?;
    }
    Ok(a)
}

/// Initial labels for pixels of a 2-D image whose first attribute is at
/// least `threshold`.
pub fn initial_labels(image: &ChunkedArray, threshold: f64) -> Result<ChunkedArray> {
    let s = image.schema();
    if s.ndim() != 2 {
        return Err(Error::SchemaMismatch("detection image must be two-dimensional".into()));
    }
    let schema = ArraySchema::with_chunking(
        s.dims().to_vec(),
        vec![Attribute::new("label", ScalarKind::Int64)],
        s.chunk_extents().to_vec(),
        vec![0, 0],
    )?;
    let cells: Vec<(i64, i64)> = image
        .cells()
        .into_iter()
        .filter(|(_, t)| t[0].as_f64().is_some_and(|v| v >= threshold))
        .map(|(c, _)| (c[0], c[1]))
        .collect();
    labelled(schema, cells)
}

/// Mean flux per (x, y) of an image cube.
pub fn detection_image(cube: &ChunkedArray) -> Result<ChunkedArray> {
    ops::groupby_aggregate(cube, &["x".into(), "y".into()], &[AggregateSpec::new("flux", AggKind::Avg, "d")])
}

/// Labels for the pixels of `cube` whose mean flux reaches the threshold,
/// chunked by `chunks`.
pub fn detect_input(cube: &ChunkedArray, p: &SourceDetectParams, chunks: &[i64]) -> Result<ChunkedArray> {
    let img = detection_image(cube)?;
    let l = initial_labels(&img, p.threshold)?;
    l.rechunk(chunks.to_vec(), vec![0, 0])
}

/// A random occupancy grid with the given density, labelled.
pub fn random_grid(seed: u64, nx: i64, ny: i64, density: f64, chunks: &[i64]) -> Result<ChunkedArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            if rng.random::<f64>() < density {
                cells.push((x, y));
            }
        }
    }
    labelled(label_schema(nx, ny, chunks)?, cells)
}

/// A 4×4 instance whose longest label path has two hops, so labelling
/// settles after two changing steps plus one confirming step.
pub fn worked_example() -> ChunkedArray {
    let cells = [(0, 0), (1, 1), (2, 2), (0, 3), (3, 0)];
    labelled(label_schema(4, 4, &[4, 4]).expect("valid"), cells).expect("in domain")
}
