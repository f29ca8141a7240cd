//! Array operators used by fixpoint plans.
//!
//! Every operator is pure: inputs are borrowed, a fresh array comes back.
//! Aggregates skip empty cells and null scalars, and fold their inputs in
//! canonical row-major order so float results never depend on chunking or
//! on the number of workers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::array::{
    for_each_in_box, ArraySchema, Attribute, CellTuple, Chunk, ChunkedArray, Coord, Dimension, Scalar, ScalarKind,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::{CellUpdate, Expr, Row};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggKind {
    Min,
    Max,
    Count,
    Sum,
    SumSq,
    Avg,
    Stdv,
}

impl AggKind {
    pub fn name(self) -> &'static str {
        match self {
            AggKind::Min => "min",
            AggKind::Max => "max",
            AggKind::Count => "count",
            AggKind::Sum => "sum",
            AggKind::SumSq => "sum_sq",
            AggKind::Avg => "avg",
            AggKind::Stdv => "stdv",
        }
    }

    pub fn parse(s: &str) -> Option<AggKind> {
        Some(match s {
            "min" => AggKind::Min,
            "max" => AggKind::Max,
            "count" => AggKind::Count,
            "sum" => AggKind::Sum,
            "sum_sq" | "sumsq" => AggKind::SumSq,
            "avg" => AggKind::Avg,
            "stdv" | "stddev" => AggKind::Stdv,
            _ => return None,
        })
    }

    fn output_kind(self, input: ScalarKind) -> ScalarKind {
        match self {
            AggKind::Count => ScalarKind::Int64,
            AggKind::Avg | AggKind::Stdv => ScalarKind::Float64,
            _ => input,
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An aggregate producing attribute `name` from `input`, which may name an
/// attribute or a dimension. `count` without an input counts cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregateSpec {
    pub name: String,
    pub kind: AggKind,
    pub input: Option<String>,
}

impl AggregateSpec {
    pub fn new(name: &str, kind: AggKind, input: &str) -> Self {
        AggregateSpec { name: name.to_string(), kind, input: Some(input.to_string()) }
    }

    pub fn count(name: &str) -> Self {
        AggregateSpec { name: name.to_string(), kind: AggKind::Count, input: None }
    }

    /// Parses `name:kind:input` or `name:count`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::Config(format!("aggregate `{s}` must be name:kind[:input]"));
        let kind = AggKind::parse(parts.get(1).ok_or_else(bad)?).ok_or_else(bad)?;
        match parts.len() {
            2 if kind == AggKind::Count => Ok(AggregateSpec::count(parts[0])),
            3 => Ok(AggregateSpec::new(parts[0], kind, parts[2])),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for AggregateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.input {
            Some(i) => write!(f, "{}:{}:{}", self.name, self.kind, i),
            None => write!(f, "{}:{}", self.name, self.kind),
        }
    }
}

/// Population mean from a count and a sum.
pub fn finalize_avg(count: i64, sum: Scalar) -> Scalar {
    match sum.as_f64() {
        Some(s) if count > 0 => Scalar::Float(s / count as f64),
        _ => Scalar::Null,
    }
}

/// Population standard deviation `sqrt(s2/c - (s/c)^2)`, clamped at zero
/// where rounding would make the radicand negative.
pub fn finalize_stdv(count: i64, sum: Scalar, sum_sq: Scalar) -> Scalar {
    match (sum.as_f64(), sum_sq.as_f64()) {
        (Some(s), Some(s2)) if count > 0 => {
            let c = count as f64;
            let mean = s / c;
            Scalar::Float((s2 / c - mean * mean).max(0.0).sqrt())
        }
        _ => Scalar::Null,
    }
}

#[derive(Clone, Copy, Debug)]
enum Num {
    I(i64),
    F(f64),
}

impl Num {
    fn zero(kind: ScalarKind) -> Num {
        match kind {
            ScalarKind::Int64 => Num::I(0),
            ScalarKind::Float64 => Num::F(0.0),
        }
    }

    fn add(self, v: Scalar) -> Num {
        match (self, v) {
            (Num::I(a), Scalar::Int(b)) => Num::I(a.wrapping_add(b)),
            (Num::F(a), Scalar::Float(b)) => Num::F(a + b),
            (n, _) => n,
        }
    }

    fn add_sq(self, v: Scalar) -> Num {
        match (self, v) {
            (Num::I(a), Scalar::Int(b)) => Num::I(a.wrapping_add(b.wrapping_mul(b))),
            (Num::F(a), Scalar::Float(b)) => Num::F(a + b * b),
            (n, _) => n,
        }
    }

    fn scalar(self) -> Scalar {
        match self {
            Num::I(v) => Scalar::Int(v),
            Num::F(v) => Scalar::Float(v),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Acc {
    Count(i64),
    Sum(i64, Num),
    SumSq(i64, Num),
    Min(Option<Scalar>),
    Max(Option<Scalar>),
    Avg(i64, Num),
    Stdv(i64, Num, Num),
}

fn scalar_lt(a: Scalar, b: Scalar) -> bool {
    match (a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => x < y,
        _ => a.as_f64().unwrap_or(f64::NAN) < b.as_f64().unwrap_or(f64::NAN),
    }
}

impl Acc {
    fn new(kind: AggKind, input: ScalarKind) -> Acc {
        let z = Num::zero(input);
        match kind {
            AggKind::Count => Acc::Count(0),
            AggKind::Sum => Acc::Sum(0, z),
            AggKind::SumSq => Acc::SumSq(0, z),
            AggKind::Min => Acc::Min(None),
            AggKind::Max => Acc::Max(None),
            AggKind::Avg => Acc::Avg(0, z),
            AggKind::Stdv => Acc::Stdv(0, z, z),
        }
    }

    fn push(&mut self, v: Scalar) {
        if v.is_null() {
            return;
        }
        match self {
            Acc::Count(n) => *n += 1,
            Acc::Sum(n, s) | Acc::Avg(n, s) => {
                *n += 1;
                *s = s.add(v);
            }
            Acc::SumSq(n, s) => {
                *n += 1;
                *s = s.add_sq(v);
            }
            Acc::Stdv(n, s, s2) => {
                *n += 1;
                *s = s.add(v);
                *s2 = s2.add_sq(v);
            }
            Acc::Min(m) => {
                if m.is_none_or(|cur| scalar_lt(v, cur)) {
                    *m = Some(v);
                }
            }
            Acc::Max(m) => {
                if m.is_none_or(|cur| scalar_lt(cur, v)) {
                    *m = Some(v);
                }
            }
        }
    }

    fn finish(&self) -> Scalar {
        match *self {
            Acc::Count(n) => Scalar::Int(n),
            Acc::Sum(n, s) | Acc::SumSq(n, s) => {
                if n == 0 {
                    Scalar::Null
                } else {
                    s.scalar()
                }
            }
            Acc::Min(m) | Acc::Max(m) => m.unwrap_or(Scalar::Null),
            Acc::Avg(n, s) => finalize_avg(n, s.scalar()),
            Acc::Stdv(n, s, s2) => finalize_stdv(n, s.scalar(), s2.scalar()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Input {
    Cell,
    Attr(usize),
    Dim(usize),
}

/// Aggregates resolved against an input schema.
#[derive(Clone, Debug)]
pub(crate) struct BoundAggs {
    items: Vec<(AggKind, Input, ScalarKind)>,
    out_attrs: Vec<Attribute>,
}

impl BoundAggs {
    pub(crate) fn bind(schema: &ArraySchema, aggs: &[AggregateSpec]) -> Result<Self> {
        if aggs.is_empty() {
            return Err(Error::EmptyAggList);
        }
        let mut items = Vec::with_capacity(aggs.len());
        let mut out_attrs = Vec::with_capacity(aggs.len());
        for a in aggs {
            let (input, kind) = match &a.input {
                None if a.kind == AggKind::Count => (Input::Cell, ScalarKind::Int64),
                None => return Err(Error::Config(format!("aggregate `{}` needs an input", a.name))),
                Some(n) => {
                    if let Some(i) = schema.attr_index(n) {
                        (Input::Attr(i), schema.attrs()[i].kind)
                    } else if let Some(i) = schema.dim_index(n) {
                        (Input::Dim(i), ScalarKind::Int64)
                    } else {
                        return Err(Error::UnknownAttribute(n.clone()));
                    }
                }
            };
            items.push((a.kind, input, kind));
            out_attrs.push(Attribute::new(a.name.clone(), a.kind.output_kind(kind)));
        }
        Ok(BoundAggs { items, out_attrs })
    }

    pub(crate) fn out_attrs(&self) -> &[Attribute] {
        &self.out_attrs
    }

    fn start(&self) -> Vec<Acc> {
        self.items.iter().map(|&(k, _, kind)| Acc::new(k, kind)).collect()
    }

    fn push(&self, accs: &mut [Acc], coord: &[i64], tuple: &[Scalar]) {
        for (acc, &(_, input, _)) in accs.iter_mut().zip(&self.items) {
            let v = match input {
                Input::Cell => Scalar::Int(1),
                Input::Attr(i) => tuple[i],
                Input::Dim(i) => Scalar::Int(coord[i]),
            };
            acc.push(v);
        }
    }

    fn finish(accs: &[Acc]) -> CellTuple {
        accs.iter().map(Acc::finish).collect()
    }
}

fn output_schema(dims: Vec<Dimension>, attrs: Vec<Attribute>, extents: Vec<i64>, overlap: Vec<i64>) -> Result<ArraySchema> {
    let extents: Vec<i64> = extents.iter().zip(&dims).map(|(&e, d)| e.clamp(1, d.extent())).collect();
    let overlap: Vec<i64> = overlap.iter().zip(&extents).map(|(&o, &e)| o.clamp(0, e - 1)).collect();
    ArraySchema::with_chunking(dims, attrs, extents, overlap)
}

fn dim_indices(schema: &ArraySchema, dims: &[String]) -> Result<Vec<usize>> {
    dims.iter().map(|d| schema.dim_index(d).ok_or_else(|| Error::UnknownDimension(d.clone()))).collect()
}

/// `SELECT aggs FROM a GROUP BY dims`.
pub fn groupby_aggregate(a: &ChunkedArray, dims: &[String], aggs: &[AggregateSpec]) -> Result<ChunkedArray> {
    let s = a.schema();
    if dims.is_empty() {
        return Err(Error::UnknownDimension("<empty group-by list>".into()));
    }
    let idx = dim_indices(s, dims)?;
    let bound = BoundAggs::bind(s, aggs)?;
    let out_schema = output_schema(
        idx.iter().map(|&i| s.dims()[i].clone()).collect(),
        bound.out_attrs().to_vec(),
        idx.iter().map(|&i| s.chunk_extents()[i]).collect(),
        vec![0; idx.len()],
    )?;
    let mut groups: BTreeMap<Coord, Vec<Acc>> = BTreeMap::new();
    for (c, t) in a.cells() {
        let key: Coord = idx.iter().map(|&i| c[i]).collect();
        let accs = groups.entry(key).or_insert_with(|| bound.start());
        bound.push(accs, c, t);
    }
    let mut out = ChunkedArray::with_schema(Arc::new(out_schema));
    for (k, accs) in groups {
        out.put_unchecked(&k, Some(BoundAggs::finish(&accs)));
    }
    Ok(out)
}

/// Groups cells by the value of an int64 attribute. The output has one
/// dimension, named after the attribute, spanning the observed keys.
pub fn attribute_groupby(a: &ChunkedArray, attr: &str, aggs: &[AggregateSpec]) -> Result<ChunkedArray> {
    let s = a.schema();
    let ai = s.attr_index(attr).ok_or_else(|| Error::UnknownAttribute(attr.to_string()))?;
    if s.attrs()[ai].kind != ScalarKind::Int64 {
        return Err(Error::ExpressionType(format!("group key `{attr}` must be int64")));
    }
    let bound = BoundAggs::bind(s, aggs)?;
    let mut groups: BTreeMap<i64, Vec<Acc>> = BTreeMap::new();
    for (c, t) in a.cells() {
        if let Scalar::Int(key) = t[ai] {
            let accs = groups.entry(key).or_insert_with(|| bound.start());
            bound.push(accs, c, t);
        }
    }
    let lo = groups.keys().next().copied().unwrap_or(0);
    let hi = groups.keys().next_back().copied().unwrap_or(0);
    let schema = ArraySchema::new(vec![Dimension::new(attr, lo, hi)], bound.out_attrs().to_vec())?;
    let mut out = ChunkedArray::with_schema(Arc::new(schema));
    for (k, accs) in groups {
        out.put_unchecked(&[k], Some(BoundAggs::finish(&accs)));
    }
    Ok(out)
}

pub(crate) fn check_offsets(schema: &ArraySchema, offsets: &[i64]) -> Result<()> {
    if offsets.len() != schema.ndim() {
        return Err(Error::BadOffsets(format!("{} offsets for {} dimensions", offsets.len(), schema.ndim())));
    }
    if offsets.iter().any(|&o| o < 0) {
        return Err(Error::BadOffsets("offsets must be non-negative".into()));
    }
    Ok(())
}

/// Aggregates the non-empty cells of the window centred at `center`,
/// clipped to the domain, in row-major order.
pub(crate) fn window_fold<'a>(
    schema: &ArraySchema,
    bound: &BoundAggs,
    offsets: &[i64],
    center: &[i64],
    lookup: impl Fn(&Coord) -> Option<&'a CellTuple>,
) -> CellTuple {
    let lo: Coord = center.iter().zip(offsets).zip(schema.dims()).map(|((&c, &o), d)| (c - o).max(d.lower)).collect();
    let hi: Coord = center.iter().zip(offsets).zip(schema.dims()).map(|((&c, &o), d)| (c + o).min(d.upper)).collect();
    let mut accs = bound.start();
    for_each_in_box(&lo, &hi, |c| {
        if let Some(t) = lookup(c) {
            bound.push(&mut accs, c, t);
        }
    });
    BoundAggs::finish(&accs)
}

pub(crate) fn window_schema(a: &ArraySchema, bound: &BoundAggs) -> Result<ArraySchema> {
    ArraySchema::with_chunking(
        a.dims().to_vec(),
        bound.out_attrs().to_vec(),
        a.chunk_extents().to_vec(),
        a.overlap().to_vec(),
    )
}

/// `SELECT aggs FROM a WINDOW PARTITIONED BY [d1 ± o1]...`.
pub fn window_aggregate(a: &ChunkedArray, offsets: &[i64], aggs: &[AggregateSpec]) -> Result<ChunkedArray> {
    window_aggregate_with(&Executor::sequential(), a, offsets, aggs)
}

pub fn window_aggregate_with(
    exec: &Executor,
    a: &ChunkedArray,
    offsets: &[i64],
    aggs: &[AggregateSpec],
) -> Result<ChunkedArray> {
    let s = a.schema();
    check_offsets(s, offsets)?;
    let bound = BoundAggs::bind(s, aggs)?;
    let out_schema = Arc::new(window_schema(s, &bound)?);
    let ids = a.chunk_ids();
    let chunks = exec.map(&ids, |id| {
        let src = a.chunk(id).expect("chunk id came from the array");
        let mut out = Chunk::new(id.clone());
        for c in src.core.keys() {
            let t = window_fold(s, &bound, offsets, c, |p| a.get_unchecked(p));
            out.core.insert(c.clone(), t);
        }
        out
    });
    let mut out = ChunkedArray::with_schema(out_schema);
    for c in chunks {
        out.replace_chunk(c);
    }
    Ok(out)
}

/// Keeps cells where the predicate holds. The predicate may reference the
/// array's attributes and dimensions.
pub fn filter(a: &ChunkedArray, predicate: &Expr) -> Result<ChunkedArray> {
    let pred = predicate.compile(a.schema(), None)?;
    let mut out = a.clone();
    out.clear_halos();
    for (c, t) in a.cells() {
        if !pred.test(Row::new(c, t), None) {
            out.put_unchecked(c, None);
        }
    }
    Ok(out)
}

/// Positions of `inner`'s dimensions inside `outer`.
fn projection(outer: &ArraySchema, inner: &ArraySchema) -> Result<Vec<usize>> {
    let shared = inner.dims().iter().filter(|d| outer.dim_index(&d.name).is_some()).count();
    if shared == 0 {
        return Err(Error::NoCommonDims);
    }
    let missing: Vec<String> =
        inner.dims().iter().filter(|d| outer.dim_index(&d.name).is_none()).map(|d| d.name.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::NotASubsetOfDims(missing));
    }
    Ok(inner.dims().iter().map(|d| outer.dim_index(&d.name).expect("checked above")).collect())
}

fn project(coord: &[i64], proj: &[usize]) -> Coord {
    proj.iter().map(|&i| coord[i]).collect()
}

/// Schema of `dim_join(a, b)`: `a`'s dimensions, `a`'s attributes followed
/// by `b`'s, with `_r` appended to colliding names.
pub fn join_schema(a: &ArraySchema, b: &ArraySchema) -> Result<ArraySchema> {
    let mut attrs = a.attrs().to_vec();
    for attr in b.attrs() {
        let mut name = attr.name.clone();
        while attrs.iter().any(|x| x.name == name) || a.dim_index(&name).is_some() {
            name.push_str("_r");
        }
        attrs.push(Attribute::new(name, attr.kind));
    }
    ArraySchema::with_chunking(a.dims().to_vec(), attrs, a.chunk_extents().to_vec(), a.overlap().to_vec())
}

/// Equi-join on shared dimension names: each cell of `a` pairs with the
/// cell of `b` at its projected coordinates.
pub fn dim_join(a: &ArraySchema, b: &ArraySchema) -> Result<ArraySchema> {
    join_schema(a, b)
}

pub fn dim_join_arrays(a: &ChunkedArray, b: &ChunkedArray) -> Result<ChunkedArray> {
    let proj = projection(a.schema(), b.schema())?;
    let schema = Arc::new(join_schema(a.schema(), b.schema())?);
    let mut out = ChunkedArray::with_schema(schema);
    for (c, t) in a.cells() {
        if let Some(u) = b.get_unchecked(&project(c, &proj)) {
            let mut joined = t.clone();
            joined.extend(u.iter().copied());
            out.put_unchecked(c, Some(joined));
        }
    }
    Ok(out)
}

/// One cell rewritten by [`merge_tracked`].
#[derive(Clone, Debug, PartialEq)]
pub struct Change {
    pub coord: Coord,
    pub old: CellTuple,
    /// `None` when the update deleted the cell.
    pub new: Option<CellTuple>,
}

#[derive(Clone, Debug)]
pub struct MergeResult {
    pub array: ChunkedArray,
    /// Source cells that found an extrusion partner and were evaluated.
    pub matched: u64,
    /// Cells whose state actually changed, in canonical order.
    pub changes: Vec<Change>,
}

/// Slides `extrusion` through `source`: every source cell is paired with the
/// extrusion cell at its projection onto the extrusion's dimensions and
/// rewritten by `exp` (one expression per source attribute). Unmatched
/// source cells are kept.
pub fn merge(source: &ChunkedArray, extrusion: &ChunkedArray, exp: &[Expr]) -> Result<ChunkedArray> {
    Ok(merge_tracked(&Executor::sequential(), source, extrusion, exp)?.array)
}

pub fn merge_tracked(
    exec: &Executor,
    source: &ChunkedArray,
    extrusion: &ChunkedArray,
    exp: &[Expr],
) -> Result<MergeResult> {
    let proj = projection(source.schema(), extrusion.schema())?;
    let update = CellUpdate::compile(exp, source.schema(), Some(extrusion.schema()), source.schema())?;
    let s = source.schema();

    // Enumerating from the extrusion side pays off when it covers few cells.
    let free: Vec<usize> = (0..s.ndim()).filter(|i| !proj.contains(i)).collect();
    let per_ext: u128 = free.iter().map(|&i| s.dims()[i].extent() as u128).product();
    let ext_driven = (extrusion.len() as u128).saturating_mul(per_ext) < source.len() as u128;

    let mut out = source.clone();
    let mut matched = 0u64;
    let mut changes = Vec::new();
    if ext_driven {
        let mut lo: Coord = s.dims().iter().map(|d| d.lower).collect();
        let mut hi: Coord = s.dims().iter().map(|d| d.upper).collect();
        for (ec, et) in extrusion.cells() {
            for (k, &i) in proj.iter().enumerate() {
                lo[i] = ec[k];
                hi[i] = ec[k];
            }
            let ext_row = Row::new(ec, et);
            for_each_in_box(&lo, &hi, |c| {
                if let Some(t) = source.get_unchecked(c) {
                    matched += 1;
                    let new = update.apply(Row::new(c, t), Some(ext_row));
                    if new.as_ref() != Some(t) {
                        changes.push(Change { coord: c.clone(), old: t.clone(), new: new.clone() });
                        out.put_unchecked(c, new);
                    }
                }
            });
        }
        changes.sort_by(|a, b| a.coord.cmp(&b.coord));
    } else {
        let ids = source.chunk_ids();
        let per_chunk = exec.map(&ids, |id| {
            let chunk = source.chunk(id).expect("chunk id came from the array");
            let mut local = Vec::new();
            let mut n = 0u64;
            for (c, t) in &chunk.core {
                if let Some(u) = extrusion.get_unchecked(&project(c, &proj)) {
                    n += 1;
                    let new = update.apply(Row::new(c, t), Some(Row::new(&project(c, &proj), u)));
                    if new.as_ref() != Some(t) {
                        local.push(Change { coord: c.clone(), old: t.clone(), new });
                    }
                }
            }
            (n, local)
        });
        for (n, local) in per_chunk {
            matched += n;
            for ch in local {
                out.put_unchecked(&ch.coord, ch.new.clone());
                changes.push(ch);
            }
        }
        if source.chunk_ids().len() > 1 {
            changes.sort_by(|a, b| a.coord.cmp(&b.coord));
        }
    }
    Ok(MergeResult { array: out, matched, changes })
}

fn check_block(schema: &ArraySchema, block: &[i64]) -> Result<()> {
    if block.len() != schema.ndim() {
        return Err(Error::BadBlock(format!("{} extents for {} dimensions", block.len(), schema.ndim())));
    }
    if block.iter().any(|&b| b < 1) {
        return Err(Error::BadBlock("block extents must be positive".into()));
    }
    Ok(())
}

/// Coarsens the domain by `block`; each output cell aggregates the
/// non-empty cells of its block. Partial edge blocks behave as if padded
/// with empty cells.
pub fn grid(a: &ChunkedArray, block: &[i64], aggs: &[AggregateSpec]) -> Result<ChunkedArray> {
    let s = a.schema();
    check_block(s, block)?;
    let bound = BoundAggs::bind(s, aggs)?;
    let dims: Vec<Dimension> = s
        .dims()
        .iter()
        .zip(block)
        .map(|(d, &b)| Dimension::new(d.name.clone(), d.lower, d.lower + (d.extent() - 1) / b))
        .collect();
    let extents = s
        .chunk_extents()
        .iter()
        .zip(block)
        .zip(s.overlap())
        .map(|((&e, &b), &o)| ((e + b - 1) / b).max(o + 1))
        .collect();
    let schema = output_schema(dims, bound.out_attrs().to_vec(), extents, s.overlap().to_vec())?;
    let mut groups: BTreeMap<Coord, Vec<Acc>> = BTreeMap::new();
    for (c, t) in a.cells() {
        let key: Coord = c
            .iter()
            .zip(s.dims())
            .zip(block)
            .map(|((&x, d), &b)| d.lower + (x - d.lower).div_euclid(b))
            .collect();
        bound.push(groups.entry(key).or_insert_with(|| bound.start()), c, t);
    }
    let mut out = ChunkedArray::with_schema(Arc::new(schema));
    for (k, accs) in groups {
        out.put_unchecked(&k, Some(BoundAggs::finish(&accs)));
    }
    Ok(out)
}

/// Scales the domain up by `block`, replicating every cell across its block.
pub fn xgrid(a: &ChunkedArray, block: &[i64]) -> Result<ChunkedArray> {
    let s = a.schema();
    check_block(s, block)?;
    let dims: Vec<Dimension> = s
        .dims()
        .iter()
        .zip(block)
        .map(|(d, &b)| Dimension::new(d.name.clone(), d.lower, d.lower + d.extent() * b - 1))
        .collect();
    let extents = s.chunk_extents().iter().zip(block).map(|(&e, &b)| e * b).collect();
    let schema = output_schema(dims, s.attrs().to_vec(), extents, s.overlap().to_vec())?;
    let mut out = ChunkedArray::with_schema(Arc::new(schema));
    for (c, t) in a.cells() {
        let lo: Coord = c.iter().zip(s.dims()).zip(block).map(|((&x, d), &b)| d.lower + (x - d.lower) * b).collect();
        let hi: Coord = lo.iter().zip(block).map(|(&l, &b)| l + b - 1).collect();
        for_each_in_box(&lo, &hi, |p| out.put_unchecked(p, Some(t.clone())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Dimension;
    use crate::{coord, tuple};
    use proptest::prelude::*;

    fn cube(nx: i64, ny: i64, nt: i64) -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, nx - 1), Dimension::new("y", 0, ny - 1), Dimension::new("t", 0, nt - 1)],
            vec![Attribute::new("d", ScalarKind::Float64)],
        )
        .unwrap()
    }

    fn plane(nx: i64, ny: i64, kind: ScalarKind) -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, nx - 1), Dimension::new("y", 0, ny - 1)],
            vec![Attribute::new("v", kind)],
        )
        .unwrap()
    }

    fn line(values: &[i64]) -> ChunkedArray {
        let s = ArraySchema::new(
            vec![Dimension::new("i", 0, values.len() as i64 - 1)],
            vec![Attribute::new("v", ScalarKind::Int64)],
        )
        .unwrap();
        ChunkedArray::from_cells(s, values.iter().enumerate().map(|(i, &v)| (coord![i], tuple![v]))).unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn groupby_sum_over_time() {
        let a = ChunkedArray::from_cells(
            cube(2, 1, 2),
            [(coord![0, 0, 0], tuple![1.0]), (coord![0, 0, 1], tuple![3.0]), (coord![1, 0, 0], tuple![2.0])],
        )
        .unwrap();
        let g = groupby_aggregate(&a, &names(&["x", "y"]), &[AggregateSpec::new("s", AggKind::Sum, "d")]).unwrap();
        assert_eq!(
            g.nonempty_cells(),
            vec![(coord![0, 0], tuple![4.0]), (coord![1, 0], tuple![2.0])]
        );
        assert_eq!(g.schema().attrs()[0], Attribute::new("s", ScalarKind::Float64));
    }

    #[test]
    fn groupby_all_dims_counts_one() {
        let a = ChunkedArray::from_cells(
            cube(2, 2, 2),
            [(coord![0, 1, 0], tuple![1.0]), (coord![1, 1, 1], tuple![3.0])],
        )
        .unwrap();
        let g = groupby_aggregate(&a, &names(&["x", "y", "t"]), &[AggregateSpec::count("c")]).unwrap();
        assert!(g.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Int(1)));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn groupby_constant_avg() {
        let mut a = ChunkedArray::new(cube(2, 2, 3)).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for t in 0..3 {
                    a.insert(&coord![x, y, t], tuple![5.0]).unwrap();
                }
            }
        }
        let g = groupby_aggregate(&a, &names(&["x", "y"]), &[AggregateSpec::new("m", AggKind::Avg, "d")]).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Float(5.0)));
    }

    #[test]
    fn groupby_errors() {
        let a = ChunkedArray::new(cube(2, 2, 2)).unwrap();
        assert!(matches!(
            groupby_aggregate(&a, &names(&["z"]), &[AggregateSpec::count("c")]),
            Err(Error::UnknownDimension(_))
        ));
        assert!(matches!(groupby_aggregate(&a, &names(&["x"]), &[]), Err(Error::EmptyAggList)));
    }

    #[test]
    fn window_min_line() {
        let a = line(&[7, 3, 9]);
        let w = window_aggregate(&a, &[1], &[AggregateSpec::new("m", AggKind::Min, "v")]).unwrap();
        let vals: Vec<Scalar> = w.nonempty_cells().into_iter().map(|(_, t)| t[0]).collect();
        assert_eq!(vals, vec![Scalar::Int(3); 3]);
        let w0 = window_aggregate(&a, &[0], &[AggregateSpec::new("m", AggKind::Max, "v")]).unwrap();
        let vals: Vec<Scalar> = w0.nonempty_cells().into_iter().map(|(_, t)| t[0]).collect();
        assert_eq!(vals, vec![Scalar::Int(7), Scalar::Int(3), Scalar::Int(9)]);
        assert!(matches!(
            window_aggregate(&a, &[1, 1], &[AggregateSpec::count("c")]),
            Err(Error::BadOffsets(_))
        ));
    }

    #[test]
    fn window_single_cell() {
        let a = ChunkedArray::from_cells(plane(5, 5, ScalarKind::Int64), [(coord![2, 2], tuple![4i64])]).unwrap();
        let w = window_aggregate(&a, &[1, 1], &[AggregateSpec::new("m", AggKind::Min, "v")]).unwrap();
        assert_eq!(w.nonempty_cells(), vec![(coord![2, 2], tuple![4i64])]);
    }

    #[test]
    fn filter_cases() {
        let a = line(&[1, 5]);
        let f = filter(&a, &Expr::parse("v > 2").unwrap()).unwrap();
        assert_eq!(f.nonempty_cells(), vec![(coord![1], tuple![5i64])]);
        assert_eq!(filter(&a, &Expr::Bool(true)).unwrap(), a);
        assert!(matches!(filter(&a, &Expr::parse("w > 2").unwrap()), Err(Error::ExpressionType(_))));
    }

    #[test]
    fn join_projection() {
        let a = ChunkedArray::from_cells(
            cube(1, 1, 2),
            [(coord![0, 0, 0], tuple![1.0]), (coord![0, 0, 1], tuple![2.0])],
        )
        .unwrap();
        let b_schema = ArraySchema::new(
            vec![Dimension::new("x", 0, 0), Dimension::new("y", 0, 0)],
            vec![Attribute::new("d", ScalarKind::Float64)],
        )
        .unwrap();
        let b = ChunkedArray::from_cells(b_schema.clone(), [(coord![0, 0], tuple![10.0])]).unwrap();
        let j = dim_join_arrays(&a, &b).unwrap();
        assert_eq!(j.schema().attrs()[1].name, "d_r");
        assert_eq!(
            j.nonempty_cells(),
            vec![(coord![0, 0, 0], tuple![1.0, 10.0]), (coord![0, 0, 1], tuple![2.0, 10.0])]
        );
        let empty = ChunkedArray::new(b_schema).unwrap();
        assert!(dim_join_arrays(&a, &empty).unwrap().is_empty());

        let other = ArraySchema::new(vec![Dimension::new("q", 0, 0)], vec![Attribute::new("d", ScalarKind::Float64)]).unwrap();
        assert!(matches!(dim_join_arrays(&a, &ChunkedArray::new(other).unwrap()), Err(Error::NoCommonDims)));
    }

    #[test]
    fn join_same_dims() {
        let s = plane(2, 2, ScalarKind::Int64);
        let a = ChunkedArray::from_cells(s.clone(), [(coord![1, 1], tuple![3i64])]).unwrap();
        let j = dim_join_arrays(&a, &a).unwrap();
        assert_eq!(j.nonempty_cells(), vec![(coord![1, 1], tuple![3i64, 3i64])]);
    }

    fn musig_schema() -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, 0), Dimension::new("y", 0, 0)],
            vec![Attribute::new("μ", ScalarKind::Float64), Attribute::new("σ", ScalarKind::Float64)],
        )
        .unwrap()
    }

    #[test]
    fn merge_clips_outlier() {
        let src = ChunkedArray::from_cells(
            cube(1, 1, 2),
            [(coord![0, 0, 0], tuple![1.0]), (coord![0, 0, 1], tuple![9.0])],
        )
        .unwrap();
        let ext = ChunkedArray::from_cells(musig_schema(), [(coord![0, 0], tuple![2.0, 1.0])]).unwrap();
        let exp = [Expr::parse("μ−3×σ ≤ d ≤ μ+3×σ ? d : null").unwrap()];
        let m = merge_tracked(&Executor::sequential(), &src, &ext, &exp).unwrap();
        assert_eq!(m.array.nonempty_cells(), vec![(coord![0, 0, 0], tuple![1.0])]);
        assert_eq!(m.matched, 2);
        assert_eq!(m.changes, vec![Change { coord: coord![0, 0, 1], old: tuple![9.0], new: None }]);

        let none = ChunkedArray::new(musig_schema()).unwrap();
        assert_eq!(merge(&src, &none, &exp).unwrap(), src);
    }

    #[test]
    fn merge_same_dims_replaces() {
        let s = plane(2, 2, ScalarKind::Int64);
        let a = ChunkedArray::from_cells(s.clone(), [(coord![0, 0], tuple![1i64]), (coord![1, 1], tuple![2i64])]).unwrap();
        let b = ChunkedArray::from_cells(s, [(coord![0, 0], tuple![8i64]), (coord![1, 1], tuple![9i64])]).unwrap();
        let m = merge(&a, &b, &[Expr::ext("v")]).unwrap();
        assert_eq!(m, b);
    }

    #[test]
    fn merge_rejects_extra_dims() {
        let a = ChunkedArray::new(plane(2, 2, ScalarKind::Float64)).unwrap();
        let b = ChunkedArray::new(cube(2, 2, 2)).unwrap();
        assert!(matches!(merge(&a, &b, &[Expr::src("v")]), Err(Error::NotASubsetOfDims(_))));
    }

    #[test]
    fn grid_cases() {
        let mut ones = ChunkedArray::new(plane(4, 4, ScalarKind::Float64)).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                ones.insert(&coord![x, y], tuple![1.0]).unwrap();
            }
        }
        let g = grid(&ones, &[2, 2], &[AggregateSpec::count("c")]).unwrap();
        assert_eq!(g.schema().dims()[0].upper, 1);
        assert_eq!(g.len(), 4);
        assert!(g.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Int(4)));

        let one = ChunkedArray::from_cells(plane(4, 4, ScalarKind::Float64), [(coord![3, 2], tuple![1.0])]).unwrap();
        let g = grid(&one, &[2, 2], &[AggregateSpec::count("c")]).unwrap();
        assert_eq!(g.nonempty_cells(), vec![(coord![1, 1], tuple![1i64])]);

        let two = ChunkedArray::from_cells(
            plane(2, 2, ScalarKind::Int64),
            [(coord![0, 0], tuple![1i64]), (coord![0, 1], tuple![3i64])],
        )
        .unwrap();
        let g = grid(&two, &[2, 2], &[AggregateSpec::new("m", AggKind::Min, "v")]).unwrap();
        assert_eq!(g.nonempty_cells(), vec![(coord![0, 0], tuple![1i64])]);
        assert!(matches!(grid(&two, &[0, 2], &[AggregateSpec::count("c")]), Err(Error::BadBlock(_))));
    }

    #[test]
    fn grid_pads_partial_blocks() {
        let a = ChunkedArray::from_cells(plane(5, 3, ScalarKind::Int64), [(coord![4, 2], tuple![1i64])]).unwrap();
        let g = grid(&a, &[2, 2], &[AggregateSpec::count("c")]).unwrap();
        assert_eq!(g.schema().dims()[0].upper, 2);
        assert_eq!(g.schema().dims()[1].upper, 1);
        assert_eq!(g.nonempty_cells(), vec![(coord![2, 1], tuple![1i64])]);
    }

    #[test]
    fn xgrid_cases() {
        let s = ArraySchema::new(
            vec![Dimension::new("x", 0, 0), Dimension::new("y", 0, 0)],
            vec![Attribute::new("v", ScalarKind::Int64)],
        )
        .unwrap();
        let a = ChunkedArray::from_cells(s.clone(), [(coord![0, 0], tuple![7i64])]).unwrap();
        let x = xgrid(&a, &[2, 2]).unwrap();
        assert_eq!(x.len(), 4);
        assert!(x.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Int(7)));
        let e = xgrid(&ChunkedArray::new(s).unwrap(), &[2, 2]).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.schema().dims()[1].upper, 1);
    }

    fn arb_plane() -> impl Strategy<Value = ChunkedArray> {
        prop::collection::btree_map((0i64..6, 0i64..5), -50i64..50, 0..20).prop_map(|cells| {
            ChunkedArray::from_cells(
                plane(6, 5, ScalarKind::Int64),
                cells.into_iter().map(|((x, y), v)| (coord![x, y], tuple![v])),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn grid_of_xgrid_is_identity(a in arb_plane(), bx in 1i64..4, by in 1i64..4) {
            let up = xgrid(&a, &[bx, by]).unwrap();
            let back = grid(&up, &[bx, by], &[AggregateSpec::new("v", AggKind::Min, "v")]).unwrap();
            prop_assert_eq!(back.nonempty_cells(), a.nonempty_cells());
            let counts = grid(&up, &[bx, by], &[AggregateSpec::count("c")]).unwrap();
            for (c, _) in a.nonempty_cells() {
                prop_assert_eq!(counts.get(&c).unwrap().unwrap()[0], Scalar::Int(bx * by));
            }
        }

        #[test]
        fn window_min_fixpoint_is_stable(a in arb_plane()) {
            let aggs = [AggregateSpec::new("v", AggKind::Min, "v")];
            let mut cur = a;
            loop {
                let next = window_aggregate(&cur, &[1, 1], &aggs).unwrap();
                if next == cur { break; }
                cur = next;
            }
            prop_assert_eq!(window_aggregate(&cur, &[1, 1], &aggs).unwrap(), cur);
        }

        #[test]
        fn merge_matches_join_then_filter(
            cells in prop::collection::btree_map((0i64..3, 0i64..3, 0i64..4), -20i64..20, 0..30),
            stats in prop::collection::btree_map((0i64..3, 0i64..3), (-10i64..10, 0i64..6), 0..9),
        ) {
            let src = ChunkedArray::from_cells(
                cube(3, 3, 4),
                cells.into_iter().map(|((x, y, t), v)| (coord![x, y, t], tuple![v as f64])),
            ).unwrap();
            let ext_schema = ArraySchema::new(
                vec![Dimension::new("x", 0, 2), Dimension::new("y", 0, 2)],
                vec![Attribute::new("μ", ScalarKind::Float64), Attribute::new("σ", ScalarKind::Float64)],
            ).unwrap();
            let ext = ChunkedArray::from_cells(
                ext_schema,
                stats.into_iter().map(|((x, y), (m, s))| (coord![x, y], tuple![m as f64, s as f64 / 2.0])),
            ).unwrap();
            let merged = merge(&src, &ext, &[Expr::parse("μ - 2*σ <= d <= μ + 2*σ ? d : null").unwrap()]).unwrap();
            let joined = dim_join_arrays(&src, &ext).unwrap();
            let kept = filter(&joined, &Expr::parse("μ - 2*σ <= d <= μ + 2*σ").unwrap()).unwrap();
            // Cells without a partner survive the merge untouched.
            let mut expected: Vec<(Coord, CellTuple)> = kept
                .nonempty_cells()
                .into_iter()
                .map(|(c, t)| (c, CellTuple::from_slice(&t[..1])))
                .collect();
            for (c, t) in src.nonempty_cells() {
                if joined.get(&c).unwrap().is_none() {
                    expected.push((c, t));
                }
            }
            expected.sort_by(|a, b| a.0.cmp(&b.0));
            prop_assert_eq!(merged.nonempty_cells(), expected);
        }
    }
}
