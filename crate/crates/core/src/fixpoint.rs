//! The FixPoint operator: `FixPoint(A, π, f, δ, T, ε)`.
//!
//! A spec is classified by its assignment function, rewritten into an
//! aggregate + merge step, and iterated with major steps until `T ≤ ε`.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::array::{ArraySchema, CellTuple, ChunkedArray, Coord, Scalar};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::{CellUpdate, Expr, Row};
use crate::ops::{self, AggregateSpec, Change};
use crate::store::VersionedStore;

pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// How cells are assigned to aggregate groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AssignmentFunction {
    /// `[x][y]` groups by dimensions; `[x±1][y±1]` is a window.
    Dims(Vec<(String, Option<i64>)>),
    /// Groups cells sharing a value of an int64 attribute.
    Attribute(String),
}

impl AssignmentFunction {
    pub fn groupby(dims: &[&str]) -> Self {
        AssignmentFunction::Dims(dims.iter().map(|d| (d.to_string(), None)).collect())
    }

    pub fn window(dims: &[&str], offsets: &[i64]) -> Self {
        AssignmentFunction::Dims(dims.iter().zip(offsets).map(|(d, &o)| (d.to_string(), Some(o))).collect())
    }

    pub fn attribute(name: &str) -> Self {
        AssignmentFunction::Attribute(name.to_string())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s = text.trim();
        if !s.starts_with('[') {
            if crate::array::is_identifier(s) {
                return Ok(AssignmentFunction::Attribute(s.to_string()));
            }
            return Err(Error::UnsupportedAssignment(format!("cannot parse `{text}`")));
        }
        let bad = || Error::UnsupportedAssignment(format!("cannot parse `{text}`"));
        let mut out = Vec::new();
        let mut rest = s;
        while !rest.is_empty() {
            let body = rest.strip_prefix('[').ok_or_else(bad)?;
            let end = body.find(']').ok_or_else(bad)?;
            let item = body[..end].trim();
            rest = body[end + 1..].trim_start();
            let split = item.find('±').map(|i| (i, '±'.len_utf8())).or_else(|| item.find("+-").map(|i| (i, 2)));
            match split {
                Some((i, w)) => {
                    let off: i64 = item[i + w..].trim().parse().map_err(|_| bad())?;
                    out.push((item[..i].trim().to_string(), Some(off)));
                }
                None => out.push((item.to_string(), None)),
            }
        }
        if out.is_empty() || out.iter().any(|(n, _)| !crate::array::is_identifier(n)) {
            return Err(bad());
        }
        Ok(AssignmentFunction::Dims(out))
    }
}

impl fmt::Display for AssignmentFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignmentFunction::Attribute(a) => f.write_str(a),
            AssignmentFunction::Dims(items) => {
                for (n, o) in items {
                    match o {
                        Some(o) => write!(f, "[{n}±{o}]")?,
                        None => write!(f, "[{n}]")?,
                    }
                }
                Ok(())
            }
        }
    }
}

/// Execution strategy chosen for an assignment function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Classified {
    GroupBy(Vec<String>),
    /// Offsets in the array's dimension order.
    Window(Vec<i64>),
    Attribute(String),
}

pub fn classify(pi: &AssignmentFunction, schema: &ArraySchema) -> Result<Classified> {
    match pi {
        AssignmentFunction::Attribute(a) => match schema.attr_index(a) {
            Some(_) => Ok(Classified::Attribute(a.clone())),
            None => Err(Error::UnknownAttribute(a.clone())),
        },
        AssignmentFunction::Dims(items) => {
            let mut seen = Vec::new();
            for (n, o) in items {
                if schema.dim_index(n).is_none() {
                    return Err(Error::UnknownDimension(n.clone()));
                }
                if seen.contains(&n) {
                    return Err(Error::UnsupportedAssignment(format!("dimension `{n}` listed twice")));
                }
                if o.is_some_and(|o| o < 0) {
                    return Err(Error::BadOffsets(format!("negative offset on `{n}`")));
                }
                seen.push(n);
            }
            let windowed = items.iter().filter(|(_, o)| o.is_some()).count();
            if windowed == 0 {
                return Ok(Classified::GroupBy(items.iter().map(|(n, _)| n.clone()).collect()));
            }
            if windowed == items.len() && items.len() == schema.ndim() {
                let mut offsets = vec![0; schema.ndim()];
                for (n, o) in items {
                    offsets[schema.dim_index(n).expect("checked")] = o.expect("all windowed");
                }
                return Ok(Classified::Window(offsets));
            }
            Err(Error::UnsupportedAssignment(
                "combinations of group-by and window assignment are not supported".into(),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Termination {
    /// Number of cells whose state changed.
    #[default]
    DiffCount,
    /// Largest absolute change of any attribute; a cell that appears or
    /// disappears counts as infinite.
    MaxAbsDiff,
}

impl Termination {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diff_count" => Ok(Termination::DiffCount),
            "max_abs_diff" => Ok(Termination::MaxAbsDiff),
            _ => Err(Error::Config(format!("unknown termination `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Termination::DiffCount => "diff_count",
            Termination::MaxAbsDiff => "max_abs_diff",
        }
    }

    pub fn evaluate(self, changes: &[Change]) -> f64 {
        match self {
            Termination::DiffCount => changes.len() as f64,
            Termination::MaxAbsDiff => changes.iter().map(|c| max_abs(&c.old, c.new.as_ref())).fold(0.0, f64::max),
        }
    }
}

fn max_abs(old: &CellTuple, new: Option<&CellTuple>) -> f64 {
    let Some(new) = new else { return f64::INFINITY };
    old.iter()
        .zip(new)
        .map(|(a, b)| match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// The cell-update function δ.
#[derive(Clone, Debug, PartialEq)]
pub enum Delta {
    /// One expression per attribute of A, over A's cell and its group's
    /// aggregates. An all-null result deletes the cell.
    Update(Vec<Expr>),
    /// Reassigns `label` to the group whose `centroid` attributes lie
    /// nearest (Euclidean) to the cell's `point` values; ties go to the
    /// lowest group key.
    NearestCentroid { label: String, point: Vec<String>, centroid: Vec<String> },
}

/// `FixPoint(A, π, f, δ, T, ε)` plus an iteration bound.
#[derive(Clone, Debug, PartialEq)]
pub struct FixPointSpec {
    pub array: String,
    pub pi: AssignmentFunction,
    pub f: Vec<AggregateSpec>,
    pub delta: Delta,
    pub termination: Termination,
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl FixPointSpec {
    pub fn new(array: &str, pi: AssignmentFunction, f: Vec<AggregateSpec>, delta: Delta) -> Self {
        FixPointSpec {
            array: array.to_string(),
            pi,
            f,
            delta,
            termination: Termination::DiffCount,
            epsilon: 0.0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: SpecDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        doc.into_spec()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SpecDoc::from_spec(self)).expect("spec documents always serialize")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    array: String,
    pi: String,
    aggs: Vec<String>,
    delta: DeltaDoc,
    #[serde(default)]
    epsilon: f64,
    #[serde(default = "default_max_iterations")]
    max_iterations: usize,
    #[serde(default = "default_termination")]
    termination: String,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

fn default_termination() -> String {
    "diff_count".into()
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DeltaDoc {
    One(String),
    Many(Vec<String>),
    Nearest { nearest: NearestDoc },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NearestDoc {
    label: String,
    point: Vec<String>,
    centroid: Vec<String>,
}

impl SpecDoc {
    fn into_spec(self) -> Result<FixPointSpec> {
        let delta = match self.delta {
            DeltaDoc::One(e) => Delta::Update(vec![Expr::parse(&e)?]),
            DeltaDoc::Many(es) => Delta::Update(es.iter().map(|e| Expr::parse(e)).collect::<Result<_>>()?),
            DeltaDoc::Nearest { nearest } => {
                Delta::NearestCentroid { label: nearest.label, point: nearest.point, centroid: nearest.centroid }
            }
        };
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(FixPointSpec {
            array: self.array,
            pi: AssignmentFunction::parse(&self.pi)?,
            f: self.aggs.iter().map(|a| AggregateSpec::parse(a)).collect::<Result<_>>()?,
            delta,
            termination: Termination::parse(&self.termination)?,
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
        })
    }

    fn from_spec(s: &FixPointSpec) -> Self {
        let delta = match &s.delta {
            Delta::Update(es) if es.len() == 1 => DeltaDoc::One(es[0].to_string()),
            Delta::Update(es) => DeltaDoc::Many(es.iter().map(|e| e.to_string()).collect()),
            Delta::NearestCentroid { label, point, centroid } => DeltaDoc::Nearest {
                nearest: NearestDoc { label: label.clone(), point: point.clone(), centroid: centroid.clone() },
            },
        };
        SpecDoc {
            array: s.array.clone(),
            pi: s.pi.to_string(),
            aggs: s.f.iter().map(|a| a.to_string()).collect(),
            delta,
            epsilon: s.epsilon,
            max_iterations: s.max_iterations,
            termination: s.termination.name().into(),
        }
    }
}

/// Counters of the overlap executor for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecutorStats {
    pub mini_index: u64,
    pub major_index: u64,
    pub shuffled_chunks: u64,
    pub shuffled_cells: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub changed_cells: u64,
    /// Value of the termination aggregate T.
    pub t_value: f64,
    pub cells_touched: u64,
    pub shuffle_performed: bool,
    pub wall_time: Duration,
    pub stats: ExecutorStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, IterationRecord> {
        self.records.iter()
    }

    pub fn total_touched(&self) -> u64 {
        self.records.iter().map(|r| r.cells_touched).sum()
    }

    pub fn changed_series(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.changed_cells).collect()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub array: ChunkedArray,
    pub trace: IterationTrace,
    pub converged: bool,
}

/// Result of one major step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub next: ChunkedArray,
    pub changes: Vec<Change>,
    pub cells_touched: u64,
}

enum Compiled {
    Update(Vec<Expr>),
    AttrUpdate(CellUpdate, usize),
    Nearest { label: usize, point: Vec<PointRef>, centroid: Vec<usize> },
}

#[derive(Clone, Copy)]
enum PointRef {
    Dim(usize),
    Attr(usize),
}

/// The naive plan: per iteration, aggregate A by π, then merge the group
/// results back into A through δ.
pub struct Plan {
    spec: FixPointSpec,
    kind: Classified,
    group_schema: ArraySchema,
    compiled: Compiled,
}

impl fmt::Debug for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plan").field("kind", &self.kind).field("group_schema", &self.group_schema.header()).finish()
    }
}

/// Aggregate step of a plan on the full array.
pub(crate) fn aggregate(kind: &Classified, f: &[AggregateSpec], a: &ChunkedArray, exec: &Executor) -> Result<ChunkedArray> {
    match kind {
        Classified::GroupBy(dims) => ops::groupby_aggregate(a, dims, f),
        Classified::Window(offsets) => ops::window_aggregate_with(exec, a, offsets, f),
        Classified::Attribute(attr) => ops::attribute_groupby(a, attr, f),
    }
}

pub fn rewrite_naive(spec: &FixPointSpec, schema: &ArraySchema) -> Result<Plan> {
    if !(spec.epsilon >= 0.0) {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    if spec.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be positive".into()));
    }
    let kind = classify(&spec.pi, schema)?;
    let empty = ChunkedArray::new(schema.clone())?;
    let g = aggregate(&kind, &spec.f, &empty, &Executor::sequential())?;
    let group_schema = g.schema().clone();
    let compiled = match (&spec.delta, &kind) {
        (Delta::Update(exprs), Classified::Attribute(attr)) => {
            let cu = CellUpdate::compile(exprs, schema, Some(&group_schema), schema)?;
            Compiled::AttrUpdate(cu, schema.attr_index(attr).expect("classified"))
        }
        (Delta::Update(exprs), _) => {
            CellUpdate::compile(exprs, schema, Some(&group_schema), schema)?;
            Compiled::Update(exprs.clone())
        }
        (Delta::NearestCentroid { label, point, centroid }, Classified::Attribute(attr)) if attr == label => {
            if point.len() != centroid.len() || point.is_empty() {
                return Err(Error::ExpressionType("point and centroid lists must have the same positive length".into()));
            }
            let point = point
                .iter()
                .map(|p| {
                    schema
                        .dim_index(p)
                        .map(PointRef::Dim)
                        .or_else(|| schema.attr_index(p).map(PointRef::Attr))
                        .ok_or_else(|| Error::UnknownAttribute(p.clone()))
                })
                .collect::<Result<_>>()?;
            let centroid = centroid
                .iter()
                .map(|c| group_schema.attr_index(c).ok_or_else(|| Error::UnknownAttribute(c.clone())))
                .collect::<Result<_>>()?;
            Compiled::Nearest { label: schema.attr_index(label).expect("classified"), point, centroid }
        }
        (Delta::NearestCentroid { .. }, _) => {
            return Err(Error::UnsupportedAssignment("nearest-centroid updates need π to group by the label attribute".into()))
        }
    };
    Ok(Plan { spec: spec.clone(), kind, group_schema, compiled })
}

impl Plan {
    pub fn spec(&self) -> &FixPointSpec {
        &self.spec
    }

    pub fn kind(&self) -> &Classified {
        &self.kind
    }

    pub fn group_schema(&self) -> &ArraySchema {
        &self.group_schema
    }

    /// Aggregates of the current state.
    pub fn groups(&self, a: &ChunkedArray, exec: &Executor) -> Result<ChunkedArray> {
        aggregate(&self.kind, &self.spec.f, a, exec)
    }

    /// Applies δ to every cell of `a` given precomputed groups `g`.
    pub fn apply_delta(&self, a: &ChunkedArray, g: &ChunkedArray, exec: &Executor) -> Result<StepResult> {
        match &self.compiled {
            Compiled::Update(exprs) => {
                let m = ops::merge_tracked(exec, a, g, exprs)?;
                Ok(StepResult { next: m.array, changes: m.changes, cells_touched: m.matched })
            }
            Compiled::AttrUpdate(cu, key) => {
                let mut next = a.clone();
                let mut changes = Vec::new();
                let mut matched = 0;
                for (c, t) in a.cells() {
                    let Scalar::Int(k) = t[*key] else { continue };
                    let Some(u) = g.get_unchecked(&[k]) else { continue };
                    matched += 1;
                    let new = cu.apply(Row::new(c, t), Some(Row::new(&[k], u)));
                    if new.as_ref() != Some(t) {
                        changes.push(Change { coord: c.clone(), old: t.clone(), new: new.clone() });
                        next.put_unchecked(c, new);
                    }
                }
                Ok(StepResult { next, changes, cells_touched: matched })
            }
            Compiled::Nearest { label, point, centroid } => {
                let cents: Vec<(i64, Vec<f64>)> = g
                    .cells()
                    .into_iter()
                    .filter_map(|(c, t)| {
                        let v: Option<Vec<f64>> = centroid.iter().map(|&i| t[i].as_f64()).collect();
                        v.map(|v| (c[0], v))
                    })
                    .collect();
                let mut next = a.clone();
                let mut changes = Vec::new();
                let mut touched = 0;
                for (c, t) in a.cells() {
                    let p: Option<Vec<f64>> = point
                        .iter()
                        .map(|r| match *r {
                            PointRef::Dim(i) => Some(c[i] as f64),
                            PointRef::Attr(i) => t[i].as_f64(),
                        })
                        .collect();
                    let Some(p) = p else { continue };
                    touched += 1;
                    let Some(best) = nearest(&cents, &p) else { continue };
                    if t[*label] != Scalar::Int(best) {
                        let mut new = t.clone();
                        new[*label] = Scalar::Int(best);
                        changes.push(Change { coord: c.clone(), old: t.clone(), new: Some(new.clone()) });
                        next.put_unchecked(c, Some(new));
                    }
                }
                Ok(StepResult { next, changes, cells_touched: touched })
            }
        }
    }

    /// One major step: `G ← aggregate(A by π)`, then `A' ← δ(A, G)`.
    pub fn step(&self, a: &ChunkedArray, exec: &Executor) -> Result<StepResult> {
        let g = self.groups(a, exec)?;
        let mut r = self.apply_delta(a, &g, exec)?;
        r.cells_touched += a.len() as u64 + g.len() as u64;
        Ok(r)
    }
}

/// Index of the centroid nearest to `p`; ties go to the lowest key.
pub fn nearest(cents: &[(i64, Vec<f64>)], p: &[f64]) -> Option<i64> {
    let mut best: Option<(i64, f64)> = None;
    for (k, c) in cents {
        let d: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((*k, d));
        }
    }
    best.map(|(k, _)| k)
}

/// Iterates `step` from `a0` until `T ≤ ε`. Each state is stored under
/// `name` when a store is given.
pub(crate) fn drive(
    spec: &FixPointSpec,
    a0: ChunkedArray,
    mut store: Option<&mut VersionedStore>,
    mut step: impl FnMut(&ChunkedArray, u64) -> Result<(StepResult, ExecutorStats, bool)>,
) -> Result<Outcome> {
    let mut cur = a0;
    let mut trace = IterationTrace::default();
    for i in 1..=spec.max_iterations as u64 {
        let start = Instant::now();
        let (r, stats, shuffled) = step(&cur, i)?;
        let t = spec.termination.evaluate(&r.changes);
        trace.records.push(IterationRecord {
            iteration: i,
            changed_cells: r.changes.len() as u64,
            t_value: t,
            cells_touched: r.cells_touched,
            shuffle_performed: shuffled,
            wall_time: start.elapsed(),
            stats,
        });
        cur = r.next;
        if let Some(s) = store.as_deref_mut() {
            s.store(&spec.array, cur.clone())?;
        }
        if t <= spec.epsilon {
            return Ok(Outcome { array: cur, trace, converged: true });
        }
    }
    Err(Error::NonConvergence(Box::new(Outcome { array: cur, trace, converged: false })))
}

fn sequential_stats(i: u64) -> ExecutorStats {
    ExecutorStats { mini_index: i, major_index: i, shuffled_chunks: 0, shuffled_cells: 0 }
}

/// Runs the naive plan on the latest version of `spec.array`, storing every
/// state.
pub fn run(spec: &FixPointSpec, store: &mut VersionedStore, exec: &Executor) -> Result<Outcome> {
    let a0 = store.latest(&spec.array)?.clone();
    let plan = rewrite_naive(spec, a0.schema())?;
    drive(spec, a0, Some(store), |a, i| Ok((plan.step(a, exec)?, sequential_stats(i), false)))
}

/// Runs the naive plan on an in-memory array without versioning.
pub fn run_array(spec: &FixPointSpec, a0: &ChunkedArray, exec: &Executor) -> Result<Outcome> {
    let plan = rewrite_naive(spec, a0.schema())?;
    drive(spec, a0.clone(), None, |a, i| Ok((plan.step(a, exec)?, sequential_stats(i), false)))
}

/// Coordinates changed by a step, in canonical order.
pub fn changed_coords(changes: &[Change]) -> Vec<Coord> {
    changes.iter().map(|c| c.coord.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{Attribute, Dimension, ScalarKind};
    use crate::ops::AggKind;
    use crate::{coord, tuple};

    fn cube() -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, 1), Dimension::new("y", 0, 1), Dimension::new("t", 0, 3)],
            vec![Attribute::new("d", ScalarKind::Float64)],
        )
        .unwrap()
    }

    fn sigma_spec(k: f64) -> FixPointSpec {
        FixPointSpec::new(
            "A",
            AssignmentFunction::groupby(&["x", "y"]),
            vec![AggregateSpec::new("μ", AggKind::Avg, "d"), AggregateSpec::new("σ", AggKind::Stdv, "d")],
            Delta::Update(vec![Expr::parse(&format!("μ-{k}*σ <= d <= μ+{k}*σ ? d : null")).unwrap()]),
        )
    }

    fn label_spec(dims: &[&str], r: i64) -> FixPointSpec {
        FixPointSpec::new(
            "L",
            AssignmentFunction::window(dims, &vec![r; dims.len()]),
            vec![AggregateSpec::new("m", AggKind::Min, "label")],
            Delta::Update(vec![Expr::parse("m").unwrap()]),
        )
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify(&AssignmentFunction::parse("[x][y]").unwrap(), &cube()).unwrap(),
            Classified::GroupBy(vec!["x".into(), "y".into()])
        );
        let plane = ArraySchema::new(
            vec![Dimension::new("x", 0, 3), Dimension::new("y", 0, 3)],
            vec![Attribute::new("label", ScalarKind::Int64)],
        )
        .unwrap();
        assert_eq!(
            classify(&AssignmentFunction::parse("[x±1][y±1]").unwrap(), &plane).unwrap(),
            Classified::Window(vec![1, 1])
        );
        assert_eq!(
            classify(&AssignmentFunction::parse("[y+-2][x+-1]").unwrap(), &plane).unwrap(),
            Classified::Window(vec![1, 2])
        );
        assert_eq!(
            classify(&AssignmentFunction::parse("label").unwrap(), &plane).unwrap(),
            Classified::Attribute("label".into())
        );
        assert!(matches!(
            classify(&AssignmentFunction::parse("[x±1][y]").unwrap(), &plane),
            Err(Error::UnsupportedAssignment(_))
        ));
        assert!(matches!(
            classify(&AssignmentFunction::parse("[x±1][y±1]").unwrap(), &cube()),
            Err(Error::UnsupportedAssignment(_))
        ));
        for s in ["[x][y]", "[x±1][y±2]", "label"] {
            assert_eq!(AssignmentFunction::parse(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn constant_column_converges_at_once() {
        let a = ChunkedArray::from_cells(cube(), [(coord![0, 0, 0], tuple![5.0]), (coord![0, 0, 1], tuple![5.0])]).unwrap();
        let out = run_array(&sigma_spec(3.0), &a, &Executor::sequential()).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.array, a);
    }

    #[test]
    fn clip_outlier_then_converge() {
        let a = ChunkedArray::from_cells(
            cube(),
            [1.0, 1.0, 1.0, 10.0].iter().enumerate().map(|(t, &v)| (coord![0, 0, t], tuple![v])),
        )
        .unwrap();
        let out = run_array(&sigma_spec(1.0), &a, &Executor::sequential()).unwrap();
        assert_eq!(out.trace.changed_series(), vec![1, 0]);
        assert_eq!(out.array.len(), 3);
    }

    #[test]
    fn line_labels_converge_in_two() {
        let s = ArraySchema::new(vec![Dimension::new("i", 0, 2)], vec![Attribute::new("label", ScalarKind::Int64)]).unwrap();
        let a = ChunkedArray::from_cells(s, [3i64, 1, 2].iter().enumerate().map(|(i, &v)| (coord![i], tuple![v]))).unwrap();
        let out = run_array(&label_spec(&["i"], 1), &a, &Executor::sequential()).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert!(out.array.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Int(1)));
    }

    #[test]
    fn diagonal_neighbours_share_label() {
        let s = ArraySchema::new(
            vec![Dimension::new("x", 0, 3), Dimension::new("y", 0, 3)],
            vec![Attribute::new("label", ScalarKind::Int64)],
        )
        .unwrap();
        let a = ChunkedArray::from_cells(s, [(coord![0, 0], tuple![5i64]), (coord![1, 1], tuple![2i64])]).unwrap();
        let out = run_array(&label_spec(&["x", "y"], 1), &a, &Executor::sequential()).unwrap();
        assert!(out.array.nonempty_cells().iter().all(|(_, t)| t[0] == Scalar::Int(2)));

        match run_array(&label_spec(&["x", "y"], 1).with_max_iterations(1), &a, &Executor::sequential()) {
            Err(Error::NonConvergence(o)) => assert_eq!(o.trace.len(), 1),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn run_stores_every_state() {
        let mut store = VersionedStore::new();
        let a = ChunkedArray::from_cells(
            cube(),
            [1.0, 1.0, 1.0, 10.0].iter().enumerate().map(|(t, &v)| (coord![0, 0, t], tuple![v])),
        )
        .unwrap();
        store.store("A", a).unwrap();
        let out = run(&sigma_spec(1.0), &mut store, &Executor::new(2)).unwrap();
        assert_eq!(store.latest_version("A").unwrap(), 3);
        assert_eq!(store.latest("A").unwrap(), &out.array);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
array = "A"
pi = "[x][y]"
aggs = ["μ:avg:d", "σ:stdv:d"]
delta = "μ - 3 * σ <= d <= μ + 3 * σ ? d : null"
"#;
        let spec = FixPointSpec::from_toml(text).unwrap();
        assert_eq!(spec.max_iterations, DEFAULT_MAX_ITERATIONS);
        assert_eq!(spec, sigma_spec(3.0));
        assert_eq!(FixPointSpec::from_toml(&spec.to_toml()).unwrap(), spec);

        let km = FixPointSpec {
            delta: Delta::NearestCentroid { label: "label".into(), point: vec!["x".into()], centroid: vec!["cx".into()] },
            ..spec.clone()
        };
        assert_eq!(FixPointSpec::from_toml(&km.to_toml()).unwrap(), km);
        assert!(FixPointSpec::from_toml("array = 1").is_err());
    }

    #[test]
    fn delta_must_type_check() {
        let bad = FixPointSpec { delta: Delta::Update(vec![Expr::parse("nope").unwrap()]), ..sigma_spec(1.0) };
        assert!(matches!(rewrite_naive(&bad, &cube()), Err(Error::ExpressionType(_))));
    }
}
