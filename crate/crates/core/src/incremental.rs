//! Incremental fixpoint plans.
//!
//! Aggregates are decomposed into partials carried across iterations in a
//! state array C. Each iteration folds only the previous iteration's deltas
//! into C, finalizes the groups whose partials moved, and re-applies δ to
//! the cells of those groups.
//!
//! Float partials are maintained by subtraction, which is only exact while
//! every partial sum is an exactly representable integer. The plan checks
//! this on the seed pass and on every inserted value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::array::{ArraySchema, CellTuple, ChunkedArray, Coord, Dimension, Scalar, ScalarKind};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fixpoint::{self, Classified, Delta, ExecutorStats, FixPointSpec, Outcome, Plan, StepResult};
use crate::ops::{self, AggKind, AggregateSpec, Change};
use crate::store::{MergeMode, VersionedStore, Which};

pub type FinalizeFn = fn(&[Scalar]) -> Scalar;

/// `(agg, {G₁..Gₖ}, H)` for one aggregate kind.
#[derive(Clone, Debug)]
pub struct AlgebraicEntry {
    pub partials: Vec<AggKind>,
    pub subtractable: bool,
    pub finalize: FinalizeFn,
}

#[derive(Clone, Debug)]
pub struct AlgebraicRegistry {
    entries: BTreeMap<AggKind, AlgebraicEntry>,
}

fn count_of(p: &[Scalar]) -> i64 {
    p[0].as_i64().unwrap_or(0)
}

fn fin_first(p: &[Scalar]) -> Scalar {
    p[0]
}

fn fin_second(p: &[Scalar]) -> Scalar {
    if count_of(p) == 0 {
        Scalar::Null
    } else {
        p[1]
    }
}

fn fin_avg(p: &[Scalar]) -> Scalar {
    ops::finalize_avg(count_of(p), p[1])
}

fn fin_stdv(p: &[Scalar]) -> Scalar {
    ops::finalize_stdv(count_of(p), p[1], p[2])
}

impl Default for AlgebraicRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl AlgebraicRegistry {
    pub fn empty() -> Self {
        AlgebraicRegistry { entries: BTreeMap::new() }
    }

    /// avg = ({count, sum}, s/c), stdv = ({count, sum, sum_sq}, √(s²/c − (s/c)²));
    /// min and max are registered but cannot absorb deletions.
    pub fn standard() -> Self {
        use AggKind::*;
        let mut r = Self::empty();
        r.register(Count, AlgebraicEntry { partials: vec![Count], subtractable: true, finalize: fin_first });
        r.register(Sum, AlgebraicEntry { partials: vec![Count, Sum], subtractable: true, finalize: fin_second });
        r.register(SumSq, AlgebraicEntry { partials: vec![Count, SumSq], subtractable: true, finalize: fin_second });
        r.register(Avg, AlgebraicEntry { partials: vec![Count, Sum], subtractable: true, finalize: fin_avg });
        r.register(Stdv, AlgebraicEntry { partials: vec![Count, Sum, SumSq], subtractable: true, finalize: fin_stdv });
        r.register(Min, AlgebraicEntry { partials: vec![Min], subtractable: false, finalize: fin_first });
        r.register(Max, AlgebraicEntry { partials: vec![Max], subtractable: false, finalize: fin_first });
        r
    }

    pub fn register(&mut self, kind: AggKind, entry: AlgebraicEntry) {
        self.entries.insert(kind, entry);
    }

    pub fn remove(&mut self, kind: AggKind) {
        self.entries.remove(&kind);
    }

    pub fn get(&self, kind: AggKind) -> Option<&AlgebraicEntry> {
        self.entries.get(&kind)
    }
}

/// What the δ updates of a run may do to cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Workload {
    /// Cells are only ever deleted.
    DeleteOnly,
    /// Cells are never removed or overwritten.
    InsertOnly,
    #[default]
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Naive,
    ManualIncr,
    EfficientIncr,
    EfficientIncrStorage,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Naive, Strategy::ManualIncr, Strategy::EfficientIncr, Strategy::EfficientIncrStorage];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::ManualIncr => "manual-incr",
            Strategy::EfficientIncr => "efficient-incr",
            Strategy::EfficientIncrStorage => "efficient-incr+storage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const CELLS: &str = "n__";

#[derive(Clone, Debug)]
struct Slot {
    entry: AlgebraicEntry,
    /// Column range of this aggregate's partials inside C.
    start: usize,
}

/// Delta-driven plan for a group-by or attribute-grouped spec.
pub struct IncrementalPlan {
    naive: Plan,
    workload: Workload,
    partial_specs: Vec<AggregateSpec>,
    partial_kinds: Vec<AggKind>,
    slots: Vec<Slot>,
    /// Float inputs whose partial sums must stay exact.
    float_inputs: Vec<usize>,
}

impl fmt::Debug for IncrementalPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IncrementalPlan")
            .field("kind", self.naive.kind())
            .field("workload", &self.workload)
            .field("partials", &self.partial_specs.iter().map(|p| p.to_string()).collect::<Vec<_>>())
            .finish()
    }
}

pub fn rewrite_incremental(
    spec: &FixPointSpec,
    schema: &ArraySchema,
    reg: &AlgebraicRegistry,
    workload: Workload,
) -> Result<IncrementalPlan> {
    let naive = fixpoint::rewrite_naive(spec, schema)?;
    if let Classified::Window(_) = naive.kind() {
        return Err(Error::NotIncrementalizable("window assignment functions are evaluated naively".into()));
    }
    let mut partial_specs = vec![AggregateSpec::count(CELLS)];
    let mut partial_kinds = vec![AggKind::Count];
    let mut slots = Vec::new();
    let mut float_inputs = BTreeSet::new();
    for (i, agg) in spec.f.iter().enumerate() {
        let entry = reg
            .get(agg.kind)
            .ok_or_else(|| Error::NotIncrementalizable(format!("aggregate `{}` has no algebraic form", agg.kind)))?;
        if !entry.subtractable && workload != Workload::InsertOnly {
            return Err(Error::NotIncrementalizable(format!(
                "`{}` cannot absorb deletions or updates; declare an insert-only workload",
                agg.kind
            )));
        }
        slots.push(Slot { entry: entry.clone(), start: partial_specs.len() });
        for (j, &p) in entry.partials.iter().enumerate() {
            let name = format!("p{i}_{j}");
            partial_specs.push(match &agg.input {
                Some(input) => AggregateSpec::new(&name, p, input),
                None => AggregateSpec::count(&name),
            });
            partial_kinds.push(p);
            if matches!(p, AggKind::Sum | AggKind::SumSq) {
                if let Some(k) = agg.input.as_ref().and_then(|n| schema.attr_index(n)) {
                    if schema.attrs()[k].kind == ScalarKind::Float64 {
                        float_inputs.insert(k);
                    }
                }
            }
        }
    }
    Ok(IncrementalPlan {
        naive,
        workload,
        partial_specs,
        partial_kinds,
        slots,
        float_inputs: float_inputs.into_iter().collect(),
    })
}

/// Largest integer magnitude a float partial may reach and still add exactly.
const EXACT: f64 = 9_007_199_254_740_992.0;

impl IncrementalPlan {
    pub fn naive(&self) -> &Plan {
        &self.naive
    }

    pub fn spec(&self) -> &FixPointSpec {
        self.naive.spec()
    }

    pub fn workload(&self) -> Workload {
        self.workload
    }

    /// Names of the partial aggregates carried in C (after the cell count).
    pub fn partials(&self) -> &[AggregateSpec] {
        &self.partial_specs
    }

    /// Partials of `x` laid out in C's schema.
    pub fn partial_aggregates(&self, x: &ChunkedArray, c_schema: &Arc<ArraySchema>) -> Result<ChunkedArray> {
        match self.naive.kind() {
            Classified::GroupBy(dims) => {
                let g = ops::groupby_aggregate(x, dims, &self.partial_specs)?;
                Ok(rehome(&g, c_schema))
            }
            Classified::Attribute(attr) => {
                let g = ops::attribute_groupby(x, attr, &self.partial_specs)?;
                let d = &c_schema.dims()[0];
                if let Some((c, _)) = g.cells().into_iter().find(|(c, _)| c[0] < d.lower || c[0] > d.upper) {
                    return Err(Error::NotIncrementalizable(format!(
                        "group key {} lies outside the seeded key range {}..{}",
                        c[0], d.lower, d.upper
                    )));
                }
                Ok(rehome(&g, c_schema))
            }
            Classified::Window(_) => unreachable!("rejected by rewrite_incremental"),
        }
    }

    /// Schema of C for the given initial state.
    fn c_schema(&self, a: &ChunkedArray) -> Result<Arc<ArraySchema>> {
        let probe = ChunkedArray::new(a.schema().clone())?;
        let (dims, extents) = match self.naive.kind() {
            Classified::GroupBy(dims) => {
                let g = ops::groupby_aggregate(&probe, dims, &self.partial_specs)?;
                (g.schema().dims().to_vec(), g.schema().chunk_extents().to_vec())
            }
            Classified::Attribute(attr) => {
                let i = a.schema().attr_index(attr).expect("classified");
                let keys = a.cells().into_iter().filter_map(|(_, t)| t[i].as_i64());
                let (lo, hi) = keys.fold((i64::MAX, i64::MIN), |(l, h), k| (l.min(k), h.max(k)));
                let (lo, hi) = if lo > hi { (0, 0) } else { (lo, hi) };
                (vec![Dimension::new(attr.clone(), lo, hi)], vec![hi - lo + 1])
            }
            Classified::Window(_) => unreachable!("rejected by rewrite_incremental"),
        };
        let attrs = ops::BoundAggs::bind(a.schema(), &self.partial_specs)?.out_attrs().to_vec();
        let overlap = vec![0; dims.len()];
        Ok(Arc::new(ArraySchema::with_chunking(dims, attrs, extents, overlap)?))
    }

    fn check_exact(&self, cells: &[(&Coord, &CellTuple)], bound: f64) -> Result<()> {
        for &k in &self.float_inputs {
            for (_, t) in cells {
                if let Scalar::Float(v) = t[k] {
                    if v.fract() != 0.0 || v.abs() > bound {
                        return Err(Error::NotIncrementalizable(format!(
                            "float input {v} cannot be maintained exactly by subtraction"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_workload(&self, changes: &[Change]) -> Result<()> {
        let bad = match self.workload {
            Workload::DeleteOnly => changes.iter().any(|c| c.new.is_some()),
            Workload::InsertOnly => !changes.is_empty(),
            Workload::Mixed => false,
        };
        if bad {
            return Err(Error::NotIncrementalizable(format!("δ violated the declared {:?} workload", self.workload)));
        }
        Ok(())
    }

    fn combine(&self, cur: &CellTuple, t: &CellTuple, mode: MergeMode) -> CellTuple {
        let mut out: CellTuple = cur
            .iter()
            .zip(t)
            .zip(&self.partial_kinds)
            .map(|((&x, &y), &k)| combine_partial(k, x, y, mode))
            .collect();
        self.normalize(&mut out);
        out
    }

    /// Sums over zero inputs are null, as a fresh aggregate would give.
    fn normalize(&self, p: &mut CellTuple) {
        for s in &self.slots {
            if s.entry.partials.first() == Some(&AggKind::Count) && p[s.start].as_i64() == Some(0) {
                for j in 1..s.entry.partials.len() {
                    p[s.start + j] = Scalar::Null;
                }
            }
        }
    }

    /// Finalized aggregates for the listed groups of C.
    pub fn finalize(&self, c: &ChunkedArray, groups: &BTreeSet<Coord>) -> Result<ChunkedArray> {
        let attrs = self.naive.group_schema().attrs().to_vec();
        let schema = ArraySchema::with_chunking(
            c.schema().dims().to_vec(),
            attrs,
            c.schema().chunk_extents().to_vec(),
            c.schema().overlap().to_vec(),
        )?;
        let mut out = ChunkedArray::new(schema)?;
        for g in groups {
            if let Some(p) = c.get_unchecked(g) {
                let t: CellTuple = self
                    .slots
                    .iter()
                    .map(|s| (s.entry.finalize)(&p[s.start..s.start + s.entry.partials.len()]))
                    .collect();
                out.put_unchecked(g, Some(t));
            }
        }
        Ok(out)
    }

    fn group_of(&self, c_schema: &ArraySchema, a_schema: &ArraySchema, coord: &[i64], t: &[Scalar]) -> Option<Coord> {
        match self.naive.kind() {
            Classified::GroupBy(_) => {
                Some(c_schema.dims().iter().map(|d| coord[a_schema.dim_index(&d.name).expect("subset")]).collect())
            }
            Classified::Attribute(attr) => {
                t[a_schema.attr_index(attr).expect("classified")].as_i64().map(|k| smallvec::smallvec![k])
            }
            Classified::Window(_) => None,
        }
    }
}

fn combine_partial(kind: AggKind, x: Scalar, y: Scalar, mode: MergeMode) -> Scalar {
    match (kind, x, y) {
        (_, x, Scalar::Null) => x,
        (AggKind::Min, Scalar::Null, y) | (AggKind::Max, Scalar::Null, y) => y,
        (AggKind::Min, x, y) => {
            if lt(y, x) {
                y
            } else {
                x
            }
        }
        (AggKind::Max, x, y) => {
            if lt(x, y) {
                y
            } else {
                x
            }
        }
        (_, x, y) => crate::store::merge_scalar(x, y, mode),
    }
}

fn lt(a: Scalar, b: Scalar) -> bool {
    match (a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => x < y,
        _ => a.as_f64().unwrap_or(f64::NAN) < b.as_f64().unwrap_or(f64::NAN),
    }
}

fn rehome(g: &ChunkedArray, schema: &Arc<ArraySchema>) -> ChunkedArray {
    let mut out = ChunkedArray::with_schema(schema.clone());
    for (c, t) in g.cells() {
        out.put_unchecked(c, Some(t.clone()));
    }
    out
}

/// Runtime state of an incremental run.
struct Carried {
    c: ChunkedArray,
    /// Changes made by the previous iteration.
    last: Vec<Change>,
    seeded: bool,
}

fn delta_arrays(a: &ChunkedArray, changes: &[Change]) -> (ChunkedArray, ChunkedArray) {
    let mut minus = a.empty_like();
    let mut plus = a.empty_like();
    for ch in changes {
        minus.put_unchecked(&ch.coord, Some(ch.old.clone()));
        if let Some(n) = &ch.new {
            plus.put_unchecked(&ch.coord, Some(n.clone()));
        }
    }
    (minus, plus)
}

impl IncrementalPlan {
    /// Seed pass: C ← partials(A), finalize every group, apply δ everywhere.
    fn seed(&self, a: &ChunkedArray, exec: &Executor) -> Result<(ChunkedArray, StepResult)> {
        let n = a.len().max(1) as f64;
        self.check_exact(&a.cells(), (EXACT / n).sqrt().floor())?;
        let cs = self.c_schema(a)?;
        let c = self.partial_aggregates(a, &cs)?;
        let groups: BTreeSet<Coord> = c.cells().into_iter().map(|(k, _)| k.clone()).collect();
        let f = self.finalize(&c, &groups)?;
        let mut r = self.naive.apply_delta(a, &f, exec)?;
        r.cells_touched += (a.len() + c.len() + f.len()) as u64;
        Ok((c, r))
    }

    /// Folds the previous changes into C and re-applies δ where needed.
    fn advance(
        &self,
        a: &ChunkedArray,
        st: &mut Carried,
        exec: &Executor,
        store: Option<(&mut VersionedStore, &str)>,
    ) -> Result<StepResult> {
        let cs = st.c.schema_arc().clone();
        let (minus, plus) = delta_arrays(a, &st.last);
        let n = (a.len() + plus.len()).max(1) as f64;
        self.check_exact(&plus.cells(), (EXACT / n).sqrt().floor())?;
        let t_minus = self.partial_aggregates(&minus, &cs)?;
        let t_plus = self.partial_aggregates(&plus, &cs)?;
        let mut touched = (st.last.len() + t_minus.len() + t_plus.len()) as u64;

        let mut moved: BTreeSet<Coord> = BTreeSet::new();
        match store {
            None => {
                let mut c = st.c.clone();
                for (t, mode) in [(&t_minus, MergeMode::Subtract), (&t_plus, MergeMode::Add)] {
                    for (g, p) in t.cells() {
                        let cur = c.get_unchecked(g).cloned().unwrap_or_else(|| self.zero_partials());
                        let next = self.combine(&cur, p, mode);
                        let next = if next[0].as_i64() == Some(0) { None } else { Some(next) };
                        if next.as_ref() != c.get_unchecked(g) {
                            moved.insert(g.clone());
                        }
                        c.put_unchecked(g, next);
                    }
                }
                st.c = c;
            }
            Some((store, name)) => {
                if self.partial_kinds.iter().any(|k| matches!(k, AggKind::Min | AggKind::Max)) {
                    return Err(Error::StrategyUnavailable(
                        "storage-level merges only add or subtract partials".into(),
                    ));
                }
                let before = store.latest_version(name)?;
                if !t_minus.is_empty() {
                    store.store_annotated(name, &t_minus, MergeMode::Subtract)?;
                }
                if !t_plus.is_empty() {
                    store.store_annotated(name, &t_plus, MergeMode::Add)?;
                }
                // Clean-up store: groups whose cell count dropped to zero.
                let latest = store.latest(name)?;
                let mut cleaned = latest.clone();
                let mut dropped = false;
                for (g, p) in latest.cells() {
                    if p[0].as_i64() == Some(0) {
                        cleaned.put_unchecked(g, None);
                        dropped = true;
                    } else {
                        let mut q = p.clone();
                        self.normalize(&mut q);
                        if &q != p {
                            cleaned.put_unchecked(g, Some(q));
                            dropped = true;
                        }
                    }
                }
                if dropped {
                    store.store(name, cleaned)?;
                }
                let after = store.latest_version(name)?;
                for v in before + 1..=after {
                    for (g, _) in store.scan(name, Which::DeltaPlus, Some(v))?.cells() {
                        moved.insert(g.clone());
                    }
                }
                // Net change only: a group subtracted and re-added unchanged did not move.
                let old = store.scan(name, Which::Full, Some(before))?;
                let new = store.latest(name)?;
                moved.retain(|g| old.get_unchecked(g) != new.get_unchecked(g));
                st.c = new.clone();
            }
        }

        // Cells changed last iteration must be re-evaluated even if their
        // group's aggregates did not move.
        let mut groups = moved.clone();
        for (c, t) in plus.cells() {
            if let Some(g) = self.group_of(st.c.schema(), a.schema(), c, t) {
                groups.insert(g);
            }
        }
        if groups.is_empty() {
            return Ok(StepResult { next: a.clone(), changes: Vec::new(), cells_touched: touched });
        }
        let f = match self.spec().delta {
            // Every cell depends on every centroid.
            Delta::NearestCentroid { .. } => {
                let all: BTreeSet<Coord> = st.c.cells().into_iter().map(|(k, _)| k.clone()).collect();
                self.finalize(&st.c, &all)?
            }
            Delta::Update(_) => self.finalize(&st.c, &groups)?,
        };
        touched += f.len() as u64;
        let mut r = self.naive.apply_delta(a, &f, exec)?;
        r.cells_touched += touched;
        Ok(r)
    }

    fn zero_partials(&self) -> CellTuple {
        self.partial_kinds
            .iter()
            .map(|k| match k {
                AggKind::Count => Scalar::Int(0),
                _ => Scalar::Null,
            })
            .collect()
    }
}

fn state_name(array: &str) -> String {
    format!("{array}#C")
}

fn run_with(
    plan: &IncrementalPlan,
    a0: ChunkedArray,
    mut store: Option<&mut VersionedStore>,
    storage_route: bool,
    exec: &Executor,
    mut observe: Option<&mut dyn FnMut(u64, &ChunkedArray, &ChunkedArray)>,
) -> Result<Outcome> {
    let spec = plan.spec().clone();
    let cname = state_name(&spec.array);
    let mut st = Carried { c: a0.empty_like(), last: Vec::new(), seeded: false };
    let mut private = VersionedStore::new();
    let mut step = |a: &ChunkedArray, i: u64| -> Result<(StepResult, ExecutorStats, bool)> {
        let r = if !st.seeded {
            let (c, r) = plan.seed(a, exec)?;
            if storage_route {
                let s = match store.as_deref_mut() {
                    Some(s) => s,
                    None => &mut private,
                };
                s.store(&cname, c.clone())?;
            }
            st.c = c;
            st.seeded = true;
            r
        } else {
            let route = if storage_route {
                Some((
                    match store.as_deref_mut() {
                        Some(s) => s,
                        None => &mut private,
                    },
                    cname.as_str(),
                ))
            } else {
                None
            };
            plan.advance(a, &mut st, exec, route)?
        };
        plan.check_workload(&r.changes)?;
        if let Some(f) = observe.as_deref_mut() {
            f(i, a, &st.c);
        }
        st.last = r.changes.clone();
        let stats = ExecutorStats { mini_index: i, major_index: i, shuffled_chunks: 0, shuffled_cells: 0 };
        Ok((r, stats, false))
    };
    fixpoint::drive(&spec, a0, None, &mut step)
}

/// Runs an incremental plan on the latest version of `spec.array`.
///
/// With `storage_route`, C lives in the store and is updated through
/// annotated add/subtract stores; ΔC⁺ is read back from the store.
pub fn run_incremental(
    plan: &IncrementalPlan,
    store: &mut VersionedStore,
    storage_route: bool,
    exec: &Executor,
) -> Result<Outcome> {
    let a0 = store.latest(&plan.spec().array)?.clone();
    let out = run_with(plan, a0, Some(store), storage_route, exec, None);
    let arr = match &out {
        Ok(o) => Some(o.array.clone()),
        Err(Error::NonConvergence(o)) => Some(o.array.clone()),
        Err(_) => None,
    };
    if let Some(a) = arr {
        store.store(&plan.spec().array, a)?;
    }
    out
}

/// In-memory incremental run; the storage route uses a private store.
pub fn run_incremental_array(
    plan: &IncrementalPlan,
    a0: &ChunkedArray,
    storage_route: bool,
    exec: &Executor,
) -> Result<Outcome> {
    run_with(plan, a0.clone(), None, storage_route, exec, None)
}

/// Like [`run_incremental_array`], calling `observe(iteration, A, C)` after
/// each iteration with the array the iteration read and the carried state.
pub fn run_incremental_observed(
    plan: &IncrementalPlan,
    a0: &ChunkedArray,
    storage_route: bool,
    exec: &Executor,
    observe: &mut dyn FnMut(u64, &ChunkedArray, &ChunkedArray),
) -> Result<Outcome> {
    run_with(plan, a0.clone(), None, storage_route, exec, Some(observe))
}

/// Recomputes C from scratch for `a` (the carried-state oracle).
pub fn fresh_state(plan: &IncrementalPlan, a: &ChunkedArray) -> Result<ChunkedArray> {
    let cs = plan.c_schema(a)?;
    plan.partial_aggregates(a, &cs)
}
