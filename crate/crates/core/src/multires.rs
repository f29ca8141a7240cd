//! Coarse-to-fine fixpoint evaluation over a grid pyramid.
//!
//! Level 0 is the input; level i+1 is `filter(grid(Aⁱ, block, aggs), keep)`
//! projected back onto the input's attributes. The fixpoint runs on the
//! coarsest level first, and each converged level is upsampled with xgrid
//! and merged into the next finer input to seed it.

use crate::array::{ArraySchema, ChunkedArray};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::Expr;
use crate::fixpoint::{self, AssignmentFunction, Classified, FixPointSpec, IterationTrace, Outcome};
use crate::ops::{self, AggregateSpec};
use crate::store::VersionedStore;

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSpec {
    pub levels: usize,
    pub block: Vec<i64>,
    /// Grid aggregates. Outputs named like input attributes carry over to
    /// the coarser level; the rest only feed `keep`.
    pub aggs: Vec<AggregateSpec>,
    pub keep: Expr,
    /// Per-attribute expressions over the fine cell (`src`) and the
    /// upsampled coarse result (`ext`).
    pub seed_merge: Vec<Expr>,
}

impl PyramidSpec {
    fn validate(&self, base: &ArraySchema) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::BadPyramidSpec("levels must be at least 1".into()));
        }
        if self.block.len() != base.ndim() || self.block.iter().any(|&b| b < 1) {
            return Err(Error::BadPyramidSpec(format!("block {:?} does not fit {} dimensions", self.block, base.ndim())));
        }
        if self.seed_merge.len() != base.arity() {
            return Err(Error::BadPyramidSpec("one seed expression per attribute is required".into()));
        }
        for a in base.attrs() {
            if !self.aggs.iter().any(|g| g.name == a.name) {
                return Err(Error::BadPyramidSpec(format!("no grid aggregate produces `{}`", a.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    /// Pixelated input Aⁱ.
    pub input: ChunkedArray,
    /// Seeded input A_xⁱ (the coarsest level is run from its input).
    pub seeded: Option<ChunkedArray>,
    /// Converged output A*ⁱ.
    pub output: Option<ChunkedArray>,
    pub trace: Option<IterationTrace>,
}

#[derive(Clone, Debug)]
pub struct PyramidState {
    pub spec: PyramidSpec,
    pub levels: Vec<Level>,
}

impl PyramidState {
    pub fn finest(&self) -> Option<&ChunkedArray> {
        self.levels.first().and_then(|l| l.output.as_ref())
    }

    /// Stores every materialized A*ⁱ as `<array>@L<i>`.
    pub fn materialize(&self, array: &str, store: &mut VersionedStore) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            if let Some(o) = &l.output {
                store.store(&format!("{array}@L{i}"), o.clone())?;
            }
        }
        Ok(())
    }
}

/// One coarsening step: grid, keep, project onto the base attributes.
pub fn coarsen(a: &ChunkedArray, p: &PyramidSpec) -> Result<ChunkedArray> {
    let g = ops::grid(a, &p.block, &p.aggs)?;
    let kept = ops::filter(&g, &p.keep).map_err(|e| Error::BadPyramidSpec(format!("keep predicate: {e}")))?;
    let base = a.schema();
    let idx: Vec<usize> = base
        .attrs()
        .iter()
        .map(|attr| kept.schema().attr_index(&attr.name).expect("validated"))
        .collect();
    for (attr, &i) in base.attrs().iter().zip(&idx) {
        if kept.schema().attrs()[i].kind != attr.kind {
            return Err(Error::BadPyramidSpec(format!("aggregate `{}` changes the attribute kind", attr.name)));
        }
    }
    let schema = ArraySchema::with_chunking(
        kept.schema().dims().to_vec(),
        base.attrs().to_vec(),
        kept.schema().chunk_extents().to_vec(),
        kept.schema().overlap().to_vec(),
    )?;
    let mut out = ChunkedArray::new(schema)?;
    for (c, t) in kept.cells() {
        out.put_unchecked(c, Some(idx.iter().map(|&i| t[i]).collect()));
    }
    Ok(out)
}

pub fn build_pyramid(a: &ChunkedArray, p: &PyramidSpec) -> Result<PyramidState> {
    p.validate(a.schema())?;
    let mut levels = vec![Level { input: a.clone(), seeded: None, output: None, trace: None }];
    for _ in 1..p.levels {
        let next = coarsen(&levels.last().expect("non-empty").input, p)?;
        levels.push(Level { input: next, seeded: None, output: None, trace: None });
    }
    Ok(PyramidState { spec: p.clone(), levels })
}

/// Window radius at the next coarser level: the smallest radius whose
/// blocks still reach every fine neighbour.
pub fn coarse_radius(r: i64, b: i64) -> i64 {
    if r <= 0 {
        0
    } else {
        (r - 1).div_euclid(b) + 1
    }
}

/// The spec as run at pyramid level `level`.
pub fn level_spec(spec: &FixPointSpec, schema: &ArraySchema, block: &[i64], level: usize) -> Result<FixPointSpec> {
    let mut s = spec.clone();
    if let Classified::Window(offsets) = fixpoint::classify(&spec.pi, schema)? {
        let mut o = offsets;
        for _ in 0..level {
            o = o.iter().zip(block).map(|(&r, &b)| coarse_radius(r, b)).collect();
        }
        let names: Vec<&str> = schema.dims().iter().map(|d| d.name.as_str()).collect();
        s.pi = AssignmentFunction::window(&names, &o);
    }
    Ok(s)
}

/// Seeds level `i` from the converged level `i + 1`.
pub fn seed_level(input: &ChunkedArray, coarse: &ChunkedArray, p: &PyramidSpec, level: usize) -> Result<ChunkedArray> {
    let up = ops::xgrid(coarse, &p.block)?;
    let seeded = ops::merge(input, &up, &p.seed_merge)?;
    if seeded.len() != input.len() || seeded.cells().iter().any(|(c, _)| input.get_unchecked(c).is_none()) {
        return Err(Error::SeedInvalid { level, reason: "seeding changed the set of non-empty cells".into() });
    }
    Ok(seeded)
}

/// Runs levels `from` down to 0, assuming levels above `from` hold outputs.
fn run_levels(
    state: &mut PyramidState,
    spec: &FixPointSpec,
    from: usize,
    runner: &mut dyn FnMut(&FixPointSpec, &ChunkedArray) -> Result<Outcome>,
) -> Result<()> {
    let base = state.levels[0].input.schema().clone();
    for i in (0..=from).rev() {
        let start = match state.levels.get(i + 1).and_then(|l| l.output.clone()) {
            Some(coarse) => Some(seed_level(&state.levels[i].input, &coarse, &state.spec, i)?),
            None => None,
        };
        let ls = level_spec(spec, &base, &state.spec.block, i)?;
        let level = &mut state.levels[i];
        let out = runner(&ls, start.as_ref().unwrap_or(&level.input))?;
        level.seeded = start;
        level.output = Some(out.array);
        level.trace = Some(out.trace);
    }
    Ok(())
}

/// Naive fixpoint runner for [`run_multires_with`].
pub fn naive_runner(exec: &Executor) -> impl FnMut(&FixPointSpec, &ChunkedArray) -> Result<Outcome> + '_ {
    move |s, a| fixpoint::run_array(s, a, exec)
}

pub fn run_multires_with(
    state: &mut PyramidState,
    spec: &FixPointSpec,
    runner: &mut dyn FnMut(&FixPointSpec, &ChunkedArray) -> Result<Outcome>,
) -> Result<(ChunkedArray, Vec<IterationTrace>)> {
    let top = state.levels.len() - 1;
    for l in &mut state.levels {
        l.output = None;
        l.seeded = None;
        l.trace = None;
    }
    run_levels(state, spec, top, runner)?;
    let traces = state.levels.iter().map(|l| l.trace.clone().unwrap_or_default()).collect();
    Ok((state.finest().expect("level 0 ran").clone(), traces))
}

pub fn run_multires(
    state: &mut PyramidState,
    spec: &FixPointSpec,
    exec: &Executor,
) -> Result<(ChunkedArray, Vec<IterationTrace>)> {
    run_multires_with(state, spec, &mut naive_runner(exec))
}

/// Rebuilds the pyramid for `changed` and reruns only the levels whose
/// inputs moved. Returns the new state, the final array and the number of
/// levels recomputed.
///
/// Coarser levels are deterministic functions of finer ones, so once a
/// level's input is unchanged every coarser level is unchanged too and its
/// materialized output is reused.
pub fn rerun_on_change_with(
    prior: &PyramidState,
    changed: &ChunkedArray,
    spec: &FixPointSpec,
    runner: &mut dyn FnMut(&FixPointSpec, &ChunkedArray) -> Result<Outcome>,
) -> Result<(PyramidState, ChunkedArray, usize)> {
    if prior.levels.iter().any(|l| l.output.is_none()) {
        return Err(Error::NoPriorState);
    }
    let mut state = build_pyramid(changed, &prior.spec)?;
    let same = state
        .levels
        .iter()
        .zip(&prior.levels)
        .position(|(n, o)| n.input.schema().logically_equal(o.input.schema()) && n.input.same_cells(&o.input));
    let reuse_from = same.unwrap_or(state.levels.len());
    for i in reuse_from..state.levels.len() {
        state.levels[i] = prior.levels[i].clone();
    }
    if reuse_from > 0 {
        run_levels(&mut state, spec, reuse_from - 1, runner)?;
    }
    let out = state.finest().expect("level 0 materialized").clone();
    Ok((state, out, reuse_from))
}

pub fn rerun_on_change(
    prior: &PyramidState,
    changed: &ChunkedArray,
    spec: &FixPointSpec,
    exec: &Executor,
) -> Result<(PyramidState, ChunkedArray, usize)> {
    rerun_on_change_with(prior, changed, spec, &mut naive_runner(exec))
}
