//! Overlap (halo) processing across chunks with mini-iterations.
//!
//! Each chunk carries replicas of its neighbours' border cells. Workers run
//! local iterations over core + halo without refreshing the replicas; a
//! shuffle policy decides when halos are exchanged. Exchanges ship whole
//! chunks through a message queue so their cost is countable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::mpsc;
use std::time::Instant;

use crate::array::{ArraySchema, CellTuple, ChunkedArray, Coord};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::{CellUpdate, Row};
use crate::fixpoint::{self, Classified, Delta, ExecutorStats, FixPointSpec, IterationRecord, IterationTrace, Outcome};
use crate::ops::{self, AggKind, BoundAggs, Change};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShufflePolicy {
    EveryK(u64),
    OnLocalConvergence,
    ChangeThreshold(u64),
}

impl ShufflePolicy {
    /// Parses `t1`, `t5`, `t10`, `tK=<k>`, `converge` or `thresh=<n>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown policy `{s}`"));
        if s == "converge" {
            return Ok(ShufflePolicy::OnLocalConvergence);
        }
        if let Some(n) = s.strip_prefix("thresh=") {
            return n.parse().map(ShufflePolicy::ChangeThreshold).map_err(|_| bad());
        }
        let k = s.strip_prefix("tK=").or_else(|| s.strip_prefix('t')).ok_or_else(bad)?;
        match k.parse::<u64>() {
            Ok(k) if k >= 1 => Ok(ShufflePolicy::EveryK(k)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ShufflePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShufflePolicy::EveryK(k) if matches!(k, 1 | 5 | 10) => write!(f, "t{k}"),
            ShufflePolicy::EveryK(k) => write!(f, "tK={k}"),
            ShufflePolicy::OnLocalConvergence => f.write_str("converge"),
            ShufflePolicy::ChangeThreshold(n) => write!(f, "thresh={n}"),
        }
    }
}

/// Whether halos are synchronized before mini-iteration `m`.
pub fn signal_opt(policy: ShufflePolicy, m: u64, local_delta_sizes: &[u64]) -> bool {
    match policy {
        ShufflePolicy::EveryK(k) => m % k == 0,
        ShufflePolicy::OnLocalConvergence => local_delta_sizes.iter().all(|&d| d == 0),
        ShufflePolicy::ChangeThreshold(n) => local_delta_sizes.iter().sum::<u64>() <= n,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerPartition {
    pub assignment: BTreeMap<Coord, usize>,
    pub workers: usize,
}

impl WorkerPartition {
    /// Chunks dealt to workers round-robin in chunk-id order.
    pub fn round_robin(ids: &[Coord], workers: usize) -> Self {
        let workers = workers.max(1);
        let assignment = ids.iter().enumerate().map(|(i, id)| (id.clone(), i % workers)).collect();
        WorkerPartition { assignment, workers }
    }

    pub fn chunks_of(&self, w: usize) -> Vec<Coord> {
        self.assignment.iter().filter(|(_, &x)| x == w).map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShuffleStats {
    pub chunks: u64,
    pub cells: u64,
    pub bytes: u64,
}

/// Lower and upper corners of a chunk's core box grown by `radius`.
fn grown_box(schema: &ArraySchema, id: &[i64], radius: &[i64]) -> (Coord, Coord) {
    let (lo, hi) = schema.core_box(id);
    let lo = lo.iter().zip(radius).zip(schema.dims()).map(|((&l, &r), d)| (l - r).max(d.lower)).collect();
    let hi = hi.iter().zip(radius).zip(schema.dims()).map(|((&h, &r), d)| (h + r).min(d.upper)).collect();
    (lo, hi)
}

fn in_box(c: &[i64], lo: &[i64], hi: &[i64]) -> bool {
    c.iter().zip(lo).zip(hi).all(|((&x, &l), &h)| l <= x && x <= h)
}

/// Ids of chunks adjacent to `id` (including diagonals), excluding itself.
fn neighbours(schema: &ArraySchema, id: &[i64]) -> Vec<Coord> {
    let grid = schema.chunk_grid();
    let lo: Coord = id.iter().map(|&i| (i - 1).max(0)).collect();
    let hi: Coord = id.iter().zip(&grid).map(|(&i, &g)| (i + 1).min(g - 1)).collect();
    let mut out = Vec::new();
    crate::array::for_each_in_box(&lo, &hi, |c| {
        if c.as_slice() != id {
            out.push(c.clone());
        }
    });
    out
}

struct Message {
    dst: Coord,
    cells: Vec<(Coord, CellTuple)>,
    payload_cells: u64,
}

/// Refreshes every halo from the current cores. Each (source, destination)
/// chunk pair whose boxes meet counts as one whole-chunk exchange.
pub fn shuffle_overlap(a: &ChunkedArray, workers: usize) -> (ChunkedArray, ShuffleStats) {
    let schema = a.schema();
    let radius = schema.overlap().to_vec();
    let mut out = a.clone();
    let ids = a.chunk_ids();
    for id in &ids {
        if !a.chunk(id).is_some_and(|c| c.halo.is_empty()) {
            out.chunk_mut(id).halo.clear();
        }
    }
    if radius.iter().all(|&r| r == 0) || ids.len() < 2 {
        return (out, ShuffleStats::default());
    }
    let live: BTreeSet<Coord> = ids.iter().cloned().collect();
    let part = WorkerPartition::round_robin(&ids, workers);
    let bytes_per_cell = 8 * (schema.ndim() + schema.arity()) as u64;
    let (tx, rx) = mpsc::channel::<Message>();
    std::thread::scope(|s| {
        for w in 0..part.workers {
            let tx = tx.clone();
            let mine = part.chunks_of(w);
            let live = &live;
            let radius = &radius;
            s.spawn(move || {
                for src in mine {
                    let chunk = a.chunk(&src).expect("live chunk");
                    for dst in neighbours(schema, &src) {
                        if !live.contains(&dst) {
                            continue;
                        }
                        let (lo, hi) = grown_box(schema, &dst, radius);
                        let cells: Vec<(Coord, CellTuple)> = chunk
                            .core
                            .iter()
                            .filter(|(c, _)| in_box(c, &lo, &hi))
                            .map(|(c, t)| (c.clone(), t.clone()))
                            .collect();
                        if cells.is_empty() {
                            continue;
                        }
                        let payload_cells = chunk.core.len() as u64;
                        tx.send(Message { dst, cells, payload_cells }).expect("receiver alive");
                    }
                }
            });
        }
    });
    drop(tx);
    let mut stats = ShuffleStats::default();
    for msg in rx {
        stats.chunks += 1;
        stats.cells += msg.payload_cells;
        stats.bytes += msg.payload_cells * bytes_per_cell;
        out.chunk_mut(&msg.dst).halo.extend(msg.cells);
    }
    (out, stats)
}

/// Sets the overlap radius of `a` and fills every halo. For window specs
/// the radius must cover the window offsets.
pub fn partition_with_overlap(a: &ChunkedArray, radius: &[i64], window: Option<&[i64]>) -> Result<ChunkedArray> {
    let s = a.schema();
    if radius.len() != s.ndim() {
        return Err(Error::BadOffsets(format!("{} radii for {} dimensions", radius.len(), s.ndim())));
    }
    if radius.iter().zip(s.chunk_extents()).any(|(&r, &e)| r >= e) || radius.iter().any(|&r| r < 0) {
        return Err(Error::OverlapTooLarge { radius: radius.to_vec(), extents: s.chunk_extents().to_vec() });
    }
    if let Some(w) = window {
        if w.iter().zip(radius).any(|(&o, &r)| o > r) {
            return Err(Error::OverlapTooSmall { radius: radius.to_vec(), offsets: w.to_vec() });
        }
    }
    let b = a.rechunk(s.chunk_extents().to_vec(), radius.to_vec())?;
    Ok(shuffle_overlap(&b, 1).0)
}

/// Whether every halo cell equals its core source.
pub fn halos_coherent(a: &ChunkedArray) -> bool {
    a.chunks().all(|ch| ch.halo.iter().all(|(c, t)| a.get_unchecked(c) == Some(t)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelConfig {
    pub policy: ShufflePolicy,
    pub workers: usize,
    /// Halo radius; defaults to the window offsets.
    pub radius: Option<Vec<i64>>,
}

impl ParallelConfig {
    pub fn new(policy: ShufflePolicy, workers: usize) -> Self {
        ParallelConfig { policy, workers, radius: None }
    }
}

struct LocalKernel<'a> {
    schema: &'a ArraySchema,
    bound: BoundAggs,
    offsets: Vec<i64>,
    update: CellUpdate,
}

impl LocalKernel<'_> {
    /// One local iteration over a chunk's core, reading core + halo.
    fn run(&self, chunk: &crate::array::Chunk) -> Vec<Change> {
        let mut changes = Vec::new();
        for (c, t) in &chunk.core {
            let agg = ops::window_fold(self.schema, &self.bound, &self.offsets, c, |p| chunk.lookup(p));
            let new = self.update.apply(Row::new(c, t), Some(Row::new(c, &agg)));
            if new.as_ref() != Some(t) {
                changes.push(Change { coord: c.clone(), old: t.clone(), new });
            }
        }
        changes
    }
}

/// Runs `spec` on `a` with per-chunk mini-iterations.
///
/// Window specs with min/max aggregates may run on stale halos under any
/// policy. Everything else needs halos refreshed every iteration and runs
/// whole major steps.
pub fn run_parallel(spec: &FixPointSpec, a: &ChunkedArray, cfg: &ParallelConfig) -> Result<Outcome> {
    let plan = fixpoint::rewrite_naive(spec, a.schema())?;
    let every = cfg.policy == ShufflePolicy::EveryK(1);
    let offsets = match plan.kind() {
        Classified::Window(o) => o.clone(),
        _ => {
            if !every {
                return Err(Error::StrategyUnavailable(format!(
                    "policy {} needs a window assignment; group-by specs shuffle every iteration",
                    cfg.policy
                )));
            }
            let exec = Executor::new(cfg.workers);
            return fixpoint::run_array(spec, a, &exec);
        }
    };
    let monotone = spec.f.iter().all(|f| matches!(f.kind, AggKind::Min | AggKind::Max));
    if !monotone && !every {
        return Err(Error::StrategyUnavailable("stale halos are only safe for min/max window aggregates".into()));
    }
    let Delta::Update(exprs) = &spec.delta else {
        return Err(Error::StrategyUnavailable("window specs need an expression δ".into()));
    };
    let radius = cfg.radius.clone().unwrap_or_else(|| offsets.clone());
    let mut cur = partition_with_overlap(a, &radius, Some(&offsets))?;
    let schema = cur.schema().clone();
    let bound = BoundAggs::bind(&schema, &spec.f)?;
    let ext_schema = ops::window_schema(&schema, &bound)?;
    let kernel = LocalKernel {
        schema: &schema,
        update: CellUpdate::compile(exprs, &schema, Some(&ext_schema), &schema)?,
        bound,
        offsets,
    };

    let ids = cur.chunk_ids();
    let part = WorkerPartition::round_robin(&ids, cfg.workers);
    let mut trace = IterationTrace::default();
    let mut majors = 0u64;
    let mut deltas: Option<Vec<u64>> = None;
    let mut dirty = false;
    for m in 1..=spec.max_iterations as u64 {
        let start = Instant::now();
        let sizes = deltas.clone().unwrap_or_else(|| vec![1; ids.len().max(1)]);
        let mut shuffle = ShuffleStats::default();
        let shuffled = signal_opt(cfg.policy, m, &sizes);
        if shuffled {
            let (next, st) = shuffle_overlap(&cur, cfg.workers);
            cur = next;
            shuffle = st;
            majors += 1;
            dirty = false;
        }
        let fresh = !dirty;

        let results: Vec<(Coord, Vec<Change>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..part.workers)
                .map(|w| {
                    let mine = part.chunks_of(w);
                    let cur = &cur;
                    let kernel = &kernel;
                    s.spawn(move || {
                        mine.into_iter()
                            .map(|id| {
                                let ch = kernel.run(cur.chunk(&id).expect("live chunk"));
                                (id, ch)
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut all: Vec<(Coord, Vec<Change>)> =
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
            all.sort_by(|x, y| x.0.cmp(&y.0));
            all
        });

        let mut sizes = Vec::with_capacity(results.len());
        let mut changed = 0u64;
        let mut changes_all = Vec::new();
        for (id, changes) in results {
            sizes.push(changes.len() as u64);
            changed += changes.len() as u64;
            if !changes.is_empty() {
                let chunk = cur.chunk_mut(&id);
                for ch in &changes {
                    match &ch.new {
                        Some(t) => chunk.core.insert(ch.coord.clone(), t.clone()),
                        None => chunk.core.remove(&ch.coord),
                    };
                }
            }
            changes_all.extend(changes);
        }
        if changed > 0 {
            dirty = true;
        }
        trace.records.push(IterationRecord {
            iteration: m,
            changed_cells: changed,
            t_value: spec.termination.evaluate(&changes_all),
            cells_touched: cur.len() as u64,
            shuffle_performed: shuffled,
            wall_time: start.elapsed(),
            stats: ExecutorStats { mini_index: m, major_index: majors, shuffled_chunks: shuffle.chunks, shuffled_cells: shuffle.cells },
        });
        deltas = Some(sizes);
        // Halos matched the cores when this step started, so the step was a
        // true global step: a quiet one means the fixpoint is reached.
        if fresh && spec.termination.evaluate(&changes_all) <= spec.epsilon {
            let out = finish(&cur, a)?;
            return Ok(Outcome { array: out, trace, converged: true });
        }
    }
    let out = finish(&cur, a)?;
    Err(Error::NonConvergence(Box::new(Outcome { array: out, trace, converged: false })))
}

fn finish(cur: &ChunkedArray, original: &ChunkedArray) -> Result<ChunkedArray> {
    let s = original.schema();
    let mut out = cur.rechunk(s.chunk_extents().to_vec(), s.overlap().to_vec())?;
    out.clear_halos();
    Ok(out)
}

/// Sum of a trace's shuffle counters.
pub fn total_shuffles(trace: &IterationTrace) -> (u64, u64) {
    trace.iter().fold((0, 0), |(c, n), r| (c + r.stats.shuffled_chunks, n + r.stats.shuffled_cells))
}

/// Number of mini and major iterations in a trace.
pub fn iteration_counts(trace: &IterationTrace) -> (u64, u64) {
    (trace.len() as u64, trace.last().map_or(0, |r| r.stats.major_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{Attribute, Dimension, ScalarKind};
    use crate::expr::Expr;
    use crate::fixpoint::AssignmentFunction;
    use crate::ops::AggregateSpec;
    use crate::{coord, tuple};

    fn plane(n: i64, chunk: i64) -> ArraySchema {
        ArraySchema::with_chunking(
            vec![Dimension::new("x", 0, n - 1), Dimension::new("y", 0, n - 1)],
            vec![Attribute::new("label", ScalarKind::Int64)],
            vec![chunk, chunk],
            vec![0, 0],
        )
        .unwrap()
    }

    fn label_spec() -> FixPointSpec {
        FixPointSpec::new(
            "L",
            AssignmentFunction::window(&["x", "y"], &[1, 1]),
            vec![AggregateSpec::new("m", AggKind::Min, "label")],
            Delta::Update(vec![Expr::parse("m").unwrap()]),
        )
    }

    fn dense(n: i64, chunk: i64) -> ChunkedArray {
        let mut a = ChunkedArray::new(plane(n, chunk)).unwrap();
        for x in 0..n {
            for y in 0..n {
                a.insert(&coord![x, y], tuple![x * n + y]).unwrap();
            }
        }
        a
    }

    #[test]
    fn halo_holds_neighbour_border() {
        let p = partition_with_overlap(&dense(4, 2), &[1, 1], None).unwrap();
        let c00 = p.chunk(&[0, 0]).unwrap();
        assert!(c00.halo.contains_key(&coord![2, 1]));
        assert!(c00.halo.contains_key(&coord![2, 2]));
        assert!(!c00.halo.contains_key(&coord![3, 1]));
        assert_eq!(c00.halo.len(), 5);
        assert!(halos_coherent(&p));

        let z = partition_with_overlap(&dense(4, 2), &[0, 0], None).unwrap();
        assert!(z.chunks().all(|c| c.halo.is_empty()));
        assert!(partition_with_overlap(&dense(4, 2), &[1, 1], Some(&[1, 1])).is_ok());
        assert!(matches!(
            partition_with_overlap(&dense(4, 2), &[1, 1], Some(&[2, 2])),
            Err(Error::OverlapTooSmall { .. })
        ));
        assert!(matches!(partition_with_overlap(&dense(4, 2), &[2, 2], None), Err(Error::OverlapTooLarge { .. })));
    }

    #[test]
    fn shuffle_refreshes_and_counts_chunks() {
        let mut p = partition_with_overlap(&dense(4, 2), &[1, 1], None).unwrap();
        p.chunk_mut(&coord![1, 0]).core.insert(coord![2, 1], tuple![-1i64]);
        assert!(!halos_coherent(&p));
        let (q, st) = shuffle_overlap(&p, 2);
        assert!(halos_coherent(&q));
        // Every chunk of a 2×2 grid sends to its three neighbours.
        assert_eq!(st.chunks, 12);
        let (_, again) = shuffle_overlap(&q, 1);
        assert_eq!(again, st);

        let single = partition_with_overlap(&dense(4, 4), &[1, 1], None).unwrap();
        assert_eq!(shuffle_overlap(&single, 4).1, ShuffleStats::default());
    }

    #[test]
    fn signal_cases() {
        for m in 1..=9 {
            assert!(!signal_opt(ShufflePolicy::EveryK(10), m, &[1]));
        }
        assert!(signal_opt(ShufflePolicy::EveryK(10), 10, &[1]));
        assert!(signal_opt(ShufflePolicy::EveryK(10), 20, &[1]));
        assert!(!signal_opt(ShufflePolicy::OnLocalConvergence, 3, &[0, 2]));
        assert!(signal_opt(ShufflePolicy::OnLocalConvergence, 3, &[0, 0]));
        assert!(signal_opt(ShufflePolicy::ChangeThreshold(0), 1, &[0, 0]));
        for s in ["t1", "t5", "t10", "tK=7", "converge", "thresh=3"] {
            assert_eq!(ShufflePolicy::parse(s).unwrap().to_string(), s);
        }
        assert!(ShufflePolicy::parse("t0").is_err());
    }

    #[test]
    fn policies_agree_with_sequential() {
        let mut a = ChunkedArray::new(plane(8, 4)).unwrap();
        // A snake crossing all four chunks.
        let cells = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7), (7, 0), (6, 1), (0, 7)];
        for (x, y) in cells {
            a.insert(&coord![x, y], tuple![100 - x * 8 - y]).unwrap();
        }
        let seq = fixpoint::run_array(&label_spec(), &a, &Executor::sequential()).unwrap();
        for policy in ["t1", "t5", "t10", "converge", "thresh=1"] {
            for workers in [1, 2, 4] {
                let cfg = ParallelConfig::new(ShufflePolicy::parse(policy).unwrap(), workers);
                let out = run_parallel(&label_spec(), &a, &cfg).unwrap();
                assert_eq!(out.array.dump(), seq.array.dump(), "{policy} {workers}");
                if policy == "t1" {
                    let (minis, majors) = iteration_counts(&out.trace);
                    assert_eq!(minis, majors);
                }
            }
        }
    }

    #[test]
    fn group_by_needs_every_iteration() {
        let s = ArraySchema::new(
            vec![Dimension::new("x", 0, 1), Dimension::new("t", 0, 1)],
            vec![Attribute::new("d", ScalarKind::Float64)],
        )
        .unwrap();
        let a = ChunkedArray::from_cells(s, [(coord![0, 0], tuple![1.0])]).unwrap();
        let spec = FixPointSpec::new(
            "A",
            AssignmentFunction::groupby(&["x"]),
            vec![AggregateSpec::new("μ", AggKind::Avg, "d")],
            Delta::Update(vec![Expr::parse("d").unwrap()]),
        );
        assert!(matches!(
            run_parallel(&spec, &a, &ParallelConfig::new(ShufflePolicy::EveryK(5), 2)),
            Err(Error::StrategyUnavailable(_))
        ));
        assert!(run_parallel(&spec, &a, &ParallelConfig::new(ShufflePolicy::EveryK(1), 2)).is_ok());
    }
}
