//! Iterative sigma clipping over an (x, y, t) cube and co-addition.

use std::collections::BTreeMap;

use crate::array::{ChunkedArray, Coord, Scalar, ScalarKind};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fixpoint::{self, AssignmentFunction, Delta, ExecutorStats, FixPointSpec, Outcome, StepResult};
use crate::ops::{self, finalize_avg, finalize_stdv, AggKind, AggregateSpec, Change};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaClipParams {
    pub k: f64,
}

impl SigmaClipParams {
    pub fn new(k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::BadParams(format!("k must be positive, got {k}")));
        }
        Ok(SigmaClipParams { k })
    }
}

pub fn sigmaclip_spec(p: &SigmaClipParams) -> FixPointSpec {
    let k = p.k;
    FixPointSpec::new(
        "A",
        AssignmentFunction::groupby(&["x", "y"]),
        vec![AggregateSpec::new("mu", AggKind::Avg, "d"), AggregateSpec::new("sigma", AggKind::Stdv, "d")],
        Delta::Update(vec![Expr::parse(&format!("mu-{k:?}*sigma <= d <= mu+{k:?}*sigma ? d : null")).expect("valid")]),
    )
}

fn check_cube(a: &ChunkedArray) -> Result<(usize, usize, usize)> {
    let s = a.schema();
    let dim = |n: &str| s.dim_index(n).ok_or_else(|| Error::UnknownDimension(n.to_string()));
    let (x, y) = (dim("x")?, dim("y")?);
    let d = s.attr_index("d").ok_or_else(|| Error::UnknownAttribute("d".into()))?;
    if s.attrs()[d].kind != ScalarKind::Float64 {
        return Err(Error::SchemaMismatch("attribute `d` must be float64".into()));
    }
    Ok((x, y, d))
}

/// `SELECT sum(d) AS coadd FROM a GROUP BY x, y`.
pub fn coadd(a: &ChunkedArray) -> Result<ChunkedArray> {
    check_cube(a)?;
    ops::groupby_aggregate(a, &["x".into(), "y".into()], &[AggregateSpec::new("coadd", AggKind::Sum, "d")])
}

#[derive(Clone, Copy, Default)]
struct Remain {
    count: i64,
    sum: f64,
    sum_sq: f64,
}

/// Hand-written incremental clipping. `Remain` keeps per-location
/// count/sum/sum² of surviving pixels and `Collect` the pixels clipped in
/// the previous iteration; only locations that lost a pixel are
/// re-examined.
pub fn manual_incr(a: &ChunkedArray, p: &SigmaClipParams) -> Result<Outcome> {
    let (xi, yi, di) = check_cube(a)?;
    let spec = sigmaclip_spec(p);
    let k = p.k;
    let mut remain: BTreeMap<(i64, i64), Remain> = BTreeMap::new();
    let mut members: BTreeMap<(i64, i64), Vec<(Coord, f64)>> = BTreeMap::new();
    let mut collect: Vec<(Coord, f64)> = Vec::new();
    let mut values = Vec::new();
    for (c, t) in a.cells() {
        let v = t[di].as_f64().ok_or_else(|| Error::ExpressionType("null pixel value".into()))?;
        values.push((c.clone(), (c[xi], c[yi]), v));
    }
    fixpoint::drive(&spec, a.clone(), None, |cur, i| {
        let mut touched = 0u64;
        let dirty: Vec<(i64, i64)> = if i == 1 {
            for (c, key, v) in &values {
                let r = remain.entry(*key).or_default();
                r.count += 1;
                r.sum += v;
                r.sum_sq += v * v;
                members.entry(*key).or_default().push((c.clone(), *v));
            }
            touched += values.len() as u64;
            remain.keys().copied().collect()
        } else {
            // Remain ← Remain − Collect
            let mut keys = Vec::new();
            for (c, v) in collect.drain(..) {
                let key = (c[xi], c[yi]);
                let r = remain.get_mut(&key).expect("clipped pixel has a location");
                r.count -= 1;
                r.sum -= v;
                r.sum_sq -= v * v;
                keys.push(key);
                touched += 1;
            }
            keys.dedup();
            keys
        };
        let mut changes = Vec::new();
        let mut next = cur.clone();
        for key in dirty {
            let r = remain[&key];
            touched += 1;
            let (Some(mu), Some(sigma)) = (
                finalize_avg(r.count, Scalar::Float(r.sum)).as_f64(),
                finalize_stdv(r.count, Scalar::Float(r.sum), Scalar::Float(r.sum_sq)).as_f64(),
            ) else {
                continue;
            };
            let (lo, hi) = (mu - k * sigma, mu + k * sigma);
            let cells = members.get_mut(&key).expect("location has members");
            touched += cells.len() as u64;
            cells.retain(|(c, v)| {
                if *v < lo || *v > hi {
                    collect.push((c.clone(), *v));
                    false
                } else {
                    true
                }
            });
        }
        collect.sort_by(|a, b| a.0.cmp(&b.0));
        for (c, v) in &collect {
            next.put_unchecked(c, None);
            changes.push(Change { coord: c.clone(), old: vec![Scalar::Float(*v)].into(), new: None });
        }
        let stats = ExecutorStats { mini_index: i, major_index: i, ..Default::default() };
        Ok((StepResult { next, changes, cells_touched: touched }, stats, false))
    })
}
