//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use iterarray::{ChunkedArray, Coord, Scalar};

/// Minimum initial label over each cell's component, cells adjacent when
/// their Chebyshev distance is at most `r`.
pub fn union_find_labels(a: &ChunkedArray, r: i64) -> BTreeMap<Coord, i64> {
    let cells: Vec<(Coord, i64)> = a
        .nonempty_cells()
        .into_iter()
        .map(|(c, t)| (c, t[0].as_i64().expect("int label")))
        .collect();
    let index: BTreeMap<Coord, usize> = cells.iter().enumerate().map(|(i, (c, _))| (c.clone(), i)).collect();
    let mut parent: Vec<usize> = (0..cells.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for (i, (c, _)) in cells.iter().enumerate() {
        for dx in -r..=r {
            for dy in -r..=r {
                let n: Coord = [c[0] + dx, c[1] + dy].into_iter().collect();
                if let Some(&j) = index.get(&n) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut min: BTreeMap<usize, i64> = BTreeMap::new();
    for (i, (_, l)) in cells.iter().enumerate() {
        let root = find(&mut parent, i);
        let e = min.entry(root).or_insert(*l);
        *e = (*e).min(*l);
    }
    cells
        .iter()
        .enumerate()
        .map(|(i, (c, _))| {
            let root = find(&mut parent, i);
            (c.clone(), min[&root])
        })
        .collect()
}

pub fn labels_of(a: &ChunkedArray) -> BTreeMap<Coord, i64> {
    a.nonempty_cells().into_iter().map(|(c, t)| (c, t[0].as_i64().expect("int label"))).collect()
}

/// Per-(x, y) clipping straight from the definition: recompute the
/// population mean and deviation of the survivors until nothing moves.
/// Returns the surviving cells and the number of passes, the last one
/// removing nothing.
pub fn naive_clip(a: &ChunkedArray, k: f64) -> (BTreeMap<Coord, f64>, usize) {
    let mut cols: BTreeMap<(i64, i64), Vec<(Coord, f64)>> = BTreeMap::new();
    for (c, t) in a.nonempty_cells() {
        cols.entry((c[0], c[1])).or_default().push((c, t[0].as_f64().unwrap()));
    }
    let mut passes = 0;
    loop {
        passes += 1;
        let mut removed = 0;
        for col in cols.values_mut() {
            let n = col.len() as f64;
            let s: f64 = col.iter().map(|(_, v)| v).sum();
            let s2: f64 = col.iter().map(|(_, v)| v * v).sum();
            let mu = s / n;
            let sigma = (s2 / n - mu * mu).max(0.0).sqrt();
            let before = col.len();
            col.retain(|(_, v)| mu - k * sigma <= *v && *v <= mu + k * sigma);
            removed += before - col.len();
        }
        if removed == 0 {
            break;
        }
    }
    (cols.into_values().flatten().collect(), passes)
}

pub fn values_of(a: &ChunkedArray) -> BTreeMap<Coord, f64> {
    a.nonempty_cells().into_iter().map(|(c, t)| (c, t[0].as_f64().unwrap())).collect()
}

/// Plain Lloyd iteration from an explicit assignment. Ties go to the
/// lowest cluster id; clusters that empty out disappear.
pub fn lloyd(points: &[(Coord, i64)]) -> (Vec<i64>, usize) {
    let mut labels: Vec<i64> = points.iter().map(|(_, l)| *l).collect();
    let mut passes = 0;
    loop {
        passes += 1;
        let mut acc: BTreeMap<i64, (Vec<i64>, i64)> = BTreeMap::new();
        for ((c, _), l) in points.iter().zip(&labels) {
            let e = acc.entry(*l).or_insert_with(|| (vec![0; c.len()], 0));
            for (s, v) in e.0.iter_mut().zip(c.iter()) {
                *s += v;
            }
            e.1 += 1;
        }
        let cents: Vec<(i64, Vec<f64>)> =
            acc.into_iter().map(|(k, (s, n))| (k, s.iter().map(|&v| v as f64 / n as f64).collect())).collect();
        let mut moved = 0;
        for ((c, _), l) in points.iter().zip(labels.iter_mut()) {
            let mut best: Option<(i64, f64)> = None;
            for (k, m) in &cents {
                let d: f64 = m.iter().zip(c.iter()).map(|(a, &b)| (a - b as f64) * (a - b as f64)).sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((*k, d));
                }
            }
            let b = best.unwrap().0;
            if b != *l {
                *l = b;
                moved += 1;
            }
        }
        if moved == 0 {
            return (labels, passes);
        }
    }
}

pub fn int_label(t: &[Scalar]) -> i64 {
    t[0].as_i64().expect("int label")
}
