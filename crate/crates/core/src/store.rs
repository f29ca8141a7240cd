//! Versioned array storage with per-version delta arrays.
//!
//! Every store of a name records Δ⁺ (new values of updated cells) and Δ⁻
//! (old values). A deleted cell shows up in Δ⁺ as an all-null tuple.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::array::{is_all_null, null_tuple, CellTuple, ChunkedArray, Coord, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaPair {
    pub plus: ChunkedArray,
    pub minus: ChunkedArray,
}

impl DeltaPair {
    pub fn is_empty(&self) -> bool {
        self.plus.is_empty() && self.minus.is_empty()
    }

    /// Coordinates touched by either side.
    pub fn touched(&self) -> usize {
        let mut n = self.plus.len();
        for (c, _) in self.minus.cells() {
            if self.plus.get_unchecked(c).is_none() {
                n += 1;
            }
        }
        n
    }
}

/// One rewritten cell: `old` is the previous value, `new` the replacement
/// (`None` for deletions).
pub(crate) struct CellChange<'a> {
    pub coord: &'a Coord,
    pub old: Option<&'a CellTuple>,
    pub new: Option<&'a CellTuple>,
}

/// Visits every coordinate whose state differs between `prev` and `next`,
/// skipping chunks the two versions share.
pub(crate) fn for_each_change<'a>(prev: &'a ChunkedArray, next: &'a ChunkedArray, mut f: impl FnMut(CellChange<'a>)) {
    let same_chunking = prev.schema().chunk_extents() == next.schema().chunk_extents();
    let ids: std::collections::BTreeSet<Coord> = prev.chunk_ids().into_iter().chain(next.chunk_ids()).collect();
    if same_chunking {
        for id in &ids {
            if prev.shares_chunk(next, id) {
                continue;
            }
            let a = prev.chunk(id).map(|c| &c.core);
            let b = next.chunk(id).map(|c| &c.core);
            let mut changes: Vec<CellChange<'a>> = Vec::new();
            for (k, v) in a.into_iter().flatten() {
                let w = b.and_then(|m| m.get(k));
                if w != Some(v) {
                    changes.push(CellChange { coord: k, old: Some(v), new: w });
                }
            }
            for (k, w) in b.into_iter().flatten() {
                if a.is_none_or(|m| !m.contains_key(k)) {
                    changes.push(CellChange { coord: k, old: None, new: Some(w) });
                }
            }
            changes.sort_by(|x, y| x.coord.cmp(y.coord));
            changes.into_iter().for_each(&mut f);
        }
    } else {
        for (c, t) in prev.cells() {
            match next.get_unchecked(c) {
                Some(u) if u == t => {}
                other => f(CellChange { coord: c, old: Some(t), new: other }),
            }
        }
        for (c, t) in next.cells() {
            if prev.get_unchecked(c).is_none() {
                f(CellChange { coord: c, old: None, new: Some(t) });
            }
        }
    }
}

/// Deltas turning `prev` into `next`.
pub fn compute_delta(prev: &ChunkedArray, next: &ChunkedArray) -> DeltaPair {
    let mut plus = next.empty_like();
    let mut minus = next.empty_like();
    let arity = next.schema().arity();
    for_each_change(prev, next, |ch| {
        if let Some(o) = ch.old {
            minus.put_unchecked(ch.coord, Some(o.clone()));
        }
        plus.put_unchecked(ch.coord, Some(ch.new.cloned().unwrap_or_else(|| null_tuple(arity))));
    });
    DeltaPair { plus, minus }
}

/// Replays a delta forward.
pub fn apply_delta(prev: &ChunkedArray, d: &DeltaPair) -> ChunkedArray {
    let mut out = prev.clone();
    for (c, _) in d.minus.cells() {
        out.put_unchecked(c, None);
    }
    for (c, t) in d.plus.cells() {
        out.put_unchecked(c, if is_all_null(t) { None } else { Some(t.clone()) });
    }
    out
}

/// Replays a delta backward.
pub fn revert_delta(next: &ChunkedArray, d: &DeltaPair) -> ChunkedArray {
    let mut out = next.clone();
    for (c, _) in d.plus.cells() {
        out.put_unchecked(c, None);
    }
    for (c, t) in d.minus.cells() {
        out.put_unchecked(c, Some(t.clone()));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    Add,
    Subtract,
}

impl MergeMode {
    fn name(self) -> &'static str {
        match self {
            MergeMode::Add => "add",
            MergeMode::Subtract => "subtract",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Full,
    DeltaPlus,
    DeltaMinus,
}

pub(crate) fn merge_scalar(a: Scalar, b: Scalar, mode: MergeMode) -> Scalar {
    match (a, b, mode) {
        (x, Scalar::Null, _) => x,
        (Scalar::Null, y, MergeMode::Add) => y,
        (Scalar::Null, y, MergeMode::Subtract) => negate(y),
        (Scalar::Int(x), Scalar::Int(y), MergeMode::Add) => Scalar::Int(x.wrapping_add(y)),
        (Scalar::Int(x), Scalar::Int(y), MergeMode::Subtract) => Scalar::Int(x.wrapping_sub(y)),
        (x, y, MergeMode::Add) => Scalar::Float(x.as_f64().unwrap_or(0.0) + y.as_f64().unwrap_or(0.0)),
        (x, y, MergeMode::Subtract) => Scalar::Float(x.as_f64().unwrap_or(0.0) - y.as_f64().unwrap_or(0.0)),
    }
}

fn negate(v: Scalar) -> Scalar {
    match v {
        Scalar::Int(x) => Scalar::Int(x.wrapping_neg()),
        Scalar::Float(x) => Scalar::Float(-x),
        Scalar::Null => Scalar::Null,
    }
}

/// Cellwise `a op b` on coordinates of `b`; cells of `a` outside `b` are kept.
pub fn merge_cells(a: &ChunkedArray, b: &ChunkedArray, mode: MergeMode) -> ChunkedArray {
    let mut out = a.clone();
    for (c, u) in b.cells() {
        let t: CellTuple = match a.get_unchecked(c) {
            Some(t) => t.iter().zip(u).map(|(&x, &y)| merge_scalar(x, y, mode)).collect(),
            None => u.iter().map(|&y| merge_scalar(Scalar::Null, y, mode)).collect(),
        };
        out.put_unchecked(c, if is_all_null(&t) { None } else { Some(t) });
    }
    out
}

#[derive(Clone, Debug)]
struct Version {
    array: ChunkedArray,
    delta: DeltaPair,
    annotation: Option<MergeMode>,
}

#[derive(Clone, Debug, Default)]
pub struct VersionedStore {
    arrays: BTreeMap<String, Vec<Version>>,
}

impl VersionedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    /// Latest version id of `name`.
    pub fn latest_version(&self, name: &str) -> Result<u64> {
        Ok(self.versions(name)?.len() as u64)
    }

    fn versions(&self, name: &str) -> Result<&Vec<Version>> {
        self.arrays.get(name).ok_or_else(|| Error::UnknownArray(name.to_string()))
    }

    fn push(&mut self, name: &str, mut a: ChunkedArray, annotation: Option<MergeMode>) -> Result<u64> {
        let versions = self.arrays.entry(name.to_string()).or_default();
        let delta = match versions.last() {
            Some(prev) => {
                if !prev.array.schema().logically_equal(a.schema()) {
                    return Err(Error::SchemaMismatch(format!("`{name}` was stored with {}", prev.array.schema().header())));
                }
                compute_delta(&prev.array, &a)
            }
            None => DeltaPair { plus: a.clone(), minus: a.empty_like() },
        };
        let id = versions.len() as u64 + 1;
        a.set_version(id);
        versions.push(Version { array: a, delta, annotation });
        Ok(id)
    }

    /// Appends `a` as the next version of `name`, recording its deltas.
    pub fn store(&mut self, name: &str, a: ChunkedArray) -> Result<u64> {
        if name.is_empty() || name.contains(['/', '\\', '\n']) {
            return Err(Error::BadParams(format!("invalid array name `{name}`")));
        }
        self.push(name, a, None)
    }

    /// Stores `latest(name) op b` as a new version.
    pub fn store_annotated(&mut self, name: &str, b: &ChunkedArray, mode: MergeMode) -> Result<u64> {
        let cur = &self.versions(name)?.last().expect("stored names have a version").array;
        if !cur.schema().logically_equal(b.schema()) {
            return Err(Error::SchemaMismatch(format!("`{name}` was stored with {}", cur.schema().header())));
        }
        let next = merge_cells(cur, b, mode);
        self.push(name, next, Some(mode))
    }

    pub fn scan(&self, name: &str, which: Which, version: Option<u64>) -> Result<&ChunkedArray> {
        let versions = self.versions(name)?;
        let v = version.unwrap_or(versions.len() as u64);
        let entry = v
            .checked_sub(1)
            .and_then(|i| versions.get(i as usize))
            .ok_or_else(|| Error::UnknownVersion { name: name.to_string(), version: v })?;
        Ok(match which {
            Which::Full => &entry.array,
            Which::DeltaPlus => &entry.delta.plus,
            Which::DeltaMinus => &entry.delta.minus,
        })
    }

    pub fn latest(&self, name: &str) -> Result<&ChunkedArray> {
        self.scan(name, Which::Full, None)
    }

    pub fn delta(&self, name: &str, version: u64) -> Result<DeltaPair> {
        Ok(DeltaPair {
            plus: self.scan(name, Which::DeltaPlus, Some(version))?.clone(),
            minus: self.scan(name, Which::DeltaMinus, Some(version))?.clone(),
        })
    }

    /// Writes one directory per array: `v<n>.full`, `v<n>.plus`, `v<n>.minus`
    /// dumps and a `manifest` listing versions and annotations.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, versions) in &self.arrays {
            let d = dir.join(name);
            fs::create_dir_all(&d)?;
            let mut manifest = String::new();
            for (i, v) in versions.iter().enumerate() {
                let n = i + 1;
                fs::write(d.join(format!("v{n}.full")), v.array.dump())?;
                fs::write(d.join(format!("v{n}.plus")), v.delta.plus.dump())?;
                fs::write(d.join(format!("v{n}.minus")), v.delta.minus.dump())?;
                manifest.push_str(&format!("{n} {}\n", v.annotation.map_or("store", MergeMode::name)));
            }
            fs::write(d.join("manifest"), manifest)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut store = VersionedStore::new();
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        for name in names {
            let d = dir.join(&name);
            let manifest = fs::read_to_string(d.join("manifest"))?;
            let mut versions = Vec::new();
            for (i, line) in manifest.lines().enumerate() {
                let bad = || Error::Config(format!("{}: bad manifest line {}", d.display(), i + 1));
                let (n, kind) = line.split_once(' ').ok_or_else(bad)?;
                let n: usize = n.parse().map_err(|_| bad())?;
                if n != i + 1 {
                    return Err(bad());
                }
                let annotation = match kind {
                    "store" => None,
                    "add" => Some(MergeMode::Add),
                    "subtract" => Some(MergeMode::Subtract),
                    _ => return Err(bad()),
                };
                let read = |ext: &str| -> Result<ChunkedArray> {
                    ChunkedArray::parse_dump(&fs::read_to_string(d.join(format!("v{n}.{ext}")))?)
                };
                let mut array = read("full")?;
                array.set_version(n as u64);
                versions.push(Version { array, delta: DeltaPair { plus: read("plus")?, minus: read("minus")? }, annotation });
            }
            store.arrays.insert(name, versions);
        }
        Ok(store)
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Full => "full",
            Which::DeltaPlus => "delta_plus",
            Which::DeltaMinus => "delta_minus",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{ArraySchema, Attribute, Dimension, ScalarKind};
    use crate::{coord, tuple};

    fn schema(kind: ScalarKind) -> ArraySchema {
        ArraySchema::new(
            vec![Dimension::new("x", 0, 3), Dimension::new("y", 0, 3)],
            vec![Attribute::new("v", kind)],
        )
        .unwrap()
    }

    fn arr(cells: &[((i64, i64), f64)]) -> ChunkedArray {
        ChunkedArray::from_cells(schema(ScalarKind::Float64), cells.iter().map(|&((x, y), v)| (coord![x, y], tuple![v])))
            .unwrap()
    }

    #[test]
    fn single_update() {
        let mut s = VersionedStore::new();
        s.store("A", arr(&[((0, 0), 1.0)])).unwrap();
        s.store("A", arr(&[((0, 0), 2.0)])).unwrap();
        assert_eq!(s.scan("A", Which::DeltaPlus, None).unwrap().nonempty_cells(), vec![(coord![0, 0], tuple![2.0])]);
        assert_eq!(s.scan("A", Which::DeltaMinus, None).unwrap().nonempty_cells(), vec![(coord![0, 0], tuple![1.0])]);
        assert_eq!(s.scan("A", Which::Full, Some(1)).unwrap(), &arr(&[((0, 0), 1.0)]));
        assert_eq!(s.scan("A", Which::DeltaPlus, Some(1)).unwrap(), &arr(&[((0, 0), 1.0)]));
        assert!(matches!(s.scan("A", Which::Full, Some(3)), Err(Error::UnknownVersion { .. })));
        assert!(matches!(s.scan("B", Which::Full, None), Err(Error::UnknownArray(_))));
    }

    #[test]
    fn identical_store_has_empty_deltas() {
        let mut s = VersionedStore::new();
        let a = arr(&[((0, 0), 1.0)]);
        s.store("A", a.clone()).unwrap();
        s.store("A", a).unwrap();
        assert!(s.delta("A", 2).unwrap().is_empty());
    }

    #[test]
    fn deletion_marker() {
        let mut s = VersionedStore::new();
        s.store("A", arr(&[((0, 0), 1.0), ((1, 1), 3.0)])).unwrap();
        s.store("A", arr(&[((0, 0), 1.0)])).unwrap();
        let d = s.delta("A", 2).unwrap();
        assert_eq!(d.minus.nonempty_cells(), vec![(coord![1, 1], tuple![3.0])]);
        assert_eq!(d.plus.nonempty_cells(), vec![(coord![1, 1], null_tuple(1))]);
        let v1 = s.scan("A", Which::Full, Some(1)).unwrap();
        let v2 = s.scan("A", Which::Full, Some(2)).unwrap();
        assert_eq!(&apply_delta(v1, &d), v2);
        assert_eq!(&revert_delta(v2, &d), v1);
    }

    #[test]
    fn annotated_stores() {
        let mut s = VersionedStore::new();
        let ints = |cells: &[((i64, i64), i64)]| {
            ChunkedArray::from_cells(schema(ScalarKind::Int64), cells.iter().map(|&((x, y), v)| (coord![x, y], tuple![v])))
                .unwrap()
        };
        s.store("A", ints(&[((0, 0), 5)])).unwrap();
        s.store_annotated("A", &ints(&[((0, 0), 2)]), MergeMode::Subtract).unwrap();
        assert_eq!(s.latest("A").unwrap(), &ints(&[((0, 0), 3)]));
        assert_eq!(s.scan("A", Which::DeltaMinus, None).unwrap(), &ints(&[((0, 0), 5)]));
        assert_eq!(s.scan("A", Which::DeltaPlus, None).unwrap(), &ints(&[((0, 0), 3)]));

        s.store_annotated("A", &ints(&[]), MergeMode::Add).unwrap();
        assert!(s.delta("A", 3).unwrap().is_empty());

        s.store_annotated("A", &ints(&[((1, 1), 2)]), MergeMode::Add).unwrap();
        assert_eq!(s.latest("A").unwrap(), &ints(&[((0, 0), 3), ((1, 1), 2)]));
        s.store_annotated("A", &ints(&[((2, 2), 4)]), MergeMode::Subtract).unwrap();
        assert_eq!(s.latest("A").unwrap().get(&[2, 2]).unwrap(), Some(&tuple![-4i64]));

        assert!(matches!(s.store_annotated("Z", &ints(&[]), MergeMode::Add), Err(Error::UnknownArray(_))));
        let other = ChunkedArray::new(
            ArraySchema::new(vec![Dimension::new("q", 0, 1)], vec![Attribute::new("v", ScalarKind::Int64)]).unwrap(),
        )
        .unwrap();
        assert!(matches!(s.store("A", other), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = VersionedStore::new();
        s.store("A", arr(&[((0, 0), 1.0), ((1, 2), -0.5)])).unwrap();
        s.store("A", arr(&[((0, 0), 1.5)])).unwrap();
        s.store_annotated("A", &arr(&[((3, 3), 2.0)]), MergeMode::Add).unwrap();
        s.store("B@L1", arr(&[])).unwrap();
        s.save(dir.path()).unwrap();
        let t = VersionedStore::load(dir.path()).unwrap();
        assert_eq!(t.names().collect::<Vec<_>>(), vec!["A", "B@L1"]);
        for v in 1..=3 {
            for w in [Which::Full, Which::DeltaPlus, Which::DeltaMinus] {
                assert_eq!(
                    s.scan("A", w, Some(v)).unwrap().dump(),
                    t.scan("A", w, Some(v)).unwrap().dump()
                );
            }
        }
        assert_eq!(std::fs::read_to_string(dir.path().join("A/manifest")).unwrap(), "1 store\n2 store\n3 add\n");
    }
}
