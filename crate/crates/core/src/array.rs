//! Sparse chunked d-dimensional arrays.
//!
//! Cells live in per-chunk ordered maps keyed by coordinate. A coordinate
//! that no chunk stores is an empty cell, which is distinct from a present
//! tuple whose scalars are null. Chunks are reference counted so that
//! derived versions share every chunk they did not modify.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub type Coord = SmallVec<[i64; 4]>;
pub type CellTuple = SmallVec<[Scalar; 4]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScalarKind {
    Float64,
    Int64,
}

impl ScalarKind {
    pub fn name(self) -> &'static str {
        match self {
            ScalarKind::Float64 => "float64",
            ScalarKind::Int64 => "int64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float64" => Some(ScalarKind::Float64),
            "int64" => Some(ScalarKind::Int64),
            _ => None,
        }
    }
}

impl fmt::Display for ScalarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single attribute value. Floats compare by bit pattern so that equality
/// means byte-identical storage.
#[derive(Clone, Copy, Debug)]
pub enum Scalar {
    Null,
    Int(i64),
    Float(f64),
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Scalar::Null, Scalar::Null) => true,
            (Scalar::Int(a), Scalar::Int(b)) => a == b,
            (Scalar::Float(a), Scalar::Float(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl Eq for Scalar {}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Scalar::Null => 0u8.hash(state),
            Scalar::Int(v) => {
                1u8.hash(state);
                v.hash(state);
            }
            Scalar::Float(v) => {
                2u8.hash(state);
                v.to_bits().hash(state);
            }
        }
    }
}

impl Scalar {
    pub fn is_null(&self) -> bool {
        matches!(self, Scalar::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Scalar::Null => None,
            Scalar::Int(v) => Some(v as f64),
            Scalar::Float(v) => Some(v),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Scalar::Int(v) => Some(v),
            _ => None,
        }
    }

    pub fn kind(&self) -> Option<ScalarKind> {
        match self {
            Scalar::Null => None,
            Scalar::Int(_) => Some(ScalarKind::Int64),
            Scalar::Float(_) => Some(ScalarKind::Float64),
        }
    }

    pub fn fits(&self, kind: ScalarKind) -> bool {
        self.kind().is_none_or(|k| k == kind)
    }

    fn write_text(&self, out: &mut String) {
        match self {
            Scalar::Null => out.push('_'),
            Scalar::Int(v) => {
                let _ = write!(out, "{v}");
            }
            Scalar::Float(v) => {
                let _ = write!(out, "{v:?}");
            }
        }
    }

    fn parse_text(s: &str, kind: ScalarKind) -> Option<Scalar> {
        if s == "_" {
            return Some(Scalar::Null);
        }
        match kind {
            ScalarKind::Int64 => s.parse().ok().map(Scalar::Int),
            ScalarKind::Float64 => s.parse().ok().map(Scalar::Float),
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

/// True when every scalar of the tuple is null. The engine uses such a
/// tuple to mark deletions.
pub fn is_all_null(t: &[Scalar]) -> bool {
    t.iter().all(Scalar::is_null)
}

pub fn null_tuple(arity: usize) -> CellTuple {
    SmallVec::from_elem(Scalar::Null, arity)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dimension {
    pub name: String,
    pub lower: i64,
    pub upper: i64,
}

impl Dimension {
    pub fn new(name: impl Into<String>, lower: i64, upper: i64) -> Self {
        Dimension { name: name.into(), lower, upper }
    }

    pub fn extent(&self) -> i64 {
        self.upper - self.lower + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub kind: ScalarKind,
}

impl Attribute {
    pub fn new(name: impl Into<String>, kind: ScalarKind) -> Self {
        Attribute { name: name.into(), kind }
    }
}

pub(crate) fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArraySchema {
    dims: Vec<Dimension>,
    attrs: Vec<Attribute>,
    chunk_extents: Vec<i64>,
    overlap: Vec<i64>,
}

impl ArraySchema {
    /// Schema with a single chunk spanning the domain and no overlap.
    pub fn new(dims: Vec<Dimension>, attrs: Vec<Attribute>) -> Result<Self> {
        let chunk_extents = dims.iter().map(|d| d.extent().max(1)).collect();
        let overlap = vec![0; dims.len()];
        Self::with_chunking(dims, attrs, chunk_extents, overlap)
    }

    pub fn with_chunking(
        dims: Vec<Dimension>,
        attrs: Vec<Attribute>,
        chunk_extents: Vec<i64>,
        overlap: Vec<i64>,
    ) -> Result<Self> {
        let schema = ArraySchema { dims, attrs, chunk_extents, overlap };
        schema.validate()?;
        Ok(schema)
    }

    /// Same dimensions and attributes, new physical chunking.
    pub fn rechunked(&self, chunk_extents: Vec<i64>, overlap: Vec<i64>) -> Result<Self> {
        Self::with_chunking(self.dims.clone(), self.attrs.clone(), chunk_extents, overlap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchema(m));
        if self.dims.is_empty() {
            return bad("at least one dimension is required".into());
        }
        if self.attrs.is_empty() {
            return bad("at least one attribute is required".into());
        }
        let d = self.dims.len();
        if self.chunk_extents.len() != d || self.overlap.len() != d {
            return bad(format!(
                "expected {d} chunk extents and overlaps, got {} and {}",
                self.chunk_extents.len(),
                self.overlap.len()
            ));
        }
        let mut names: Vec<&str> = Vec::new();
        for n in self.dims.iter().map(|x| &x.name).chain(self.attrs.iter().map(|a| &a.name)) {
            if !is_identifier(n) {
                return bad(format!("`{n}` is not a valid name"));
            }
            if names.contains(&n.as_str()) {
                return bad(format!("name `{n}` is used twice"));
            }
            names.push(n);
        }
        for (i, dim) in self.dims.iter().enumerate() {
            if dim.upper < dim.lower {
                return bad(format!("dimension `{}` has an empty interval", dim.name));
            }
            let ext = self.chunk_extents[i];
            if ext < 1 || ext > dim.extent() {
                return bad(format!(
                    "chunk extent {ext} for `{}` must lie in 1..={}",
                    dim.name,
                    dim.extent()
                ));
            }
            let ov = self.overlap[i];
            if ov < 0 || ov >= ext {
                return bad(format!("overlap {ov} for `{}` must lie in 0..{ext}", dim.name));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn attrs(&self) -> &[Attribute] {
        &self.attrs
    }

    pub fn chunk_extents(&self) -> &[i64] {
        &self.chunk_extents
    }

    pub fn overlap(&self) -> &[i64] {
        &self.overlap
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a.name == name)
    }

    /// Dimensions and attributes agree; chunking may differ.
    pub fn logically_equal(&self, other: &ArraySchema) -> bool {
        self.dims == other.dims && self.attrs == other.attrs
    }

    pub fn contains(&self, coord: &[i64]) -> bool {
        coord.len() == self.dims.len()
            && coord.iter().zip(&self.dims).all(|(&c, d)| c >= d.lower && c <= d.upper)
    }

    /// Number of cells in the domain.
    pub fn domain_size(&self) -> u128 {
        self.dims.iter().map(|d| d.extent() as u128).product()
    }

    pub fn chunk_id_of(&self, coord: &[i64]) -> Coord {
        coord
            .iter()
            .zip(&self.dims)
            .zip(&self.chunk_extents)
            .map(|((&c, d), &e)| (c - d.lower).div_euclid(e))
            .collect()
    }

    /// Number of chunks along each dimension.
    pub fn chunk_grid(&self) -> Vec<i64> {
        self.dims
            .iter()
            .zip(&self.chunk_extents)
            .map(|(d, &e)| (d.extent() + e - 1) / e)
            .collect()
    }

    /// Inclusive core box of a chunk, clipped to the domain.
    pub fn core_box(&self, id: &[i64]) -> (Coord, Coord) {
        let mut lo = Coord::new();
        let mut hi = Coord::new();
        for ((&i, d), &e) in id.iter().zip(&self.dims).zip(&self.chunk_extents) {
            let l = d.lower + i * e;
            lo.push(l);
            hi.push((l + e - 1).min(d.upper));
        }
        (lo, hi)
    }

    /// Every chunk id of the domain in ascending order.
    pub fn all_chunk_ids(&self) -> Vec<Coord> {
        let grid = self.chunk_grid();
        let mut out = Vec::new();
        let lo: Vec<i64> = vec![0; grid.len()];
        let hi: Vec<i64> = grid.iter().map(|g| g - 1).collect();
        for_each_in_box(&lo, &hi, |c| out.push(c.clone()));
        out
    }

    pub fn header(&self) -> String {
        let mut s = String::from("dims=");
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:{}:{}", d.name, d.lower, d.upper);
        }
        s.push_str(" attrs=");
        for (i, a) in self.attrs.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:{}", a.name, a.kind);
        }
        let default_chunks = self.dims.iter().zip(&self.chunk_extents).all(|(d, &e)| e == d.extent());
        if !default_chunks {
            s.push_str(" chunks=");
            s.push_str(&join_ints(&self.chunk_extents, ","));
        }
        if self.overlap.iter().any(|&o| o != 0) {
            s.push_str(" overlap=");
            s.push_str(&join_ints(&self.overlap, ","));
        }
        s
    }

    pub fn parse_header(line: &str) -> Result<Self> {
        let err = |m: &str| Error::Dump { line: 1, message: m.to_string() };
        let mut dims = None;
        let mut attrs = None;
        let mut chunks = None;
        let mut overlap = None;
        for token in line.split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| err("expected key=value"))?;
            match key {
                "dims" => {
                    let mut v = Vec::new();
                    for part in value.split(',') {
                        let f: Vec<&str> = part.split(':').collect();
                        if f.len() != 3 {
                            return Err(err("dimension must be name:lo:hi"));
                        }
                        let lo = f[1].parse().map_err(|_| err("bad dimension bound"))?;
                        let hi = f[2].parse().map_err(|_| err("bad dimension bound"))?;
                        v.push(Dimension::new(f[0], lo, hi));
                    }
                    dims = Some(v);
                }
                "attrs" => {
                    let mut v = Vec::new();
                    for part in value.split(',') {
                        let (n, k) = part.split_once(':').ok_or_else(|| err("attribute must be name:kind"))?;
                        let kind = ScalarKind::parse(k).ok_or_else(|| err("unknown scalar kind"))?;
                        v.push(Attribute::new(n, kind));
                    }
                    attrs = Some(v);
                }
                "chunks" => chunks = Some(parse_ints(value).ok_or_else(|| err("bad chunk extents"))?),
                "overlap" => overlap = Some(parse_ints(value).ok_or_else(|| err("bad overlap"))?),
                _ => return Err(err("unknown header key")),
            }
        }
        let dims = dims.ok_or_else(|| err("missing dims"))?;
        let attrs = attrs.ok_or_else(|| err("missing attrs"))?;
        let chunks = chunks.unwrap_or_else(|| dims.iter().map(Dimension::extent).collect());
        let overlap = overlap.unwrap_or_else(|| vec![0; dims.len()]);
        Self::with_chunking(dims, attrs, chunks, overlap)
    }
}

fn join_ints(v: &[i64], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn parse_ints(s: &str) -> Option<Vec<i64>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Calls `f` for every coordinate of the inclusive box in row-major order.
pub fn for_each_in_box(lo: &[i64], hi: &[i64], mut f: impl FnMut(&Coord)) {
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return;
    }
    let mut cur: Coord = lo.iter().copied().collect();
    loop {
        f(&cur);
        let mut i = cur.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Chunk {
    pub id: Coord,
    pub core: BTreeMap<Coord, CellTuple>,
    /// Replicas of neighbouring chunks' core cells inside the overlap band.
    pub halo: BTreeMap<Coord, CellTuple>,
}

impl Chunk {
    pub fn new(id: Coord) -> Self {
        Chunk { id, core: BTreeMap::new(), halo: BTreeMap::new() }
    }

    /// Looks a coordinate up in the core, then the halo.
    pub fn lookup(&self, coord: &Coord) -> Option<&CellTuple> {
        self.core.get(coord).or_else(|| self.halo.get(coord))
    }
}

#[derive(Clone, Debug)]
pub struct ChunkedArray {
    schema: Arc<ArraySchema>,
    chunks: BTreeMap<Coord, Arc<Chunk>>,
    version: u64,
}

impl ChunkedArray {
    /// An array with every cell empty, at version 0.
    pub fn new(schema: ArraySchema) -> Result<Self> {
        schema.validate()?;
        Ok(Self::with_schema(Arc::new(schema)))
    }

    pub(crate) fn with_schema(schema: Arc<ArraySchema>) -> Self {
        ChunkedArray { schema, chunks: BTreeMap::new(), version: 0 }
    }

    /// Builds an array from `(coordinate, tuple)` pairs, validating each.
    pub fn from_cells<I>(schema: ArraySchema, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Coord, CellTuple)>,
    {
        let mut a = Self::new(schema)?;
        for (c, t) in cells {
            a.set(&c, Some(t))?;
        }
        Ok(a)
    }

    pub fn empty_like(&self) -> Self {
        Self::with_schema(self.schema.clone())
    }

    pub fn schema(&self) -> &ArraySchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<ArraySchema> {
        &self.schema
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    fn check_coord(&self, coord: &[i64]) -> Result<()> {
        if !self.schema.contains(coord) {
            return Err(Error::OutOfDomain { coord: coord.to_vec() });
        }
        Ok(())
    }

    pub fn check_tuple(&self, t: &[Scalar]) -> Result<()> {
        if t.len() != self.schema.arity() {
            return Err(Error::ArityMismatch { expected: self.schema.arity(), actual: t.len() });
        }
        for (v, a) in t.iter().zip(self.schema.attrs()) {
            if !v.fits(a.kind) {
                return Err(Error::SchemaMismatch(format!(
                    "attribute `{}` is {} but got {v:?}",
                    a.name, a.kind
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, coord: &[i64]) -> Result<Option<&CellTuple>> {
        self.check_coord(coord)?;
        Ok(self.get_unchecked(coord))
    }

    pub(crate) fn get_unchecked(&self, coord: &[i64]) -> Option<&CellTuple> {
        let id = self.schema.chunk_id_of(coord);
        self.chunks.get(&id).and_then(|c| c.core.get(coord))
    }

    /// Replaces a cell value; `None` empties the cell. Halo replicas are
    /// left untouched until the next explicit shuffle.
    pub fn set(&mut self, coord: &[i64], value: Option<CellTuple>) -> Result<()> {
        self.check_coord(coord)?;
        if let Some(t) = &value {
            self.check_tuple(t)?;
        }
        self.put_unchecked(coord, value);
        Ok(())
    }

    pub fn insert(&mut self, coord: &[i64], value: CellTuple) -> Result<()> {
        self.set(coord, Some(value))
    }

    pub(crate) fn put_unchecked(&mut self, coord: &[i64], value: Option<CellTuple>) {
        let id = self.schema.chunk_id_of(coord);
        match value {
            Some(t) => {
                let chunk = self.chunks.entry(id.clone()).or_insert_with(|| Arc::new(Chunk::new(id)));
                Arc::make_mut(chunk).core.insert(Coord::from_slice(coord), t);
            }
            None => {
                if let Some(chunk) = self.chunks.get_mut(&id) {
                    if chunk.core.contains_key(coord) {
                        let c = Arc::make_mut(chunk);
                        c.core.remove(coord);
                        if c.core.is_empty() && c.halo.is_empty() {
                            self.chunks.remove(&id);
                        }
                    }
                }
            }
        }
    }

    /// Number of non-empty core cells.
    pub fn len(&self) -> usize {
        self.chunks.values().map(|c| c.core.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.values().all(|c| c.core.is_empty())
    }

    /// Core cells in canonical row-major order (first dimension outermost).
    pub fn cells(&self) -> Vec<(&Coord, &CellTuple)> {
        let mut v: Vec<(&Coord, &CellTuple)> = self.chunks.values().flat_map(|c| c.core.iter()).collect();
        if self.chunks.len() > 1 {
            v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        }
        v
    }

    pub fn nonempty_cells(&self) -> Vec<(Coord, CellTuple)> {
        self.cells().into_iter().map(|(c, t)| (c.clone(), t.clone())).collect()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values().map(|c| c.as_ref())
    }

    pub fn chunk(&self, id: &[i64]) -> Option<&Chunk> {
        self.chunks.get(id).map(|c| c.as_ref())
    }

    pub fn chunk_ids(&self) -> Vec<Coord> {
        self.chunks.keys().cloned().collect()
    }

    pub(crate) fn chunk_mut(&mut self, id: &Coord) -> &mut Chunk {
        let chunk = self.chunks.entry(id.clone()).or_insert_with(|| Arc::new(Chunk::new(id.clone())));
        Arc::make_mut(chunk)
    }

    pub(crate) fn replace_chunk(&mut self, chunk: Chunk) {
        if chunk.core.is_empty() && chunk.halo.is_empty() {
            self.chunks.remove(&chunk.id);
        } else {
            self.chunks.insert(chunk.id.clone(), Arc::new(chunk));
        }
    }

    /// True when both arrays hold the very same chunk allocation for `id`.
    pub fn shares_chunk(&self, other: &ChunkedArray, id: &[i64]) -> bool {
        match (self.chunks.get(id), other.chunks.get(id)) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            (None, None) => true,
            _ => false,
        }
    }

    /// Drops every halo replica.
    pub fn clear_halos(&mut self) {
        let ids: Vec<Coord> = self.chunks.iter().filter(|(_, c)| !c.halo.is_empty()).map(|(k, _)| k.clone()).collect();
        for id in ids {
            let c = self.chunk_mut(&id);
            c.halo.clear();
            if c.core.is_empty() {
                self.chunks.remove(&id);
            }
        }
    }

    /// Copy of the array under a different physical chunking.
    pub fn rechunk(&self, chunk_extents: Vec<i64>, overlap: Vec<i64>) -> Result<Self> {
        let schema = Arc::new(self.schema.rechunked(chunk_extents, overlap)?);
        let mut out = Self::with_schema(schema);
        out.version = self.version;
        for (c, t) in self.chunks.values().flat_map(|ch| ch.core.iter()) {
            out.put_unchecked(c, Some(t.clone()));
        }
        Ok(out)
    }

    /// Number of coordinates whose cell state (value or emptiness) differs.
    pub fn diff_count(&self, other: &ChunkedArray) -> Result<u64> {
        if !self.schema.logically_equal(&other.schema) {
            return Err(Error::SchemaMismatch("diff_count needs identical dims and attrs".into()));
        }
        if self.schema.chunk_extents() != other.schema.chunk_extents() {
            return Ok(diff_count_by_cells(self, other));
        }
        let mut n = 0u64;
        let ids: std::collections::BTreeSet<&Coord> = self.chunks.keys().chain(other.chunks.keys()).collect();
        for id in ids {
            match (self.chunks.get(id), other.chunks.get(id)) {
                (Some(a), Some(b)) if Arc::ptr_eq(a, b) => {}
                (Some(a), Some(b)) => n += diff_maps(&a.core, &b.core),
                (Some(a), None) => n += a.core.len() as u64,
                (None, Some(b)) => n += b.core.len() as u64,
                (None, None) => {}
            }
        }
        Ok(n)
    }

    /// Cellwise equality of the core cells (schemas must agree logically).
    pub fn same_cells(&self, other: &ChunkedArray) -> bool {
        self.schema.logically_equal(&other.schema) && self.diff_count(other).map(|n| n == 0).unwrap_or(false)
    }

    /// Text dump: a header line, then one `c1,...,cd|v1,...,vk` line per
    /// non-empty cell in canonical order.
    pub fn dump(&self) -> String {
        let mut out = self.schema.header();
        out.push('\n');
        for (c, t) in self.cells() {
            for (i, v) in c.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('|');
            for (i, v) in t.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                v.write_text(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Dump { line: 1, message: "empty input".into() })?;
        let schema = ArraySchema::parse_header(header)?;
        let mut a = Self::new(schema)?;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Dump { line: lineno, message: m.to_string() };
            let (cs, vs) = line.split_once('|').ok_or_else(|| err("expected `coords|values`"))?;
            let coord: Coord = cs
                .split(',')
                .map(|p| p.parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err("bad coordinate"))?;
            let parts: Vec<&str> = vs.split(',').collect();
            if parts.len() != a.schema.arity() {
                return Err(err("wrong number of values"));
            }
            let tuple: CellTuple = parts
                .iter()
                .zip(a.schema.attrs())
                .map(|(p, attr)| Scalar::parse_text(p, attr.kind))
                .collect::<Option<_>>()
                .ok_or_else(|| err("bad value"))?;
            if coord.len() != a.schema.ndim() {
                return Err(err("wrong number of coordinates"));
            }
            a.set(&coord, Some(tuple)).map_err(|e| err(&e.to_string()))?;
        }
        Ok(a)
    }

    /// Hex SHA-256 of the text dump.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }
}

impl PartialEq for ChunkedArray {
    fn eq(&self, other: &Self) -> bool {
        self.same_cells(other)
    }
}

fn diff_maps(a: &BTreeMap<Coord, CellTuple>, b: &BTreeMap<Coord, CellTuple>) -> u64 {
    let mut n = 0;
    for (k, v) in a {
        match b.get(k) {
            Some(w) if w == v => {}
            _ => n += 1,
        }
    }
    n + b.keys().filter(|k| !a.contains_key(*k)).count() as u64
}

fn diff_count_by_cells(a: &ChunkedArray, b: &ChunkedArray) -> u64 {
    let mut n = 0;
    for (c, t) in a.cells() {
        match b.get_unchecked(c) {
            Some(u) if u == t => {}
            _ => n += 1,
        }
    }
    n + b.cells().iter().filter(|(c, _)| a.get_unchecked(c).is_none()).count() as u64
}

#[macro_export]
macro_rules! coord {
    ($($x:expr),* $(,)?) => {
        $crate::array::Coord::from_slice(&[$($x as i64),*])
    };
}

#[macro_export]
macro_rules! tuple {
    ($($x:expr),* $(,)?) => {
        $crate::array::CellTuple::from_slice(&[$($crate::array::Scalar::from($x)),*])
    };
}
