//! Deterministic synthetic image cubes: a flat background, Gaussian-profile
//! sources, per-pixel noise and sparse positive outliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::array::{ArraySchema, Attribute, ChunkedArray, Dimension, Scalar, ScalarKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageParams {
    pub seed: u64,
    pub nx: i64,
    pub ny: i64,
    pub nt: i64,
    pub n_sources: usize,
    pub noise: f64,
    pub background: f64,
    /// Fraction of pixels receiving a +10·noise spike.
    pub outlier_rate: f64,
    /// Chunk extents over (x, y, t); one chunk when absent.
    pub chunks: Option<Vec<i64>>,
}

impl ImageParams {
    pub fn new(seed: u64, nx: i64, ny: i64, nt: i64, n_sources: usize, noise: f64) -> Self {
        ImageParams { seed, nx, ny, nt, n_sources, noise, background: 100.0, outlier_rate: 0.01, chunks: None }
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 1 || self.ny < 1 || self.nt < 1 {
            return Err(Error::BadParams(format!("extents must be positive, got {}x{}x{}", self.nx, self.ny, self.nt)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::BadParams(format!("noise must be a non-negative number, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::BadParams(format!("outlier rate {} is not a fraction", self.outlier_rate)));
        }
        if !self.background.is_finite() {
            return Err(Error::BadParams("background must be finite".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<ArraySchema> {
        let dims = vec![
            Dimension::new("x", 0, self.nx - 1),
            Dimension::new("y", 0, self.ny - 1),
            Dimension::new("t", 0, self.nt - 1),
        ];
        let attrs = vec![Attribute::new("d", ScalarKind::Float64)];
        match &self.chunks {
            Some(c) => ArraySchema::with_chunking(dims, attrs, c.clone(), vec![0; 3]),
            None => ArraySchema::new(dims, attrs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub x: i64,
    pub y: i64,
    pub amplitude: f64,
    pub width: f64,
}

impl Source {
    pub fn profile(&self, x: i64, y: i64) -> f64 {
        let (dx, dy) = ((x - self.x) as f64, (y - self.y) as f64);
        self.amplitude * (-(dx * dx + dy * dy) / (2.0 * self.width * self.width)).exp()
    }
}

/// Generates the cube and returns the sources placed in it. Values are
/// rounded to integers so sums over them stay exact.
pub fn generate(p: &ImageParams) -> Result<(ChunkedArray, Vec<Source>)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let scale = p.noise.max(1.0);
    let sources: Vec<Source> = (0..p.n_sources)
        .map(|_| Source {
            x: rng.random_range(0..p.nx),
            y: rng.random_range(0..p.ny),
            amplitude: rng.random_range(8.0..20.0) * scale,
            width: rng.random_range(1.0..3.0),
        })
        .collect();
    let normal = Normal::new(0.0, p.noise).map_err(|e| Error::BadParams(e.to_string()))?;
    let mut a = ChunkedArray::new(p.schema()?)?;
    for x in 0..p.nx {
        for y in 0..p.ny {
            let sky = p.background + sources.iter().map(|s| s.profile(x, y)).sum::<f64>();
            for t in 0..p.nt {
                let mut v = sky + normal.sample(&mut rng);
                if rng.random::<f64>() < p.outlier_rate {
                    v += 10.0 * p.noise;
                }
                a.put_unchecked(&[x, y, t], Some(vec![Scalar::Float(v.round())].into()));
            }
        }
    }
    Ok((a, sources))
}

pub fn generate_images(seed: u64, nx: i64, ny: i64, nt: i64, n_sources: usize, noise: f64) -> Result<ChunkedArray> {
    generate(&ImageParams::new(seed, nx, ny, nt, n_sources, noise)).map(|(a, _)| a)
}
