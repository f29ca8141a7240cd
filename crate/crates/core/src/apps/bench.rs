//! Runs an application under several strategies and shuffle policies on one
//! generated input, records per-iteration counters and checks that every
//! strategy reaches the same final array.

use std::fmt::Write as _;

use serde::Deserialize;

use super::generator::{self, ImageParams};
use super::kmeans::{self, KMeansParams};
use super::sigmaclip::{self, SigmaClipParams};
use super::sourcedetect::{self, SourceDetectParams};
use super::App;
use crate::array::ChunkedArray;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::expr::Expr;
use crate::fixpoint::{FixPointSpec, IterationTrace, Outcome};
use crate::incremental::{self, AlgebraicRegistry, Strategy, Workload};
use crate::multires::{self, PyramidSpec};
use crate::ops::AggregateSpec;
use crate::parallel::{self, ParallelConfig, ShufflePolicy};

pub const CSV_HEADER: &str = "app,strategy,policy,level,iteration,mini_index,major_index,changed_cells,cells_touched,shuffled_chunks,shuffled_cells";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub app: App,
    pub seed: u64,
    pub nx: i64,
    pub ny: i64,
    pub nt: i64,
    pub n_sources: usize,
    pub noise: f64,
    /// Chunk extents over (x, y).
    pub chunks: Vec<i64>,
    /// Halo radius for windowed runs; the window offsets when absent.
    pub overlap: Option<Vec<i64>>,
    pub workers: usize,
    /// Empty means the application's default set.
    pub strategies: Vec<Strategy>,
    pub policies: Vec<ShufflePolicy>,
    pub levels: usize,
    pub block: Vec<i64>,
    pub multires_agg: AggregateSpec,
    pub keep: Option<Expr>,
    pub k: f64,
    pub r: i64,
    /// Detection threshold on mean flux; background + 2·noise when absent.
    pub threshold: Option<f64>,
    pub clusters: usize,
}

impl BenchConfig {
    pub fn new(app: App) -> Self {
        BenchConfig {
            app,
            seed: 1,
            nx: 64,
            ny: 64,
            nt: 16,
            n_sources: 12,
            noise: 5.0,
            chunks: vec![16, 16],
            overlap: None,
            workers: 1,
            strategies: Vec::new(),
            policies: vec![ShufflePolicy::EveryK(1)],
            levels: 1,
            block: vec![2, 2],
            multires_agg: AggregateSpec::count("count"),
            keep: None,
            k: 3.0,
            r: 1,
            threshold: None,
            clusters: 4,
        }
    }

    /// Overlays the keys present in a TOML document.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let d: ConfigDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(a) = d.app {
            self.app = App::parse(&a)?;
        }
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = d.$f { self.$f = v; })* };
        }
        take!(seed, nx, ny, nt, n_sources, noise, chunks, workers, levels, block, k, r, clusters);
        if d.overlap.is_some() {
            self.overlap = d.overlap;
        }
        if d.threshold.is_some() {
            self.threshold = d.threshold;
        }
        if let Some(s) = d.strategies {
            self.strategies = s.iter().map(|s| Strategy::parse(s)).collect::<Result<_>>()?;
        }
        if let Some(p) = d.policies {
            self.policies = p.iter().map(|p| ShufflePolicy::parse(p)).collect::<Result<_>>()?;
        }
        if let Some(a) = d.multires_agg {
            self.multires_agg = parse_multires_agg(&a)?;
        }
        if let Some(k) = d.keep {
            self.keep = Some(Expr::parse(&k)?);
        }
        Ok(())
    }

    fn image_params(&self) -> ImageParams {
        let mut p = ImageParams::new(self.seed, self.nx, self.ny, self.nt, self.n_sources, self.noise);
        p.chunks = Some(vec![self.chunks[0], self.chunks[1], self.nt.max(1)]);
        p
    }

    fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(ImageParams::new(0, 1, 1, 1, 0, 0.0).background + 2.0 * self.noise.max(1.0))
    }

    fn strategies(&self) -> Vec<Strategy> {
        if !self.strategies.is_empty() {
            return self.strategies.clone();
        }
        match self.app {
            App::SigmaClip => Strategy::ALL.to_vec(),
            App::SourceDetect => vec![Strategy::Naive],
            App::KMeans => vec![Strategy::Naive, Strategy::EfficientIncr, Strategy::EfficientIncrStorage],
        }
    }

    fn pyramid(&self) -> PyramidSpec {
        let mut p = sourcedetect::pyramid_spec(self.levels, &self.block);
        let name = self.multires_agg.name.clone();
        p.aggs[0] = self.multires_agg.clone();
        p.keep = match &self.keep {
            Some(k) => k.clone(),
            None if name == "count" => p.keep,
            None => Expr::parse(&format!("{name} >= 1")).expect("identifier"),
        };
        p
    }

    fn validate(&self) -> Result<()> {
        if self.chunks.len() != 2 || self.chunks.iter().any(|&c| c < 1) {
            return Err(Error::BadParams(format!("chunks must be two positive extents, got {:?}", self.chunks)));
        }
        if self.workers == 0 {
            return Err(Error::BadParams("workers must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::BadPyramidSpec("levels must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::BadParams("no shuffle policy given".into()));
        }
        Ok(())
    }
}

/// `count` or `name:kind[:input]`.
pub fn parse_multires_agg(s: &str) -> Result<AggregateSpec> {
    if s == "count" {
        Ok(AggregateSpec::count("count"))
    } else {
        AggregateSpec::parse(s)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    app: Option<String>,
    seed: Option<u64>,
    nx: Option<i64>,
    ny: Option<i64>,
    nt: Option<i64>,
    n_sources: Option<usize>,
    noise: Option<f64>,
    chunks: Option<Vec<i64>>,
    overlap: Option<Vec<i64>>,
    workers: Option<usize>,
    strategies: Option<Vec<String>>,
    policies: Option<Vec<String>>,
    levels: Option<usize>,
    block: Option<Vec<i64>>,
    multires_agg: Option<String>,
    keep: Option<String>,
    k: Option<f64>,
    r: Option<i64>,
    threshold: Option<f64>,
    clusters: Option<usize>,
}

/// One strategy/policy combination and what it produced.
#[derive(Clone, Debug)]
pub struct BenchRun {
    pub strategy: String,
    pub policy: ShufflePolicy,
    /// Trace per pyramid level; a single entry for direct runs.
    pub traces: Vec<IterationTrace>,
    pub result: ChunkedArray,
    /// Whether the result takes part in the cross-strategy check.
    pub compared: bool,
}

impl BenchRun {
    pub fn iterations(&self) -> u64 {
        self.traces.iter().map(|t| t.len() as u64).sum()
    }

    pub fn cells_touched(&self) -> u64 {
        self.traces.iter().map(|t| t.total_touched()).sum()
    }

    pub fn shuffles(&self) -> (u64, u64) {
        self.traces.iter().map(parallel::total_shuffles).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }

    pub fn mini_major(&self) -> (u64, u64) {
        self.traces.iter().map(parallel::iteration_counts).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub app: App,
    pub input: ChunkedArray,
    pub runs: Vec<BenchRun>,
    /// True when every compared run produced the same final array.
    pub consistent: bool,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            for (level, t) in r.traces.iter().enumerate() {
                for rec in t.iter() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        self.app,
                        r.strategy,
                        r.policy,
                        level,
                        rec.iteration,
                        rec.stats.mini_index,
                        rec.stats.major_index,
                        rec.changed_cells,
                        rec.cells_touched,
                        rec.stats.shuffled_chunks,
                        rec.stats.shuffled_cells
                    );
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("app,strategy,policy,iterations,mini,major,cells_touched,shuffled_chunks,shuffled_cells,final_hash\n");
        for r in &self.runs {
            let (minis, majors) = r.mini_major();
            let (chunks, cells) = r.shuffles();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}{}",
                self.app,
                r.strategy,
                r.policy,
                r.iterations(),
                minis,
                majors,
                r.cells_touched(),
                chunks,
                cells,
                r.result.content_hash(),
                if r.compared { "" } else { " (not compared)" }
            );
        }
        let _ = writeln!(out, "consistent: {}", if self.consistent { "yes" } else { "NO" });
        out
    }

    /// The agreed final array, or the first run's when they disagree.
    pub fn final_array(&self) -> Option<&ChunkedArray> {
        self.runs.iter().find(|r| r.compared).map(|r| &r.result)
    }
}

fn unavailable(what: impl Into<String>) -> Error {
    Error::StrategyUnavailable(what.into())
}

fn direct(strategy: Strategy, policy: ShufflePolicy, o: Outcome) -> BenchRun {
    BenchRun { strategy: strategy.to_string(), policy, traces: vec![o.trace], result: o.array, compared: true }
}

fn incremental_run(
    spec: &FixPointSpec,
    a: &ChunkedArray,
    strategy: Strategy,
    policy: ShufflePolicy,
    workload: Workload,
    exec: &Executor,
) -> Result<BenchRun> {
    if policy != ShufflePolicy::EveryK(1) {
        return Err(unavailable(format!("{strategy} runs whole major steps; policy {policy} needs mini-iterations")));
    }
    let plan = incremental::rewrite_incremental(spec, a.schema(), &AlgebraicRegistry::standard(), workload)
        .map_err(|e| unavailable(format!("{strategy}: {e}")))?;
    let o = incremental::run_incremental_array(&plan, a, strategy == Strategy::EfficientIncrStorage, exec)?;
    Ok(direct(strategy, policy, o))
}

/// The generated input each application starts from: the image cube for
/// sigmaclip, labelled detections for sourcedetect and randomly assigned
/// detection points for kmeans.
pub fn bench_input(cfg: &BenchConfig) -> Result<ChunkedArray> {
    cfg.validate()?;
    let (cube, _) = generator::generate(&cfg.image_params())?;
    match cfg.app {
        App::SigmaClip => Ok(cube),
        App::SourceDetect => {
            let p = SourceDetectParams::new(cfg.r, cfg.threshold())?;
            sourcedetect::detect_input(&cube, &p, &cfg.chunks)
        }
        App::KMeans => {
            let img = sourcedetect::detection_image(&cube)?;
            let pts = sourcedetect::initial_labels(&img, cfg.threshold())?.rechunk(cfg.chunks.clone(), vec![0, 0])?;
            kmeans::initial_assignment(&pts, &KMeansParams::new(cfg.clusters, cfg.seed)?)
        }
    }
}

pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    bench_on(cfg, bench_input(cfg)?)
}

/// Runs every configured strategy and policy on `input`, which must have
/// the shape [`bench_input`] produces for the application.
pub fn bench_on(cfg: &BenchConfig, input: ChunkedArray) -> Result<BenchReport> {
    cfg.validate()?;
    let exec = Executor::new(cfg.workers);
    let pcfg = |policy| ParallelConfig { policy, workers: cfg.workers, radius: cfg.overlap.clone() };
    let mut runs = Vec::new();
    match cfg.app {
        App::SigmaClip => {
            if cfg.levels > 1 {
                return Err(unavailable("multi-resolution runs need a window or attribute application"));
            }
            let p = SigmaClipParams::new(cfg.k)?;
            let spec = sigmaclip::sigmaclip_spec(&p);
            for s in cfg.strategies() {
                for &policy in &cfg.policies {
                    runs.push(match s {
                        Strategy::Naive => direct(s, policy, parallel::run_parallel(&spec, &input, &pcfg(policy))?),
                        Strategy::ManualIncr if policy == ShufflePolicy::EveryK(1) => {
                            direct(s, policy, sigmaclip::manual_incr(&input, &p)?)
                        }
                        Strategy::ManualIncr => return Err(unavailable(format!("manual-incr with policy {policy}"))),
                        _ => incremental_run(&spec, &input, s, policy, Workload::DeleteOnly, &exec)?,
                    });
                }
            }
        }
        App::SourceDetect => {
            let spec = sourcedetect::sourcedetect_spec(&SourceDetectParams::new(cfg.r, cfg.threshold())?);
            for s in cfg.strategies() {
                if s != Strategy::Naive {
                    return Err(unavailable(format!("{s} cannot maintain window aggregates")));
                }
                for &policy in &cfg.policies {
                    runs.push(direct(s, policy, parallel::run_parallel(&spec, &input, &pcfg(policy))?));
                    if cfg.levels > 1 {
                        let mut state = multires::build_pyramid(&input, &cfg.pyramid())?;
                        let c = pcfg(policy);
                        let (out, traces) =
                            multires::run_multires_with(&mut state, &spec, &mut |s, x| parallel::run_parallel(s, x, &c))?;
                        runs.push(BenchRun { strategy: format!("{s}+multires"), policy, traces, result: out, compared: true });
                    }
                }
            }
        }
        App::KMeans => {
            let kp = KMeansParams::new(cfg.clusters, cfg.seed)?;
            let spec = kmeans::kmeans_spec(input.schema(), kp.max_iterations);
            for s in cfg.strategies() {
                for &policy in &cfg.policies {
                    runs.push(match s {
                        Strategy::Naive => direct(s, policy, parallel::run_parallel(&spec, &input, &pcfg(policy))?),
                        Strategy::ManualIncr => return Err(unavailable("manual-incr exists for sigmaclip only")),
                        _ => incremental_run(&spec, &input, s, policy, Workload::Mixed, &exec)?,
                    });
                }
            }
            if cfg.levels > 1 {
                // Only the point coordinates matter here; labels are redrawn at the top level.
                let (r, traces) = kmeans::kmeans_multires(&input, &kp, cfg.levels, &cfg.block, &exec)?;
                runs.push(BenchRun {
                    strategy: "naive+multires".into(),
                    policy: ShufflePolicy::EveryK(1),
                    traces,
                    result: r.labeled,
                    compared: false,
                });
            }
        }
    }
    let mut compared = runs.iter().filter(|r| r.compared).map(|r| &r.result);
    let consistent = match compared.next() {
        Some(first) => compared.all(|r| r == first),
        None => true,
    };
    Ok(BenchReport { app: cfg.app, input, runs, consistent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(app: App) -> BenchConfig {
        let mut c = BenchConfig::new(app);
        c.nx = 16;
        c.ny = 16;
        c.nt = 16;
        c.n_sources = 3;
        c.chunks = vec![8, 8];
        c
    }

    #[test]
    fn sigmaclip_strategies_agree() {
        let r = bench(&small(App::SigmaClip)).unwrap();
        assert_eq!(r.runs.len(), 4);
        assert!(r.consistent);
        assert!(r.runs[0].cells_touched() > r.runs[2].cells_touched());
        assert!(r.csv().starts_with(CSV_HEADER));
    }

    #[test]
    fn sigmaclip_rejects_mini_iterations() {
        let mut c = small(App::SigmaClip);
        c.policies = vec![ShufflePolicy::EveryK(5)];
        assert!(matches!(bench(&c), Err(Error::StrategyUnavailable(_))));
    }

    #[test]
    fn sourcedetect_with_multires() {
        let mut c = small(App::SourceDetect);
        c.policies = vec![ShufflePolicy::EveryK(1), ShufflePolicy::OnLocalConvergence];
        c.levels = 2;
        let r = bench(&c).unwrap();
        assert_eq!(r.runs.len(), 4);
        assert!(r.consistent);
    }

    #[test]
    fn config_overlay() {
        let mut c = BenchConfig::new(App::SigmaClip);
        c.apply_toml("app = \"kmeans\"\nseed = 9\npolicies = [\"t5\", \"converge\"]\nkeep = \"count >= 2\"").unwrap();
        assert_eq!(c.app, App::KMeans);
        assert_eq!(c.seed, 9);
        assert_eq!(c.policies, vec![ShufflePolicy::EveryK(5), ShufflePolicy::OnLocalConvergence]);
        assert!(c.apply_toml("bogus = 1").is_err());
    }

    #[test]
    fn kmeans_strategies_agree() {
        let mut c = small(App::KMeans);
        c.levels = 2;
        let r = bench(&c).unwrap();
        assert!(r.consistent);
        assert_eq!(r.runs.len(), 4);
    }
}
