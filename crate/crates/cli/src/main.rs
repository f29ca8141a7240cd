//! `iterarray`: generate inputs, run the applications, benchmark strategies
//! and inspect dumped arrays.
//!
//! Exit codes: 0 on success, 1 when strategies disagree or `diff` finds a
//! difference, 2 on usage or engine errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iterarray::apps::bench::{self, BenchConfig, BenchReport};
use iterarray::apps::App;
use iterarray::{ChunkedArray, Error, Expr, Result, ShufflePolicy, Strategy, VersionedStore, Which};

#[derive(Parser)]
#[command(name = "iterarray", version, about = "Iterative array processing with a native fixpoint operator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the generated input of an application as a text dump.
    Generate {
        #[arg(long, default_value = "sigmaclip")]
        app: String,
        #[command(flatten)]
        opts: Opts,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run one application with one strategy and policy.
    Run {
        app: String,
        #[command(flatten)]
        opts: Opts,
        /// Read the input from a dump instead of generating it.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write the final array dump here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write per-iteration metrics CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Save input and result as versions in a store directory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run an application under several strategies and policies and check
    /// that they agree.
    Bench {
        #[arg(long)]
        app: Option<String>,
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the agreed final array here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print an array dump, or a version from a store directory.
    Dump {
        path: PathBuf,
        /// Array name inside a store directory.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        version: Option<u64>,
        /// full, plus or minus.
        #[arg(long, default_value = "full")]
        which: String,
        /// Print only the content hash.
        #[arg(long)]
        hash: bool,
    },
    /// Compare two dumps cell by cell.
    Diff { a: PathBuf, b: PathBuf },
}

#[derive(Args, Default)]
struct Opts {
    /// TOML file with bench settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nx: Option<i64>,
    #[arg(long)]
    ny: Option<i64>,
    #[arg(long)]
    nt: Option<i64>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Chunk extents over x and y, e.g. 16x16.
    #[arg(long)]
    chunks: Option<String>,
    /// Halo radius, e.g. 1x1.
    #[arg(long)]
    overlap: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// naive, manual-incr, efficient-incr or efficient-incr+storage; comma separated for bench.
    #[arg(long)]
    strategy: Option<String>,
    /// t1, t5, t10, tK=<k>, converge or thresh=<n>; comma separated for bench.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    /// Pyramid block, e.g. 2x2.
    #[arg(long)]
    grid: Option<String>,
    /// `count` or name:kind[:input].
    #[arg(long)]
    multires_agg: Option<String>,
    /// Predicate a coarse cell must satisfy to be kept.
    #[arg(long)]
    keep: Option<String>,
    /// Sigma multiplier for sigmaclip.
    #[arg(long)]
    k: Option<f64>,
    /// Neighbourhood radius for sourcedetect.
    #[arg(long)]
    r: Option<i64>,
    /// Detection threshold on mean flux.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
}

fn extents(s: &str) -> Result<Vec<i64>> {
    s.split(['x', ','])
        .map(|p| p.trim().parse::<i64>().map_err(|_| Error::BadParams(format!("bad extents `{s}`"))))
        .collect()
}

fn list<T>(s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(|p| parse(p.trim())).collect()
}

impl Opts {
    fn config(&self, app: Option<&str>) -> Result<BenchConfig> {
        let mut c = BenchConfig::new(App::SigmaClip);
        if let Some(p) = &self.config {
            c.apply_toml(&read(p)?)?;
        }
        if let Some(a) = app {
            c.app = App::parse(a)?;
        }
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$g = v; })* };
        }
        set!(seed => seed, nx => nx, ny => ny, nt => nt, sources => n_sources, noise => noise,
             workers => workers, levels => levels, k => k, r => r, clusters => clusters);
        if let Some(s) = &self.chunks {
            c.chunks = extents(s)?;
        }
        if let Some(s) = &self.overlap {
            c.overlap = Some(extents(s)?);
        }
        if let Some(s) = &self.grid {
            c.block = extents(s)?;
        }
        if let Some(s) = &self.strategy {
            c.strategies = list(s, Strategy::parse)?;
        }
        if let Some(s) = &self.policy {
            c.policies = list(s, ShufflePolicy::parse)?;
        }
        if let Some(s) = &self.multires_agg {
            c.multires_agg = bench::parse_multires_agg(s)?;
        }
        if let Some(s) = &self.keep {
            c.keep = Some(Expr::parse(s)?);
        }
        if self.threshold.is_some() {
            c.threshold = self.threshold;
        }
        Ok(c)
    }
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(io(p))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(io(p))
}

fn load(p: &Path) -> Result<ChunkedArray> {
    ChunkedArray::parse_dump(&read(p)?)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(r: &BenchReport, csv: Option<&Path>, dump: Option<&Path>) -> Result<ExitCode> {
    print!("{}", r.summary());
    if let Some(p) = csv {
        write(p, &r.csv())?;
    }
    if let (Some(p), Some(a)) = (dump, r.final_array()) {
        write(p, &a.dump())?;
    }
    Ok(if r.consistent { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn array_name(app: App) -> &'static str {
    match app {
        App::SigmaClip => "A",
        App::SourceDetect => "L",
        App::KMeans => "P",
    }
}

fn execute(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Generate { app, opts, out } => {
            let a = bench::bench_input(&opts.config(Some(&app))?)?;
            emit(out.as_deref(), &a.dump())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { app, opts, input, out, csv, store } => {
            let mut cfg = opts.config(Some(&app))?;
            if cfg.strategies.len() > 1 || cfg.policies.len() > 1 {
                return Err(Error::BadParams("run takes one strategy and one policy; use bench for several".into()));
            }
            if cfg.strategies.is_empty() {
                cfg.strategies = vec![Strategy::Naive];
            }
            let a = match &input {
                Some(p) => load(p)?,
                None => bench::bench_input(&cfg)?,
            };
            let r = bench::bench_on(&cfg, a)?;
            if let Some(dir) = store {
                let name = array_name(cfg.app);
                let mut s = if dir.is_dir() { VersionedStore::load(&dir)? } else { VersionedStore::new() };
                s.store(name, r.input.clone())?;
                if let Some(last) = r.runs.last() {
                    s.store(name, last.result.clone())?;
                }
                s.save(&dir)?;
            }
            if let (Some(p), Some(last)) = (out.as_deref(), r.runs.last()) {
                write(p, &last.result.dump())?;
            }
            report(&r, csv.as_deref(), None)
        }
        Cmd::Bench { app, opts, csv, dump } => {
            let r = bench::bench(&opts.config(app.as_deref())?)?;
            report(&r, csv.as_deref(), dump.as_deref())
        }
        Cmd::Dump { path, name, version, which, hash } => {
            let a = if path.is_dir() {
                let s = VersionedStore::load(&path)?;
                let Some(name) = name else {
                    for n in s.names() {
                        println!("{n} {}", s.latest_version(n)?);
                    }
                    return Ok(ExitCode::SUCCESS);
                };
                let which = match which.as_str() {
                    "full" => Which::Full,
                    "plus" => Which::DeltaPlus,
                    "minus" => Which::DeltaMinus,
                    w => return Err(Error::BadParams(format!("unknown slice `{w}`"))),
                };
                s.scan(&name, which, version)?.clone()
            } else {
                load(&path)?
            };
            if hash {
                println!("{}", a.content_hash());
            } else {
                print!("{}", a.dump());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Diff { a, b } => {
            let (x, y) = (load(&a)?, load(&b)?);
            if !x.schema().logically_equal(y.schema()) {
                println!("schemas differ:\n  {}\n  {}", x.schema().header(), y.schema().header());
                return Ok(ExitCode::from(1));
            }
            let n = x.diff_count(&y)?;
            println!("{n} cells differ");
            Ok(if n == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
