use std::path::Path;
use std::process::{Command, Output};

fn iterarray(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterarray")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 6] = ["--nx", "16", "--ny", "16", "--chunks", "8x8"];

#[test]
fn generate_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for f in ["a.txt", "b.txt"] {
        let o = iterarray(&[&["generate", "--seed", "4", "-o", f][..], &SMALL].concat(), d.path());
        assert!(o.status.success());
    }
    let o = iterarray(&["diff", "a.txt", "b.txt"], d.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0 cells differ\n");
    iterarray(&[&["generate", "--seed", "5", "-o", "c.txt"][..], &SMALL].concat(), d.path());
    assert_eq!(iterarray(&["diff", "a.txt", "c.txt"], d.path()).status.code(), Some(1));
}

#[test]
fn run_from_input_matches_bench() {
    let d = tempfile::tempdir().unwrap();
    let gen = [&["generate", "--app", "sourcedetect", "-o", "in.txt"][..], &SMALL].concat();
    assert!(iterarray(&gen, d.path()).status.success());
    let run = [&["run", "sourcedetect", "--input", "in.txt", "--policy", "t5", "--workers", "2", "-o", "run.txt"][..], &SMALL]
        .concat();
    assert!(iterarray(&run, d.path()).status.success());
    let bench = [&["bench", "--app", "sourcedetect", "--policy", "t1,converge", "--dump", "bench.txt", "--csv", "m.csv"][..], &SMALL]
        .concat();
    let o = iterarray(&bench, d.path());
    assert!(o.status.success());
    assert!(stdout(&o).ends_with("consistent: yes\n"));
    assert!(iterarray(&["diff", "run.txt", "bench.txt"], d.path()).status.success());
    let csv = std::fs::read_to_string(d.path().join("m.csv")).unwrap();
    assert!(csv.starts_with(iterarray::apps::bench::CSV_HEADER));
}

#[test]
fn store_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let run = [&["run", "sigmaclip", "--strategy", "efficient-incr", "--nt", "16", "-o", "out.txt", "--store", "st"][..], &SMALL]
        .concat();
    assert!(iterarray(&run, d.path()).status.success());
    assert_eq!(stdout(&iterarray(&["dump", "st"], d.path())), "A 2\n");
    let stored = stdout(&iterarray(&["dump", "st", "--name", "A", "--hash"], d.path()));
    let direct = stdout(&iterarray(&["dump", "out.txt", "--hash"], d.path()));
    assert_eq!(stored, direct);
    let minus = stdout(&iterarray(&["dump", "st", "--name", "A", "--which", "minus", "--version", "2"], d.path()));
    assert!(minus.lines().count() > 1, "clipping removed cells");
}

#[test]
fn config_file_and_flag_override() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), "app = \"kmeans\"\nnx = 16\nny = 16\nchunks = [8, 8]\nclusters = 3\n").unwrap();
    let o = iterarray(&["bench", "--config", "c.toml", "--seed", "3", "--levels", "2"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("kmeans,efficient-incr+storage,t1,")));
    assert!(out.contains("naive+multires"));
}

#[test]
fn errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = iterarray(&["run", "sigmaclip", "--policy", "t5", "--strategy", "manual-incr"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manual-incr"));
    assert_eq!(iterarray(&["run", "nosuchapp"], d.path()).status.code(), Some(2));
    assert_eq!(iterarray(&["bench", "--chunks", "8"], d.path()).status.code(), Some(2));
}
