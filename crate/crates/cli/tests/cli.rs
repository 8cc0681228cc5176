use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mbo_cli::Dump;
use tempfile::TempDir;

fn mbo(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mbo"));
    cmd.args(args).env_remove("MBO_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `body` plus an `output` line pointing into `dir`.
fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let out = dir.join(format!("{name}_out"));
    let path = dir.join(format!("{name}.cfg"));
    fs::write(&path, format!("{body}\noutput = {}\n", out.display())).unwrap();
    path
}

fn out_dir(cfg: &Path) -> PathBuf {
    let name = cfg.file_stem().unwrap().to_string_lossy().into_owned();
    cfg.with_file_name(format!("{name}_out"))
}

fn dumps_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".mbof"))
        .collect();
    v.sort();
    v
}

const VP_BALL: &str = "scheme = volume_preserving\nn = 64\nh = 1e-3\nsteps = 6\ninit = ball radius=0.25";

#[test]
fn volume_preserving_run_passes_and_writes_ledger() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "vp", VP_BALL);
    let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("ledger PASS"));
    let csv = fs::read_to_string(out_dir(&cfg).join("ledger.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,t,lambda,E_h,D_h,slack,radius"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 7);
        assert_eq!(r[0], (k + 1).to_string());
        let lambda: f64 = r[2].parse().unwrap();
        assert!((0.0..1.0).contains(&lambda));
        assert!(r[5].parse::<f64>().unwrap() >= -1e-9);
    }
    assert_eq!(dumps_in(&out_dir(&cfg)).len(), 7);
    let first = Dump::read(&out_dir(&cfg).join("step_000000.mbof")).unwrap();
    let last = Dump::read(&out_dir(&cfg).join("step_000006.mbof")).unwrap();
    let count = |d: &Dump| d.labels.iter().filter(|&&l| l == 1).count();
    assert_eq!(count(&first), count(&last));
}

#[test]
fn zero_steps_writes_only_the_initial_snapshot() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "zero", &VP_BALL.replace("steps = 6", "steps = 0"));
    let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(dumps_in(&out_dir(&cfg)), vec!["step_000000.mbof"]);
    let csv = fs::read_to_string(out_dir(&cfg).join("ledger.csv")).unwrap();
    assert_eq!(csv, "n,t,lambda,E_h,D_h,slack,radius\n");
}

#[test]
fn dump_every_thins_the_output() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "thin", &format!("{VP_BALL}\ndump_every = 4"));
    assert_eq!(code(&mbo(&["run", cfg.to_str().unwrap()], &[])), 0);
    assert_eq!(
        dumps_in(&out_dir(&cfg)),
        vec!["step_000000.mbof", "step_000004.mbof", "step_000006.mbof"]
    );
}

#[test]
fn runs_are_bit_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let body = "scheme = grain_growth\nn = 64\nh = 1e-3\nsteps = 4\nseed = 3\n\
                init = voronoi count=4 region=ball:0.5,0.5:0.35\nsigma.1.2 = 0.8";
    let a = config(dir.path(), "a", body);
    let b = config(dir.path(), "b", body);
    assert_eq!(code(&mbo(&["run", a.to_str().unwrap()], &[("MBO_THREADS", "1")])), 0);
    assert_eq!(code(&mbo(&["run", b.to_str().unwrap()], &[("MBO_THREADS", "3")])), 0);
    let names = dumps_in(&out_dir(&a));
    assert_eq!(names, dumps_in(&out_dir(&b)));
    for name in names.iter().map(String::as_str).chain(["ledger.csv"]) {
        let x = fs::read(out_dir(&a).join(name)).unwrap();
        let y = fs::read(out_dir(&b).join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn resume_continues_the_forced_run() {
    let dir = TempDir::new().unwrap();
    let body = "scheme = forced\nn = 64\nh = 1e-3\ninit = ball radius=0.2\n\
                force = wave mean=2 amplitude=3 mode=1,1 omega=300";
    let whole = config(dir.path(), "whole", &format!("{body}\nsteps = 6"));
    assert_eq!(code(&mbo(&["run", whole.to_str().unwrap()], &[])), 0);
    let head = config(dir.path(), "head", &format!("{body}\nsteps = 3"));
    assert_eq!(code(&mbo(&["run", head.to_str().unwrap()], &[])), 0);
    let resume = out_dir(&head).join("step_000003.mbof");
    let tail = config(
        dir.path(),
        "tail",
        &format!(
            "{}\nt_final = 0.006\nresume = {}",
            body.replace("\ninit = ball radius=0.2", ""),
            resume.display()
        ),
    );
    let out = mbo(&["run", tail.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        dumps_in(&out_dir(&tail)).first().map(String::as_str),
        Some("step_000003.mbof")
    );
    for step in 3..=6 {
        let name = format!("step_{step:06}.mbof");
        assert_eq!(
            fs::read(out_dir(&whole).join(&name)).unwrap(),
            fs::read(out_dir(&tail).join(&name)).unwrap()
        );
    }
    let rows = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("ledger.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                // the radius column depends on the run's own initial centroid
                l.rsplit_once(',').unwrap().0.to_string()
            })
            .collect()
    };
    assert_eq!(rows(&out_dir(&whole))[3..], rows(&out_dir(&tail))[..]);
}

#[test]
fn corrupted_resume_file_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.mbof");
    fs::write(&bad, "MBOF1\ndim=2\nn=64,64\nside=1\nh=oops\nstep=0\nphases=2\n\n").unwrap();
    let cfg = config(
        dir.path(),
        "res",
        &format!("scheme = mbo\nn = 64\nh = 1e-3\nsteps = 2\nresume = {}", bad.display()),
    );
    let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 4);
    assert!(
        stderr(&out).contains("header line 5") && stderr(&out).contains("bad h"),
        "{}",
        stderr(&out)
    );

    fs::write(&bad, "MBOF1\ndim=2\nn=64,64\nside=1\nh=1e-3\nstep=0\nphases=2\n\nshort").unwrap();
    let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("expected 4096 cells"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_code_three() {
    let dir = TempDir::new().unwrap();
    let cases = [
        (format!("{VP_BALL}\nwobble = 1"), "unknown key 'wobble'"),
        (format!("{VP_BALL}\nh = 2e-3"), "first set on line 3"),
        (
            "scheme = grain_growth\nn = 64\nh = 1e-3\nsteps = 1\ninit = voronoi count=3 region=margin:0.1\nsigma.1.2 = 3.5"
                .to_string(),
            "σ_ij < 2",
        ),
        (
            "scheme = grain_growth\nn = 64\nh = 1e-3\nsteps = 1\ninit = voronoi count=3 region=margin:0.1\nsigma.1.4 = 1"
                .to_string(),
            "names grain 4",
        ),
        (VP_BALL.replace("radius=0.25", "radius=0.7"), "init"),
    ];
    for (k, (body, want)) in cases.iter().enumerate() {
        let cfg = config(dir.path(), &format!("e{k}"), body);
        let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
        assert_eq!(code(&out), 3, "{body}");
        assert!(stderr(&out).contains(want), "{} lacks {want}", stderr(&out));
    }
    let out = mbo(&["run", dir.path().join("missing.cfg").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 4);
    let cfg = config(dir.path(), "threads", VP_BALL);
    assert_eq!(
        code(&mbo(&["run", cfg.to_str().unwrap()], &[("MBO_THREADS", "zero")])),
        3
    );
    assert_eq!(code(&mbo(&["frobnicate"], &[])), 3);
}

fn grain_run(dir: &Path) -> PathBuf {
    let cfg = config(
        dir,
        "gg",
        "scheme = grain_growth\nn = 64\nh = 1e-3\nsteps = 4\n\
         init = voronoi seeds=0.4,0.4;0.6,0.45;0.5,0.62 region=ball:0.5,0.5:0.3\nsigma.1.2 = 0.7\nsigma.2.3 = 1.2",
    );
    let out = mbo(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    cfg
}

#[test]
fn check_reaudits_stored_dumps() {
    let dir = TempDir::new().unwrap();
    let cfg = grain_run(dir.path());
    let out_path = out_dir(&cfg);
    let paths: Vec<String> = dumps_in(&out_path)
        .iter()
        .map(|n| out_path.join(n).to_string_lossy().into_owned())
        .collect();
    let mut args = vec!["check", "--config", cfg.to_str().unwrap()];
    args.extend(paths.iter().map(String::as_str));
    let out = mbo(&args, &[]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("ledger PASS"));

    // a gap in the sequence
    let mut gap = vec!["check", "--config", cfg.to_str().unwrap()];
    gap.extend([paths[0].as_str(), paths[2].as_str()]);
    assert_eq!(code(&mbo(&gap, &[])), 3);

    // a tampered state that no step could have produced
    let victim = out_path.join("step_000002.mbof");
    let mut d = Dump::read(&victim).unwrap();
    for (k, l) in d.labels.iter_mut().enumerate() {
        if *l != 0 && k % 2 == 0 {
            *l = (*l % 3) + 1;
        }
    }
    d.write(&victim).unwrap();
    let out = mbo(&args, &[]);
    assert_eq!(code(&out), 2, "{}", stdout(&out));
    assert!(stdout(&out).contains("ledger FAIL"));
}

#[test]
fn energy_of_a_flat_slab_matches_the_perimeter() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "slab",
        "scheme = mbo\nn = 256\nh = 1e-3\nsteps = 0\ninit = slab axis=0 offset=0.25 thickness=0.5",
    );
    assert_eq!(code(&mbo(&["run", cfg.to_str().unwrap()], &[])), 0);
    let dump = out_dir(&cfg).join("step_000000.mbof");
    for h in ["4e-3", "1e-3"] {
        let out = mbo(&["energy", dump.to_str().unwrap(), "--h", h], &[]);
        assert_eq!(code(&out), 0);
        let e: f64 = stdout(&out).trim().strip_prefix("E_h = ").unwrap().parse().unwrap();
        let exact = 2.0 / std::f64::consts::PI.sqrt();
        assert!(((e - exact) / exact).abs() < 1e-3, "h = {h}: {e}");
    }
    let gg = grain_run(dir.path());
    let dump = out_dir(&gg).join("step_000000.mbof");
    let with = mbo(
        &["energy", dump.to_str().unwrap(), "--config", gg.to_str().unwrap()],
        &[],
    );
    let without = mbo(&["energy", dump.to_str().unwrap()], &[]);
    assert_eq!(code(&with), 0);
    assert_ne!(stdout(&with), stdout(&without));
}

#[test]
fn sweep_needs_three_points() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "two",
        "scheme = mbo\nn = 64\nt_final = 0.004\ninit = ball radius=0.3\nsweep.h = 2e-3,1e-3",
    );
    let out = mbo(&["sweep", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("at least 3 points"));
}

#[test]
fn repeated_sweep_points_give_identical_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "rep",
        "scheme = mbo\nn = 64\nt_final = 0.01\ninit = ball radius=0.3\nsweep.h = 1e-3,1e-3,1e-3",
    );
    let out = mbo(&["sweep", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(out_dir(&cfg).join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| *r == rows[0]), "{csv}");
    assert!(stdout(&out).contains("fitted order: -"));
}

#[test]
fn circle_sweep_is_first_order() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "eoc",
        "scheme = mbo\nn = 512\nt_final = 0.032\ninit = ball radius=0.3\n\
         sweep.h = 4e-3, 2e-3, 1e-3\nsweep.min_order = 0.8",
    );
    let out = mbo(&["sweep", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let csv = fs::read_to_string(out_dir(&cfg).join("sweep.csv")).unwrap();
    assert!(csv.starts_with("h,n,steps,measured,oracle,error,order\n"));
    let errors: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn unsupported_oracle_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "slab",
        "scheme = mbo\nn = 64\nt_final = 0.004\ninit = slab offset=0.25 thickness=0.5\nsweep.h = 4e-3,2e-3,1e-3",
    );
    let out = mbo(&["sweep", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("no oracle"));
}

#[test]
fn lambda_sweep_reports_the_scaling() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        "lam",
        "scheme = volume_preserving\nn = 256\nt_final = 0.0064\ninit = ball radius=0.25\n\
         sweep.h = 1.6e-3, 8e-4, 4e-4\nsweep.mode = lambda",
    );
    let out = mbo(&["sweep", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir(&cfg).join("sweep.csv")).unwrap();
    assert!(csv.starts_with("h,n,steps,M,bad_iterations,order\n"), "{csv}");
    let steps: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, vec![4, 8, 16]);
    assert!(stdout(&out).contains("fitted order:"));
}
