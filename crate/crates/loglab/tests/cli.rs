use loglab::cli::*;
use std::path::PathBuf;
use std::process::Command;

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("loglab-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn config(text: &str, out: &PathBuf) -> ExperimentConfig {
    let mut c = validate(text.as_bytes()).expect("valid config");
    c.output = out.clone();
    c
}

#[test]
fn validation_messages() {
    assert_eq!(validate(b"").unwrap_err(), vec!["missing experiment".to_string()]);
    let e = validate(b"experiment = \"warp_drive\"").unwrap_err();
    assert!(e[0].starts_with("experiment:") && e[0].contains("warp_drive"), "{e:?}");
    assert!(validate(b"experiment = \"geometry_checks\"").is_ok());
    let e = validate(b"experiment = \"geometry_checks\"\ncolour = 1").unwrap_err();
    assert!(e[0].starts_with("colour:"), "{e:?}");
    let e = validate(b"experiment = \"fractal_pc\"\n[params]\nsamplez = 3").unwrap_err();
    assert!(e[0].contains("samplez"), "{e:?}");
    let e = validate(b"experiment = \"fractal_crossing\"\n[[params.cases]]\nps = [1.5]").unwrap_err();
    assert!(e[0].starts_with("params.cases[0].ps"), "{e:?}");
    let e = validate(b"experiment = \"brw_moments\"\nseed = -4\n[params]\nd = 50").unwrap_err();
    assert!(e.iter().any(|m| m.starts_with("seed:")) && e.iter().any(|m| m.starts_with("params.branching")), "{e:?}");
    assert!(validate(b"experiment = [").unwrap_err()[0].starts_with("syntax"));
}

#[test]
fn shipped_configs_validate() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut acceptance = 0;
    for dir in [root.clone(), root.join("acceptance")] {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "toml") {
                let bytes = std::fs::read(&p).unwrap();
                assert!(validate(&bytes).is_ok(), "{}: {:?}", p.display(), validate(&bytes).err());
                acceptance += p.parent().unwrap().ends_with("acceptance") as usize;
            }
        }
    }
    assert_eq!(acceptance, 12);
}

#[test]
fn geometry_run_writes_artifacts() {
    let out = scratch("geo");
    let r = run(&config("experiment = \"geometry_checks\"\nseed = 1", &out)).unwrap();
    assert_eq!(r.passed, Some(true));
    let zero = r.results["ratio_at_zero"].as_array().unwrap();
    assert!(zero.iter().all(|row| row["u"] == 0.0 && row["ratio"] == 1.0));
    assert_eq!(r.config["params"]["grid"], 100);
    assert_eq!(r.config["experiment"], "geometry_checks");
    for f in ["config.json", "report.json", "intersection_ratio.csv"] {
        assert!(r.run_dir.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(r.run_dir.join("intersection_ratio.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("d,t,u,ratio"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[3], "1.0000000000000000e0");
    let back: RunReport = serde_json::from_slice(&std::fs::read(r.run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn fractal_run_matches_enumeration() {
    let out = scratch("frac");
    let text = "experiment = \"fractal_crossing\"\nseed = 5\n[[params.cases]]\nds = [2]\nps = [0.5]\nns = [1]\nsamples = 100000";
    let r = run(&config(text, &out)).unwrap();
    let e = &r.results["estimates"][0];
    let rate = e["crossing_rate"].as_f64().unwrap();
    let se = e["stderr"].as_f64().unwrap();
    assert!((rate - 0.28125).abs() <= 3.0 * se);
    assert_eq!(r.passed, Some(true));
    let csv = std::fs::read_to_string(r.run_dir.join("crossing.csv")).unwrap();
    assert!(csv.starts_with("d,p,n,samples,crossing_rate,ci_lo,ci_hi\n2,5.0000000000000000e-1,1,100000,"));
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn identical_configs_reproduce() {
    let out = scratch("det");
    let text = "experiment = \"brw_moments\"\nseed = 3\n[params]\npairs = 200";
    let a = run(&config(text, &out)).unwrap();
    let b = run(&config(text, &out)).unwrap();
    assert_ne!(a.run_dir, b.run_dir);
    assert_eq!(serde_json::to_string(&a.results).unwrap(), serde_json::to_string(&b.results).unwrap());
    assert_eq!(a.stderr, b.stderr);
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn binary_subcommands() {
    let exe = env!("CARGO_BIN_EXE_loglab");
    let list = Command::new(exe).arg("list-experiments").output().unwrap();
    let names = String::from_utf8(list.stdout).unwrap();
    assert_eq!(names.lines().count(), 12);
    let dir = scratch("bin");
    std::fs::create_dir_all(&dir).unwrap();
    let empty = dir.join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let v = Command::new(exe).arg("validate").arg(&empty).output().unwrap();
    assert!(!v.status.success());
    assert!(String::from_utf8_lossy(&v.stderr).contains("missing experiment"));
    let cfg = dir.join("seq.toml");
    std::fs::write(&cfg, "experiment = \"gaussian_checks\"\n[params]\nchecks = [\"sequence\"]\n").unwrap();
    let r = Command::new(exe).args(["run", cfg.to_str().unwrap(), "--seed", "9", "--out"]).arg(dir.join("runs")).env("LOGLAB_THREADS", "1").output().unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    let report_path = stdout.lines().next().unwrap();
    let report: RunReport = serde_json::from_slice(&std::fs::read(report_path).unwrap()).unwrap();
    assert_eq!(report.config["seed"], 9);
    assert!(stdout.contains("checks: pass"));
    std::fs::remove_dir_all(dir).unwrap();
}
