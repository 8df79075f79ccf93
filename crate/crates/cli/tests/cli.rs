use std::path::PathBuf;
use std::process::{Command, Output};

fn symsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symsde"))
        .args(args)
        .env_remove("SYMSDE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn body(o: &Output) -> Vec<String> {
    stdout(o).lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("symsde-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(name: &str, text: &str) -> String {
    let path = scratch(name).join("exp.ini");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_prints_hypothesis_table() {
    let o = symsde(&["validate"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for row in ["H0", "H1", "H2", "H3", "H3'", "step"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{row} "))), "{row} missing:\n{out}");
    }
}

#[test]
fn self_test_converge_reports_rate_one() {
    let o = symsde(&["converge", "--self-test", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = body(&o);
    assert_eq!(rows[0], "level,dt,error,stderr,n_paths");
    assert_eq!(rows.len(), 1 + 5 + 1);
    assert!(rows.last().unwrap().starts_with("rate,,1.000000,"), "{rows:?}");
}

#[test]
fn levels_flag_extends_ladder() {
    let o = symsde(&["converge", "--self-test", "--levels", "6"]);
    assert_eq!(body(&o).len(), 1 + 7 + 1);
}

#[test]
fn timestamp_only_in_comment_and_suppressible() {
    let with = stdout(&symsde(&["converge", "--self-test"]));
    let without = stdout(&symsde(&["converge", "--self-test", "--no-timestamp"]));
    assert!(with.lines().any(|l| l.starts_with("# generated_unix=")));
    assert!(!without.contains("generated_unix"));
    assert!(without.lines().nth(1).unwrap().starts_with("# config_hash="));
    assert!(without.contains("seed=0"));
}

#[test]
fn converge_is_reproducible_and_seed_sensitive() {
    let args = ["converge", "--paths", "20000", "--levels", "2", "--no-timestamp"];
    let a = symsde(&args);
    let b = symsde(&args);
    assert_eq!(a.stdout, b.stdout);
    let rows = body(&a);
    assert_eq!(rows[0], "level,dt,error,stderr,n_paths");
    assert!(rows[1].starts_with("0,0.1,"));
    let mut seeded = args.to_vec();
    seeded.extend(["--seed", "9"]);
    let c = symsde(&seeded);
    assert_ne!(body(&a), body(&c));
    assert!(stdout(&c).contains("seed=9"));
}

#[test]
fn thread_count_does_not_change_output() {
    let run = |n: &str| {
        Command::new(env!("CARGO_BIN_EXE_symsde"))
            .args(["localtime", "--paths", "3000", "--no-timestamp"])
            .env("SYMSDE_THREADS", n)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn bad_thread_count_is_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_symsde"))
        .args(["validate"])
        .env("SYMSDE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analytics_schema_and_quoting() {
    let o = symsde(&["analytics", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = body(&o);
    assert_eq!(rows[0], "quantity,params_json,value");
    let laplace = rows.iter().find(|r| r.starts_with("cir_laplace,")).unwrap();
    assert_eq!(laplace, "cir_laplace,\"{\"\"u\"\":1.0,\"\"t\"\":1.0,\"\"x\"\":1.0}\",0.5245919006305202");
}

#[test]
fn pde_and_simulate_schemas() {
    let o = symsde(&["pde", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = body(&o);
    assert_eq!(rows[0], "x,u");
    assert_eq!(rows.len(), 1 + 1024);
    assert!(rows[1].starts_with("0,"));

    let o = symsde(&["simulate", "--paths", "3", "--no-timestamp"]);
    let rows = body(&o);
    assert_eq!(rows[0], "path,k,t,x,z");
    assert_eq!(rows.len(), 1 + 3 * 21);
    assert_eq!(rows[1], "0,0,0,1,1");
    assert!(rows[1..].iter().all(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn localtime_schema() {
    let rows = body(&symsde(&["localtime", "--paths", "2000"]));
    assert_eq!(rows[0], "estimator,value,stderr");
    assert!(rows[1].starts_with("occupation,"));
    assert!(rows[2].starts_with("analytic,"));
}

#[test]
fn out_dir_receives_file() {
    let dir = scratch("out");
    let o = symsde(&["converge", "--self-test", "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(dir.join("converge.csv")).unwrap();
    assert!(text.contains("level,dt,error,stderr,n_paths"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(symsde(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(symsde(&[]).status.code(), Some(2));
    assert_eq!(symsde(&["validate", "--seed", "-1"]).status.code(), Some(2));
    assert_eq!(symsde(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_two() {
    assert_eq!(symsde(&["validate", "--config", "/nonexistent/x.ini"]).status.code(), Some(2));
    let unknown = write_config("unknown", "[model]\nsigmaa = 1\n");
    let o = symsde(&["validate", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmaa"));
    let bad_payoff = write_config("payoff", "[payoff]\nid = digital\n");
    assert_eq!(symsde(&["converge", "--config", &bad_payoff]).status.code(), Some(2));
    let bad_sigma = write_config("sigma", "[model]\nsigma = -1\n");
    assert_eq!(symsde(&["validate", "--config", &bad_sigma]).status.code(), Some(2));
    // the analytic reference needs the square-root model
    let power = write_config("power", "[model]\nalpha = 0.9\n");
    assert_eq!(symsde(&["converge", "--config", &power, "--paths", "100"]).status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_three() {
    let narrow = write_config("narrow", "[pde]\nx_max = 1.5\n");
    let o = symsde(&["pde", "--config", &narrow]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // a noise-dominated ladder still writes its CSV, then reports the failed fit
    let o = symsde(&["converge", "--paths", "50", "--levels", "2", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(body(&o)[0], "level,dt,error,stderr,n_paths");
    assert!(stdout(&o).contains("# rate fit failed"));
}

#[test]
fn report_exit_codes() {
    let dir = scratch("report");
    let ok = write_config("report-ok", "[mc]\nn_paths = 200000\n[grid]\nlevels = 3\n");
    let o = symsde(&["report", "--config", &ok, "--out", dir.to_str().unwrap()]);
    let md = std::fs::read_to_string(dir.join("report.md")).unwrap();
    assert_eq!(o.status.code(), Some(0), "{md}");
    assert!(md.contains("| weak rate | PASS |"));

    let strict = write_config("report-strict", "[mc]\nn_paths = 20000\n[grid]\nlevels = 3\n[report]\nrate_min = 5\nrate_max = 6\n");
    let o = symsde(&["report", "--config", &strict]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn shipped_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["cir.ini", "power09.ini"] {
        let path = root.join(name);
        let o = symsde(&["validate", "--config", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}");
    }
}
