use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use aesprobe::tables::DelimitedTable;

fn aesprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesprobe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = aesprobe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn table(path: &Path) -> DelimitedTable {
    DelimitedTable::parse(&fs::read_to_string(path).unwrap(), "report").unwrap()
}

fn column(t: &DelimitedTable, name: &str) -> Vec<String> {
    let c = t.column(name, "report").unwrap();
    t.rows.iter().map(|r| r[c].clone()).collect()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn full_pipeline_at_default_scale() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    synth(w, &[]);
    let (sweep, best) = (w.join("sweep.csv"), w.join("best.csv"));
    ok(&[
        "probe", "--features", p(&w.join("features")), "--attributes", p(&w.join("attributes.csv")),
        "--train", p(&w.join("train.txt")), "--test", p(&w.join("test.txt")),
        "--out", p(&sweep), "--best-out", p(&best),
    ]);
    let best_t = table(&best);
    assert_eq!(best_t.rows.len(), 12);
    for rho in column(&best_t, "best_rho") {
        assert!(rho.parse::<f64>().unwrap() >= 0.99, "best ρ {rho}");
    }
    assert_eq!(table(&sweep).rows.len(), 4 * 12);
    assert!(fs::read_to_string(&sweep).unwrap().starts_with("# aesprobe "));

    let model = w.join("probe.json");
    ok(&[
        "fit-probe", "--store", p(&w.join("features/layer_01.fst")), "--attributes",
        p(&w.join("attributes.csv")), "--train", p(&w.join("train.txt")), "--out", p(&model),
    ]);
    let summary = w.join("summary.csv");
    ok(&[
        "piaa", "--method", "reduce", "--store", p(&w.join("features/layer_01.fst")),
        "--probe-model", p(&model), "--ratings", p(&w.join("ratings.csv")),
        "--out", p(&w.join("users.csv")), "--summary-out", p(&summary), "--bootstrap",
    ]);
    let s = table(&summary);
    assert_eq!(column(&s, "n_users_total"), ["200"]);
    assert_eq!(column(&s, "n_failed"), ["0"]);
    let lo: f64 = column(&s, "rho_ci_low")[0].parse().unwrap();
    let hi: f64 = column(&s, "rho_ci_high")[0].parse().unwrap();
    let mean: f64 = column(&s, "mean_rho")[0].parse().unwrap();
    assert!(lo <= mean && mean <= hi);
    assert!(start.elapsed().as_secs() < 60, "pipeline took {:?}", start.elapsed());
}

#[test]
fn probe_needs_stores() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = aesprobe(&["probe", "--features", p(&empty), "--attributes", "a", "--train", "t", "--test", "t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no stores found"));
}

fn small_world(dir: &Path) {
    synth(dir, &["--images", "300", "--users", "20", "--dim", "32", "--layers", "2", "--images-per-user", "160"]);
}

#[test]
fn component_filter_selects_by_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_world(w);
    let paths = ["features", "attributes.csv", "train.txt", "test.txt"].map(|f| w.join(f));
    let base = [
        "--features", p(&paths[0]), "--attributes", p(&paths[1]),
        "--train", p(&paths[2]), "--test", p(&paths[3]),
    ];
    let mut lt = vec!["probe", "--component", "LT"];
    lt.extend_from_slice(&base);
    let out = ok(&lt);
    let t = DelimitedTable::parse(&String::from_utf8(out.stdout).unwrap(), "stdout").unwrap();
    assert_eq!(column(&t, "component").iter().filter(|c| *c == "LT").count(), t.rows.len());
    assert_eq!(t.rows.len(), 2 * 12);

    let mut v = vec!["probe", "--component", "V"];
    v.extend_from_slice(&base);
    let out = aesprobe(&v);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no stores found"));
}

#[test]
fn adjust_bias_ranks_match_raw_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_world(w);
    let run = |method: &str, out: &Path| {
        ok(&[
            "piaa", "--method", method, "--giaa", p(&w.join("giaa.csv")), "--ratings",
            p(&w.join("ratings.csv")), "--users", "20", "--out", p(out),
        ]);
        table(out)
    };
    let raw = run("raw", &w.join("raw.csv"));
    let adjusted = run("adjust-bias", &w.join("adj.csv"));
    assert_eq!(column(&raw, "rho"), column(&adjusted, "rho"));
    assert_ne!(column(&raw, "r2"), column(&adjusted, "r2"));
}

#[test]
fn reduce_without_model_file_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_world(w);
    let out = aesprobe(&[
        "piaa", "--method", "reduce", "--store", p(&w.join("features/layer_00.fst")),
        "--probe-model", p(&w.join("missing.json")), "--ratings", p(&w.join("ratings.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = aesprobe(&[
        "piaa", "--method", "reduce", "--store", p(&w.join("features/layer_00.fst")),
        "--ratings", p(&w.join("ratings.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn noiseless_synth_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    synth(w, &["--noise", "0", "--users", "20"]);
    let summary = w.join("s.csv");
    ok(&[
        "piaa", "--method", "linear-hidden", "--store", p(&w.join("features/layer_02.fst")),
        "--ratings", p(&w.join("ratings.csv")), "--users", "20", "--summary-out", p(&summary),
        "--out", p(&w.join("u.csv")),
    ]);
    let rho: f64 = column(&table(&summary), "mean_rho")[0].parse().unwrap();
    assert!(rho >= 0.99, "mean ρ {rho}");
}

#[test]
fn synth_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        synth(d, &["--seed", "7", "--images", "200", "--users", "5", "--dim", "16", "--images-per-user", "50"]);
    }
    for name in ["ratings.csv", "giaa.csv", "attributes.csv", "world.json", "features/layer_03.fst"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let out = aesprobe(&["synth", "--out", p(a.path()), "--probed", "99"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn piaa_output_does_not_depend_on_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_world(w);
    let run = |jobs: &str, out: &Path| {
        ok(&[
            "--jobs", jobs, "piaa", "--method", "linear-hidden", "--store",
            p(&w.join("features/layer_00.fst")), "--ratings", p(&w.join("ratings.csv")),
            "--users", "20", "--seed", "3", "--out", p(out),
        ]);
        let text = fs::read_to_string(out).unwrap();
        // The header records the output path, which differs between runs.
        text.split_once('\n').unwrap().1.to_string()
    };
    assert_eq!(run("1", &w.join("a.csv")), run("3", &w.join("b.csv")));
}

fn write_values(path: &Path, values: &[(&str, &str)]) {
    let body: String = values.iter().map(|(u, v)| format!("{u},{v}\n")).collect();
    fs::write(path, format!("user_id,value\n{body}")).unwrap();
}

#[test]
fn bootstrap_command() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    let constant = w.join("c.csv");
    write_values(&constant, &[("a", "0.3"), ("b", "0.3"), ("c", "0.3"), ("d", "NA")]);
    let out = w.join("ci.csv");
    ok(&["bootstrap", "--values", p(&constant), "--out", p(&out)]);
    let t = table(&out);
    assert_eq!(column(&t, "ci_low"), ["0.3"]);
    assert_eq!(column(&t, "ci_high"), ["0.3"]);
    assert_eq!(column(&t, "n_undefined"), ["1"]);

    let base = w.join("base.csv");
    let cand = w.join("cand.csv");
    write_values(&base, &[("a", "0.1"), ("b", "0.5"), ("c", "-0.2"), ("d", "0.4")]);
    write_values(&cand, &[("d", "0.45"), ("c", "0.0"), ("b", "0.6"), ("a", "0.3")]);
    let cmp = w.join("cmp.csv");
    ok(&["bootstrap", "--values", p(&base), "--against", p(&cand), "--seed", "4", "--out", p(&cmp)]);
    assert_eq!(column(&table(&cmp), "p_delta_positive"), ["0"]);
    let first = fs::read(&cmp).unwrap();
    ok(&["bootstrap", "--values", p(&base), "--against", p(&cand), "--seed", "4", "--out", p(&cmp)]);
    assert_eq!(first, fs::read(&cmp).unwrap());

    let short = w.join("short.csv");
    write_values(&short, &[("a", "0.1")]);
    let out = aesprobe(&["bootstrap", "--values", p(&base), "--against", p(&short)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bootstrap_reads_piaa_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_world(w);
    let users = w.join("users.csv");
    ok(&[
        "piaa", "--method", "raw", "--giaa", p(&w.join("giaa.csv")), "--ratings",
        p(&w.join("ratings.csv")), "--users", "20", "--out", p(&users),
    ]);
    let out = ok(&["bootstrap", "--values", p(&users), "--column", "rho", "--resamples", "200"]);
    let t = DelimitedTable::parse(&String::from_utf8(out.stdout).unwrap(), "stdout").unwrap();
    assert_eq!(column(&t, "n_users"), ["20"]);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(aesprobe(&["piaa", "--method", "bogus", "--ratings", "x"]).status.code(), Some(1));
    assert_eq!(aesprobe(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(aesprobe(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "user_id,image_id,score\nu,i,abc\n").unwrap();
    let out = aesprobe(&["piaa", "--method", "raw", "--giaa", p(&bad), "--ratings", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv"));
}
