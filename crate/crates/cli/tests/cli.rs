use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn hconv(args: &[&str]) -> Output {
    hconv_env(args, &[])
}

fn hconv_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hconv"));
    cmd.args(args);
    for var in ["HCONV_W_MULT", "HCONV_W_ADD", "HCONV_LAMBDA"] {
        cmd.env_remove(var);
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_everywhere() {
    assert_eq!(code(&hconv(&["--help"])), 0);
    assert_eq!(code(&hconv(&["--version"])), 0);
    for sub in ["characterize", "plan", "run", "verify", "gen-transforms", "rand-weights", "rand-input"] {
        let o = hconv(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        assert!(stdout(&o).contains("Usage"), "{sub}");
        assert_eq!(code(&hconv(&[sub, "--version"])), 0, "{sub} --version");
    }
}

#[test]
fn bad_arguments_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&hconv(&[])), 1);
    assert_eq!(code(&hconv(&["frobnicate"])), 1);
    assert_eq!(code(&hconv(&["plan", "--resources", "8", "--out", s(&out)])), 1);
    assert_eq!(code(&hconv(&["characterize", "--out", s(&out), "--bogus"])), 1);
    assert_eq!(code(&hconv(&["gen-transforms", "--m", "1", "--r", "3"])), 1);
    assert_eq!(code(&hconv(&["verify", "--a", "x", "--b", "y", "--threshold", "-1"])), 1);
    let o = hconv_env(&["characterize", "--out", s(&out)], &[("HCONV_LAMBDA", "abc")]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists(), "nothing written on a validation error");
}

#[test]
fn io_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let o = hconv(&["plan", "--net", s(&missing), "--resources", "32", "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.txt"));
    let nowhere = dir.path().join("no/such/dir/t.csv");
    assert_eq!(code(&hconv(&["characterize", "--out", s(&nowhere)])), 2);
}

#[test]
fn invalid_descriptor_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("bad.net");
    std::fs::write(&net, "net bad { input c=1 s=8 ; conv k=3 out=2 stride=2 alg=fft ; fc out=128 ; l2norm }").unwrap();
    let o = hconv(&["plan", "--net", s(&net), "--resources", "8", "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stride 1"));
}

#[test]
fn characterize_embeds_the_selection_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(code(&hconv(&["characterize", "--out", s(&a)])), 0);
    assert_eq!(code(&hconv(&["characterize", "--grid", "default", "--out", s(&b)])), 0);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.starts_with("Q,fm,L,K,algo,mults,transform_ops,weighted_cost,selected\n"));
    assert!(text.contains("# 3,winograd2,winograd2,winograd4\n"), "{text}");
    assert!(text.contains("# 5,winograd2,winograd2,fft\n"));
    assert!(text.contains("# 7,winograd2,fft,fft\n"));

    let grid = dir.path().join("grid.csv");
    std::fs::write(&grid, "Q,fm,L,K\n3,6,16,16\n").unwrap();
    assert_eq!(code(&hconv(&["characterize", "--grid", s(&grid), "--out", s(&a)])), 0);
    std::fs::write(&grid, "3,six,16,16\n").unwrap();
    assert_eq!(code(&hconv(&["characterize", "--grid", s(&grid), "--out", s(&a)])), 1);
}

#[test]
fn cost_flags_beat_environment() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("n.net");
    std::fs::write(&net, "net n { input c=16 s=28 ; conv k=5 out=16 pad=2 ; fc out=128 ; l2norm }").unwrap();
    let plan = dir.path().join("p.json");
    let alg = |env: &[(&str, &str)], extra: &[&str]| {
        let mut args = vec!["plan", "--net", s(&net), "--resources", "16", "--out", s(&plan)];
        args.extend_from_slice(extra);
        assert_eq!(code(&hconv_env(&args, env)), 0);
        let text = std::fs::read_to_string(&plan).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["stages"][0]["layers"][0]["algorithm"].as_str().unwrap().to_string()
    };
    assert_eq!(alg(&[], &[]), "fft");
    assert_eq!(alg(&[("HCONV_LAMBDA", "100")], &[]), "winograd2");
    assert_eq!(alg(&[("HCONV_LAMBDA", "100")], &["--lambda", "1.5"]), "fft");
}

#[test]
fn toy_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let net = fixture("toy.net");
    let net = s(&net);
    for (w, x) in [("w1", "x1"), ("w2", "x2")] {
        assert_eq!(code(&hconv(&["rand-weights", "--net", net, "--seed", "11", "--out", s(&p(w))])), 0);
        assert_eq!(code(&hconv(&["rand-input", "--net", net, "--seed", "5", "--out", s(&p(x))])), 0);
    }
    assert_eq!(std::fs::read(p("w1")).unwrap(), std::fs::read(p("w2")).unwrap());
    assert_eq!(std::fs::read(p("x1")).unwrap(), std::fs::read(p("x2")).unwrap());

    assert_eq!(code(&hconv(&["plan", "--net", net, "--resources", "64", "--out", s(&p("plan"))])), 0);
    let (w1, x1) = (p("w1"), p("x1"));
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["run", "--net", net, "--weights", s(&w1), "--input", s(&x1), "--out"];
        let o = p(out);
        args.push(s(&o));
        args.extend_from_slice(extra);
        let res = hconv(&args);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        (stdout(&res), std::fs::read(o).unwrap())
    };
    let (_, auto) = run(&[], "e_auto");
    let (_, again) = run(&[], "e_again");
    let (_, planned) = run(&["--plan", s(&p("plan"))], "e_plan");
    let (_, direct) = run(&["--force-direct"], "e_direct");
    let (stats, _) = run(&["--mode", "fix16", "--stats"], "e_fix16");
    assert_eq!(auto, again);
    assert_eq!(auto, planned);
    assert!(stats.contains("winograd4") && stats.contains("fft") && stats.contains("total multiplications"));

    let o = hconv(&["verify", "--a", s(&p("e_auto")), "--b", s(&p("e_auto"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "distance 0\nsame\n");

    std::fs::write(p("e_direct_copy"), &direct).unwrap();
    let o = hconv(&["verify", "--a", s(&p("e_auto")), "--b", s(&p("e_direct_copy")), "--out", s(&p("v.json"))]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("v.json")).unwrap()).unwrap();
    assert!(v["distance"].as_f64().unwrap() < 1e-12);
    assert_eq!(v["same"], true);

    let o = hconv(&["run", "--net", net, "--weights", s(&p("w1")), "--input", s(&p("x1")), "--mode", "fix4", "--out", s(&p("e"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn run_rejects_foreign_plans_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let toy = fixture("toy.net");
    let other = p("other.net");
    std::fs::write(&other, "net other { input c=3 s=24 ; conv k=3 out=4 pad=1 ; fc out=128 ; l2norm }").unwrap();
    assert_eq!(code(&hconv(&["plan", "--net", s(&other), "--resources", "8", "--out", s(&p("plan"))])), 0);
    assert_eq!(code(&hconv(&["rand-weights", "--net", s(&toy), "--seed", "1", "--out", s(&p("w"))])), 0);
    assert_eq!(code(&hconv(&["rand-input", "--net", s(&toy), "--seed", "1", "--out", s(&p("x"))])), 0);
    let (w, x, e, plan) = (p("w"), p("x"), p("e"), p("plan"));
    let base = ["run", "--net", s(&toy), "--weights", s(&w), "--input", s(&x), "--out", s(&e)];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--plan", s(&plan)]);
    assert_eq!(code(&hconv(&args)), 1);

    // weights generated for a different network
    assert_eq!(code(&hconv(&["rand-weights", "--net", s(&other), "--seed", "1", "--out", s(&p("w"))])), 0);
    assert_eq!(code(&hconv(&base)), 1);

    // a corrupt weight archive is a content error, not an i/o error
    std::fs::write(p("w"), b"\x03\x00\x00\x00abcHCT9").unwrap();
    assert_eq!(code(&hconv(&base)), 1);
}

#[test]
fn gen_transforms_prints_exact_and_decimal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = hconv(&["gen-transforms", "--m", "2", "--r", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("G (exact)") && text.contains("1/2") && text.contains("0.5"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["B^T"][3], serde_json::json!(["0", "-1", "0", "1"]));
    assert_eq!(v["A^T"][1], serde_json::json!(["0", "1", "-1", "1"]));
}
