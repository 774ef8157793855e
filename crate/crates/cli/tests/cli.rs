use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uhlm_cli::summary::{read_rows, SummaryRow};
use uhlm_core::trace::read_trace;

const BIN: &str = env!("CARGO_BIN_EXE_uhlm");

const SMALL: &str = r#"
[engine]
r_max = 32
oracle_mode = true

[backend]
kind = "synthetic"
vocab_size = 64
dirichlet_alpha = 0.05
coupling = 0.6

[calibration]
rounds = 2000
"#;

fn uhlm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("UHLM_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(path: &Path) -> Vec<SummaryRow> {
    read_rows(std::fs::File::open(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn hlm_run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = uhlm(&["run", "-c", s(&cfg), "--method", "hlm", "--rounds", "100", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 1);
    let row = &summary[0];
    assert_eq!((row.tr, row.tokens, row.status.as_str()), (1.0, 100, "ok"));
    let trace = read_trace(std::io::BufReader::new(std::fs::File::open(out.join("trace_HLM_3.ndjson")).unwrap())).unwrap();
    assert_eq!(trace.records.len(), 100);
    assert_eq!(trace.header.config_hash, row.config_hash);
    assert_eq!(trace.header.config["engine"]["seed"], 3);
    assert!(trace.error.is_none());
}

#[test]
fn uhlm_needs_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let o = uhlm(&["run", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("calibration required"), "{}", stderr(&o));
}

#[test]
fn calibrate_then_run_uhlm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = uhlm(&["calibrate", "-c", s(&cfg), "--seed", "5", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("risk-prone"));
    }
    let cal = a.join("calibration.json");
    assert_eq!(std::fs::read_to_string(&cal).unwrap(), std::fs::read_to_string(b.join("calibration.json")).unwrap());

    let run_dir = dir.path().join("run");
    let o = uhlm(&["run", "-c", s(&cfg), "--calibration", s(&cal), "--rounds", "300", "--out", s(&run_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("realized_risk"));
    let row = &rows(&run_dir.join("summary.csv"))[0];
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cal).unwrap()).unwrap();
    assert_eq!(row.u_th, model["u_th_prone"].as_f64());
    assert!(row.tr < 1.0);
}

#[test]
fn coupled_pair_cannot_be_calibrated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("coupling = 0.6", "coupling = 1.0"));
    let o = uhlm(&["calibrate", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("slope"), "{}", stderr(&o));
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("seeds = [1, 2]\n{SMALL}"));
    let mut outputs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = uhlm(&["run", "-c", s(&cfg), "--method", "RandHLM", "--u-th", "0.5", "--rounds", "200", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<String> = ["summary.csv", "trace_RandHLM_1.ndjson", "trace_RandHLM_2.ndjson"]
            .iter()
            .map(|f| std::fs::read_to_string(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}\n[sweep]\nmethods = [\"HLM\", \"UHLM\", \"RandHLM\"]\nu_th = [0.2, 0.6]\nrho_m = [2000.0, 2500.0]\nseeds = [1, 2]\n"
    );
    let cfg = write(dir.path(), "c.toml", &text.replace("oracle_mode = true", "oracle_mode = true\nrounds = 150"));
    let mut csvs = Vec::new();
    for jobs in ["1", "4"] {
        let out = dir.path().join(format!("j{jobs}"));
        let o = uhlm(&["sweep", "-c", s(&cfg), "--jobs", jobs, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read_to_string(out.join("sweep.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let rows = read_rows(csvs[0].as_bytes()).unwrap();
    // per seed and distance: 1 HLM + 2 UHLM + 2 matched RandHLM
    assert_eq!(rows.len(), 2 * 2 * 5);
    assert!(rows.iter().all(|r| r.ok()));
    for pair in rows.chunks(5) {
        let (uhlm, rand) = (&pair[1], &pair[3]);
        assert_eq!(rand.rand_skip_prob, Some(1.0 - uhlm.tr));
    }
}

#[test]
fn sweep_rejects_empty_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{SMALL}\n[sweep]\nrho_m = []\n"));
    let o = uhlm(&["sweep", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rho_m"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "u.toml", "[engine]\ncolour = 3\n");
    assert_eq!(uhlm(&["run", "-c", s(&unknown)]).status.code(), Some(2));
    let escape = write(dir.path(), "e.toml", &format!("{SMALL}\n[output]\nsummary = \"../escaped.csv\"\n"));
    let o = uhlm(&["run", "-c", s(&escape), "--method", "hlm", "--rounds", "5", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("escaped.csv").exists());
}

fn external_config(dir: &Path, stub_args: &str, timeout: f64) -> PathBuf {
    let text = format!(
        "[engine]\nmethod = \"HLM\"\nr_max = 40\n\n[backend]\nkind = \"external\"\ncommand = [{BIN:?}, \"stub-backend\", \"--vocab-size\", \"16\"{stub_args}]\ntimeout_s = {timeout}\n"
    );
    write(dir, "ext.toml", &text)
}

#[test]
fn external_stub_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = external_config(dir.path(), "", 10.0);
    let out = dir.path().join("o");
    let o = uhlm(&["run", "-c", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = &rows(&out.join("summary.csv"))[0];
    // uniform logits put 1/16 on EOS, so the generation may stop early
    let trace = read_trace(std::io::BufReader::new(std::fs::File::open(out.join("trace_HLM_0.ndjson")).unwrap())).unwrap();
    assert_eq!(row.tokens, trace.records.len());
    assert!(row.tokens == 40 || trace.records.last().unwrap().response.0 == 0);
    // uniform logits on both sides never reject
    assert_eq!(row.mean_beta, Some(0.0));
}

#[test]
fn hung_backend_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = external_config(dir.path(), ", \"--hang-after\", \"5\"", 0.5);
    let out = dir.path().join("o");
    let o = uhlm(&["run", "-c", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("timed out"), "{}", stderr(&o));
    let trace = read_trace(std::io::BufReader::new(std::fs::File::open(out.join("trace_HLM_0.ndjson")).unwrap())).unwrap();
    assert_eq!(trace.records.len(), 2);
    let err = trace.error.unwrap();
    assert_eq!((err.kind.as_str(), err.rounds_completed), ("backend", 2));
    let row = &rows(&out.join("summary.csv"))[0];
    assert!(row.status.starts_with("error (backend)"), "{}", row.status);
}

#[test]
fn wrong_length_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = external_config(dir.path(), ", \"--wrong-length\"", 10.0);
    let o = uhlm(&["run", "-c", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("logit length mismatch"), "{}", stderr(&o));
}

#[test]
fn ngram_train_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, uhlm_core::backend::ngram::demo_corpus(2, 20_000)).unwrap();
    let out = dir.path().join("o");
    let base = format!("[engine]\nmethod = \"HLM\"\nrounds = 100\noracle_mode = true\n\n[backend]\nkind = \"ngram\"\ncorpus_path = {:?}\n", s(&corpus));
    let cfg = write(dir.path(), "n.toml", &base);
    let o = uhlm(&["train-ngram", "-c", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = out.join("ngram.json");
    let loaded = write(dir.path(), "m.toml", &format!("{base}model_path = {:?}\n", s(&model)));
    let (p, q) = (dir.path().join("p"), dir.path().join("q"));
    assert!(uhlm(&["run", "-c", s(&cfg), "--out", s(&p)]).status.success());
    assert!(uhlm(&["run", "-c", s(&loaded), "--out", s(&q)]).status.success());
    assert_eq!(std::fs::read(p.join("trace_HLM_0.ndjson")).unwrap().len() > 0, true);
    let (rp, rq) = (rows(&p.join("summary.csv")), rows(&q.join("summary.csv")));
    assert_eq!((rp[0].throughput, rp[0].mean_beta), (rq[0].throughput, rq[0].mean_beta));
}
