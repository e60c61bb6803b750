use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fam_core::model::count_params;
use fam_core::federation::RunConfig;

const SMALL: &str = "rounds=4\nn_clients=3\nk=2\nlocal_epochs=1\ntasks_per_batch=2\nexamples_per_class=30\n\
eval_clients=2\ntest_per_class=10\nhidden=8\n";

fn fam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fam")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = dir.join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = fam(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    run
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    for f in ["config.cfg", "log.csv", "final.ckpt", "mask.msg", "round_0.msg", "round_3.msg"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,flag,selected_ids,mean_query_loss,bytes_up,bytes_down,sparsity"
    );
    let flags: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(flags, ["0", "0", "1", "2"]);
    let saved = RunConfig::parse(&fs::read_to_string(run.join("config.cfg")).unwrap()).unwrap();
    assert_eq!(saved.rounds, 4);
}

#[test]
fn wire_dump_reports_codec_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let dense = fam(&["wire-dump", run.join("round_0.msg").to_str().unwrap()]);
    assert!(dense.status.success(), "{}", stderr(&dense));
    let text = stdout(&dense);
    assert!(text.contains("kind: dense"), "{text}");
    assert!(text.contains("sender: server"), "{text}");
    let values: usize = field(&text, "values");
    assert_eq!(field::<usize>(&text, "payload_bytes"), 4 * values);
    assert_eq!(field::<usize>(&text, "total_bytes"), 10 + 4 * values);

    let sparse = stdout(&fam(&["wire-dump", run.join("round_3.msg").to_str().unwrap()]));
    assert!(sparse.contains("kind: sparse"), "{sparse}");
    let ones: usize = field(&sparse, "values");
    assert!(ones < values);
    assert_eq!(field::<usize>(&sparse, "payload_bytes"), 4 + 4 * ones);

    let mask = stdout(&fam(&["wire-dump", run.join("mask.msg").to_str().unwrap()]));
    assert_eq!(field::<usize>(&mask, "bits"), values);
    assert_eq!(field::<usize>(&mask, "payload_bytes"), 4 + values.div_ceil(8));
}

fn field<T: std::str::FromStr>(text: &str, key: &str) -> T
where
    T::Err: std::fmt::Debug,
{
    let prefix = format!("{key}: ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn wire_dump_rejects_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &[]);
    let bytes = fs::read(run.join("round_0.msg")).unwrap();
    let cut = dir.path().join("cut.msg");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let o = fam(&["wire-dump", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table_personalize_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &["--no-messages"]);
    let r = run.to_str().unwrap();

    let table = fam(&["table", "--run", r, "--trials", "3"]);
    assert!(table.status.success(), "{}", stderr(&table));
    let rows = fam_core::eval::ExperimentTable::parse_csv(&stdout(&table)).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!((rows[0].episodes, rows[0].shot), (0, 0));
    assert_eq!((rows[4].episodes, rows[4].shot), (5, 5));
    assert!(rows.iter().all(|row| row.trials == 3 && (0.0..=1.0).contains(&row.accuracy)));

    let adapted = dir.path().join("adapted.ckpt");
    let p = fam(&["personalize", "--run", r, "--client", "1", "--out", adapted.to_str().unwrap()]);
    assert!(p.status.success(), "{}", stderr(&p));

    let e = fam(&["eval", "--run", r, "--checkpoint", adapted.to_str().unwrap(), "--client", "1"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let out = stdout(&e);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("accuracy,precision,recall,f1,n_examples"));
    let n: usize = lines.next().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(n > 0);

    let missing = fam(&["personalize", "--run", r, "--client", "9", "--out", adapted.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("out of range"));
}

#[test]
fn checkpoint_matches_model_size() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), &["--no-messages"]);
    let bytes = fs::read(run.join("final.ckpt")).unwrap();
    let ckpt = fam_core::model::read_checkpoint(bytes.as_slice(), None).unwrap();
    // 144 inputs, 8 hidden, 2 outputs.
    assert_eq!(count_params(&ckpt.params).total, 144 * 8 + 8 + 8 * 2 + 2);
}

#[test]
fn generated_data_trains_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let g = fam(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(g.status.success(), "{}", stderr(&g));
    assert_eq!(fs::read_dir(&data).unwrap().count(), 5);
    let run = dir.path().join("run");
    let data_key = format!("data_dir={}", data.display());
    let t = fam(&[
        "train", "--config", cfg.to_str().unwrap(), "--set", &data_key, "--set", "rounds=2", "--out",
        run.to_str().unwrap(), "--no-messages",
    ]);
    assert!(t.status.success(), "{}", stderr(&t));
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 3);
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(fam(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(fam(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fam(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_print_one_line_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = fam(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "rounds=4\nk=0\n").unwrap();
    let o = fam(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`k` must be positive"), "{}", stderr(&o));

    let o = fam(&["train", "--config", cfg.to_str().unwrap(), "--set", "nokey", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}
