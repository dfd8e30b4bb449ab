use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn mlmkit(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlmkit"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MLMKIT_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn tiny_config(dir: &Path, steps: u64) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"[data]
corpus = "{corpus}"
train = "{train}"

[tokenizer]
vocab_cap = 1000

[model]
layers = 2
hidden = 32
heads = 4
ffn = 64
max_positions = 64

[pretrain]
steps = {steps}
batch_size = 64
warmup_steps = {warmup}
peak_lr = 5e-3

[probe]
encoder = "run/checkpoint.bin"
steps = 60
"#,
        warmup = steps.min(20),
        corpus = data("corpus.txt").display(),
        train = data("treebank.conllu").display(),
    );
    fs::write(&path, text).unwrap();
    path
}

fn metric(stdout: &str, name: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| {
            let mut cols = l.split_whitespace();
            (cols.next() == Some(name)).then(|| cols.last().unwrap().parse::<f64>().unwrap())
        })
        .unwrap_or_else(|| panic!("no `{name}` row in\n{stdout}"))
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = tiny_config(dir, 200);
    let config = config.to_str().unwrap();
    let run = dir.join("run");

    ok(mlmkit(
        dir,
        &["--config", config, "--out", "run", "tokenizer-train"],
        &[],
    ));
    let vocab = fs::read_to_string(run.join("vocab.txt")).unwrap();
    assert!(vocab.lines().count() <= 1000);

    ok(mlmkit(dir, &["--config", config, "--out", "run", "pretrain"], &[]));
    let log = fs::read_to_string(run.join("training-log.tsv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with("step")).count(), 200);

    let tagged = ok(mlmkit(
        dir,
        &["--config", config, "--out", "run", "probe", "tagger"],
        &[],
    ));
    assert!(metric(&tagged, "UPOS") > 50.0, "{tagged}");

    let gold = data("treebank.conllu");
    let scored = ok(mlmkit(
        dir,
        &["evaluate", "conllu", gold.to_str().unwrap(), "run/predictions.conllu"],
        &[],
    ));
    assert_eq!(metric(&scored, "UPOS"), metric(&tagged, "UPOS"));

    let report = ok(mlmkit(dir, &["--out", "summary", "report", "run"], &[]));
    assert!(
        report.contains("tagger UPOS") && report.contains("pretrain masked accuracy"),
        "{report}"
    );
    assert!(dir.join("summary/report.tsv").is_file());

    for command in ["tokenizer-train", "pretrain", "probe-tagger"] {
        let snapshot = fs::read_to_string(run.join(format!("resolved-{command}.toml"))).unwrap();
        assert!(snapshot.contains(&format!("command = \"{command}\"")));
        assert!(snapshot.contains("[provenance]"));
    }
}

#[test]
fn pretraining_twice_writes_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = tiny_config(dir, 30);
    let config = config.to_str().unwrap();
    ok(mlmkit(dir, &["--config", config, "--out", "a", "tokenizer-train"], &[]));
    ok(mlmkit(dir, &["--config", config, "--out", "a", "pretrain"], &[]));
    fs::create_dir(dir.join("b")).unwrap();
    for f in ["vocab.txt", "merges.txt"] {
        fs::copy(dir.join("a").join(f), dir.join("b").join(f)).unwrap();
    }
    ok(mlmkit(dir, &["--config", config, "--out", "b", "pretrain"], &[]));
    for f in ["checkpoint.bin", "training-log.tsv"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }

    ok(mlmkit(
        dir,
        &["--config", config, "--seed", "7", "--out", "b", "pretrain"],
        &[],
    ));
    assert_ne!(
        fs::read(dir.join("a/checkpoint.bin")).unwrap(),
        fs::read(dir.join("b/checkpoint.bin")).unwrap()
    );
}

#[test]
fn gold_scored_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = data("treebank.conllu");
    let gold = gold.to_str().unwrap();
    let stdout = ok(mlmkit(
        tmp.path(),
        &["--out", "m", "evaluate", "conllu", gold, gold],
        &[],
    ));
    for name in ["UPOS", "XPOS", "UFeats", "Lemmas", "UAS", "LAS", "MLAS", "BLEX"] {
        assert_eq!(metric(&stdout, name), 100.0, "{name}");
    }
    let json = fs::read_to_string(tmp.path().join("m/metrics-conllu.json")).unwrap();
    assert!(json.contains("\"conllu\""));
}

#[test]
fn graphs_and_spans_are_scored() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("gold.mrp"),
        r#"{"id":"1","input":"Pes spí","tops":[1],"nodes":[{"id":0,"label":"pes"},{"id":1,"label":"spát"}],"edges":[{"source":1,"target":0,"label":"ACT"}]}"#,
    )
    .unwrap();
    fs::write(
        dir.join("system.mrp"),
        r#"{"id":"1","input":"Pes spí","tops":[1],"nodes":[{"id":0,"label":"pes"},{"id":1,"label":"spát"}],"edges":[{"source":1,"target":0,"label":"PAT"}]}"#,
    )
    .unwrap();
    // One top, two labels and one edge on each side; only the edge differs.
    let stdout = ok(mlmkit(dir, &["evaluate", "mrp", "gold.mrp", "system.mrp"], &[]));
    assert_eq!(metric(&stdout, "all"), 75.0, "{stdout}");

    fs::write(
        dir.join("gold.bio"),
        "Jan\tB-PER\nNovák\tI-PER\n\nV\tO\nPraze\tB-LOC|B-GEO\n",
    )
    .unwrap();
    fs::write(
        dir.join("system.bio"),
        "Jan\tB-PER\nNovák\tI-PER\n\nV\tO\nPraze\tB-ORG\n",
    )
    .unwrap();
    let stdout = ok(mlmkit(dir, &["evaluate", "spans", "gold.bio", "system.bio"], &[]));
    // Gold has three spans, the system two, one of them correct.
    let row = |name: &str| {
        stdout
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap()
            .split_whitespace()
            .last()
            .unwrap()
            .to_string()
    };
    assert_eq!(
        (
            row("spans P").as_str(),
            row("spans R").as_str(),
            row("spans F1").as_str()
        ),
        ("50.00", "33.33", "40.00")
    );
}

#[test]
fn configuration_problems_are_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("bad.toml"),
        "[model]\nhidden = 30\nheads = 4\ncolour = \"red\"\n\n[pretrain]\nmask_prob = 2\n\n[data]\ncorpus = \"missing.txt\"\n",
    )
    .unwrap();
    let out = mlmkit(dir, &["--config", "bad.toml", "--threads", "0", "pretrain"], &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    for needle in [
        "model.colour",
        "run.threads",
        "hidden 30",
        "pretrain.mask_prob",
        "data.corpus",
        "5 problems",
    ] {
        assert!(stderr.contains(needle), "missing `{needle}` in\n{stderr}");
    }
    assert!(
        !dir.join("mlmkit-out").exists(),
        "nothing is written for an invalid configuration"
    );

    let out = mlmkit(dir, &["tokenizer-train"], &[("MLMKIT_TOKENIZER_VOCABCAP", "300")]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    assert!(
        stderr.contains("MLMKIT_TOKENIZER_VOCABCAP") && stderr.contains("data.corpus"),
        "{stderr}"
    );
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = tiny_config(dir, 10);
    let config = config.to_str().unwrap();
    ok(mlmkit(
        dir,
        &["--config", config, "--seed", "5", "--out", "run", "tokenizer-train"],
        &[("MLMKIT_TOKENIZER_VOCAB_CAP", "300"), ("MLMKIT_RUN_SEED", "9")],
    ));
    assert_eq!(
        fs::read_to_string(dir.join("run/vocab.txt")).unwrap().lines().count(),
        300
    );
    let snapshot = fs::read_to_string(dir.join("run/resolved-tokenizer-train.toml")).unwrap();
    assert!(snapshot.contains("vocab_cap = 300"), "{snapshot}");
    assert!(
        snapshot.contains("\"tokenizer.vocab_cap\" = \"environment MLMKIT_TOKENIZER_VOCAB_CAP\""),
        "{snapshot}"
    );
    assert!(snapshot.contains("\"run.seed\" = \"flag --seed\""), "{snapshot}");
    assert!(snapshot.contains("seed = 5"));
}
