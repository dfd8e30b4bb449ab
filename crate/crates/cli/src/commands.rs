use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use mlmkit::batching::pack_full_sentences;
use mlmkit::bbpe::{load_vocab, save_vocab, train_bbpe, ByteVocab};
use mlmkit::corpus::{ingest_conllu, ingest_plaintext, write_conllu, Corpus, DocSeparator, EntitySpan};
use mlmkit::heads::{
    decode_nested, parse_sentiment_tsv, run_sentiment_protocol, ContextualEncoder, NestedLabelSequence, Tagger,
};
use mlmkit::metrics::{
    eval_conllu, mces_align, mrp_score, read_mrp_jsonl, render_table, span_f1, MrpGraph, MrpScore, PrfCounts,
    DEFAULT_NODE_LIMIT,
};
use mlmkit::neural::{init_transformer, read_checkpoint, write_checkpoint};
use mlmkit::pretrain::{masked_accuracy, pretrain_with, PretrainConfig};

use crate::config::ResolvedConfig;

/// Resolved input files keyed by configuration key.
pub type Inputs = BTreeMap<String, PathBuf>;

/// Configuration keys of the (required, optional) input files per command.
pub const TOKENIZER_INPUTS: (&[&str], &[&str]) = (&["data.corpus"], &[]);
pub const PRETRAIN_INPUTS: (&[&str], &[&str]) = (&["data.corpus"], &[]);
pub const TAGGER_INPUTS: (&[&str], &[&str]) = (&["data.train"], &["data.test", "probe.encoder"]);
pub const SENTIMENT_INPUTS: (&[&str], &[&str]) = (&["data.sentiment"], &["probe.encoder"]);

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINING_LOG_FILE: &str = "training-log.tsv";
pub const METRICS_PREFIX: &str = "metrics-";

/// One named score table, as written to `metrics-<task>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub task: String,
    pub metrics: Vec<(String, f64)>,
}

impl MetricsFile {
    fn table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .metrics
            .iter()
            .map(|(k, v)| (k.clone(), format_value(*v)))
            .collect();
        render_table(("metric", &self.task), &rows)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: Option<&ResolvedConfig>, command: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(cfg) = cfg {
        write(&out.join(format!("resolved-{command}.toml")), cfg.snapshot(command))?;
    }
    Ok(())
}

fn write_metrics(out: &Path, metrics: &MetricsFile) -> Result<()> {
    let path = out.join(format!("{METRICS_PREFIX}{}.json", metrics.task));
    write(&path, serde_json::to_string_pretty(metrics)? + "\n")?;
    let back: MetricsFile = serde_json::from_slice(&read(&path)?)?;
    ensure!(&back == metrics, "{} did not read back identically", path.display());
    Ok(())
}

fn load_corpus_text(path: &Path) -> Result<Corpus> {
    ingest_plaintext(&read(path)?, DocSeparator::BlankLine).with_context(|| format!("parsing {}", path.display()))
}

fn load_conllu(path: &Path) -> Result<Corpus> {
    ingest_conllu(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn tokenizer_dir(cfg: &ResolvedConfig, out: &Path) -> PathBuf {
    cfg.path(&cfg.config.tokenizer.dir).unwrap_or_else(|| out.to_path_buf())
}

fn load_tokenizer(dir: &Path) -> Result<ByteVocab> {
    let vocab = fs::read_to_string(dir.join(VOCAB_FILE)).with_context(|| {
        format!(
            "reading {} (run tokenizer-train first?)",
            dir.join(VOCAB_FILE).display()
        )
    })?;
    let merges = fs::read_to_string(dir.join(MERGES_FILE))
        .with_context(|| format!("reading {}", dir.join(MERGES_FILE).display()))?;
    Ok(load_vocab(&vocab, &merges)?)
}

fn load_encoder(path: &Path, vocab: ByteVocab) -> Result<ContextualEncoder> {
    let (config_json, params) =
        read_checkpoint(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let pretrain: PretrainConfig = serde_json::from_str(&config_json)
        .with_context(|| format!("checkpoint {} has no model config", path.display()))?;
    ensure!(
        pretrain.model.vocab_size == vocab.len(),
        "checkpoint expects {} vocabulary entries, tokenizer has {}",
        pretrain.model.vocab_size,
        vocab.len()
    );
    Ok(ContextualEncoder {
        config: pretrain.model,
        params,
        vocab,
    })
}

pub fn tokenizer_train(cfg: &ResolvedConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    prepare_out(out, Some(cfg), "tokenizer-train")?;
    let corpus = load_corpus_text(&inputs["data.corpus"])?;
    let vocab = train_bbpe(&corpus, cfg.config.tokenizer.vocab_cap)?;
    let (vocab_text, merges_text) = save_vocab(&vocab);
    write(&out.join(VOCAB_FILE), &vocab_text)?;
    write(&out.join(MERGES_FILE), &merges_text)?;
    ensure!(
        load_tokenizer(out)? == vocab,
        "written tokenizer does not load back identically"
    );
    eprintln!(
        "tokenizer: {} entries ({} merges) from {} sentences",
        vocab.len(),
        vocab.merges().len(),
        corpus.sentence_count()
    );
    Ok(())
}

pub fn pretrain(cfg: &ResolvedConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    prepare_out(out, Some(cfg), "pretrain")?;
    let vocab = load_tokenizer(&tokenizer_dir(cfg, out))?;
    let corpus = load_corpus_text(&inputs["data.corpus"])?;
    let samples = pack_full_sentences(&corpus, &vocab, cfg.config.model.max_positions)?;
    let config = cfg.pretrain(vocab.len());
    let start = Instant::now();
    let every = (config.steps / 20).max(1);
    let outcome = pretrain_with(&samples, &vocab, &config, |step, lr, loss| {
        if step % every == 0 || step == config.steps {
            eprintln!(
                "step {step:>6}  lr {lr:.3e}  loss {loss:.4}  {:.1}s",
                start.elapsed().as_secs_f64()
            );
        }
    })?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    let config_json = serde_json::to_string(&config)?;
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &config_json, &outcome.params)?;
    write(&checkpoint, &bytes)?;
    write(&out.join(TRAINING_LOG_FILE), outcome.log.to_tsv())?;
    let (stored_json, stored) = read_checkpoint(&read(&checkpoint)?[..])?;
    ensure!(
        stored_json == config_json && stored.names().eq(outcome.params.names()),
        "checkpoint did not read back"
    );

    let smoothed = outcome.log.smoothed_losses(10).last().copied().unwrap_or(f64::NAN);
    let accuracy = masked_accuracy(
        &stored,
        &config.model,
        &samples,
        &vocab,
        config.mask_prob,
        5,
        config.seed,
    )?;
    write_metrics(
        out,
        &MetricsFile {
            task: "pretrain".into(),
            metrics: vec![
                ("final smoothed loss".into(), smoothed),
                ("masked accuracy".into(), 100.0 * accuracy),
            ],
        },
    )?;
    eprintln!(
        "pretrained {} parameters on {} samples in {:.1}s; masked accuracy {:.2}%",
        outcome.params.num_values(),
        samples.len(),
        start.elapsed().as_secs_f64(),
        100.0 * accuracy
    );
    Ok(())
}

pub fn probe_tagger(cfg: &ResolvedConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    prepare_out(out, Some(cfg), "probe-tagger")?;
    let train = load_conllu(&inputs["data.train"])?;
    let test = match inputs.get("data.test") {
        Some(p) => load_conllu(p)?,
        None => train.clone(),
    };
    let encoder = match inputs.get("probe.encoder") {
        Some(p) => Some(load_encoder(p, load_tokenizer(&tokenizer_dir(cfg, out))?)?),
        None => None,
    };
    let train_sentences: Vec<_> = train.sentences().cloned().collect();
    let seed = cfg.config.run.seed;
    let mut tagger = Tagger::new(cfg.config.tagger.clone(), &train_sentences, encoder.as_ref(), seed)?;
    let report = tagger.train(&train_sentences, encoder.as_ref(), cfg.config.probe.steps, seed)?;
    eprintln!(
        "tagger: {} updates, final loss {:.4}, training UPOS accuracy {:.2}%",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        100.0 * report.train_tag_accuracy
    );

    let mut model = Vec::new();
    tagger.save(&mut model)?;
    write(&out.join("tagger.bin"), &model)?;
    Tagger::load(&model[..]).context("saved tagger does not load back")?;

    let test_sentences: Vec<_> = test.sentences().cloned().collect();
    let predicted = tagger.predict(&test_sentences, encoder.as_ref())?;
    let text = write_conllu(&Corpus::from_sentences(predicted));
    let predictions = out.join("predictions.conllu");
    write(&predictions, &text)?;
    let reread = load_conllu(&predictions)?;
    let report = eval_conllu(&test, &reread)?;
    let metrics = MetricsFile {
        task: "tagger".into(),
        metrics: report
            .counts()
            .iter()
            .map(|(k, c)| (k.to_string(), 100.0 * c.f1()))
            .collect(),
    };
    write_metrics(out, &metrics)?;
    print!("{}", metrics.table());
    Ok(())
}

pub fn probe_sentiment(cfg: &ResolvedConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    prepare_out(out, Some(cfg), "probe-sentiment")?;
    let data = parse_sentiment_tsv(&String::from_utf8(read(&inputs["data.sentiment"])?)?)?;
    let vocab = load_tokenizer(&tokenizer_dir(cfg, out))?;
    let encoder = match inputs.get("probe.encoder") {
        Some(p) => load_encoder(p, vocab)?,
        None => {
            eprintln!("no probe.encoder given; fine-tuning a randomly initialized encoder");
            let config = cfg.transformer(vocab.len());
            let params = init_transformer(&config, cfg.config.run.seed)?;
            ContextualEncoder { config, params, vocab }
        }
    };
    let report = run_sentiment_protocol(&data, &encoder, &cfg.sentiment())?;
    write(
        &out.join("sentiment-report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut folds = String::from("fold\tlr\tdev_f1\ttest_f1\n");
    for f in &report.folds {
        folds.push_str(&format!("{}\t{:e}\t{:.4}\t{:.4}\n", f.fold, f.lr, f.dev_f1, f.test_f1));
    }
    write(&out.join("sentiment-folds.tsv"), folds)?;
    let metrics = MetricsFile {
        task: "sentiment".into(),
        metrics: vec![
            ("macro F1".into(), report.test_mean),
            ("std".into(), report.test_std),
            ("selected lr".into(), report.selected_lr),
        ],
    };
    write_metrics(out, &metrics)?;
    print!("{}", metrics.table());
    Ok(())
}

/// Sentences of stacked BIO labels: one token per line, the label in the
/// last tab-separated column, blank lines between sentences.
fn read_span_file(path: &Path) -> Result<Vec<Vec<EntitySpan>>> {
    let text = String::from_utf8(read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let mut sentences = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !labels.is_empty() {
                sentences.push(decode_nested(&NestedLabelSequence::from_strings(&labels)));
                labels.clear();
            }
            continue;
        }
        labels.push(line.rsplit('\t').next().unwrap_or("").trim().to_string());
    }
    Ok(sentences)
}

fn prf_rows(name: &str, c: &PrfCounts) -> Vec<(String, f64)> {
    vec![
        (format!("{name} P"), 100.0 * c.precision()),
        (format!("{name} R"), 100.0 * c.recall()),
        (format!("{name} F1"), 100.0 * c.f1()),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalKind {
    /// CoNLL-U morphosyntax and dependency metrics.
    Conllu,
    /// Semantic graphs in JSON lines.
    Mrp,
    /// Nested entity spans from stacked BIO label files.
    Spans,
}

pub fn evaluate(kind: EvalKind, gold: &Path, system: &Path, out: Option<&Path>) -> Result<()> {
    let metrics = match kind {
        EvalKind::Conllu => {
            let report = eval_conllu(&load_conllu(gold)?, &load_conllu(system)?)?;
            MetricsFile {
                task: "conllu".into(),
                metrics: report
                    .counts()
                    .iter()
                    .map(|(k, c)| (k.to_string(), 100.0 * c.f1()))
                    .collect(),
            }
        }
        EvalKind::Mrp => {
            let parse = |p: &Path| -> Result<Vec<MrpGraph>> {
                read_mrp_jsonl(&String::from_utf8(read(p)?)?).with_context(|| format!("parsing {}", p.display()))
            };
            let (gold_graphs, system_graphs) = (parse(gold)?, parse(system)?);
            let by_id: BTreeMap<&str, &MrpGraph> = system_graphs.iter().map(|g| (g.id.as_str(), g)).collect();
            let mut total = MrpScore::default();
            for g in &gold_graphs {
                let empty = MrpGraph {
                    id: g.id.clone(),
                    input: g.input.clone(),
                    ..Default::default()
                };
                let s = by_id.get(g.id.as_str()).copied().unwrap_or(&empty);
                let alignment = mces_align(g, s, DEFAULT_NODE_LIMIT);
                total = total + mrp_score(g, s, &alignment)?;
            }
            let unmatched =
                system_graphs.len() - gold_graphs.iter().filter(|g| by_id.contains_key(g.id.as_str())).count();
            if unmatched > 0 {
                bail!("{unmatched} system graphs have no gold counterpart");
            }
            let mut rows: Vec<(String, f64)> = total
                .facets()
                .iter()
                .map(|(k, c)| (k.to_string(), 100.0 * c.f1()))
                .collect();
            rows.push(("all".into(), 100.0 * total.pooled().f1()));
            MetricsFile {
                task: "mrp".into(),
                metrics: rows,
            }
        }
        EvalKind::Spans => {
            let (g, s) = (read_span_file(gold)?, read_span_file(system)?);
            ensure!(g.len() == s.len(), "gold has {} sentences, system {}", g.len(), s.len());
            let counts: PrfCounts = g.iter().zip(&s).map(|(g, s)| span_f1(g, s)).sum();
            MetricsFile {
                task: "spans".into(),
                metrics: prf_rows("spans", &counts),
            }
        }
    };
    if let Some(out) = out {
        prepare_out(out, None, "evaluate")?;
        write_metrics(out, &metrics)?;
    }
    print!("{}", metrics.table());
    Ok(())
}

fn metrics_in(dir: &Path) -> Result<Vec<MetricsFile>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(METRICS_PREFIX) && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| serde_json::from_slice(&read(p)?).with_context(|| format!("parsing {}", p.display())))
        .collect()
}

/// Results table with one row per run and one column per task metric, as
/// Markdown and as TSV.
pub fn build_report(runs: &[PathBuf]) -> Result<(String, String)> {
    let mut rows: Vec<(String, Vec<MetricsFile>)> = Vec::new();
    for dir in runs {
        let found = metrics_in(dir)?;
        if !found.is_empty() {
            rows.push((run_name(dir), found));
            continue;
        }
        // A directory of runs.
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let found = metrics_in(&sub)?;
            if !found.is_empty() {
                rows.push((run_name(&sub), found));
            }
        }
    }
    ensure!(!rows.is_empty(), "no {METRICS_PREFIX}*.json files found");

    let mut columns: Vec<String> = Vec::new();
    for (_, files) in &rows {
        for f in files {
            for (k, _) in &f.metrics {
                let col = format!("{} {k}", f.task);
                if !columns.contains(&col) {
                    columns.push(col);
                }
            }
        }
    }
    let cell = |files: &[MetricsFile], col: &str| {
        files
            .iter()
            .flat_map(|f| f.metrics.iter().map(move |(k, v)| (format!("{} {k}", f.task), *v)))
            .find(|(c, _)| c == col)
            .map_or_else(|| "-".to_string(), |(_, v)| format_value(v))
    };
    let mut md = format!("| run | {} |\n", columns.join(" | "));
    md.push_str(&format!("|---|{}\n", "---:|".repeat(columns.len())));
    let mut tsv = format!("run\t{}\n", columns.join("\t"));
    for (name, files) in &rows {
        let cells: Vec<String> = columns.iter().map(|c| cell(files, c)).collect();
        md.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        tsv.push_str(&format!("{name}\t{}\n", cells.join("\t")));
    }
    Ok((md, tsv))
}

fn format_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 0.01 {
        format!("{v:.0e}")
    } else {
        format!("{v:.2}")
    }
}

fn run_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let (md, tsv) = build_report(runs)?;
    if let Some(out) = out {
        prepare_out(out, None, "report")?;
        write(&out.join("report.md"), &md)?;
        write(&out.join("report.tsv"), &tsv)?;
    }
    print!("{md}");
    Ok(())
}
