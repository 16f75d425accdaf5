use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pet_core::config::{default_schema_path, RunConfig};
use pet_core::eval::{auc, evaluate as eval_report, Report, TopnOptions};
use pet_core::graph::batch_graphs;
use pet_core::model::{decode_checkpoint, encode_checkpoint, export_embeddings as export_rows, Ablation, EmbeddingRows, PetModel};
use pet_core::retrieval::{encode_index, InvertedIndex, RetrievalScheme};
use pet_core::selftest::{gradient_self_test, retrieval_self_test, GradProblem};
use pet_core::synth::{generate, SynthConfig};
use pet_core::tabular::{load_or_ingest, Dataset, Row, Schema};
use pet_core::train::{score_rows, target_graph, train as run_training, validation_split, TrainConfig, TrainOutcome, SCORE_BATCH};

use crate::Common;

const TABLE_CACHE: &str = "table.cache";
const INDEX_FILE: &str = "index.bin";
const CHECKPOINT: &str = "checkpoint.bin";
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

fn failed(e: impl fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn apply_train_flags(train: &mut TrainConfig, c: &Common) -> Result<(), CliError> {
    macro_rules! set {
        ($flag:ident => $field:ident) => {
            if let Some(v) = c.$flag.clone() {
                train.$field = v;
            }
        };
    }
    set!(k => k);
    set!(layers => layers);
    set!(embed_dim => embed_dim);
    set!(batch => batch_size);
    set!(lr => lr);
    set!(l2 => l2);
    set!(epochs => max_epochs);
    set!(patience => patience);
    set!(seed => seed);
    if let Some(a) = &c.ablation {
        train.ablation = a.parse().map_err(usage)?;
    }
    if let Some(r) = &c.retrieval {
        train.retrieval = r.parse().map_err(usage)?;
    }
    train.validate().map_err(usage)
}

/// Config file (if any) with flags applied on top.
fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_toml(&read_text(path)?).map_err(usage)?,
        None => RunConfig::default(),
    };
    if c.data.is_some() {
        cfg.data = c.data.clone();
    }
    if c.schema.is_some() {
        cfg.schema = c.schema.clone();
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    if let Some(t) = &c.task {
        cfg.eval.task = t.parse().map_err(usage)?;
    }
    if let Some(s) = c.seed {
        cfg.eval.seed = s;
    }
    apply_train_flags(&mut cfg.train, c)?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir().map_err(usage)?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load(cfg: &RunConfig, out: &Path) -> Result<(Dataset, InvertedIndex), CliError> {
    let data = cfg.data_path().map_err(usage)?;
    let schema = Schema::from_toml(&read_text(&cfg.schema_path().map_err(usage)?)?).map_err(failed)?;
    let dataset = load_or_ingest(data, &schema, cfg.split, &out.join(TABLE_CACHE)).map_err(failed)?;
    let index = InvertedIndex::build(dataset.table.rows_of(&dataset.split.retrieval)).map_err(failed)?;
    Ok((dataset, index))
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_toml())
}

pub fn prepare(c: &Common) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    write_file(&out.join(INDEX_FILE), encode_index(&index))?;
    write_resolved(&cfg, &out)?;
    println!(
        "rows={} fields={} retrieval={} train={} test={}",
        ds.table.rows.len(),
        ds.table.num_fields(),
        ds.split.retrieval.len(),
        ds.split.train.len(),
        ds.split.test.len()
    );
    Ok(())
}

fn train_quietly(ds: &Dataset, index: &InvertedIndex, train: &TrainConfig) -> Result<TrainOutcome, CliError> {
    run_training(&ds.table, &ds.split, index, train, &mut |r| log::debug!("{}", r.to_line())).map_err(failed)
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    write_resolved(&cfg, &out)?;
    let log_path = out.join("train.log");
    let mut log_file = fs::File::create(&log_path).map_err(|e| failed(format!("{}: {e}", log_path.display())))?;
    let mut write_err = None;
    let outcome = run_training(&ds.table, &ds.split, &index, &cfg.train, &mut |r| {
        let line = r.to_line();
        println!("{line}");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })
    .map_err(failed)?;
    if let Some(e) = write_err {
        return Err(failed(format!("{}: {e}", log_path.display())));
    }
    write_file(&out.join(CHECKPOINT), encode_checkpoint(&outcome.model, &cfg.train.to_toml()))?;
    println!("best_epoch={} best_val_auc={}", outcome.best_epoch, outcome.best_val_auc);
    Ok(())
}

fn load_checkpoint(
    path: Option<PathBuf>,
    out: &Path,
    ds: &Dataset,
    c: &Common,
) -> Result<(PetModel, TrainConfig), CliError> {
    let path = path.unwrap_or_else(|| out.join(CHECKPOINT));
    let bytes = fs::read(&path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let ck = decode_checkpoint(&bytes, None).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let mut train: TrainConfig = toml::from_str(&ck.metadata).map_err(|e| failed(format!("checkpoint settings: {e}")))?;
    apply_train_flags(&mut train, c)?;
    let expected = train.model_config(ds.table.vocab.sizes());
    if ck.model.config() != &expected {
        return Err(failed(format!(
            "checkpoint model {:?} does not match this dataset and flags ({expected:?})",
            ck.model.config()
        )));
    }
    Ok((ck.model, train))
}

fn report(model: &PetModel, ds: &Dataset, index: &InvertedIndex, cfg: &RunConfig, train: &TrainConfig) -> Result<Report, CliError> {
    let topn = TopnOptions {
        negatives: cfg.eval.negatives,
        seed: cfg.eval.seed,
    };
    eval_report(
        model,
        &ds.table,
        index,
        &ds.split.test,
        cfg.eval.task,
        &train.retrieval_settings(),
        &topn,
    )
    .map_err(failed)
}

pub fn evaluate(c: &Common, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    let (model, train) = load_checkpoint(checkpoint, &out, &ds, c)?;
    let resolved = RunConfig { train: train.clone(), ..cfg.clone() };
    write_resolved(&resolved, &out)?;
    let rep = report(&model, &ds, &index, &cfg, &train)?;
    write_file(&out.join("report.txt"), rep.to_text())?;
    print!("{}", rep.to_text());

    let (_, val) = validation_split(&ds.table, &ds.split.train, train.val_fraction);
    if !val.is_empty() {
        let rows: Vec<&Row> = ds.table.rows_of(&val).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let scores = score_rows(&model, &ds.table, &index, &rows, &train.retrieval_settings()).map_err(failed)?;
        match auc(&scores, &labels) {
            Ok(a) => println!("val_auc={a}"),
            Err(e) => println!("val_auc=nan ({e})"),
        }
    }
    Ok(())
}

pub fn ablate(c: &Common) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    write_resolved(&cfg, &out)?;
    let mut table = String::from("ablation\tretrieval\tauc\tlogloss\tbest_epoch\n");
    println!("{}", table.trim_end());
    for ablation in Ablation::ALL {
        for scheme in [RetrievalScheme::Relevance, RetrievalScheme::Random] {
            let train = TrainConfig {
                ablation,
                retrieval: scheme,
                ..cfg.train.clone()
            };
            let outcome = train_quietly(&ds, &index, &train)?;
            let rep = report(&outcome.model, &ds, &index, &cfg, &train)?;
            let row = format!(
                "{ablation}\t{scheme}\t{}\t{}\t{}",
                rep.get("auc").unwrap_or(f64::NAN),
                rep.get("logloss").unwrap_or(f64::NAN),
                outcome.best_epoch
            );
            println!("{row}");
            table.push_str(&row);
            table.push('\n');
        }
    }
    write_file(&out.join("ablate.tsv"), table)
}

pub fn sweep_k(c: &Common, ks: &[usize]) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    if ks.is_empty() {
        return Err(usage("--ks needs at least one value"));
    }
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    write_resolved(&cfg, &out)?;
    let mut records = String::new();
    for &k in ks {
        let train = TrainConfig { k, ..cfg.train.clone() };
        let outcome = train_quietly(&ds, &index, &train)?;
        let rep = report(&outcome.model, &ds, &index, &cfg, &train)?;
        let mut line = format!("k={k}");
        for (key, v) in &rep.entries {
            line.push_str(&format!(" {key}={v}"));
        }
        println!("{line}");
        records.push_str(&line);
        records.push('\n');
    }
    write_file(&out.join("sweep_k.txt"), records)
}

pub fn export_embeddings(c: &Common, checkpoint: Option<PathBuf>, pool: &str) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let out = out_dir(&cfg)?;
    let (ds, index) = load(&cfg, &out)?;
    let (model, train) = load_checkpoint(checkpoint, &out, &ds, c)?;
    let ids = match pool {
        "retrieval" => &ds.split.retrieval,
        "train" => &ds.split.train,
        "test" => &ds.split.test,
        other => return Err(usage(format!("unknown pool {other:?} (expected retrieval, train or test)"))),
    };
    let settings = train.retrieval_settings();
    let mut rows = EmbeddingRows::default();
    for chunk in ids.chunks(SCORE_BATCH) {
        let graphs = chunk
            .iter()
            .map(|&id| target_graph(&ds.table, &index, ds.table.row(id), &settings))
            .collect::<Result<Vec<_>, _>>()
            .map_err(failed)?;
        let labels: Vec<u8> = chunk.iter().map(|&id| ds.table.row(id).label).collect();
        let batch = batch_graphs(&graphs).map_err(failed)?;
        rows.extend(export_rows(&model, &batch, &labels).map_err(failed)?);
    }
    write_file(&out.join("data_embeddings.tsv"), rows.data_tsv())?;
    write_file(&out.join("feature_embeddings.tsv"), rows.feature_tsv())?;
    println!("exported {} rows from the {pool} pool", rows.len());
    Ok(())
}

pub fn gen_synth(c: &Common, rows: usize, fields: usize, vocab: usize, noise: f64) -> Result<(), CliError> {
    let synth = SynthConfig {
        rows,
        fields,
        vocab,
        noise,
        seed: c.seed.unwrap_or(0),
        ..Default::default()
    };
    let csv_path = match (&c.data, &c.out) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => {
            fs::create_dir_all(dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
            dir.join("synth.csv")
        }
        (None, None) => return Err(usage("gen-synth needs --data or --out")),
    };
    let data = generate(&synth).map_err(usage)?;
    write_file(&csv_path, data.to_csv())?;
    let schema_path = c.schema.clone().unwrap_or_else(|| default_schema_path(&csv_path));
    write_file(&schema_path, synth.schema().to_toml())?;
    println!("wrote {} and {}", csv_path.display(), schema_path.display());
    Ok(())
}

pub fn self_test(c: &Common) -> Result<(), CliError> {
    let seed = c.seed.unwrap_or(0);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for ablation in Ablation::ALL {
        let rep = gradient_self_test(GradProblem::default(), ablation, seed).map_err(failed)?;
        println!(
            "grad_check ablation={ablation} checked={} max_rel_error={:e} {}",
            rep.checked,
            rep.max_rel_error,
            if rep.passed() { "pass" } else { "FAIL" }
        );
        worst = worst.max(rep.max_rel_error);
        ok &= rep.passed();
    }
    let (matches, cases) = retrieval_self_test(200, 100, 10, seed);
    println!(
        "retrieval_oracle matches={matches}/{cases} {}",
        if matches == cases { "pass" } else { "FAIL" }
    );
    println!("max_rel_error={worst:e}");
    if ok && matches == cases {
        Ok(())
    } else {
        Err(failed("self-test failed"))
    }
}
