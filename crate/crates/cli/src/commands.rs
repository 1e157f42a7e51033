use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use xlembed::contrastive::{train as train_model, write_loss_csv, Sampling, TripletCorpus};
use xlembed::data::{
    gen_synthetic_parallel, load_nli_table, load_pairs_tsv, load_sts_tsv, load_triplets_tsv, pairs_to_triplets, write_parallel_tsv,
    write_sts_tsv, write_triplets_tsv, SyntheticCorpus,
};
use xlembed::encoder::{embed_corpus, Encoder, Preset, Vocab};
use xlembed::eval::{
    f1_score, load_gold_pairs, mine_bitext, read_embeddings, retrieval_both, save_gold_pairs, sts_eval, tune_threshold,
    write_embeddings, EvalReport, Matching, Precision, Task,
};
use xlembed::experiment::{lr_sweep, run_scaling, sts_spearman};
use xlembed::lora::{apply_lora, load_checkpoint, save_checkpoint, trainable_param_count};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// `out.manifest.json` next to a file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn print_metrics(metrics: &Value) {
    println!("{}", serde_json::to_string_pretty(metrics).expect("metrics serialize"));
}

pub fn gen_corpus(cfg: &RunConfig, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("gen-corpus", json!({ "corpus": cfg.corpus }), Some(cfg.corpus.seed), Value::Null);
    if let Some(p) = config_path {
        m.input(p)?;
    }
    let corpus = gen_synthetic_parallel(&cfg.corpus)?;
    create_dir(out)?;
    let mut emit = |name: String| -> PathBuf {
        let p = out.join(name);
        m.output(&p);
        p
    };

    for (lang, set) in corpus.langs.iter().zip(&corpus.train) {
        write_triplets_tsv(emit(format!("triplets.{lang}.tsv")), set)?;
    }
    corpus.vocab().save(emit("vocab.txt".into()))?;
    for (split, rows) in [("dev", &corpus.heldout_dev), ("test", &corpus.heldout_test)] {
        let parallel = SyntheticCorpus::parallel_rows(rows, &corpus.langs, &format!("{split}-"));
        write_parallel_tsv(emit(format!("parallel.{split}.tsv")), &parallel)?;
        for (lang, sentences) in corpus.langs.iter().zip(rows.iter()) {
            write_lines(&emit(format!("heldout.{split}.{lang}.txt")), sentences)?;
        }
        for l in 1..corpus.langs.len() {
            let task = corpus.mining_task(rows, l, 0.7, cfg.corpus.seed)?;
            let lang = &corpus.langs[l];
            write_lines(&emit(format!("mine.{split}.{lang}.src.txt")), &task.src)?;
            write_lines(&emit(format!("mine.{split}.{lang}.tgt.txt")), &task.tgt)?;
            save_gold_pairs(emit(format!("mine.{split}.{lang}.gold.tsv")), &task.gold)?;
        }
    }
    for (split, pairs) in [("dev", &corpus.sts_dev), ("test", &corpus.sts_test)] {
        write_sts_tsv(emit(format!("sts.{split}.tsv")), pairs)?;
        write_lines(&emit(format!("sts.{split}.a.txt")), &pairs.iter().map(|p| p.a.clone()).collect::<Vec<_>>())?;
        write_lines(&emit(format!("sts.{split}.b.txt")), &pairs.iter().map(|p| p.b.clone()).collect::<Vec<_>>())?;
    }

    let metrics = json!({
        "languages": corpus.langs,
        "triplets_per_language": cfg.corpus.n_triplets,
        "heldout_per_split": corpus.heldout_test[0].len(),
        "sts_pairs_per_split": corpus.sts_test.len(),
        "vocab_size": corpus.vocab().size(),
    });
    m.finish(metrics.clone(), out.join("manifest.json"))?;
    print_metrics(&metrics);
    Ok(())
}

pub fn triplets(data: &Path, nli: bool, lang: &str, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("triplets", Value::Null, None, json!({ "nli": nli, "lang": lang }));
    m.input(data)?;
    let (pairs, skipped_rows) = if nli {
        let t = load_nli_table(data, lang)?;
        (t.pairs, t.skipped_rows)
    } else {
        (load_pairs_tsv(data)?, 0)
    };
    let built = pairs_to_triplets(&pairs);
    write_triplets_tsv(out, &built.triplets)?;
    m.output(out);
    let metrics = json!({
        "pairs": pairs.len(),
        "skipped_rows": skipped_rows,
        "triplets": built.triplets.len(),
        "skipped_premises": built.skipped_premises,
    });
    m.finish(metrics.clone(), sidecar(out))?;
    print_metrics(&metrics);
    Ok(())
}

fn load_vocab(m: &mut ManifestBuilder, vocab: Option<&Path>, data: &[Vec<xlembed::contrastive::Triplet>]) -> Result<Vocab> {
    match vocab {
        Some(p) => {
            m.input(p)?;
            Ok(Vocab::load(p)?)
        }
        None => {
            let texts = data.iter().flatten().flat_map(|t| [t.premise.as_str(), t.entailment.as_str(), t.contradiction.as_str()]);
            Ok(Vocab::build(texts))
        }
    }
}

fn load_triplet_files(m: &mut ManifestBuilder, paths: &[PathBuf]) -> Result<Vec<Vec<xlembed::contrastive::Triplet>>> {
    paths
        .iter()
        .map(|p| {
            m.input(p)?;
            load_triplets_tsv(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn fresh_model(cfg: &RunConfig, vocab: &Vocab, adapters: bool) -> Result<Encoder> {
    let mut model = Encoder::new(cfg.preset.config(vocab.size(), cfg.max_len, cfg.seed))?;
    if adapters {
        apply_lora(&mut model, &cfg.lora)?;
    }
    Ok(model)
}

pub fn init(cfg: &RunConfig, config_path: Option<&Path>, data: &[PathBuf], vocab: Option<&Path>, adapters: bool, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("init", config_value(cfg), Some(cfg.seed), json!({ "adapters": adapters }));
    if let Some(p) = config_path {
        m.input(p)?;
    }
    if vocab.is_none() && data.is_empty() {
        return Err(CliError::config("init needs --vocab or --data"));
    }
    let sets = load_triplet_files(&mut m, data)?;
    let vocab = load_vocab(&mut m, vocab, &sets)?;
    let model = fresh_model(cfg, &vocab, adapters)?;
    save_checkpoint(out, &model, adapters.then_some(&cfg.lora), &vocab)?;
    m.output(out);
    let metrics = json!({
        "total_params": model.total_param_count(),
        "trainable_params": trainable_param_count(&model),
        "vocab_size": vocab.size(),
    });
    m.finish(metrics.clone(), sidecar(out))?;
    print_metrics(&metrics);
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data: &[PathBuf],
    vocab: Option<&Path>,
    dev: Option<&Path>,
    sweep: bool,
    out: &Path,
) -> Result<()> {
    let mut m = ManifestBuilder::new("train", config_value(cfg), Some(cfg.seed), json!({ "lr_sweep": sweep }));
    if let Some(p) = config_path {
        m.input(p)?;
    }
    let sets = load_triplet_files(&mut m, data)?;
    let vocab = load_vocab(&mut m, vocab, &sets)?;
    let corpus = if cfg.train.sampling == Sampling::CrossLingual && sets.len() > 1 {
        TripletCorpus::parallel(sets)?
    } else {
        TripletCorpus::monolingual(sets.into_iter().flatten().collect())
    };
    let dev_pairs = match dev {
        Some(p) => {
            m.input(p)?;
            Some(load_sts_tsv(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    if sweep && dev_pairs.is_none() {
        return Err(CliError::config("--lr-sweep needs --dev"));
    }
    create_dir(out)?;

    let mut model = fresh_model(cfg, &vocab, true)?;
    let mut metrics = serde_json::Map::new();
    let losses = if sweep {
        let (best, report) = lr_sweep(&model, &vocab, &corpus, &cfg.train, dev_pairs.as_deref().unwrap_or_default())?;
        model = best;
        let path = out.join("sweep.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&path))?;
        m.output(&path);
        let trials: Vec<Value> = report.trials.iter().map(|t| json!({ "lr": t.lr, "dev_spearman": t.dev_spearman })).collect();
        metrics.insert("sweep".into(), Value::Array(trials));
        metrics.insert("lr".into(), json!(report.best_lr));
        report.trials[report.best_index].losses.clone()
    } else {
        metrics.insert("lr".into(), json!(cfg.train.lr));
        train_model(&mut model, &vocab, &corpus, &cfg.train)?.losses
    };
    if let Some(pairs) = &dev_pairs {
        metrics.insert("dev_spearman".into(), json!(sts_spearman(&model, &vocab, pairs)?));
    }
    metrics.insert("steps".into(), json!(losses.len()));
    metrics.insert("first_loss".into(), json!(losses.first()));
    metrics.insert("final_loss".into(), json!(losses.last()));
    metrics.insert("trainable_params".into(), json!(trainable_param_count(&model)));
    metrics.insert("total_params".into(), json!(model.total_param_count()));

    let ckpt = out.join("adapter.ckpt");
    save_checkpoint(&ckpt, &model, Some(&cfg.lora), &vocab)?;
    m.output(&ckpt);
    let csv = out.join("loss.csv");
    write_loss_csv(&csv, &losses)?;
    m.output(&csv);
    let metrics = Value::Object(metrics);
    m.finish(metrics.clone(), out.join("manifest.json"))?;
    print_metrics(&metrics);
    Ok(())
}

pub fn embed(checkpoint: &Path, data: &Path, lang: &str, f32: bool, out: &Path) -> Result<()> {
    let (model, lora, vocab) = load_checkpoint(checkpoint).map_err(|e| match e {
        xlembed::Error::Io(io) => CliError::config(format!("{}: {io}", checkpoint.display())),
        e => e.into(),
    })?;
    let snapshot = json!({ "encoder": model.config(), "lora": lora.clone() });
    let mut m = ManifestBuilder::new("embed", snapshot, Some(model.config().seed), json!({ "lang": lang, "f32": f32 }));
    m.input(checkpoint)?;
    m.input(data)?;
    let texts = read_lines(data)?;
    let set = embed_corpus(&texts, &vec![lang.to_string(); texts.len()], &model, &vocab, 64)?;
    let precision = if f32 { Precision::F32 } else { Precision::F64 };
    write_embeddings(out, &set, precision)?;
    m.output(out);
    let metrics = json!({ "n": set.len(), "dim": model.d_model() });
    m.finish(metrics.clone(), sidecar(out))?;
    print_metrics(&metrics);
    Ok(())
}

pub struct EvalArgs<'a> {
    pub task: Task,
    pub data: &'a [PathBuf],
    pub gold: Option<&'a Path>,
    pub threshold: Option<f64>,
    pub tune_on: Option<&'a [PathBuf]>,
    pub strict: bool,
}

fn read_gold_scores(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.contains('\t') {
        return Ok(load_sts_tsv(path)?.into_iter().map(|p| p.score).collect());
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::data(format!("{}:{}: bad score {l:?}", path.display(), i + 1)))
        })
        .collect()
}

pub fn eval(args: &EvalArgs, out: &Path) -> Result<()> {
    let options = json!({
        "task": args.task,
        "threshold": args.threshold,
        "tuned": args.tune_on.is_some(),
        "strict": args.strict,
    });
    let mut m = ManifestBuilder::new("eval", Value::Null, None, options);
    for p in args.data {
        m.input(p)?;
    }
    let a = read_embeddings(&args.data[0])?;
    let b = read_embeddings(&args.data[1])?;
    let mut report = match args.task {
        Task::Retrieval => retrieval_both(&a, &b)?,
        Task::Sts => {
            let gold = args.gold.ok_or_else(|| CliError::config("sts needs --gold"))?;
            m.input(gold)?;
            sts_eval(&a, &b, &read_gold_scores(gold)?)?
        }
        Task::Mining => {
            let gold_path = args.gold.ok_or_else(|| CliError::config("mine needs --gold"))?;
            m.input(gold_path)?;
            let gold = load_gold_pairs(gold_path)?;
            let matching = if args.strict { Matching::Strict } else { Matching::Greedy };
            let threshold = match (args.threshold, args.tune_on) {
                (Some(t), None) if t.is_finite() => t,
                (None, Some(dev)) => {
                    for p in dev {
                        m.input(p)?;
                    }
                    let (da, db) = (read_embeddings(&dev[0])?, read_embeddings(&dev[1])?);
                    tune_threshold(&da, &db, &load_gold_pairs(&dev[2])?, matching)?.threshold
                }
                _ => return Err(CliError::config("mine needs exactly one of --threshold or --tune-on")),
            };
            let pred = mine_bitext(&a, &b, threshold, matching)?;
            let prf = f1_score(&pred, &gold);
            let mut r = EvalReport::new(
                Task::Mining,
                [("precision", prf.precision), ("recall", prf.recall), ("f1", prf.f1)],
                gold.len(),
            );
            r.threshold = Some(threshold);
            r
        }
    };
    report.config_fingerprint = m.fingerprint();
    report.validate()?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out, text + "\n").map_err(io_err(out))?;
    m.output(out);
    let metrics = json!({ "metrics": report.metrics, "threshold": report.threshold, "n": report.n });
    m.finish(metrics.clone(), sidecar(out))?;
    print_metrics(&metrics);
    Ok(())
}

pub fn scaling(cfg: &RunConfig, config_path: Option<&Path>, presets: &[Preset], seeds: &[u64], out: &Path) -> Result<()> {
    let options = json!({ "presets": presets, "seeds": seeds });
    let mut m = ManifestBuilder::new("scaling", config_value(cfg), None, options);
    if let Some(p) = config_path {
        m.input(p)?;
    }
    let report = run_scaling(&cfg.experiment(), presets, seeds)?;
    create_dir(out)?;
    let path = out.join("scaling.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&path))?;
    m.output(&path);

    eprintln!("{:<8} {:>12} {:>10} {:>10} {:>8}", "preset", "params", "trainable", "retrieval", "sts");
    for row in &report.rows {
        eprintln!(
            "{:<8} {:>12} {:>10} {:>10.4} {:>8.4}",
            row.preset.name(),
            row.total_params,
            row.trainable_params,
            row.mean_retrieval,
            row.mean_sts_spearman
        );
    }
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "preset": r.preset,
                "total_params": r.total_params,
                "trainable_params": r.trainable_params,
                "retrieval": r.cells.iter().map(|c| c.retrieval).collect::<Vec<_>>(),
                "sts_spearman": r.cells.iter().map(|c| c.sts_spearman).collect::<Vec<_>>(),
                "mean_retrieval": r.mean_retrieval,
                "mean_sts_spearman": r.mean_sts_spearman,
            })
        })
        .collect();
    let metrics = json!({ "seeds": seeds, "rows": rows });
    m.finish(metrics.clone(), out.join("manifest.json"))?;
    print_metrics(&metrics);
    Ok(())
}
