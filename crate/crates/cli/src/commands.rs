//! Implementations of the six subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fes_core::corpus::{generate_corpus, load_jsonl, save_jsonl, split_corpus, CorpusSpec, Document};
use fes_core::margin::{collect_margin_records, margin_report, MarginRecord};
use fes_core::model::decoder::generate_summary;
use fes_core::train::{
    attach_qa, evaluate, load_checkpoint, save_checkpoint, selected_pairs, train as run_training,
    Ablation, TrainConfig, TrainState,
};
use fes_core::train::trainer::TrainData;
use fes_core::vocab::Vocabulary;
use fes_core::CoreError;

use crate::{
    AnalyzeMarginArgs, BuildQaArgs, DecodeArgs, EvalArgs, GenCorpusArgs, TrainArgs,
};

struct CorpusPaths {
    vocab: PathBuf,
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

impl CorpusPaths {
    fn new(dir: &Path) -> CorpusPaths {
        CorpusPaths {
            vocab: dir.join("vocab.json"),
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            test: dir.join("test.jsonl"),
        }
    }

    fn split(&self, name: &str) -> Result<&Path, CoreError> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CoreError::Config(format!(
                "unknown split `{other}` (expected train, val, or test)"
            ))),
        }
    }
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<(), CoreError> {
    let spec = CorpusSpec {
        num_docs: args.docs,
        vocab_size: args.vocab_size,
        seed: args.seed,
        ..CorpusSpec::default()
    };
    let (vocab, docs) = generate_corpus(&spec)?;
    let (train, val, test) = split_corpus(docs, args.train_frac, args.val_frac)?;

    std::fs::create_dir_all(&args.out)?;
    let paths = CorpusPaths::new(&args.out);
    vocab.save(&paths.vocab)?;
    save_jsonl(&paths.train, &train)?;
    save_jsonl(&paths.val, &val)?;
    save_jsonl(&paths.test, &test)?;
    log::info!(
        "wrote {} train / {} val / {} test documents (vocab {}) to {}",
        train.len(),
        val.len(),
        test.len(),
        vocab.size(),
        args.out.display()
    );
    Ok(())
}

pub fn build_qa(args: BuildQaArgs) -> Result<(), CoreError> {
    if args.k == 0 {
        return Err(CoreError::Config("--k must be ≥ 1".into()));
    }
    let paths = CorpusPaths::new(&args.corpus);
    let vocab = Vocabulary::load(&paths.vocab)?;
    let mut train = load_jsonl(&paths.train)?;
    let mut val = load_jsonl(&paths.val)?;
    let mut test = load_jsonl(&paths.test)?;

    attach_qa(&vocab, &mut train, &mut [&mut val, &mut test], args.k)?;

    save_jsonl(&paths.train, &train)?;
    save_jsonl(&paths.val, &val)?;
    save_jsonl(&paths.test, &test)?;
    let pairs: usize = train.iter().map(|d| d.qa_pairs.len()).sum();
    log::info!(
        "attached QA pairs (k = {}): {} candidates across {} training documents",
        args.k,
        pairs,
        train.len()
    );
    Ok(())
}

fn require_qa(docs: &[Document], split: &str) -> Result<(), CoreError> {
    if docs.iter().all(|d| d.qa_pairs.is_empty()) {
        return Err(CoreError::Data(format!(
            "{split} split has no QA pairs; run `fes build-qa` first"
        )));
    }
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    set!(seed);
    set!(epochs);
    set!(lr);
    set!(batch_size);
    set!(grad_accum);
    set!(warmup_steps);
    set!(lambda_c);
    set!(lambda_kl);
    set!(lambda_m);
    set!(margin_power);
    set!(margin_delay_steps);
    set!(qa_pairs);
    set!(validate_every);
    set!(lm_epochs);
}

pub fn train(args: TrainArgs) -> Result<(), CoreError> {
    let ablation: Ablation = args.ablation.parse()?;
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load_toml(path)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;

    let paths = CorpusPaths::new(&args.corpus);
    let vocab = Vocabulary::load(&paths.vocab)?;
    let train_docs = load_jsonl(&paths.train)?;
    let val_docs = load_jsonl(&paths.val)?;
    require_qa(&train_docs, "train")?;
    if vocab.size() != cfg.model.vocab_size {
        return Err(CoreError::Config(format!(
            "model vocab_size {} does not match corpus vocabulary of {} entries",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }

    let resume: Option<TrainState> = match &args.resume {
        Some(path) => {
            let (state, stored_cfg) = load_checkpoint(path)?;
            if stored_cfg.model != cfg.model {
                return Err(CoreError::Config(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
            Some(state)
        }
        None => None,
    };

    std::fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let best_path = args.out.join("best.ckpt");
    let data = TrainData { train: train_docs, val: val_docs, vocab };

    let outcome = run_training(
        &cfg,
        &data,
        ablation,
        resume,
        args.max_steps,
        Some(&metrics_path),
        Some(&best_path),
    )?;

    let last_path = args.out.join("last.ckpt");
    save_checkpoint(&last_path, &cfg, &outcome.state)?;
    cfg.save_toml(&args.out.join("train.toml"))?;

    log::info!(
        "finished at step {} ({} epochs recorded); best validation ROUGE-L F1 {:.4}",
        outcome.state.step,
        outcome.epoch_losses.len(),
        outcome.state.best_val
    );
    if let Some(first) = outcome.epoch_losses.first() {
        let last = outcome.epoch_losses.last().unwrap();
        log::info!("epoch loss: {first:.4} -> {last:.4}");
    }
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.state.step,
            "best_val_score": outcome.state.best_val,
            "epoch_losses": outcome.epoch_losses,
            "checkpoint": best_path,
            "metrics": metrics_path,
        })
    );
    Ok(())
}

fn load_split_with_state(
    corpus: &Path,
    checkpoint: &Path,
    split: &str,
) -> Result<(TrainState, TrainConfig, Vec<Document>, Vocabulary), CoreError> {
    let paths = CorpusPaths::new(corpus);
    let vocab = Vocabulary::load(&paths.vocab)?;
    let docs = load_jsonl(paths.split(split)?)?;
    let (state, cfg) = load_checkpoint(checkpoint)?;
    Ok((state, cfg, docs, vocab))
}

pub fn eval(args: EvalArgs) -> Result<(), CoreError> {
    let ablation: Ablation = args.ablation.parse()?;
    let (state, cfg, docs, vocab) =
        load_split_with_state(&args.corpus, &args.checkpoint, &args.split)?;
    if ablation.uses_qa_input() {
        require_qa(&docs, &args.split)?;
    }
    let beam = args.beam.unwrap_or(cfg.beam);
    let report = evaluate(&cfg, &state, &docs, &vocab, beam, ablation)?;
    log::info!(
        "{} docs: ROUGE-1 {:.4}, ROUGE-2 {:.4}, ROUGE-L {:.4}, QA EM {:?}, mean margin {:.4}",
        report.n_docs,
        report.rouge1_f1,
        report.rouge2_f1,
        report.rouge_l_f1,
        report.qa_em,
        report.margin.overall.mean_margin
    );
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn decode(args: DecodeArgs) -> Result<(), CoreError> {
    let ablation: Ablation = args.ablation.parse()?;
    let (state, cfg, docs, vocab) =
        load_split_with_state(&args.corpus, &args.checkpoint, &args.split)?;
    let beam = args.beam.unwrap_or(cfg.beam);

    let selected: Vec<&Document> = match args.doc {
        Some(id) => {
            let doc = docs.iter().find(|d| d.id == id).ok_or_else(|| {
                CoreError::Data(format!("document {id} not found in split {}", args.split))
            })?;
            vec![doc]
        }
        None => docs.iter().take(args.limit).collect(),
    };
    if selected.is_empty() {
        return Err(CoreError::Data(format!("split {} is empty", args.split)));
    }

    for doc in selected {
        let pairs = selected_pairs(doc, ablation);
        let (tokens, score) = generate_summary(&cfg.model, &state.params, doc, &pairs, beam)?;
        println!(
            "{}",
            serde_json::json!({
                "id": doc.id,
                "log_prob": score,
                "generated": vocab.detokenize(&tokens),
                "reference": vocab.detokenize(&doc.summary),
            })
        );
    }
    Ok(())
}

pub fn analyze_margin(args: AnalyzeMarginArgs) -> Result<(), CoreError> {
    let ablation: Ablation = args.ablation.parse()?;
    let (state, cfg, docs, vocab) =
        load_split_with_state(&args.corpus, &args.checkpoint, &args.split)?;
    if docs.is_empty() {
        return Err(CoreError::Data(format!("split {} is empty", args.split)));
    }

    let mut records: Vec<MarginRecord> = Vec::new();
    let mut csv = BufWriter::new(File::create(&args.csv)?);
    writeln!(csv, "token_pos,token,P_t,P_lm,m_t,is_entity")?;
    for doc in &docs {
        let pairs = selected_pairs(doc, ablation);
        let doc_records =
            collect_margin_records(&cfg.model, &state.params, &state.lm_params, doc, &pairs)?;
        for r in &doc_records {
            let token = vocab.word(r.token).unwrap_or("<unk>");
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.position, token, r.p_summarizer, r.p_lm, r.margin, r.is_entity
            )?;
        }
        records.extend(doc_records);
    }
    csv.flush()?;

    let report = margin_report(&records)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.json {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    log::info!(
        "{} tokens analyzed: fraction negative {:.4}, mean margin {:.4} (csv: {})",
        report.overall.count,
        report.overall.fraction_negative,
        report.overall.mean_margin,
        args.csv.display()
    );
    Ok(())
}
