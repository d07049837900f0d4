use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mamr::amr::{parse_penman, parse_records};
use mamr::corpus::{
    encode_source, fingerprint, ingest, read_examples, split_ingested, splits_disjoint, write_examples,
    DatasetManifest, EncoderInput, Encoders, ParallelExample,
};
use mamr::eval::{bleu, human_eval_sample, overlap_stats, score_sentences};
use mamr::generate::{attention_dump, beam_search, detokenize};
use mamr::lang::{is_language_token, Language};
use mamr::linearize::{linearize_with_features, prepend_language_token, FeatureBuckets, FeaturedTokens};
use mamr::model::{read_checkpoint, write_checkpoint, Model};
use mamr::pretrain::{pretrain_decoder, pretrain_encoder};
use mamr::subword::{train_bpe, BpeModel};
use mamr::train::{initialize_for_finetune, train, Objective, RunOptions, TrainSet};

use crate::config::RunConfig;
use crate::{Command, ConfigArgs, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("--config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set).map_err(|e| usage(format!("--set: {e}")))?;
    Ok(cfg)
}

/// Writes the effective configuration as `<dir>/<command>.config`.
fn echo(dir: &Path, command: &str, cfg: &RunConfig, seed: Option<u64>, pretrained: bool) -> Result<()> {
    let text = cfg.effective(seed, pretrained).map_err(usage)?;
    write(&dir.join(format!("{command}.config")), &text)
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?.lines().map(str::to_string).collect())
}

fn feature_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".feat");
    PathBuf::from(s)
}

/// Token lines with their `.feat` companions, optionally prefixed by a
/// language token.
fn read_linearized(path: &Path, lang: Option<Language>) -> Result<Vec<FeaturedTokens>> {
    let tokens = read_lines(path)?;
    let features = read_lines(&feature_path(path))?;
    if tokens.len() != features.len() {
        bail!(
            "{} has {} lines but its feature file has {}",
            path.display(),
            tokens.len(),
            features.len()
        );
    }
    tokens
        .iter()
        .zip(&features)
        .enumerate()
        .map(|(i, (t, f))| {
            let ft = FeaturedTokens::from_lines(t, f).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            match lang {
                Some(l) => ft
                    .with_language(l)
                    .with_context(|| format!("{}:{}", path.display(), i + 1)),
                None => Ok(ft),
            }
        })
        .collect()
}

fn load_bpe(path: &Path) -> Result<BpeModel> {
    BpeModel::load(path).with_context(|| format!("loading BPE model {}", path.display()))
}

fn load_model(path: &Path, src: &BpeModel, tgt: &BpeModel) -> Result<Model<f32>> {
    let ckpt = read_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mut model = Model::from_checkpoint(&ckpt).with_context(|| format!("loading {}", path.display()))?;
    if model.config.enc_vocab != src.vocab_size() || model.config.dec_vocab != tgt.vocab_size() {
        bail!(
            "model vocabularies ({}, {}) do not match the BPE models ({}, {})",
            model.config.enc_vocab,
            model.config.dec_vocab,
            src.vocab_size(),
            tgt.vocab_size()
        );
    }
    model.config.dropout = 0.0;
    model.config.layerdrop = 0.0;
    Ok(model)
}

fn encoder_input(ft: &FeaturedTokens, line: usize, src: &BpeModel, model: &Model<f32>) -> Result<EncoderInput> {
    if !ft.tokens.first().is_some_and(|t| is_language_token(t)) {
        return Err(usage(format!("input line {line} has no language token; pass --lang")));
    }
    let input = encode_source(ft, src);
    if input.len() > model.config.max_positions {
        bail!(
            "input line {line} has {} pieces, above max_positions {}",
            input.len(),
            model.config.max_positions
        );
    }
    Ok(input)
}

fn check_ids(examples: &[ParallelExample], what: &Path, src: &BpeModel, tgt: &BpeModel) -> Result<()> {
    for ex in examples {
        let bad_src = ex.src_ids.iter().any(|&i| i as usize >= src.vocab_size());
        let bad_tgt = ex.tgt_ids.iter().any(|&i| i as usize >= tgt.vocab_size());
        if bad_src || bad_tgt {
            bail!(
                "{}: example {} line {} has ids outside the BPE vocabularies",
                what.display(),
                ex.language,
                ex.line
            );
        }
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::ParseAmr { input, out_dir, config } => {
            let cfg = load_config(&config)?;
            let records = parse_records(&read(&input)?);
            let mut graphs = String::new();
            let mut errors = String::from("record\terror\n");
            let mut parsed = 0;
            for (i, r) in records.iter().enumerate() {
                match r {
                    Ok(g) => {
                        graphs.push_str(&g.to_penman()?);
                        graphs.push('\n');
                        parsed += 1;
                    }
                    Err(e) => {
                        log::warn!("record {}: {e}", i + 1);
                        let _ = writeln!(errors, "{}\t{e}", i + 1);
                    }
                }
            }
            if parsed == 0 {
                bail!("no graph in {} could be parsed", input.display());
            }
            write(&out_dir.join("graphs.amr"), &graphs)?;
            write(&out_dir.join("parse_errors.tsv"), &errors)?;
            echo(&out_dir, "parse-amr", &cfg, None, false)?;
            println!("{parsed} graphs parsed, {} rejected", records.len() - parsed);
        }
        Command::Linearize {
            input,
            out,
            lang,
            config,
        } => {
            let cfg = load_config(&config)?;
            let (mut tokens, mut features) = (String::new(), String::new());
            for (i, line) in read_lines(&input)?.iter().enumerate() {
                let at = || format!("{}:{}", input.display(), i + 1);
                let g = parse_penman(line).with_context(at)?;
                let mut lin = linearize_with_features(&g, FeatureBuckets::default()).with_context(at)?;
                if let Some(l) = lang {
                    lin = prepend_language_token(lin, l.code()).with_context(at)?;
                }
                let _ = writeln!(tokens, "{}", lin.token_line());
                let _ = writeln!(features, "{}", lin.feature_line());
            }
            write(&out, &tokens)?;
            write(&feature_path(&out), &features)?;
            echo(&parent(&out), "linearize", &cfg, None, false)?;
        }
        Command::TrainBpe {
            input,
            out,
            merges,
            protect_roles,
            config,
        } => {
            let cfg = load_config(&config)?;
            let mut opts = cfg.bpe().map_err(usage)?;
            let mut cfg = cfg;
            if let Some(m) = merges {
                opts.num_merges = m;
                cfg.set("bpe.merges", &m.to_string()).map_err(usage)?;
            }
            if protect_roles {
                opts.protect_roles = true;
                cfg.set("bpe.protect_roles", "true").map_err(usage)?;
            }
            let mut lines = Vec::new();
            for path in &input {
                lines.extend(read_lines(path)?);
            }
            let model = train_bpe(&lines, opts)?;
            fs::create_dir_all(parent(&out))?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            echo(&parent(&out), "train-bpe", &cfg, None, false)?;
            println!("{} merges, vocabulary {}", model.merges().len(), model.vocab_size());
        }
        Command::BuildCorpus {
            manifest,
            src_bpe,
            tgt_bpe,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let m = DatasetManifest::load(&manifest)?;
            let (src, tgt) = (load_bpe(&src_bpe)?, load_bpe(&tgt_bpe)?);
            let ingested = ingest(
                &m,
                Encoders {
                    source: &src,
                    target: &tgt,
                    buckets: FeatureBuckets::default(),
                },
            )?;
            let splits = split_ingested(&ingested, m.derive_n)?;
            let mut report = String::from("language\ttrain\tvalid\ttest\tfingerprint\n");
            let (mut train_set, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for (lang, s) in &splits {
                if !splits_disjoint(s) {
                    log::warn!("{lang}: the same example occurs in more than one split");
                }
                let all: Vec<ParallelExample> = s.train.iter().chain(&s.valid).chain(&s.test).cloned().collect();
                let _ = writeln!(
                    report,
                    "{lang}\t{}\t{}\t{}\t{}",
                    s.train.len(),
                    s.valid.len(),
                    s.test.len(),
                    fingerprint(&all)
                );
                train_set.extend(s.train.iter().cloned());
                valid.extend(s.valid.iter().cloned());
                test.extend(s.test.iter().cloned());
            }
            fs::create_dir_all(&out_dir)?;
            write_examples(out_dir.join("train.examples"), &train_set)?;
            write_examples(out_dir.join("valid.examples"), &valid)?;
            write_examples(out_dir.join("test.examples"), &test)?;
            let mut dropped = String::from("file\tline\treason\n");
            for d in &ingested.dropped {
                let _ = writeln!(dropped, "{}\t{}\t{}", d.file.display(), d.line, d.reason);
            }
            write(&out_dir.join("dropped.tsv"), &dropped)?;
            write(&out_dir.join("corpus_report.tsv"), &report)?;
            echo(&out_dir, "build-corpus", &cfg, None, false)?;
            print!("{report}");
        }
        Command::PretrainEncoder {
            input,
            lang,
            src_bpe,
            seed,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let src = load_bpe(&src_bpe)?;
            let corpus = read_linearized(&input, lang)?;
            let model = cfg.model(src.vocab_size(), src.vocab_size()).map_err(usage)?;
            let tcfg = cfg.train(seed, false).map_err(usage)?;
            let noise = cfg.noise(seed).map_err(usage)?;
            echo(&out_dir, "pretrain-encoder", &cfg, Some(seed), false)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                ..RunOptions::default()
            };
            let out = pretrain_encoder(&model, &corpus, &src, &noise, &tcfg, &opts)?;
            write_checkpoint(out_dir.join("encoder.ckpt"), &out.export)?;
            println!(
                "best validation loss {:.4} at step {}",
                out.outcome.best_valid, out.outcome.best_step
            );
        }
        Command::PretrainDecoder {
            text,
            tgt_bpe,
            seed,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let tgt = load_bpe(&tgt_bpe)?;
            let mut corpora: BTreeMap<Language, Vec<String>> = BTreeMap::new();
            let mut declared = Vec::new();
            for (lang, path) in &text {
                corpora.entry(*lang).or_default().extend(read_lines(path)?);
                if !declared.contains(lang) {
                    declared.push(*lang);
                }
            }
            let model = cfg.model(tgt.vocab_size(), tgt.vocab_size()).map_err(usage)?;
            let tcfg = cfg.train(seed, false).map_err(usage)?;
            echo(&out_dir, "pretrain-decoder", &cfg, Some(seed), false)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                ..RunOptions::default()
            };
            let out = pretrain_decoder(&model, &corpora, &declared, &tgt, &tcfg, &opts)?;
            write_checkpoint(out_dir.join("decoder.ckpt"), &out.export)?;
            let mut tsv = String::from("language\tperplexity\n");
            for (lang, p) in &out.perplexity {
                let _ = writeln!(tsv, "{lang}\t{p:.4}");
            }
            write(&out_dir.join("perplexity.tsv"), &tsv)?;
            print!("{tsv}");
        }
        Command::Train {
            train_data,
            valid_data,
            src_bpe,
            tgt_bpe,
            seed,
            out_dir,
            encoder,
            decoder,
            embeddings,
            resume,
            config,
        } => {
            let cfg = load_config(&config)?;
            let (src, tgt) = (load_bpe(&src_bpe)?, load_bpe(&tgt_bpe)?);
            let data = read_examples(&train_data)?;
            let valid = read_examples(&valid_data)?;
            check_ids(&data, &train_data, &src, &tgt)?;
            check_ids(&valid, &valid_data, &src, &tgt)?;
            let model_cfg = cfg.model(src.vocab_size(), tgt.vocab_size()).map_err(usage)?;
            let pretrained = encoder.is_some() || decoder.is_some();
            let tcfg = cfg.train(seed, pretrained).map_err(usage)?;
            let enc = encoder.as_deref().map(read_checkpoint).transpose()?;
            let dec = decoder.as_deref().map(read_checkpoint).transpose()?;
            let emb = embeddings.as_deref().map(|p| (p, &tgt));
            let (model, report) = initialize_for_finetune(model_cfg, seed, enc.as_ref(), dec.as_ref(), emb)?;
            echo(&out_dir, "train", &cfg, Some(seed), pretrained)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                resume,
                ..RunOptions::default()
            };
            let out = train(model, TrainSet::Fixed(&data), &valid, Objective::Seq2Seq, &tcfg, &opts)?;
            println!("initialization: {report}");
            println!(
                "best validation loss {:.4} at step {} of {}",
                out.best_valid, out.best_step, out.last_step
            );
        }
        Command::Generate {
            model,
            input,
            lang,
            src_bpe,
            tgt_bpe,
            beam,
            out,
            config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(b) = beam {
                cfg.set("beam.size", &b.to_string()).map_err(usage)?;
            }
            let beam_cfg = cfg.beam().map_err(usage)?;
            let (src, tgt) = (load_bpe(&src_bpe)?, load_bpe(&tgt_bpe)?);
            let m = load_model(&model, &src, &tgt)?;
            let mut text = String::new();
            for (i, ft) in read_linearized(&input, lang)?.iter().enumerate() {
                let x = encoder_input(ft, i + 1, &src, &m)?;
                let hyp = beam_search(&m, &x, &beam_cfg).with_context(|| format!("input line {}", i + 1))?;
                let _ = writeln!(text, "{}", detokenize(&tgt, &hyp.best));
            }
            write(&out, &text)?;
            echo(&parent(&out), "generate", &cfg, None, false)?;
        }
        Command::Evaluate {
            hyp,
            reference,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let (h, r) = (read_lines(&hyp)?, read_lines(&reference)?);
            let report = bleu(&h, &r)?;
            println!("{report}");
            if let Some(dir) = out_dir {
                write(&dir.join("bleu.txt"), &format!("{report}\n"))?;
                let mut tsv = String::from("id\tsentence_bleu\n");
                for s in score_sentences(&h, &r)? {
                    let _ = writeln!(tsv, "{}\t{:.4}", s.id, s.bleu);
                }
                write(&dir.join("sentence_bleu.tsv"), &tsv)?;
                echo(&dir, "evaluate", &cfg, None, false)?;
            }
        }
        Command::OverlapStats {
            amr,
            target,
            bpe,
            bleu: scores,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let eval = cfg.eval().map_err(usage)?;
            let graphs = read_lines(&amr)?;
            let mut targets = BTreeMap::new();
            for (lang, path) in &target {
                targets.insert(*lang, read_lines(path)?);
            }
            let mut models = BTreeMap::new();
            for (lang, path) in &bpe {
                models.insert(*lang, load_bpe(path)?);
            }
            let models_ref: BTreeMap<Language, &BpeModel> = models.iter().map(|(l, m)| (*l, m)).collect();
            let scores: BTreeMap<Language, f64> = scores.into_iter().collect();
            let table = overlap_stats(&graphs, &targets, &models_ref, &scores, eval.token_level)
                .map_err(|e| match e {
                    mamr::eval::EvalError::TooFewLanguages(_) => usage(e.to_string()),
                    other => anyhow!(other),
                })?;
            let tsv = table.to_tsv();
            write(&out_dir.join("overlap.tsv"), &tsv)?;
            echo(&out_dir, "overlap-stats", &cfg, None, false)?;
            print!("{tsv}");
        }
        Command::HumanEvalSheet {
            hyp,
            reference,
            seed,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let eval = cfg.eval().map_err(usage)?;
            let scored = score_sentences(&read_lines(&hyp)?, &read_lines(&reference)?)?;
            let sheet = human_eval_sample(&scored, eval.n_high, eval.n_low, eval.min_words, seed)?;
            write(&out_dir.join("sheet.tsv"), &sheet.to_tsv())?;
            let mut key = String::from("id\tgroup\n");
            for id in &sheet.high {
                let _ = writeln!(key, "{id}\thigh");
            }
            for id in &sheet.low {
                let _ = writeln!(key, "{id}\tlow");
            }
            write(&out_dir.join("key.tsv"), &key)?;
            echo(&out_dir, "human-eval-sheet", &cfg, Some(seed), false)?;
            println!("{} rows", sheet.rows.len());
        }
        Command::AttentionDump {
            model,
            input,
            line,
            lang,
            src_bpe,
            tgt_bpe,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let beam_cfg = cfg.beam().map_err(usage)?;
            let (src, tgt) = (load_bpe(&src_bpe)?, load_bpe(&tgt_bpe)?);
            let m = load_model(&model, &src, &tgt)?;
            let lines = read_linearized(&input, lang)?;
            let ft = line
                .checked_sub(1)
                .and_then(|i| lines.get(i))
                .ok_or_else(|| usage(format!("--line {line} is outside 1..={}", lines.len())))?;
            let x = encoder_input(ft, line, &src, &m)?;
            let hyp = beam_search(&m, &x, &beam_cfg)?.best;
            fs::create_dir_all(&out_dir)?;
            attention_dump(&m, &x, &hyp, &src, &tgt, out_dir.join("attention.tsv"))?;
            write(&out_dir.join("hypothesis.txt"), &format!("{}\n", detokenize(&tgt, &hyp)))?;
            echo(&out_dir, "attention-dump", &cfg, None, false)?;
        }
    }
    Ok(())
}
