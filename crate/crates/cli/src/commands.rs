//! Implementations behind the subcommands. Each returns `anyhow`
//! errors; the binary maps them to exit code 1.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use hfan_core::corpus::{
    build_vocab, encode_all, generate_synthetic, load_jsonl, split_80_10_10, write_jsonl,
    EncodeLimits, EncodedReview, RawReview, SynthSpec, Vocabulary,
};
use hfan_core::evaluation::{evaluate, score_reviews};
use hfan_core::model::{HyperParams, VocabSizes};
use hfan_core::training::{
    cross_validate, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainSession,
};

use crate::{Cli, Command, CvArgs, Emit, EvalArgs, PredictArgs, SynthArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
    }
}

fn load(path: &Path) -> Result<Vec<RawReview>> {
    load_jsonl(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn sizes_of(vocab: &Vocabulary) -> VocabSizes {
    VocabSizes {
        n_tokens: vocab.n_tokens(),
        n_users: vocab.n_users(),
        n_products: vocab.n_products(),
    }
}

/// The vocabulary rebuilt for inference must produce exactly the tables
/// the checkpoint was trained against.
fn ensure_compatible(ckpt: &Checkpoint, vocab: &Vocabulary, source: &Path) -> Result<()> {
    let got = sizes_of(vocab);
    if got != ckpt.sizes {
        bail!(
            "vocabulary rebuilt from {} yields {} tokens / {} users / {} products, \
             but the checkpoint was trained with {} / {} / {}; pass the original training corpus",
            source.display(),
            got.n_tokens,
            got.n_users,
            got.n_products,
            ckpt.sizes.n_tokens,
            ckpt.sizes.n_users,
            ckpt.sizes.n_products,
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_users: args.n_users,
        n_products: args.n_products,
        n_reviews: args.n_reviews,
        spam_rate: args.spam_rate,
        n_templates: args.n_templates,
    };
    let reviews = generate_synthetic(args.seed, &spec)?;
    let (train, valid, test) = split_80_10_10(&reviews, args.seed);
    for (path, split) in [(&args.train, &train), (&args.valid, &valid), (&args.test, &test)] {
        write_jsonl(path, split).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "train": train.len(),
            "valid": valid.len(),
            "test": test.len(),
            "spam": reviews.iter().filter(|r| r.label == 1).count(),
        })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let raw_train = load(&args.train)?;
    let raw_valid = match &args.valid {
        Some(path) => load(path)?,
        None => Vec::new(),
    };

    let (hp, mut session, config, min_count, max_total_len) = if args.resume {
        let ckpt = load_checkpoint(&args.checkpoint)
            .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
        let vocab = build_vocab(&raw_train, ckpt.min_count);
        ensure_compatible(&ckpt, &vocab, &args.train)?;
        let config = TrainConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            seed: ckpt.seed,
            n_neg: args.n_neg,
            lr: args.lr,
            lr_decay: args.lr_decay,
            freeze_word_emb: ckpt.freeze_word_emb,
            zero_entity: ckpt.zero_entity,
            ..TrainConfig::default()
        };
        config.validate()?;
        let (min_count, max_total_len) = (ckpt.min_count, ckpt.max_total_len);
        let hp = ckpt.hp;
        (hp, ckpt.into_session(), config, min_count, max_total_len)
    } else {
        let hp = HyperParams::new(args.d, args.m, args.r, args.beta, args.l, args.t)?;
        let vocab = build_vocab(&raw_train, args.min_count);
        let config = TrainConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            seed: args.seed,
            n_neg: args.n_neg,
            lr: args.lr,
            lr_decay: args.lr_decay,
            freeze_word_emb: args.freeze_word_emb,
            zero_entity: args.zero_entity_emb,
            ..TrainConfig::default()
        };
        let session = TrainSession::fresh(&hp, sizes_of(&vocab), &config)?;
        (hp, session, config, args.min_count, args.max_total_len)
    };

    let vocab = build_vocab(&raw_train, min_count);
    let limits = EncodeLimits { l: hp.l, t: hp.t, max_total: max_total_len };
    let train_enc = encode_all(&raw_train, &vocab, &limits);
    let valid_enc = encode_all(&raw_valid, &vocab, &limits);

    session.run(&train_enc, &valid_enc, &hp, &config, |record| {
        println!("{}", serde_json::to_string(record).expect("epoch record serializes"));
    })?;

    let ckpt = Checkpoint::from_session(&session, &hp, &config, min_count, max_total_len);
    save_checkpoint(&args.checkpoint, &ckpt)
        .with_context(|| format!("writing checkpoint {}", args.checkpoint.display()))?;
    Ok(())
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let raw = load(&args.train)?;
    let vocab = build_vocab(&raw, args.min_count);
    let limits = EncodeLimits { l: args.l, t: args.t, max_total: args.max_total_len };
    let encoded = encode_all(&raw, &vocab, &limits);
    // r and beta placeholders; the sweep overrides them per grid cell.
    let hp_base = HyperParams::new(args.d, args.m, 1, 0.0, args.l, args.t)?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        n_neg: args.n_neg,
        lr: args.lr,
        lr_decay: args.lr_decay,
        grid_r: args.grid_r.clone(),
        grid_beta: args.grid_beta.clone(),
        ..TrainConfig::default()
    };
    let outcome = cross_validate(&encoded, &hp_base, sizes_of(&vocab), &config)?;
    println!("r,beta,fold,f1");
    for cell in &outcome.table {
        println!("{},{},{},{}", cell.r, cell.beta, cell.fold, cell.f1);
    }
    println!("# selected r={} beta={}", outcome.best_r, outcome.best_beta);
    Ok(())
}

/// Loads the checkpoint, rebuilds the training vocabulary, and encodes
/// the requested split with the training-time limits.
fn scoring_inputs(
    train: &Path,
    test: &Path,
    checkpoint: &Path,
) -> Result<(Checkpoint, Vec<EncodedReview>)> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let raw_train = load(train)?;
    let vocab = build_vocab(&raw_train, ckpt.min_count);
    ensure_compatible(&ckpt, &vocab, train)?;
    let limits = EncodeLimits {
        l: ckpt.hp.l,
        t: ckpt.hp.t,
        max_total: ckpt.max_total_len,
    };
    let encoded = encode_all(&load(test)?, &vocab, &limits);
    Ok((ckpt, encoded))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (ckpt, encoded) = scoring_inputs(&args.train, &args.test, &args.checkpoint)?;
    let report = evaluate(&ckpt.params, &ckpt.hp, &encoded, args.threshold)?;
    println!("{}", serde_json::to_string(&report)?);
    if args.emit == Emit::Csv {
        println!("dataset,P,R,F1,AP,AUC,n,seed");
        println!(
            "{},{},{},{},{},{},{},{}",
            args.test.display(),
            report.precision,
            report.recall,
            report.f1,
            csv_opt(report.ap),
            csv_opt(report.auc),
            report.n,
            ckpt.seed,
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    review_id: &'a str,
    spam_score: f64,
    predicted_label: u8,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (ckpt, encoded) = scoring_inputs(&args.train, &args.test, &args.checkpoint)?;
    let scored = score_reviews(&ckpt.params, &ckpt.hp, &encoded)?;
    for s in &scored {
        let line = Prediction {
            review_id: &s.review_id,
            spam_score: s.spam_score,
            predicted_label: (s.spam_score >= args.threshold) as u8,
        };
        println!("{}", serde_json::to_string(&line)?);
    }
    Ok(())
}
