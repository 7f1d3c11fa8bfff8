//! `preformer` command-line driver.
//!
//! Every subcommand reads optional `key = value` settings from `--config PATH`; any key
//! may also be given as a `--kebab-case` flag, which wins over the file.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use preformer::data::KvConfig;

pub(crate) enum CliError {
    Usage(String),
    Runtime(preformer::Error),
}

impl From<preformer::Error> for CliError {
    fn from(e: preformer::Error) -> Self {
        match e {
            preformer::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

pub(crate) type CliResult<T> = Result<T, CliError>;

pub(crate) struct Invocation {
    pub cfg: KvConfig,
    pub positional: Vec<String>,
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "d_model",
    "n_heads",
    "d_ff",
    "encoder_layers",
    "conv_channels",
    "decoder",
    "n_self",
    "n_layers",
    "max_target_len",
    "max_frames",
    "dropout",
];

pub(crate) const TRAIN_KEYS: &[&str] = &[
    "lambda_ctc",
    "warmup_steps",
    "peak_lr",
    "warm_phase_updates",
    "max_epochs",
    "patience",
    "avg_last_k",
    "batch_size",
    "label_smoothing",
    "grad_clip",
];

struct Spec {
    name: &'static str,
    about: &'static str,
    keys: Vec<&'static str>,
    positional: Option<(&'static str, bool)>,
}

fn specs() -> Vec<Spec> {
    let cat = |parts: &[&[&'static str]]| parts.concat();
    vec![
        Spec {
            name: "gen-data",
            about: "Generate the synthetic corpus",
            keys: vec![
                "out_dir", "seed", "vocab_size", "d_feat", "n_train", "n_dev", "n_test", "n_lm", "noise_sigma",
                "frames_min", "frames_max", "len_min", "len_max", "markov_order",
            ],
            positional: None,
        },
        Spec {
            name: "pretrain-lm",
            about: "Train the causal LM that serves as decoder donor and fusion LM",
            keys: cat(&[
                &["data_dir", "out_dir", "seed", "dev_fraction"],
                &["d_model", "n_heads", "d_ff", "n_self", "max_target_len"],
                TRAIN_KEYS,
            ]),
            positional: None,
        },
        Spec {
            name: "train",
            about: "Train a recognizer (joint fine-tuning or CTC-only encoder pretraining)",
            keys: cat(&[
                &["data_dir", "out_dir", "seed", "mode", "lm_init", "encoder_init", "lm_policy", "train_offset", "train_limit"],
                MODEL_KEYS,
                TRAIN_KEYS,
            ]),
            positional: None,
        },
        Spec {
            name: "decode",
            about: "Joint CTC/attention beam search over a data split",
            keys: vec![
                "model_dir", "data_dir", "split", "seed", "mu", "lm_weight", "beam_size", "max_len_ratio", "lm_dir",
                "out", "ref_out",
            ],
            positional: None,
        },
        Spec {
            name: "eval-cer",
            about: "Corpus character error rate of a hypothesis file against a reference file",
            keys: vec![],
            positional: Some(("FILES", true)),
        },
        Spec {
            name: "avg-ckpt",
            about: "Average checkpoints elementwise",
            keys: vec!["out"],
            positional: Some(("CHECKPOINTS", true)),
        },
        Spec {
            name: "grad-check",
            about: "Finite-difference gradient check of every layer species and loss",
            keys: vec!["seed", "h", "tol"],
            positional: None,
        },
        Spec {
            name: "param-count",
            about: "Analytic parameter counts of a model configuration",
            keys: cat(&[&["preset", "n_chars", "d_feat"], MODEL_KEYS]),
            positional: None,
        },
    ]
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn build_cli(specs: &[Spec]) -> Command {
    let mut cmd = Command::new("preformer")
        .about("Hybrid CTC/attention recognizer experiments on a synthetic task")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for s in specs {
        let mut sub = Command::new(s.name).about(s.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help("key = value settings file"),
        );
        for &k in &s.keys {
            let mut a = Arg::new(k).long(flag(k)).value_name("VALUE");
            if k == "beam_size" {
                a = a.alias("beam");
            }
            sub = sub.arg(a);
        }
        if let Some((name, required)) = s.positional {
            sub = sub.arg(Arg::new(name).action(ArgAction::Append).required(required));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn invocation(spec: &Spec, m: &ArgMatches) -> CliResult<Invocation> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => KvConfig::read(&PathBuf::from(p)).map_err(|e| match e {
            preformer::Error::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        })?,
        None => KvConfig::new(),
    };
    cfg.check_keys(&spec.keys)?;
    for &k in &spec.keys {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v.clone());
        }
    }
    let positional = spec
        .positional
        .and_then(|(name, _)| m.get_many::<String>(name))
        .map(|vs| vs.cloned().collect())
        .unwrap_or_default();
    Ok(Invocation { cfg, positional })
}

fn main() -> ExitCode {
    let specs = specs();
    let matches = match build_cli(&specs).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = specs.iter().find(|s| s.name == name).expect("known subcommand");
    let result = invocation(spec, sub).and_then(|inv| commands::run(name, inv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
