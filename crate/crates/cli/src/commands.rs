use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use preformer::data::{
    gen_corpus, parse_tokens, read_token_lines, write_corpus, Checkpoint, CorpusConfig, KvConfig, Manifest, Utterance,
    LM_FILE, META_FILE,
};
use preformer::decoding::{corpus_cer, DecodeConfig};
use preformer::diagnostics::{grad_suite, DEFAULT_H, DEFAULT_TOL};
use preformer::model::{
    Component, ConvSpec, DecoderKind, FreezePolicy, LmGroupPolicy, ModelConfig, ModelParams, Preformer,
};
use preformer::pipeline::{decode_split, lm_for};
use preformer::training::{
    average_checkpoint_files, perplexity, pretrain_lm, unigram_perplexity, TrainConfig, TrainMode, Trainer,
};
use preformer::Error;

use crate::{CliError, CliResult, Invocation, MODEL_KEYS};

pub(crate) fn run(name: &str, inv: Invocation) -> CliResult<()> {
    match name {
        "gen-data" => gen_data(&inv.cfg),
        "pretrain-lm" => pretrain(&inv.cfg),
        "train" => train(&inv.cfg),
        "decode" => decode(&inv.cfg),
        "eval-cer" => eval_cer(&inv.positional),
        "avg-ckpt" => avg_ckpt(&inv.cfg, &inv.positional),
        "grad-check" => grad_check(&inv.cfg),
        "param-count" => param_count(&inv.cfg),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn get<T: FromStr>(cfg: &KvConfig, key: &str, default: T) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    Ok(cfg.get_or(key, default)?)
}

fn required(cfg: &KvConfig, key: &str) -> CliResult<PathBuf> {
    cfg.get_str(key)
        .map(PathBuf::from)
        .ok_or_else(|| usage(format!("missing required key {key} (--{})", key.replace('_', "-"))))
}

/// Configuration values that fail validation are usage errors, not runtime failures.
fn validated(r: preformer::Result<()>) -> CliResult<()> {
    r.map_err(|e| match e {
        Error::InvalidArgument(msg) => usage(msg),
        other => CliError::Runtime(other),
    })
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes each line to the log file and to stdout.
struct Tee {
    file: BufWriter<File>,
}

impl Tee {
    fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
        })
    }
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        io::stdout().flush()
    }
}

fn gen_data(cfg: &KvConfig) -> CliResult<()> {
    let out = required(cfg, "out_dir")?;
    let d = CorpusConfig::default();
    let cc = CorpusConfig {
        vocab_size: get(cfg, "vocab_size", d.vocab_size)?,
        d_feat: get(cfg, "d_feat", d.d_feat)?,
        n_train: get(cfg, "n_train", d.n_train)?,
        n_dev: get(cfg, "n_dev", d.n_dev)?,
        n_test: get(cfg, "n_test", d.n_test)?,
        n_lm: get(cfg, "n_lm", d.n_lm)?,
        seed: get(cfg, "seed", d.seed)?,
        noise_sigma: get(cfg, "noise_sigma", d.noise_sigma)?,
        frames_per_token: (get(cfg, "frames_min", d.frames_per_token.0)?, get(cfg, "frames_max", d.frames_per_token.1)?),
        token_len: (get(cfg, "len_min", d.token_len.0)?, get(cfg, "len_max", d.token_len.1)?),
        markov_order: get(cfg, "markov_order", d.markov_order)?,
    };
    let corpus = gen_corpus(&cc).map_err(|e| match e {
        Error::InvalidArgument(msg) => usage(msg),
        other => CliError::Runtime(other),
    })?;
    create_dir(&out)?;
    write_corpus(&out, &corpus)?;
    println!(
        "wrote {} train / {} dev / {} test utterances and {} LM sequences to {}",
        corpus.train.utts.len(),
        corpus.dev.utts.len(),
        corpus.test.utts.len(),
        corpus.lm.len(),
        out.display()
    );
    Ok(())
}

struct DataMeta {
    n_chars: usize,
    d_feat: usize,
}

fn read_meta(data_dir: &Path) -> CliResult<DataMeta> {
    let meta = KvConfig::read(&data_dir.join(META_FILE))?;
    let n_chars = meta
        .get("vocab_size")?
        .ok_or_else(|| CliError::Runtime(Error::Config("meta.cfg lacks vocab_size".into())))?;
    let d_feat = meta
        .get("d_feat")?
        .ok_or_else(|| CliError::Runtime(Error::Config("meta.cfg lacks d_feat".into())))?;
    Ok(DataMeta { n_chars, d_feat })
}

fn load_split(data_dir: &Path, split: &str, n_chars: usize) -> CliResult<Vec<Utterance>> {
    let m = Manifest::read(data_dir.join(format!("{split}.tsv")))?;
    Ok(m.load_utterances(data_dir, n_chars)?)
}

fn train_config(cfg: &KvConfig) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        lambda_ctc: get(cfg, "lambda_ctc", d.lambda_ctc)?,
        warmup_steps: get(cfg, "warmup_steps", d.warmup_steps)?,
        peak_lr: get(cfg, "peak_lr", d.peak_lr)?,
        warm_phase_updates: get(cfg, "warm_phase_updates", d.warm_phase_updates)?,
        max_epochs: get(cfg, "max_epochs", d.max_epochs)?,
        patience: get(cfg, "patience", d.patience)?,
        avg_last_k: get(cfg, "avg_last_k", d.avg_last_k)?,
        batch_size: get(cfg, "batch_size", d.batch_size)?,
        seed: get(cfg, "seed", d.seed)?,
        label_smoothing: get(cfg, "label_smoothing", d.label_smoothing)?,
        grad_clip: get(cfg, "grad_clip", d.grad_clip)?,
    };
    validated(tc.validate())?;
    Ok(tc)
}

/// Toy architecture with any keys in `cfg` applied on top.
fn model_config(cfg: &KvConfig, n_chars: usize, d_feat: usize) -> CliResult<ModelConfig> {
    let mut mc = ModelConfig::toy(n_chars);
    mc.d_feat = d_feat;
    mc.d_model = get(cfg, "d_model", mc.d_model)?;
    mc.n_heads = get(cfg, "n_heads", mc.n_heads)?;
    mc.d_ff = get(cfg, "d_ff", mc.d_ff)?;
    mc.encoder_layers = get(cfg, "encoder_layers", mc.encoder_layers)?;
    mc.max_frames = get(cfg, "max_frames", mc.max_frames)?;
    mc.max_target_len = get(cfg, "max_target_len", mc.max_target_len)?;
    mc.dropout = get(cfg, "dropout", mc.dropout)?;
    let channels = get(cfg, "conv_channels", mc.conv[0].channels)?;
    mc.conv = mc.conv.iter().map(|c| ConvSpec { channels, ..*c }).collect();
    let n_self = get(cfg, "n_self", mc.decoder.n_self())?;
    mc.decoder = match cfg.get_str("decoder").unwrap_or("ocd") {
        "ocd" => DecoderKind::Ocd { n_self },
        "tcd" => DecoderKind::Tcd { n_self },
        "vanilla" => DecoderKind::Vanilla {
            n_layers: get(cfg, "n_layers", n_self + 1)?,
        },
        other => return Err(usage(format!("decoder = {other:?}; expected ocd, tcd or vanilla"))),
    };
    if !(0.0..1.0).contains(&mc.dropout) {
        return Err(usage(format!("dropout {} outside [0,1)", mc.dropout)));
    }
    validated(mc.attention().map(|_| ()))?;
    Ok(mc)
}

fn model_config_text(mc: &ModelConfig) -> String {
    let mut kv = KvConfig::new();
    kv.set("n_chars", mc.n_chars.to_string());
    kv.set("d_feat", mc.d_feat.to_string());
    kv.set("d_model", mc.d_model.to_string());
    kv.set("n_heads", mc.n_heads.to_string());
    kv.set("d_ff", mc.d_ff.to_string());
    kv.set("encoder_layers", mc.encoder_layers.to_string());
    kv.set("conv_channels", mc.conv[0].channels.to_string());
    kv.set("decoder", mc.decoder.name());
    match mc.decoder {
        DecoderKind::Ocd { n_self } | DecoderKind::Tcd { n_self } => kv.set("n_self", n_self.to_string()),
        DecoderKind::Vanilla { n_layers } => kv.set("n_layers", n_layers.to_string()),
    }
    kv.set("max_frames", mc.max_frames.to_string());
    kv.set("max_target_len", mc.max_target_len.to_string());
    kv.set("dropout", mc.dropout.to_string());
    kv.to_text()
}

fn read_model_config(path: &Path) -> CliResult<ModelConfig> {
    let kv = KvConfig::read(path)?;
    let n_chars = kv
        .get("n_chars")?
        .ok_or_else(|| CliError::Runtime(Error::Config(format!("{} lacks n_chars", path.display()))))?;
    let d_feat = kv
        .get("d_feat")?
        .ok_or_else(|| CliError::Runtime(Error::Config(format!("{} lacks d_feat", path.display()))))?;
    model_config(&kv, n_chars, d_feat).map_err(|e| match e {
        CliError::Usage(msg) => CliError::Runtime(Error::Config(msg)),
        other => other,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn lm_policy(cfg: &KvConfig) -> CliResult<LmGroupPolicy> {
    match cfg.get_str("lm_policy").unwrap_or("frozen") {
        "frozen" => Ok(LmGroupPolicy::Frozen),
        "all" => Ok(LmGroupPolicy::All),
        s => match s.strip_prefix("last:").map(str::parse::<usize>) {
            Some(Ok(k)) => Ok(LmGroupPolicy::UnfreezeLast(k)),
            _ => Err(usage(format!("lm_policy = {s:?}; expected frozen, all or last:K"))),
        },
    }
}

fn pretrain(cfg: &KvConfig) -> CliResult<()> {
    let data_dir = required(cfg, "data_dir")?;
    let out = required(cfg, "out_dir")?;
    let meta = read_meta(&data_dir)?;
    let mc = model_config(cfg, meta.n_chars, meta.d_feat)?;
    let tc = train_config(cfg)?;
    let dev_fraction: f64 = get(cfg, "dev_fraction", 0.1)?;
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(usage(format!("dev_fraction {dev_fraction} outside (0,1)")));
    }
    let lm = validated_lm(&mc)?;
    let seqs = read_token_lines(&data_dir.join(LM_FILE))?;
    let n_dev = ((seqs.len() as f64 * dev_fraction).round() as usize).clamp(1, seqs.len().saturating_sub(1));
    let (train_seqs, dev_seqs) = seqs.split_at(seqs.len() - n_dev);

    create_dir(&out)?;
    let mut log = Tee::create(&out.join("lm_train.log"))?;
    let outcome = pretrain_lm(&lm, train_seqs, dev_seqs, &tc, &mut log)?;
    log.flush().map_err(|e| io_err(&out, e))?;
    outcome.params.to_checkpoint("").save(out.join("lm_full.pfc"))?;
    outcome.donor.save(out.join("lm_donor.pfc"))?;
    write_text(&out.join("lm.cfg"), &model_config_text(&mc))?;

    let test_text: Vec<Vec<usize>> = Manifest::read(data_dir.join("test.tsv"))?
        .entries
        .into_iter()
        .map(|e| e.tokens)
        .collect();
    let ppl = perplexity(&lm, &outcome.params, &test_text)?;
    let uni = unigram_perplexity(train_seqs, &test_text, meta.n_chars)?;
    println!("test_ppl {ppl:.4} unigram_ppl {uni:.4}");
    Ok(())
}

fn validated_lm(mc: &ModelConfig) -> CliResult<preformer::model::CausalLm> {
    lm_for(mc).map_err(|e| match e {
        Error::InvalidArgument(msg) => usage(msg),
        other => CliError::Runtime(other),
    })
}

fn train(cfg: &KvConfig) -> CliResult<()> {
    let data_dir = required(cfg, "data_dir")?;
    let out = required(cfg, "out_dir")?;
    let meta = read_meta(&data_dir)?;
    let mc = model_config(cfg, meta.n_chars, meta.d_feat)?;
    let tc = train_config(cfg)?;
    let mode = match cfg.get_str("mode").unwrap_or("joint") {
        "joint" => TrainMode::Joint,
        "ctc_pretrain" => TrainMode::EncoderCtcPretrain,
        other => return Err(usage(format!("mode = {other:?}; expected joint or ctc_pretrain"))),
    };
    let model = Preformer::new(mc.clone())?;
    let mut params = model.init(tc.seed)?;
    let mut policy = FreezePolicy {
        lm_group: lm_policy(cfg)?,
        ..FreezePolicy::default()
    };
    match cfg.get_str("lm_init") {
        Some(p) => model.init_from_lm(&mut params, &Checkpoint::load(p)?)?,
        None => policy.lm_initialized = false,
    }
    if let Some(p) = cfg.get_str("encoder_init") {
        model.init_encoder_from(&mut params, &Checkpoint::load(p)?)?;
    }

    let mut train_utts = load_split(&data_dir, "train", meta.n_chars)?;
    let offset: usize = get(cfg, "train_offset", 0)?;
    if offset >= train_utts.len() {
        return Err(usage(format!("train_offset {offset} leaves no training utterances")));
    }
    train_utts.drain(..offset);
    if let Some(n) = cfg.get::<usize>("train_limit")? {
        train_utts.truncate(n);
    }
    let dev_utts = load_split(&data_dir, "dev", meta.n_chars)?;

    create_dir(&out)?;
    write_text(&out.join("model.cfg"), &model_config_text(&mc))?;
    params.to_checkpoint("").save(out.join("init.pfc"))?;
    let mut log = Tee::create(&out.join("train.log"))?;
    let mut trainer = Trainer::new(&model, tc, mode, policy)?;
    let outcome = trainer.train_epochs(&mut params, &train_utts, &dev_utts, Some(&out), &mut log)?;
    let epochs: Vec<String> = outcome.averaged_epochs.iter().map(|e| e.to_string()).collect();
    writeln!(
        log,
        "done updates {} best_epoch {} stopped_early {} averaged {}",
        outcome.updates,
        outcome.best_epoch,
        outcome.stopped_early,
        epochs.join(",")
    )
    .map_err(|e| io_err(&out, e))?;
    log.flush().map_err(|e| io_err(&out, e))?;
    params.to_checkpoint("").save(out.join("final.pfc"))?;
    Ok(())
}

fn load_model(dir: &Path, cfg_name: &str, ckpt_name: &str) -> CliResult<(ModelConfig, ModelParams)> {
    let mc = read_model_config(&dir.join(cfg_name))?;
    let ckpt = Checkpoint::load(dir.join(ckpt_name))?;
    let mut params = ModelParams::new();
    for (path, t) in ckpt.iter() {
        params.insert(path, t.clone())?;
    }
    Ok((mc, params))
}

fn decode(cfg: &KvConfig) -> CliResult<()> {
    let model_dir = required(cfg, "model_dir")?;
    let data_dir = required(cfg, "data_dir")?;
    let split = cfg.get_str("split").unwrap_or("test");
    let d = DecodeConfig::default();
    let dc = DecodeConfig {
        mu: get(cfg, "mu", d.mu)?,
        lm_weight: get(cfg, "lm_weight", d.lm_weight)?,
        beam_size: get(cfg, "beam_size", d.beam_size)?,
        max_len_ratio: get(cfg, "max_len_ratio", d.max_len_ratio)?,
    };
    validated(dc.validate())?;

    let (mc, params) = load_model(&model_dir, "model.cfg", "final.pfc")?;
    let model = Preformer::new(mc)?;
    let lm = match cfg.get_str("lm_dir") {
        Some(dir) => {
            let (lc, lp) = load_model(Path::new(dir), "lm.cfg", "lm_full.pfc")?;
            Some((lm_for(&lc)?, lp))
        }
        None => None,
    };
    let utts = load_split(&data_dir, split, model.vocab().size() - 2)?;
    let result = decode_split(&model, &params, &utts, lm.as_ref().map(|(l, p)| (l, p)), &dc)?;

    let text: String = result.utts.iter().map(|u| u.line() + "\n").collect();
    match cfg.get_str("out") {
        Some(p) => write_text(Path::new(p), &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = cfg.get_str("ref_out") {
        let refs: String = utts
            .iter()
            .map(|u| format!("{}\t{}\n", u.utt_id, preformer::data::format_tokens(&u.tokens)))
            .collect();
        write_text(Path::new(p), &refs)?;
    }
    let unfinished = result.utts.iter().filter(|u| u.unfinished).count();
    if unfinished > 0 {
        eprintln!("warning: {unfinished} utterances ended without a finished hypothesis");
    }
    eprintln!("cer {:.4}", result.cer);
    Ok(())
}

/// `utt_id \t tokens [\t score]` lines keyed by id.
fn read_transcripts(path: &Path) -> CliResult<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| {
            CliError::Runtime(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            })
        };
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or("").to_string();
        let tokens = parse_tokens(fields.next().unwrap_or("")).map_err(parse_err)?;
        if !seen.insert(id.clone()) {
            return Err(parse_err(format!("duplicate utterance id {id}")));
        }
        out.push((id, tokens));
    }
    Ok(out)
}

fn eval_cer(files: &[String]) -> CliResult<()> {
    let [hyp, reference] = files else {
        return Err(usage("eval-cer takes exactly two files: HYP REF"));
    };
    let hyps: std::collections::HashMap<String, Vec<usize>> =
        read_transcripts(Path::new(hyp))?.into_iter().collect();
    let refs = read_transcripts(Path::new(reference))?;
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, r) in refs {
        let h = hyps
            .get(&id)
            .ok_or_else(|| CliError::Runtime(Error::InvalidArgument(format!("no hypothesis for {id}"))))?;
        pairs.push((h.clone(), r));
    }
    println!("{:.4}", corpus_cer(&pairs)?);
    Ok(())
}

fn avg_ckpt(cfg: &KvConfig, inputs: &[String]) -> CliResult<()> {
    let out = required(cfg, "out")?;
    let avg = average_checkpoint_files(inputs)?;
    avg.save(&out)?;
    println!("averaged {} checkpoints into {}", inputs.len(), out.display());
    Ok(())
}

fn grad_check(cfg: &KvConfig) -> CliResult<()> {
    let seed = get(cfg, "seed", 1u64)?;
    let h = get(cfg, "h", DEFAULT_H)?;
    let tol = get(cfg, "tol", DEFAULT_TOL)?;
    if !(h > 0.0 && tol > 0.0) {
        return Err(usage("h and tol must be positive"));
    }
    let entries = grad_suite(seed, h, tol)?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.report.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!e.report.passed());
        println!(
            "{:<24} checked {:>5} max_rel_err {:.3e} max_abs_err {:.3e} {verdict}",
            e.name, e.report.checked, e.report.max_rel_err, e.report.max_abs_err
        );
    }
    if failed > 0 {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "{failed} of {} gradient checks failed",
            entries.len()
        ))));
    }
    Ok(())
}

fn param_count(cfg: &KvConfig) -> CliResult<()> {
    let mc = match cfg.get_str("preset").unwrap_or("toy") {
        "toy" => {
            let n_chars = get(cfg, "n_chars", 16)?;
            let d_feat = get(cfg, "d_feat", 8)?;
            model_config(cfg, n_chars, d_feat)?
        }
        "full_preformer" => ModelConfig::full_scale_preformer(),
        "full_baseline" => ModelConfig::full_scale_baseline(),
        other => return Err(usage(format!("preset = {other:?}; expected toy, full_preformer or full_baseline"))),
    };
    if cfg.get_str("preset").is_some_and(|p| p != "toy") {
        let overridden: Vec<&str> = MODEL_KEYS.iter().chain(&["n_chars", "d_feat"]).copied().filter(|k| cfg.get_str(k).is_some()).collect();
        if !overridden.is_empty() {
            return Err(usage(format!("full-scale presets take no overrides (got {})", overridden.join(", "))));
        }
    }
    for (label, c) in [
        ("encoder_conv", Component::EncoderConv),
        ("encoder", Component::Encoder),
        ("decoder", Component::Decoder),
        ("ctc_head", Component::CtcHead),
        ("total", Component::Total),
    ] {
        println!("{label} {}", mc.param_count(c));
    }
    Ok(())
}
