//! Operator surface: file-based subcommands around the cloze-forge library.
//! Every artifact-producing command writes a manifest with the resolved
//! configuration and input digests, and all outputs land atomically.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cloze_forge::checkpoint::{
    config_fingerprint, from_bytes, to_bytes, Checkpoint,
};
use cloze_forge::cor::{CorConfig, CorModel, CorVariant};
use cloze_forge::data::{
    gen_center_sum, gen_markov, render_speech, Corpus, SpeechSet, SyntheticSpec,
    TokenMode, Utterance, Vocabulary, EOS, SOS,
};
use cloze_forge::decode::{decode, edit_distance};
use cloze_forge::probe::sensitivity_table;
use cloze_forge::s2s::{AcousticFeatures, S2SConfig, S2SModel};
use cloze_forge::tensor::{Precision, Tensor};
use cloze_forge::train::{
    cloze_accuracy, metrics_from_jsonl, metrics_to_jsonl, train_cor, train_student_lst,
    MetricRecord, StudentMode, TeacherSource, TrainConfig,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Exit code for numeric failures (NaN aborts); contract violations exit 1.
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser)]
#[command(name = "cloze-forge", version, about = "cloze model workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus or paired speech set.
    GenData(GenDataArgs),
    /// Train the cloze teacher (COR or UniCOR).
    TrainCor(TrainCorArgs),
    /// Cloze accuracy of a trained teacher on a corpus.
    EvalCloze(EvalClozeArgs),
    /// Sensitivity table and target-leak verdict for a teacher.
    ProbeLeak(ProbeLeakArgs),
    /// Train the seq2seq student (baseline / label smoothing / distillation).
    TrainStudent(TrainStudentArgs),
    /// Beam-decode a speech set with a trained student.
    Decode(DecodeArgs),
    /// Character error rate of a hypothesis file against references.
    Score(ScoreArgs),
    /// Merge run metrics into accuracy/CER/loss-curve CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key=value overrides, one per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// center_sum | markov | homophone_speech
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Tokens between the start and end symbols.
    #[arg(long, default_value_t = 9)]
    len: usize,
    /// Non-reserved token count (markov-family kinds).
    #[arg(long, default_value_t = 27)]
    tokens: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Homophone pairs as vocabulary indices, e.g. "3:8,4:10".
    #[arg(long, default_value = "")]
    pairs: String,
}

#[derive(Args)]
struct TrainCorArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// cor | unicor
    #[arg(long, default_value = "cor")]
    variant: String,
}

#[derive(Args)]
struct EvalClozeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct ProbeLeakArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model; omitted means a fresh random initialization.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Vocabulary size when probing a random initialization.
    #[arg(long, default_value_t = 13)]
    vocab_size: usize,
}

#[derive(Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long)]
    val_features: Option<PathBuf>,
    #[arg(long)]
    val_transcripts: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// baseline | label_smoothing | lst
    #[arg(long)]
    mode: String,
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directories holding metrics.jsonl (and optionally cloze.json).
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool_version: String,
    subcommand: String,
    seed: u64,
    config: BTreeMap<String, String>,
    input_digests: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Atomic write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_overrides(path: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {} is not key=value: {line:?}", i + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("config {k}={v}: {e}"))
}

fn apply_train_overrides(tc: &mut TrainConfig, ov: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in ov {
        match k.as_str() {
            "batch_size" => tc.batch_size = parse(k, v)?,
            "epochs" => tc.epochs = parse(k, v)?,
            "warmup_steps" => tc.warmup_steps = parse(k, v)?,
            "lr_scale" => tc.lr_scale = parse(k, v)?,
            "lambda" => tc.lambda = parse(k, v)?,
            "temperature" => tc.temperature = parse(k, v)?,
            "smoothing_eps" => tc.smoothing_eps = parse(k, v)?,
            "average_last_k" => tc.average_last_k = parse(k, v)?,
            "augment_token_fraction" => tc.augment_token_fraction = parse(k, v)?,
            "augment_sequence_fraction" => tc.augment_sequence_fraction = parse(k, v)?,
            "eval_cer" => tc.eval_cer = parse(k, v)?,
            _ => {} // model keys handled by the model-config appliers
        }
    }
    Ok(())
}

fn apply_cor_overrides(cfg: &mut CorConfig, ov: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in ov {
        match k.as_str() {
            "model_dim" => cfg.model_dim = parse(k, v)?,
            "head_count" => cfg.head_count = parse(k, v)?,
            "inner_dim" => cfg.inner_dim = parse(k, v)?,
            "stack_depth" => cfg.stack_depth = parse(k, v)?,
            "fusion_depth" => cfg.fusion_depth = parse(k, v)?,
            "max_len" => cfg.max_len = parse(k, v)?,
            _ => {}
        }
    }
    Ok(())
}

fn apply_s2s_overrides(cfg: &mut S2SConfig, ov: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in ov {
        match k.as_str() {
            "model_dim" => cfg.model_dim = parse(k, v)?,
            "head_count" => cfg.head_count = parse(k, v)?,
            "inner_dim" => cfg.inner_dim = parse(k, v)?,
            "encoder_depth" => cfg.encoder_depth = parse(k, v)?,
            "decoder_depth" => cfg.decoder_depth = parse(k, v)?,
            "max_decode_len" => cfg.max_decode_len = parse(k, v)?,
            "beam_width" => cfg.beam_width = parse(k, v)?,
            _ => {}
        }
    }
    Ok(())
}

fn manifest_config<T: Serialize>(resolved: &T, ov: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    if let Ok(serde_json::Value::Object(o)) = serde_json::to_value(resolved) {
        for (k, v) in o {
            map.insert(k, v.to_string());
        }
    }
    for (k, v) in ov {
        map.insert(format!("override.{k}"), v.clone());
    }
    map
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: &[&Path],
) -> Result<()> {
    let mut input_digests = BTreeMap::new();
    for p in inputs {
        input_digests.insert(p.display().to_string(), digest_file(p)?);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: subcommand.to_string(),
        seed,
        config,
        input_digests,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&out.join("manifest.json"), json.as_bytes())
}

// model persistence: <name>.corf holds parameters, <name>.corf.json the config

fn save_model<C: Serialize>(
    path: &Path,
    config: &C,
    named: &[(String, &Tensor)],
    step: u64,
) -> Result<()> {
    let fingerprint = config_fingerprint(config);
    let mut arrays = BTreeMap::new();
    for (n, t) in named {
        arrays.insert(n.clone(), (*t).clone());
    }
    let ckpt = Checkpoint {
        arrays,
        step,
        fingerprint,
    };
    write_atomic(path, &to_bytes(&ckpt, Precision::from_env()))?;
    let sidecar = path.with_extension("corf.json");
    write_atomic(&sidecar, serde_json::to_string_pretty(config)?.as_bytes())
}

fn load_checkpoint_with<C: serde::de::DeserializeOwned + Serialize>(
    path: &Path,
) -> Result<(C, Checkpoint)> {
    let sidecar = path.with_extension("corf.json");
    let cfg: C = serde_json::from_str(
        &std::fs::read_to_string(&sidecar)
            .with_context(|| format!("reading {}", sidecar.display()))?,
    )?;
    let ckpt = from_bytes(&std::fs::read(path)?)?;
    let expect = config_fingerprint(&cfg);
    if ckpt.fingerprint != expect {
        bail!(cloze_forge::Error::FingerprintMismatch {
            expected: expect,
            found: ckpt.fingerprint,
        });
    }
    Ok((cfg, ckpt))
}

fn load_cor_model(path: &Path) -> Result<CorModel> {
    let (cfg, ckpt): (CorConfig, Checkpoint) = load_checkpoint_with(path)?;
    let mut model = CorModel::init(&cfg, 0)?;
    for (name, t) in model.named_tensors_mut() {
        let src = ckpt
            .arrays
            .get(&name)
            .ok_or_else(|| anyhow!("model file missing array {name:?}"))?;
        if src.shape != t.shape {
            bail!("array {name:?} shape mismatch");
        }
        *t = src.clone();
    }
    Ok(model)
}

fn load_s2s_model(path: &Path) -> Result<S2SModel> {
    let (cfg, ckpt): (S2SConfig, Checkpoint) = load_checkpoint_with(path)?;
    let mut model = S2SModel::init(&cfg, 0)?;
    for (name, t) in model.named_tensors_mut() {
        let src = ckpt
            .arrays
            .get(&name)
            .ok_or_else(|| anyhow!("model file missing array {name:?}"))?;
        if src.shape != t.shape {
            bail!("array {name:?} shape mismatch");
        }
        *t = src.clone();
    }
    Ok(model)
}

// speech set persistence: features in the named-array container keyed by
// utterance id, transcripts in a TSV keyed the same way

#[derive(Serialize, serde::Deserialize)]
struct FeatureMeta {
    feat_dim: usize,
}

fn save_speech_set(dir: &Path, set: &SpeechSet, vocab: &Vocabulary) -> Result<()> {
    let mut arrays = BTreeMap::new();
    for utt in &set.utterances {
        arrays.insert(utt.id.clone(), utt.features.clone());
    }
    let meta = FeatureMeta {
        feat_dim: set.feat_dim,
    };
    let ckpt = Checkpoint {
        arrays,
        step: 0,
        fingerprint: config_fingerprint(&meta),
    };
    write_atomic(&dir.join("features.corf"), &to_bytes(&ckpt, Precision::from_env()))?;
    write_atomic(
        &dir.join("features.corf.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    let mut tsv = String::new();
    for utt in &set.utterances {
        let words: Vec<&str> = utt.tokens[1..utt.tokens.len() - 1]
            .iter()
            .map(|&t| vocab.token(t))
            .collect();
        tsv.push_str(&format!("{}\t{}\n", utt.id, words.join(" ")));
    }
    write_atomic(&dir.join("transcripts.tsv"), tsv.as_bytes())
}

fn read_tsv(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("line {} of {} has no tab", i + 1, path.display()))?;
        out.push((
            id.to_string(),
            rest.split_whitespace().map(String::from).collect(),
        ));
    }
    Ok(out)
}

fn load_speech_set(features: &Path, transcripts: &Path, vocab: &Vocabulary) -> Result<SpeechSet> {
    let (meta, ckpt): (FeatureMeta, Checkpoint) = load_checkpoint_with(features)?;
    let rows = read_tsv(transcripts)?;
    let mut utterances = Vec::with_capacity(rows.len());
    for (id, words) in rows {
        let feats = ckpt
            .arrays
            .get(&id)
            .ok_or_else(|| anyhow!("utterance {id:?} missing from features file"))?;
        let mut tokens = vec![SOS];
        for w in &words {
            tokens.push(vocab.id_or_unk(w));
        }
        tokens.push(EOS);
        utterances.push(Utterance {
            id,
            features: feats.clone(),
            tokens,
        });
    }
    Ok(SpeechSet {
        utterances,
        feat_dim: meta.feat_dim,
    })
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_lines(&std::fs::read_to_string(path)?)?)
}

fn corpus_text(corpus: &Corpus, vocab: &Vocabulary, mode: TokenMode) -> String {
    let mut text = String::new();
    for seq in &corpus.sequences {
        text.push_str(&vocab.decode_sentence(seq, mode));
        text.push('\n');
    }
    text
}

fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| anyhow!("pair {p:?} is not a:b"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let ov = read_overrides(a.common.config.as_ref())?;
    match a.kind.as_str() {
        "center_sum" => {
            let spec = SyntheticSpec::center_sum(a.count, a.len, a.common.seed);
            let corpus = gen_center_sum(&spec)?;
            let vocab = cloze_forge::data::digit_vocab();
            write_atomic(
                &out.join("corpus.txt"),
                corpus_text(&corpus, &vocab, TokenMode::Chars).as_bytes(),
            )?;
            write_atomic(&out.join("vocab.txt"), vocab.to_lines().as_bytes())?;
            write_manifest(out, "gen-data", a.common.seed, manifest_config(&spec, &ov), &[])?;
        }
        "markov" => {
            let mut spec = SyntheticSpec::homophone_speech(
                a.tokens,
                a.count,
                a.len,
                a.common.seed,
                a.sigma,
                parse_pairs(&a.pairs)?,
            );
            spec.kind = cloze_forge::data::SyntheticKind::Markov;
            let corpus = gen_markov(&spec)?;
            let vocab = cloze_forge::data::synthetic_vocab(a.tokens)?;
            write_atomic(
                &out.join("corpus.txt"),
                corpus_text(&corpus, &vocab, TokenMode::Chars).as_bytes(),
            )?;
            write_atomic(&out.join("vocab.txt"), vocab.to_lines().as_bytes())?;
            write_manifest(out, "gen-data", a.common.seed, manifest_config(&spec, &ov), &[])?;
        }
        "homophone_speech" => {
            let spec = SyntheticSpec::homophone_speech(
                a.tokens,
                a.count,
                a.len,
                a.common.seed,
                a.sigma,
                parse_pairs(&a.pairs)?,
            );
            let corpus = gen_markov(&spec)?;
            let vocab = cloze_forge::data::synthetic_vocab(a.tokens)?;
            let set = render_speech(&corpus, &spec)?;
            save_speech_set(out, &set, &vocab)?;
            write_atomic(
                &out.join("corpus.txt"),
                corpus_text(&corpus, &vocab, TokenMode::Chars).as_bytes(),
            )?;
            write_atomic(&out.join("vocab.txt"), vocab.to_lines().as_bytes())?;
            write_manifest(out, "gen-data", a.common.seed, manifest_config(&spec, &ov), &[])?;
        }
        k => bail!("unknown generator kind {k:?}"),
    }
    Ok(())
}

fn cmd_train_cor(a: &TrainCorArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let ov = read_overrides(a.common.config.as_ref())?;
    let vocab = load_vocab(&a.vocab)?;
    let variant = match a.variant.as_str() {
        "cor" => CorVariant::Cor,
        "unicor" => CorVariant::UniCor,
        v => bail!("unknown variant {v:?}"),
    };
    let mut cfg = CorConfig::desk(vocab.size(), variant);
    apply_cor_overrides(&mut cfg, &ov)?;
    let mut tc = TrainConfig::desk();
    tc.seed = a.common.seed;
    apply_train_overrides(&mut tc, &ov)?;

    let train_text = std::fs::read_to_string(&a.corpus)?;
    let train = Corpus::from_text(&train_text, &vocab, TokenMode::Chars, "train")?;
    let val = match &a.val {
        Some(p) => Some(Corpus::from_text(
            &std::fs::read_to_string(p)?,
            &vocab,
            TokenMode::Chars,
            "val",
        )?),
        None => None,
    };
    let outcome = train_cor(&train, val.as_ref(), &cfg, &tc)?;
    save_model(
        &out.join("model.corf"),
        &cfg,
        &outcome.model.named_tensors(),
        outcome.checkpoints.last().map_or(0, |c| c.step),
    )?;
    write_atomic(
        &out.join("metrics.jsonl"),
        metrics_to_jsonl(&outcome.metrics).as_bytes(),
    )?;
    let mut inputs: Vec<&Path> = vec![a.corpus.as_path(), a.vocab.as_path()];
    if let Some(p) = &a.val {
        inputs.push(p.as_path());
    }
    let mut config = manifest_config(&cfg, &ov);
    config.extend(manifest_config(&tc, &BTreeMap::new()));
    write_manifest(out, "train-cor", a.common.seed, config, &inputs)?;
    if outcome.diverged {
        bail!(cloze_forge::Error::NonFinite(
            "training diverged; last good checkpoint saved".into()
        ));
    }
    Ok(())
}

fn cmd_eval_cloze(a: &EvalClozeArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let vocab = load_vocab(&a.vocab)?;
    let model = load_cor_model(&a.model)?;
    let corpus = Corpus::from_text(
        &std::fs::read_to_string(&a.corpus)?,
        &vocab,
        TokenMode::Chars,
        "eval",
    )?;
    let report = cloze_accuracy(&model, &corpus)?;
    write_atomic(
        &out.join("cloze.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_manifest(
        out,
        "eval-cloze",
        a.common.seed,
        BTreeMap::new(),
        &[a.model.as_path(), a.corpus.as_path(), a.vocab.as_path()],
    )?;
    Ok(())
}

fn cmd_probe_leak(a: &ProbeLeakArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let model = match &a.model {
        Some(p) => load_cor_model(p)?,
        None => {
            let cfg = CorConfig::desk(a.vocab_size, CorVariant::Cor);
            CorModel::init(&cfg, a.common.seed)?
        }
    };
    let n = a.max_len.min(model.config.max_len - 1);
    let tokens: Vec<usize> = (0..n).map(|i| 3 + (i % (model.config.vocab_size - 3))).collect();
    let table = sensitivity_table(&model, &tokens, 2, a.common.seed)?;
    let mut csv = String::from("t,j,analytic,fd\n");
    for t in 1..=n {
        for j in 1..=n {
            csv.push_str(&format!(
                "{t},{j},{:e},{:e}\n",
                table.analytic_at(t - 1, j - 1),
                table.fd_at(t - 1, j - 1)
            ));
        }
    }
    write_atomic(&out.join("sensitivity.csv"), csv.as_bytes())?;
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &a.model {
        inputs.push(p.as_path());
    }
    write_manifest(out, "probe-leak", a.common.seed, BTreeMap::new(), &inputs)?;
    // verdict: the target entry (t, t+1) must carry no sensitivity
    for t in 1..n {
        let s = table.analytic_at(t - 1, t).max(table.fd_at(t - 1, t));
        if s > 1e-9 {
            bail!(cloze_forge::Error::NonFinite(format!(
                "target leak at t={t}: sensitivity {s:e}"
            )));
        }
    }
    Ok(())
}

fn cmd_train_student(a: &TrainStudentArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let ov = read_overrides(a.common.config.as_ref())?;
    let vocab = load_vocab(&a.vocab)?;
    let train = load_speech_set(&a.features, &a.transcripts, &vocab)?;
    let val = match (&a.val_features, &a.val_transcripts) {
        (Some(f), Some(t)) => Some(load_speech_set(f, t, &vocab)?),
        (None, None) => None,
        _ => bail!("validation needs both --val-features and --val-transcripts"),
    };
    let mode = match a.mode.as_str() {
        "baseline" => StudentMode::Baseline,
        "label_smoothing" => StudentMode::LabelSmoothing,
        "lst" => StudentMode::Lst,
        m => bail!("unknown mode {m:?}"),
    };
    let teacher_model = match &a.teacher {
        Some(p) => Some(load_cor_model(p)?),
        None => None,
    };
    let teacher = match &teacher_model {
        Some(m) => TeacherSource::Model(m),
        None => TeacherSource::None,
    };
    let mut cfg = S2SConfig::desk(vocab.size(), train.feat_dim);
    apply_s2s_overrides(&mut cfg, &ov)?;
    let mut tc = TrainConfig::desk();
    tc.seed = a.common.seed;
    apply_train_overrides(&mut tc, &ov)?;
    let outcome = train_student_lst(&train, val.as_ref(), teacher, mode, &cfg, &tc)?;
    save_model(
        &out.join("model.corf"),
        &cfg,
        &outcome.model.named_tensors(),
        outcome.checkpoints.last().map_or(0, |c| c.step),
    )?;
    write_atomic(
        &out.join("metrics.jsonl"),
        metrics_to_jsonl(&outcome.metrics).as_bytes(),
    )?;
    let mut inputs: Vec<&Path> = vec![a.features.as_path(), a.transcripts.as_path(), a.vocab.as_path()];
    for p in [&a.val_features, &a.val_transcripts, &a.teacher].into_iter().flatten() {
        inputs.push(p.as_path());
    }
    let mut config = manifest_config(&cfg, &ov);
    config.extend(manifest_config(&tc, &BTreeMap::new()));
    config.insert("mode".into(), a.mode.clone());
    write_manifest(out, "train-student", a.common.seed, config, &inputs)?;
    if outcome.diverged {
        bail!(cloze_forge::Error::NonFinite(
            "training diverged; last good checkpoint saved".into()
        ));
    }
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let vocab = load_vocab(&a.vocab)?;
    let model = load_s2s_model(&a.model)?;
    let (_, ckpt): (FeatureMeta, Checkpoint) = load_checkpoint_with(&a.features)?;
    let mut tsv = String::new();
    for (id, feats) in &ckpt.arrays {
        let features = AcousticFeatures::new(feats.clone())?;
        let hyp = decode(&features, &model, a.beam)?;
        let words: Vec<&str> = hyp
            .tokens
            .iter()
            .filter(|&&t| t != SOS && t != EOS)
            .map(|&t| vocab.token(t))
            .collect();
        tsv.push_str(&format!("{id}\t{}\n", words.join(" ")));
    }
    write_atomic(&out.join("hyps.tsv"), tsv.as_bytes())?;
    write_manifest(
        out,
        "decode",
        a.common.seed,
        BTreeMap::new(),
        &[a.model.as_path(), a.features.as_path(), a.vocab.as_path()],
    )?;
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let refs = read_tsv(&a.reference)?;
    let hyps: BTreeMap<String, Vec<String>> = read_tsv(&a.hyp)?.into_iter().collect();
    if refs.is_empty() {
        bail!(cloze_forge::Error::Empty("no references to score".into()));
    }
    let mut total = 0.0;
    let mut per_utt = BTreeMap::new();
    for (id, r) in &refs {
        if r.is_empty() {
            bail!(cloze_forge::Error::Empty(format!("empty reference for {id}")));
        }
        let h = hyps
            .get(id)
            .ok_or_else(|| anyhow!("hypothesis missing for {id:?}"))?;
        // map token strings to dense ids for the distance kernel
        let mut interner: BTreeMap<String, usize> = BTreeMap::new();
        let map = |w: &[String], interner: &mut BTreeMap<String, usize>| -> Vec<usize> {
            w.iter()
                .map(|s| {
                    let next = interner.len();
                    *interner.entry(s.clone()).or_insert(next)
                })
                .collect()
        };
        let ri = map(r, &mut interner);
        let hi = map(h, &mut interner);
        let c = edit_distance(&ri, &hi) as f64 / ri.len() as f64;
        per_utt.insert(id.clone(), c);
        total += c;
    }
    #[derive(Serialize)]
    struct ScoreReport {
        cer: f64,
        utterances: usize,
        per_utt: BTreeMap<String, f64>,
    }
    let report = ScoreReport {
        cer: total / refs.len() as f64,
        utterances: refs.len(),
        per_utt,
    };
    write_atomic(
        &out.join("score.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_manifest(
        out,
        "score",
        a.common.seed,
        BTreeMap::new(),
        &[a.reference.as_path(), a.hyp.as_path()],
    )?;
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    if a.runs.is_empty() {
        bail!(cloze_forge::Error::Empty("no runs to report".into()));
    }
    let mut all: Vec<(String, Vec<MetricRecord>)> = Vec::new();
    for dir in &a.runs {
        let path = dir.join("metrics.jsonl");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let metrics = metrics_from_jsonl(&text)?;
        if metrics.is_empty() {
            bail!(cloze_forge::Error::Empty(format!(
                "empty metrics stream in {}",
                dir.display()
            )));
        }
        all.push((run_label(dir), metrics));
    }

    // loss curves: validation CE per step per run
    let mut curves = String::from("run,step,epoch,val_ce\n");
    for (label, metrics) in &all {
        for m in metrics.iter().filter(|m| m.split == "val" && m.cer.is_none()) {
            curves.push_str(&format!("{label},{},{},{}\n", m.step, m.epoch, m.loss_ce));
        }
    }
    write_atomic(&out.join("loss_curves.csv"), curves.as_bytes())?;

    // accuracy table: final validation cloze accuracy per run
    let mut acc = String::from("run,cloze_acc\n");
    for (label, metrics) in &all {
        if let Some(m) = metrics.iter().rev().find(|m| m.cloze_acc.is_some()) {
            acc.push_str(&format!("{label},{}\n", m.cloze_acc.unwrap()));
        }
    }
    write_atomic(&out.join("accuracy.csv"), acc.as_bytes())?;

    // CER table: final CER per run, with mean and range across runs
    let mut cer_rows: Vec<(String, f64)> = Vec::new();
    for (label, metrics) in &all {
        if let Some(m) = metrics.iter().rev().find(|m| m.cer.is_some()) {
            cer_rows.push((label.clone(), m.cer.unwrap()));
        }
    }
    let mut cer_csv = String::from("run,cer\n");
    for (label, c) in &cer_rows {
        cer_csv.push_str(&format!("{label},{c}\n"));
    }
    if !cer_rows.is_empty() {
        let vals: Vec<f64> = cer_rows.iter().map(|(_, c)| *c).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        cer_csv.push_str(&format!("mean,{mean}\nrange,{}\n", hi - lo));
    }
    write_atomic(&out.join("cer.csv"), cer_csv.as_bytes())?;
    let inputs: Vec<PathBuf> = a.runs.iter().map(|d| d.join("metrics.jsonl")).collect();
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out, "report", a.common.seed, BTreeMap::new(), &input_refs)?;
    Ok(())
}

/// Entry point shared by the binary and in-process tests. Returns the
/// process exit code: 0 success, 1 contract violation or usage error,
/// 2 numeric failure.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainCor(a) => cmd_train_cor(a),
        Cmd::EvalCloze(a) => cmd_eval_cloze(a),
        Cmd::ProbeLeak(a) => cmd_probe_leak(a),
        Cmd::TrainStudent(a) => cmd_train_student(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .downcast_ref::<cloze_forge::Error>()
                .is_some_and(|err| matches!(err, cloze_forge::Error::NonFinite(_)));
            if numeric {
                EXIT_NUMERIC
            } else {
                1
            }
        }
    }
}
