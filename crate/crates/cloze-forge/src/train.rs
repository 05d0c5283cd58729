//! Shared optimization machinery: the transformer learning-rate schedule,
//! Adam, deterministic batched training loops for the cloze teacher and the
//! seq2seq student, per-epoch checkpointing with last-k averaging, cloze
//! accuracy scoring, and JSON-lines metrics.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{config_fingerprint, Checkpoint, MOMENT_PREFIX};
use crate::cor::{
    argmax_row, cor_forward, cor_forward_on_tape, teacher_distributions, CorConfig, CorModel,
    TeacherOutput,
};
use crate::data::{augment_replace, Corpus, SpeechSet};
use crate::decode::{cer, decode};
use crate::error::{Error, Result};
use crate::loss::{label_smoothing_targets, mixed_targets, soft_ce_on_tape};
use crate::s2s::{s2s_forward_on_tape, AcousticFeatures, S2SConfig, S2SModel};
use crate::tensor::Tensor;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    /// Multiplier on the schedule's rate.
    pub lr_scale: f64,
    /// Hard-label weight in the distillation loss.
    pub lambda: f64,
    /// Teacher softmax temperature.
    pub temperature: f64,
    /// Epsilon for the label-smoothing student mode.
    pub smoothing_eps: f64,
    pub seed: u64,
    /// Checkpoints are taken once per epoch; the final model averages this
    /// many of the most recent ones.
    pub average_last_k: usize,
    pub augment_token_fraction: f64,
    pub augment_sequence_fraction: f64,
    /// Decode the validation set after training and record CER.
    pub eval_cer: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 4,
            warmup_steps: 400,
            lr_scale: 1.0,
            lambda: 0.9,
            temperature: 5.0,
            smoothing_eps: 0.1,
            seed: 0,
            average_last_k: 7,
            augment_token_fraction: 0.15,
            augment_sequence_fraction: 0.20,
            eval_cer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 || self.warmup_steps < 1 {
            return Err(Error::Contract("batch/epochs/warmup must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Contract("lambda outside [0,1]".into()));
        }
        if self.temperature < 1.0 {
            return Err(Error::Contract("temperature must be >= 1".into()));
        }
        if self.average_last_k < 1 {
            return Err(Error::Contract("average_last_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// rate = D^{-0.5} * min(step^{-0.5}, step * warmup^{-1.5}); peaks at
/// step = warmup where both branches meet.
pub fn lr_schedule(step: usize, model_dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("schedule is defined for step >= 1".into()));
    }
    if warmup == 0 || model_dim == 0 {
        return Err(Error::Contract("warmup and model_dim must be >= 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// First/second moment estimates per named array.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update over aligned named parameters. Rejects
/// non-finite gradients before touching any parameter.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    step: usize,
    rate: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch("param/grad array count".into()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(Error::ShapeMismatch(format!("grad length for {name}")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for ((name, p), g) in params.iter_mut().zip(grads) {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= rate * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One metric line; optional fields stay absent from the JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub loss_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_lst: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloze_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
}

pub fn metrics_to_jsonl(metrics: &[MetricRecord]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metric serializes"));
        out.push('\n');
    }
    out
}

pub fn metrics_from_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

fn snapshot(
    named: &[(String, &Tensor)],
    state: &AdamState,
    step: u64,
    fingerprint: u64,
) -> Checkpoint {
    let mut arrays = BTreeMap::new();
    for (name, t) in named {
        arrays.insert(name.clone(), (*t).clone());
        if let (Some(m), Some(v)) = (state.m.get(name), state.v.get(name)) {
            arrays.insert(
                format!("{MOMENT_PREFIX}m.{name}"),
                Tensor::new(t.shape.clone(), m.clone()),
            );
            arrays.insert(
                format!("{MOMENT_PREFIX}v.{name}"),
                Tensor::new(t.shape.clone(), v.clone()),
            );
        }
    }
    Checkpoint {
        arrays,
        step,
        fingerprint,
    }
}

fn restore(named: &mut [(String, &mut Tensor)], ckpt: &Checkpoint) -> Result<()> {
    for (name, t) in named.iter_mut() {
        let src = ckpt
            .arrays
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint missing array {name:?}")))?;
        if src.shape != t.shape {
            return Err(Error::ShapeMismatch(format!("array {name:?} shape")));
        }
        **t = src.clone();
    }
    Ok(())
}

/// Elementwise mean of the parameter arrays; optimizer moments are dropped.
/// All inputs must share one config fingerprint.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Empty("no checkpoints to average".into()))?;
    let names: Vec<String> = first.param_names().cloned().collect();
    for c in checkpoints {
        if c.fingerprint != first.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: first.fingerprint,
                found: c.fingerprint,
            });
        }
        let cn: Vec<&String> = c.param_names().collect();
        if cn.len() != names.len() {
            return Err(Error::Format("checkpoints disagree on array names".into()));
        }
    }
    let scale = 1.0 / checkpoints.len() as f64;
    let mut arrays = BTreeMap::new();
    for name in &names {
        let shape = first.arrays[name].shape.clone();
        let mut acc = vec![0.0; first.arrays[name].data.len()];
        for c in checkpoints {
            let t = c
                .arrays
                .get(name)
                .ok_or_else(|| Error::Format(format!("array {name:?} missing")))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch(format!("array {name:?} shape")));
            }
            for (a, &b) in acc.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
        arrays.insert(name.clone(), Tensor::new(shape, acc));
    }
    Ok(Checkpoint {
        arrays,
        step: checkpoints.last().unwrap().step,
        fingerprint: first.fingerprint,
    })
}

/// Position class of target index `i` (0-based into x_2..x_T) within a
/// framed sequence of total length `seq_len`: interior positions alternate
/// odd/even (1-based interior numbering), the final target is the end symbol.
pub fn target_class(seq_len: usize, i: usize) -> &'static str {
    if i + 2 == seq_len {
        "end"
    } else if (i + 1).is_multiple_of(2) {
        "interior_even"
    } else {
        "interior_odd"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClozeReport {
    /// M: correctly predicted targets.
    pub correct: usize,
    /// N: all targets.
    pub total: usize,
    /// M / N.
    pub acc: f64,
    /// class -> (correct, total, acc)
    pub per_class: BTreeMap<String, (usize, usize, f64)>,
}

/// Pure tally over per-sequence argmax predictions vs targets, for the
/// accuracy definition M/N independent of any model.
pub fn tally_cloze(
    predictions: &[Vec<usize>],
    targets: &[Vec<usize>],
    seq_lens: &[usize],
) -> Result<ClozeReport> {
    if predictions.len() != targets.len() || predictions.len() != seq_lens.len() {
        return Err(Error::ShapeMismatch("prediction/target sequence counts".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((p, t), &n) in predictions.iter().zip(targets).zip(seq_lens) {
        if p.len() != t.len() || t.len() + 1 != n {
            return Err(Error::ShapeMismatch("target count vs sequence length".into()));
        }
        for i in 0..t.len() {
            let class = target_class(n, i);
            let e = per.entry(class.to_string()).or_insert((0, 0));
            e.1 += 1;
            total += 1;
            if p[i] == t[i] {
                e.0 += 1;
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("no targets to score".into()));
    }
    Ok(ClozeReport {
        correct,
        total,
        acc: correct as f64 / total as f64,
        per_class: per
            .into_iter()
            .map(|(k, (c, n))| (k, (c, n, c as f64 / n as f64)))
            .collect(),
    })
}

/// Cloze accuracy of a model over a framed corpus.
pub fn cloze_accuracy(model: &CorModel, corpus: &Corpus) -> Result<ClozeReport> {
    let mut predictions = Vec::with_capacity(corpus.len());
    let mut targets = Vec::with_capacity(corpus.len());
    let mut lens = Vec::with_capacity(corpus.len());
    for seq in &corpus.sequences {
        let input = &seq[..seq.len() - 1];
        let logits = cor_forward(input, model)?;
        predictions.push((0..logits.rows()).map(|r| argmax_row(logits.row(r))).collect());
        targets.push(seq[1..].to_vec());
        lens.push(seq.len());
    }
    tally_cloze(&predictions, &targets, &lens)
}

#[derive(Debug)]
pub struct TrainOutcome<M> {
    /// Final model: the average of the last k epoch checkpoints (or the last
    /// good state after a divergence abort).
    pub model: M,
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRecord>,
    pub diverged: bool,
    /// Validation CER of the final model, when requested.
    pub final_cer: Option<f64>,
}

fn accumulate_grads(acc: &mut [Vec<f64>], tape: &Tape, flat: &[Var]) -> Result<()> {
    for (dst, &var) in acc.iter_mut().zip(flat) {
        let src = tape.grad(var);
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    Ok(())
}

fn one_hot_rows(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), k]);
    for (r, &l) in labels.iter().enumerate() {
        t.data[r * k + l] = 1.0;
    }
    t
}

/// Cross-entropy teacher training of COR/UniCOR: mean CE over targets
/// x_2..x_T, per-epoch validation with cloze accuracy, per-epoch checkpoints
/// averaged into the final model. A NaN loss aborts with the last good state.
pub fn train_cor(
    train: &Corpus,
    val: Option<&Corpus>,
    config: &CorConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome<CorModel>> {
    config.validate()?;
    tc.validate()?;
    train.validate(config.vocab_size)?;
    if let Some(v) = val {
        v.validate(config.vocab_size)?;
    }
    let mut model = CorModel::init(config, tc.seed)?;
    let fingerprint = config_fingerprint(config);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x7261696e));
    let k = config.vocab_size;
    let mut metrics = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut last_good = snapshot(&model.named_tensors(), &state, 0, fingerprint);
    let mut step = 0usize;
    let mut diverged = false;

    'epochs: for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(tc.batch_size) {
            step += 1;
            let rate = tc.lr_scale * lr_schedule(step, config.model_dim, tc.warmup_steps)?;
            let originals: Vec<&Vec<usize>> =
                batch_ids.iter().map(|&i| &train.sequences[i]).collect();
            let owned: Vec<Vec<usize>> = originals.iter().map(|s| (*s).clone()).collect();
            let inputs = augment_replace(
                &owned,
                tc.augment_token_fraction,
                tc.augment_sequence_fraction,
                k,
                &mut rng,
            )?;
            let named = model.named_tensors();
            let mut grads: Vec<Vec<f64>> =
                named.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            let mut batch_loss = 0.0;
            let mut batch_targets = 0usize;
            let mut ok = true;
            for (orig, aug) in originals.iter().zip(&inputs) {
                let input = &aug[..aug.len() - 1];
                let labels = &orig[1..];
                let mut tape = Tape::new();
                let vars = match cor_forward_on_tape(&mut tape, input, &model, None) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let loss = soft_ce_on_tape(
                    &mut tape,
                    vars.logits,
                    one_hot_rows(labels, k),
                    vec![1.0; labels.len()],
                );
                let lv = tape.value(loss).data[0];
                if !lv.is_finite() {
                    ok = false;
                    break;
                }
                tape.backward(loss);
                if accumulate_grads(&mut grads, &tape, &vars.flat).is_err() {
                    ok = false;
                    break;
                }
                batch_loss += lv;
                batch_targets += labels.len();
            }
            if ok {
                let inv = 1.0 / batch_targets as f64;
                for g in grads.iter_mut() {
                    for x in g.iter_mut() {
                        *x *= inv;
                    }
                }
                let mut named_mut = model.named_tensors_mut();
                ok = adam_step(&mut named_mut, &grads, &mut state, step, rate).is_ok();
                if ok {
                    metrics.push(MetricRecord {
                        step,
                        epoch,
                        split: "train".into(),
                        lr: rate,
                        loss_ce: batch_loss / batch_targets as f64,
                        loss_lst: None,
                        cloze_acc: None,
                        cer: None,
                    });
                }
            }
            if !ok {
                diverged = true;
                restore(&mut model.named_tensors_mut(), &last_good)?;
                break 'epochs;
            }
        }
        let ckpt = snapshot(&model.named_tensors(), &state, step as u64, fingerprint);
        last_good = ckpt.clone();
        checkpoints.push(ckpt);
        if let Some(v) = val {
            let mut ce = 0.0;
            let mut n = 0usize;
            for seq in &v.sequences {
                let input = &seq[..seq.len() - 1];
                let logits = cor_forward(input, &model)?;
                ce += hard_ce(&logits, &seq[1..]);
                n += seq.len() - 1;
            }
            let report = cloze_accuracy(&model, v)?;
            metrics.push(MetricRecord {
                step,
                epoch,
                split: "val".into(),
                lr: 0.0,
                loss_ce: ce / n as f64,
                loss_lst: None,
                cloze_acc: Some(report.acc),
                cer: None,
            });
        }
    }

    if !diverged {
        let k_avg = tc.average_last_k.min(checkpoints.len());
        let avg = average_checkpoints(&checkpoints[checkpoints.len() - k_avg..])?;
        restore(&mut model.named_tensors_mut(), &avg)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoints,
        metrics,
        diverged,
        final_cer: None,
    })
}

fn hard_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = logits.cols();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    let _ = cols;
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentMode {
    Baseline,
    LabelSmoothing,
    Lst,
}

/// Soft-label source for the distillation mode.
pub enum TeacherSource<'a> {
    None,
    Model(&'a CorModel),
    /// One-hot on the ground truth; a degenerate oracle used for identities.
    Oracle,
}

/// Mean validation CER of greedy/beam decoding over a speech set.
pub fn speech_set_cer(model: &S2SModel, set: &SpeechSet, beam_width: usize) -> Result<f64> {
    if set.utterances.is_empty() {
        return Err(Error::Empty("no utterances to score".into()));
    }
    let mut total = 0.0;
    for utt in &set.utterances {
        let feats = AcousticFeatures::new(utt.features.clone())?;
        let hyp = decode(&feats, model, beam_width)?;
        total += cer(&utt.tokens, &hyp.tokens)?;
    }
    Ok(total / set.utterances.len() as f64)
}

/// Student training under one of three objectives: plain CE (baseline),
/// uniformly smoothed CE, or the teacher-mixed distillation loss. Teacher
/// rows come from the ground-truth transcript once per utterance, with no
/// gradient into the teacher; validation always scores plain CE.
pub fn train_student_lst(
    train: &SpeechSet,
    val: Option<&SpeechSet>,
    teacher: TeacherSource,
    mode: StudentMode,
    config: &S2SConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome<S2SModel>> {
    config.validate()?;
    tc.validate()?;
    let teacher_present = !matches!(teacher, TeacherSource::None);
    if (mode == StudentMode::Lst) != teacher_present {
        return Err(Error::Contract(
            "distillation requires a teacher; other modes reject one".into(),
        ));
    }
    if let TeacherSource::Model(t) = &teacher {
        if t.config.vocab_size != config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "teacher K={} vs student K={}",
                t.config.vocab_size, config.vocab_size
            )));
        }
    }
    if train.utterances.is_empty() {
        return Err(Error::Empty("no training utterances".into()));
    }
    if train.feat_dim != config.feat_dim {
        return Err(Error::ShapeMismatch("feature dimension vs config".into()));
    }

    let mut model = S2SModel::init(config, tc.seed)?;
    let fingerprint = config_fingerprint(config);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x7374756e));
    let k = config.vocab_size;
    let mut metrics = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut last_good = snapshot(&model.named_tensors(), &state, 0, fingerprint);
    let mut step = 0usize;
    let mut diverged = false;

    'epochs: for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.utterances.len()).collect();
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(tc.batch_size) {
            step += 1;
            let rate = tc.lr_scale * lr_schedule(step, config.model_dim, tc.warmup_steps)?;
            let transcripts: Vec<Vec<usize>> = batch_ids
                .iter()
                .map(|&i| train.utterances[i].tokens.clone())
                .collect();
            let aug_inputs = augment_replace(
                &transcripts,
                tc.augment_token_fraction,
                tc.augment_sequence_fraction,
                k,
                &mut rng,
            )?;
            let named = model.named_tensors();
            let mut grads: Vec<Vec<f64>> =
                named.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            let mut batch_lst = 0.0;
            let mut batch_ce = 0.0;
            let mut batch_targets = 0usize;
            let mut ok = true;
            for (b, &utt_id) in batch_ids.iter().enumerate() {
                let utt = &train.utterances[utt_id];
                let transcript = &transcripts[b];
                let prefix = &aug_inputs[b][..aug_inputs[b].len() - 1];
                let labels = &transcript[1..];
                let feats = AcousticFeatures::new(utt.features.clone())?;
                let targets = match mode {
                    StudentMode::Baseline => label_smoothing_targets(labels, k, 0.0)?.rows,
                    StudentMode::LabelSmoothing => {
                        label_smoothing_targets(labels, k, tc.smoothing_eps)?.rows
                    }
                    StudentMode::Lst => {
                        let t_rows = match &teacher {
                            TeacherSource::Model(t) => {
                                let input = &transcript[..transcript.len() - 1];
                                teacher_distributions(input, t, tc.temperature)?
                            }
                            TeacherSource::Oracle => TeacherOutput {
                                probs: one_hot_rows(labels, k),
                            },
                            TeacherSource::None => unreachable!("checked above"),
                        };
                        // index audit: one teacher row per decoder target
                        if t_rows.probs.rows() != labels.len() {
                            return Err(Error::ShapeMismatch(format!(
                                "teacher rows {} vs targets {}",
                                t_rows.probs.rows(),
                                labels.len()
                            )));
                        }
                        mixed_targets(labels, &t_rows, tc.lambda)?
                    }
                };
                let mut tape = Tape::new();
                let vars = match s2s_forward_on_tape(&mut tape, &feats, prefix, &model) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let loss = soft_ce_on_tape(&mut tape, vars.logits, targets, vec![1.0; labels.len()]);
                let lv = tape.value(loss).data[0];
                if !lv.is_finite() {
                    ok = false;
                    break;
                }
                batch_ce += hard_ce(tape.value(vars.logits), labels);
                tape.backward(loss);
                if accumulate_grads(&mut grads, &tape, &vars.flat).is_err() {
                    ok = false;
                    break;
                }
                batch_lst += lv;
                batch_targets += labels.len();
            }
            if ok {
                let inv = 1.0 / batch_targets as f64;
                for g in grads.iter_mut() {
                    for x in g.iter_mut() {
                        *x *= inv;
                    }
                }
                let mut named_mut = model.named_tensors_mut();
                ok = adam_step(&mut named_mut, &grads, &mut state, step, rate).is_ok();
                if ok {
                    metrics.push(MetricRecord {
                        step,
                        epoch,
                        split: "train".into(),
                        lr: rate,
                        loss_ce: batch_ce / batch_targets as f64,
                        loss_lst: Some(batch_lst / batch_targets as f64),
                        cloze_acc: None,
                        cer: None,
                    });
                }
            }
            if !ok {
                diverged = true;
                restore(&mut model.named_tensors_mut(), &last_good)?;
                break 'epochs;
            }
        }
        let ckpt = snapshot(&model.named_tensors(), &state, step as u64, fingerprint);
        last_good = ckpt.clone();
        checkpoints.push(ckpt);
        if let Some(v) = val {
            let mut ce = 0.0;
            let mut n = 0usize;
            for utt in &v.utterances {
                let feats = AcousticFeatures::new(utt.features.clone())?;
                let prefix = &utt.tokens[..utt.tokens.len() - 1];
                let labels = &utt.tokens[1..];
                let mut tape = Tape::new();
                let vars = s2s_forward_on_tape(&mut tape, &feats, prefix, &model)?;
                ce += hard_ce(tape.value(vars.logits), labels);
                n += labels.len();
            }
            metrics.push(MetricRecord {
                step,
                epoch,
                split: "val".into(),
                lr: 0.0,
                loss_ce: ce / n as f64,
                loss_lst: None,
                cloze_acc: None,
                cer: None,
            });
        }
    }

    if !diverged {
        let k_avg = tc.average_last_k.min(checkpoints.len());
        let avg = average_checkpoints(&checkpoints[checkpoints.len() - k_avg..])?;
        restore(&mut model.named_tensors_mut(), &avg)?;
    }
    let final_cer = match (tc.eval_cer, val) {
        (true, Some(v)) => {
            let c = speech_set_cer(&model, v, config.beam_width)?;
            metrics.push(MetricRecord {
                step,
                epoch: tc.epochs,
                split: "val".into(),
                lr: 0.0,
                loss_ce: 0.0,
                loss_lst: None,
                cloze_acc: None,
                cer: Some(c),
            });
            Some(c)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        model,
        checkpoints,
        metrics,
        diverged,
        final_cer,
    })
}
