//! Seq2seq student: transformer encoder over acoustic frames, transformer
//! decoder with causal self-attention and cross-attention over the encoder
//! output, predicting the next transcript token per decoder position.

use crate::autodiff::{Tape, Var};
use crate::block::{
    full_mask, init_matrix, sinusoidal_positions, transformer_block, AttnParams, AttnVars,
    BlockParams, BlockVars, FfnParams, FfnVars,
};
use crate::block::{attention_sublayer, ffn_sublayer};
use crate::data::SOS;
use crate::error::{Error, Result};
use crate::mask::build_forward_mask;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One utterance's frames, [n_frames x feat_dim].
#[derive(Debug, Clone)]
pub struct AcousticFeatures {
    pub frames: Tensor,
}

impl AcousticFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Empty("utterance has no frames".into()));
        }
        frames.assert_finite("acoustic frames")?;
        Ok(AcousticFeatures { frames })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct S2SConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub inner_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub max_decode_len: usize,
    pub beam_width: usize,
}

impl S2SConfig {
    pub fn desk(vocab_size: usize, feat_dim: usize) -> Self {
        S2SConfig {
            vocab_size,
            feat_dim,
            model_dim: 32,
            head_count: 4,
            inner_dim: 64,
            encoder_depth: 2,
            decoder_depth: 2,
            max_decode_len: 32,
            beam_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::Contract(
                "model_dim must be divisible by head_count".into(),
            ));
        }
        if self.encoder_depth < 1 || self.decoder_depth < 1 {
            return Err(Error::Contract("depths must be >= 1".into()));
        }
        if self.vocab_size < 4 || self.feat_dim < 1 {
            return Err(Error::Contract("vocab or feature dimension too small".into()));
        }
        if self.beam_width < 1 || self.max_decode_len < 1 {
            return Err(Error::Contract("beam_width and max_decode_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Decoder block: causal self-attention, cross-attention over the encoder,
/// then the position-wise FFN.
#[derive(Debug, Clone)]
pub struct DecoderBlockParams {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn: FfnParams,
}

impl DecoderBlockParams {
    pub fn init(rng: &mut ChaCha8Rng, model_dim: usize, heads: usize, inner_dim: usize) -> Self {
        DecoderBlockParams {
            self_attn: AttnParams::init(rng, model_dim, heads),
            cross_attn: AttnParams::init(rng, model_dim, heads),
            ffn: FfnParams::init(rng, model_dim, inner_dim),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.self_attn.collect(&format!("{prefix}.self"), out);
        self.cross_attn.collect(&format!("{prefix}.cross"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.self_attn.collect_mut(&format!("{prefix}.self"), out);
        self.cross_attn.collect_mut(&format!("{prefix}.cross"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }

    pub fn on_tape(&self, tape: &mut Tape, flat: &mut Vec<Var>) -> DecoderBlockVars {
        DecoderBlockVars {
            self_attn: self.self_attn.on_tape(tape, flat),
            cross_attn: self.cross_attn.on_tape(tape, flat),
            ffn: self.ffn.on_tape(tape, flat),
        }
    }
}

pub struct DecoderBlockVars {
    pub self_attn: AttnVars,
    pub cross_attn: AttnVars,
    pub ffn: FfnVars,
}

#[derive(Debug, Clone)]
pub struct S2SModel {
    pub config: S2SConfig,
    /// [feat_dim x D]
    pub input_proj: Tensor,
    pub encoder_stack: Vec<BlockParams>,
    /// [K x D]
    pub embedding: Tensor,
    pub decoder_stack: Vec<DecoderBlockParams>,
    /// [D x K]
    pub output_proj: Tensor,
}

impl S2SModel {
    pub fn init(config: &S2SConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        Ok(S2SModel {
            config: config.clone(),
            input_proj: init_matrix(&mut rng, config.feat_dim, d),
            encoder_stack: (0..config.encoder_depth)
                .map(|_| BlockParams::init(&mut rng, d, config.head_count, config.inner_dim))
                .collect(),
            embedding: init_matrix(&mut rng, config.vocab_size, d),
            decoder_stack: (0..config.decoder_depth)
                .map(|_| DecoderBlockParams::init(&mut rng, d, config.head_count, config.inner_dim))
                .collect(),
            output_proj: init_matrix(&mut rng, d, config.vocab_size),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("input_proj".to_string(), &self.input_proj));
        for (i, b) in self.encoder_stack.iter().enumerate() {
            b.collect(&format!("enc{i}"), &mut out);
        }
        out.push(("embedding".to_string(), &self.embedding));
        for (i, b) in self.decoder_stack.iter().enumerate() {
            b.collect(&format!("dec{i}"), &mut out);
        }
        out.push(("output_proj".to_string(), &self.output_proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("input_proj".to_string(), &mut self.input_proj));
        for (i, b) in self.encoder_stack.iter_mut().enumerate() {
            b.collect_mut(&format!("enc{i}"), &mut out);
        }
        out.push(("embedding".to_string(), &mut self.embedding));
        for (i, b) in self.decoder_stack.iter_mut().enumerate() {
            b.collect_mut(&format!("dec{i}"), &mut out);
        }
        out.push(("output_proj".to_string(), &mut self.output_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub struct S2STapeVars {
    /// Parameter leaves in `named_tensors` order.
    pub flat: Vec<Var>,
    /// Projected frame input node (for encoder sensitivity probing).
    pub enc_input: Var,
    pub dec_embedded: Var,
    pub logits: Var,
}

/// Full encoder-decoder forward on a tape. The prefix must start with the
/// start symbol; logits row i is the next-token distribution after
/// prefix[0..=i].
pub fn s2s_forward_on_tape(
    tape: &mut Tape,
    features: &AcousticFeatures,
    prefix: &[usize],
    model: &S2SModel,
) -> Result<S2STapeVars> {
    let n_frames = features.frames.rows();
    if n_frames == 0 {
        return Err(Error::Empty("utterance has no frames".into()));
    }
    if features.frames.cols() != model.config.feat_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs config {}",
            features.frames.cols(),
            model.config.feat_dim
        )));
    }
    if prefix.first() != Some(&SOS) {
        return Err(Error::Contract("decoder prefix must start with <sos>".into()));
    }
    let k = model.config.vocab_size;
    if let Some(&bad) = prefix.iter().find(|&&t| t >= k) {
        return Err(Error::Contract(format!("token {bad} out of vocabulary (K={k})")));
    }
    let d = model.config.model_dim;

    let mut flat = Vec::new();
    let input_proj = tape.leaf(model.input_proj.clone());
    flat.push(input_proj);
    let enc_vars: Vec<BlockVars> = model
        .encoder_stack
        .iter()
        .map(|b| b.on_tape(tape, &mut flat))
        .collect();
    let table = tape.leaf(model.embedding.clone());
    flat.push(table);
    let dec_vars: Vec<DecoderBlockVars> = model
        .decoder_stack
        .iter()
        .map(|b| b.on_tape(tape, &mut flat))
        .collect();
    let out_proj = tape.leaf(model.output_proj.clone());
    flat.push(out_proj);

    // encoder: projected frames + positions, unmasked self-attention
    let frames = tape.leaf(features.frames.clone());
    let projected = tape.matmul(frames, input_proj);
    let enc_pos = tape.leaf(sinusoidal_positions(n_frames, d));
    let enc_input = tape.add(projected, enc_pos);
    let enc_mask = full_mask(n_frames, n_frames);
    let mut enc = enc_input;
    for vars in &enc_vars {
        enc = transformer_block(tape, enc, &[enc], &enc_mask, vars)?;
    }

    // decoder: embedded prefix + positions
    let n = prefix.len();
    let gathered = tape.gather_rows(table, prefix);
    let dec_pos = tape.leaf(sinusoidal_positions(n, d));
    let dec_embedded = tape.add(gathered, dec_pos);
    let causal = build_forward_mask(n)?;
    let cross = full_mask(n, n_frames);
    let mut x = dec_embedded;
    for vars in &dec_vars {
        x = attention_sublayer(tape, x, &[x], &causal, &vars.self_attn)?;
        x = attention_sublayer(tape, x, &[enc], &cross, &vars.cross_attn)?;
        x = ffn_sublayer(tape, x, &vars.ffn);
    }
    let logits = tape.matmul(x, out_proj);
    Ok(S2STapeVars {
        flat,
        enc_input,
        dec_embedded,
        logits,
    })
}

/// Per-prefix-position next-token logits, [len(prefix) x K].
pub fn s2s_forward(
    features: &AcousticFeatures,
    prefix: &[usize],
    model: &S2SModel,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = s2s_forward_on_tape(&mut tape, features, prefix, model)?;
    Ok(tape.value(vars.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EOS;
    use rand::Rng;

    pub(crate) fn tiny_config() -> S2SConfig {
        S2SConfig {
            vocab_size: 9,
            feat_dim: 5,
            model_dim: 8,
            head_count: 2,
            inner_dim: 12,
            encoder_depth: 1,
            decoder_depth: 1,
            max_decode_len: 8,
            beam_width: 2,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, n_frames: usize, feat_dim: usize) -> AcousticFeatures {
        AcousticFeatures::new(Tensor::matrix(
            n_frames,
            feat_dim,
            (0..n_frames * feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
        .unwrap()
    }

    #[test]
    fn rejects_empty_features_and_unframed_prefix() {
        let model = S2SModel::init(&tiny_config(), 0).unwrap();
        assert!(AcousticFeatures::new(Tensor::zeros(vec![0, 5])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = random_features(&mut rng, 4, 5);
        assert!(s2s_forward(&feats, &[3, 4], &model).is_err());
        assert!(s2s_forward(&feats, &[SOS, 99], &model).is_err());
    }

    #[test]
    fn decoder_is_causal_bitwise() {
        // logits rows <= t unchanged when the prefix differs only after t
        let model = S2SModel::init(&tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_features(&mut rng, 6, 5);
        let a = s2s_forward(&feats, &[SOS, 3, 4, 5], &model).unwrap();
        let b = s2s_forward(&feats, &[SOS, 3, 7, 8], &model).unwrap();
        for t in 0..2 {
            assert_eq!(a.row(t), b.row(t), "row {t}");
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn logits_depend_on_frames_everywhere() {
        // generic sensitivity: changing one frame moves every logit row
        let model = S2SModel::init(&tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = random_features(&mut rng, 6, 5);
        let mut bumped = feats.clone();
        bumped.frames.data[0] += 0.5;
        let a = s2s_forward(&feats, &[SOS, 3, 4, EOS], &model).unwrap();
        let b = s2s_forward(&bumped, &[SOS, 3, 4, EOS], &model).unwrap();
        for t in 0..4 {
            assert_ne!(a.row(t), b.row(t), "row {t} insensitive to frames");
        }
    }

    #[test]
    fn full_model_gradcheck() {
        use crate::autodiff::{gradient_check, GradCheckOptions};
        for seed in 0..3u64 {
            let model = S2SModel::init(&tiny_config(), 60 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let feats = random_features(&mut rng, 4, 5);
            let prefix = [SOS, 3, 5, 4];
            let targets = [3usize, 5, 4, EOS];
            let k = model.config.vocab_size;
            let point: Vec<Tensor> = model
                .named_tensors()
                .iter()
                .map(|(_, t)| (*t).clone())
                .collect();
            let rebuild = |vals: &[Tensor]| -> S2SModel {
                let mut m = model.clone();
                for ((_, dst), src) in m.named_tensors_mut().into_iter().zip(vals) {
                    *dst = src.clone();
                }
                m
            };
            let make_loss = |tape: &mut Tape, m: &S2SModel| -> Var {
                let v = s2s_forward_on_tape(tape, &feats, &prefix, m).unwrap();
                let lp = tape.log_softmax_rows(v.logits);
                let mut tgt = Tensor::zeros(vec![4, k]);
                for (r, &t) in targets.iter().enumerate() {
                    tgt.data[r * k + t] = 1.0;
                }
                tape.weighted_nll(lp, tgt, vec![0.25; 4])
            };
            let eval = |vals: &[Tensor]| -> f64 {
                let m = rebuild(vals);
                let mut tape = Tape::new();
                let loss = make_loss(&mut tape, &m);
                tape.value(loss).data[0]
            };
            let mut tape = Tape::new();
            let v = s2s_forward_on_tape(&mut tape, &feats, &prefix, &model).unwrap();
            let lp = tape.log_softmax_rows(v.logits);
            let mut tgt = Tensor::zeros(vec![4, k]);
            for (r, &t) in targets.iter().enumerate() {
                tgt.data[r * k + t] = 1.0;
            }
            let loss = tape.weighted_nll(lp, tgt, vec![0.25; 4]);
            tape.backward(loss);
            let analytic: Vec<Vec<f64>> =
                v.flat.iter().map(|var| tape.grad(*var).to_vec()).collect();
            let opts = GradCheckOptions {
                step: 1e-5,
                max_coords: 30,
                seed: 70 + seed,
            };
            let err = gradient_check(eval, &point, &analytic, opts).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn forward_deterministic() {
        let model = S2SModel::init(&tiny_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = random_features(&mut rng, 5, 5);
        let a = s2s_forward(&feats, &[SOS, 4, 5], &model).unwrap();
        let b = s2s_forward(&feats, &[SOS, 4, 5], &model).unwrap();
        assert_eq!(a.data, b.data);
    }
}
