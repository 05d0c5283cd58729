//! Vocabulary, corpus handling, synthetic corpus generators, the
//! token-replacement augmentation, and synthetic speech rendering.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

pub const UNK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<unk>", "<sos>", "<eos>"];
/// First non-reserved index.
pub const FIRST_TOKEN: usize = RESERVED.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    /// One token per Unicode scalar (default; digits and letters).
    Chars,
    /// Whitespace-separated tokens.
    Whitespace,
}

fn split_line(line: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Chars => line.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenMode::Whitespace => line.split_whitespace().map(String::from).collect(),
    }
}

/// Token inventory with the three reserved symbols at fixed indices 0..2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in RESERVED {
            v.push(s.to_string()).unwrap();
        }
        v
    }

    fn push(&mut self, token: String) -> Result<usize> {
        if self.index.contains_key(&token) {
            return Err(Error::Contract(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.push(t)?;
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(UNK)
    }

    /// Encode one sentence framed as <sos> tokens <eos>.
    pub fn encode_sentence(&self, line: &str, mode: TokenMode) -> Vec<usize> {
        let mut seq = vec![SOS];
        seq.extend(split_line(line, mode).iter().map(|t| self.id_or_unk(t)));
        seq.push(EOS);
        seq
    }

    /// Render an encoded sequence back to text, dropping reserved symbols.
    pub fn decode_sentence(&self, seq: &[usize], mode: TokenMode) -> String {
        let toks: Vec<&str> = seq
            .iter()
            .filter(|&&id| id >= FIRST_TOKEN)
            .map(|&id| self.token(id))
            .collect();
        match mode {
            TokenMode::Chars => toks.concat(),
            TokenMode::Whitespace => toks.join(" "),
        }
    }

    /// One token per line, line number = index, reserved symbols first.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for expected in RESERVED {
            match lines.next() {
                Some(l) if l == expected => {
                    v.push(l.to_string())?;
                }
                other => {
                    return Err(Error::Format(format!(
                        "expected reserved symbol {expected:?}, found {other:?}"
                    )))
                }
            }
        }
        for l in lines {
            v.push(l.to_string())?;
        }
        Ok(v)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

/// Frequency-sorted vocabulary above `min_count`, reserved symbols first,
/// ties broken by code point order.
pub fn build_vocab(text: &str, min_count: usize, mode: TokenMode) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in text.lines() {
        for t in split_line(line, mode) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("no tokens in vocabulary input".into()));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Encoded sentences, each framed <sos> .. <eos>.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
    pub source: String,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocabulary, mode: TokenMode, source: &str) -> Result<Self> {
        let sequences: Vec<Vec<usize>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| vocab.encode_sentence(l, mode))
            .collect();
        let c = Corpus {
            sequences,
            source: source.to_string(),
        };
        c.validate(vocab.size())?;
        Ok(c)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Empty(format!("corpus {} has no sentences", self.source)));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() < 3 || s[0] != SOS || *s.last().unwrap() != EOS {
                return Err(Error::Contract(format!(
                    "sentence {i} not framed <sos> .. <eos> with interior"
                )));
            }
            if s.iter().any(|&t| t >= k) {
                return Err(Error::VocabMismatch(format!(
                    "sentence {i} has index outside vocabulary of size {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SyntheticKind {
    CenterSum,
    Markov,
    HomophoneSpeech,
}

/// Everything a generator needs; same spec, same bits out.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Non-reserved token count for markov-family generators.
    pub token_count: usize,
    pub sentence_count: usize,
    /// Tokens between <sos> and <eos>.
    pub interior_len: usize,
    pub seed: u64,
    /// Acoustic noise std deviation.
    pub sigma: f64,
    pub feat_dim: usize,
    pub frames_per_token: usize,
    /// Pairs of vocabulary indices sharing acoustic prototypes.
    pub homophone_pairs: Vec<(usize, usize)>,
}

impl SyntheticSpec {
    pub fn center_sum(sentence_count: usize, interior_len: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::CenterSum,
            token_count: 10,
            sentence_count,
            interior_len,
            seed,
            sigma: 0.0,
            feat_dim: 0,
            frames_per_token: 0,
            homophone_pairs: Vec::new(),
        }
    }

    pub fn homophone_speech(
        token_count: usize,
        sentence_count: usize,
        interior_len: usize,
        seed: u64,
        sigma: f64,
        homophone_pairs: Vec<(usize, usize)>,
    ) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::HomophoneSpeech,
            token_count,
            sentence_count,
            interior_len,
            seed,
            sigma,
            feat_dim: 20,
            frames_per_token: 3,
            homophone_pairs,
        }
    }
}

const ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Fixed vocabulary of the first `token_count` alphabet characters, reserved
/// symbols first. Single-character tokens, so `Chars` mode round-trips.
pub fn synthetic_vocab(token_count: usize) -> Result<Vocabulary> {
    if token_count > ALPHABET.chars().count() {
        return Err(Error::Contract(format!(
            "token_count {token_count} exceeds alphabet"
        )));
    }
    Vocabulary::from_tokens(ALPHABET.chars().take(token_count).map(String::from))
}

/// Digits-only vocabulary (K = 13) used by the center-sum language.
pub fn digit_vocab() -> Vocabulary {
    synthetic_vocab(10).unwrap()
}

/// Center-sum language: odd interior positions i.i.d. uniform over 0..9,
/// each even interior position the mod-10 sum of its neighbors. Even
/// positions are deterministic bidirectionally and chance-level left-only.
pub fn gen_center_sum(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.kind != SyntheticKind::CenterSum {
        return Err(Error::Contract("spec kind is not center_sum".into()));
    }
    if spec.interior_len.is_multiple_of(2) || spec.interior_len == 0 {
        return Err(Error::Contract("center_sum interior length must be odd".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.sentence_count);
    for _ in 0..spec.sentence_count {
        let mut digits = vec![0usize; spec.interior_len];
        // 1-based interior positions: odd ones are free
        for (i, d) in digits.iter_mut().enumerate() {
            if i % 2 == 0 {
                *d = rng.gen_range(0..10);
            }
        }
        for i in (1..spec.interior_len).step_by(2) {
            digits[i] = (digits[i - 1] + digits[i + 1]) % 10;
        }
        let mut seq = vec![SOS];
        seq.extend(digits.iter().map(|d| FIRST_TOKEN + d));
        seq.push(EOS);
        sequences.push(seq);
    }
    Ok(Corpus {
        sequences,
        source: format!("center_sum(seed={})", spec.seed),
    })
}

const MARKOV_SUCCESSORS: usize = 3;

/// Sparse successor sets for the markov language: every token may be
/// followed by exactly 3 tokens, and homophone pairs get disjoint successor
/// sets so the following token identifies which pair member was spoken.
/// Indexed by vocabulary id; reserved rows empty.
pub fn markov_successors(spec: &SyntheticSpec) -> Result<Vec<Vec<usize>>> {
    let k = FIRST_TOKEN + spec.token_count;
    for &(a, b) in &spec.homophone_pairs {
        if a < FIRST_TOKEN || b < FIRST_TOKEN || a >= k || b >= k || a == b {
            return Err(Error::Contract(format!("bad homophone pair ({a}, {b})")));
        }
    }
    if spec.token_count < 2 * MARKOV_SUCCESSORS {
        return Err(Error::Contract("markov language needs more tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x6d61726b));
    let sample_set = |rng: &mut ChaCha8Rng, forbidden: &[usize]| -> Vec<usize> {
        let mut set = Vec::with_capacity(MARKOV_SUCCESSORS);
        while set.len() < MARKOV_SUCCESSORS {
            let c = FIRST_TOKEN + rng.gen_range(0..spec.token_count);
            if !set.contains(&c) && !forbidden.contains(&c) {
                set.push(c);
            }
        }
        set
    };
    let mut succ = vec![Vec::new(); k];
    for (t, row) in succ.iter_mut().enumerate().skip(FIRST_TOKEN) {
        // partner handled below if this is the second member of a pair
        if spec.homophone_pairs.iter().any(|&(a, b)| t == a.max(b)) {
            continue;
        }
        *row = sample_set(&mut rng, &[]);
    }
    for &(a, b) in &spec.homophone_pairs {
        let (lo, hi) = (a.min(b), a.max(b));
        let forbidden = succ[lo].clone();
        succ[hi] = sample_set(&mut rng, &forbidden);
    }
    Ok(succ)
}

/// Markov language walk: start token uniform, each next token uniform over
/// the current token's successor set.
pub fn gen_markov(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.interior_len == 0 {
        return Err(Error::Contract("empty interior".into()));
    }
    let succ = markov_successors(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.sentence_count);
    for _ in 0..spec.sentence_count {
        let mut seq = Vec::with_capacity(spec.interior_len + 2);
        seq.push(SOS);
        let mut cur = FIRST_TOKEN + rng.gen_range(0..spec.token_count);
        seq.push(cur);
        for _ in 1..spec.interior_len {
            cur = succ[cur][rng.gen_range(0..MARKOV_SUCCESSORS)];
            seq.push(cur);
        }
        seq.push(EOS);
        sequences.push(seq);
    }
    Ok(Corpus {
        sequences,
        source: format!("markov(seed={})", spec.seed),
    })
}

/// Token replacement augmentation: each sequence is selected with
/// probability `sequence_fraction`; within a selected sequence every
/// non-reserved token is independently replaced with probability
/// `token_fraction` by a uniform non-reserved token (the original is an
/// allowed draw). Model inputs only — callers keep original targets.
pub fn augment_replace(
    sequences: &[Vec<usize>],
    token_fraction: f64,
    sequence_fraction: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&token_fraction) || !(0.0..=1.0).contains(&sequence_fraction) {
        return Err(Error::Contract("augmentation fractions outside [0,1]".into()));
    }
    if vocab_size <= FIRST_TOKEN {
        return Err(Error::Contract("no non-reserved tokens to draw".into()));
    }
    let mut out = sequences.to_vec();
    if token_fraction == 0.0 || sequence_fraction == 0.0 {
        return Ok(out);
    }
    for seq in out.iter_mut() {
        if rng.gen::<f64>() >= sequence_fraction {
            continue;
        }
        for t in seq.iter_mut() {
            if *t >= FIRST_TOKEN && rng.gen::<f64>() < token_fraction {
                *t = FIRST_TOKEN + rng.gen_range(0..vocab_size - FIRST_TOKEN);
            }
        }
    }
    Ok(out)
}

/// One utterance: frames paired with its framed transcript.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// [n_frames x feat_dim]
    pub features: Tensor,
    /// <sos> .. <eos> framed transcript.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpeechSet {
    pub utterances: Vec<Utterance>,
    pub feat_dim: usize,
}

/// Acoustic prototypes per vocabulary id; homophone pair members share the
/// lower member's prototype exactly. Reserved rows are zero (never rendered).
pub fn speech_prototypes(spec: &SyntheticSpec) -> Result<Tensor> {
    let k = FIRST_TOKEN + spec.token_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x70726f74));
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Contract(e.to_string()))?;
    let mut protos = Tensor::zeros(vec![k, spec.feat_dim]);
    for t in FIRST_TOKEN..k {
        for c in 0..spec.feat_dim {
            protos.data[t * spec.feat_dim + c] = normal.sample(&mut rng);
        }
    }
    for &(a, b) in &spec.homophone_pairs {
        let (lo, hi) = (a.min(b), a.max(b));
        let src: Vec<f64> = protos.row(lo).to_vec();
        protos.row_mut(hi).copy_from_slice(&src);
    }
    Ok(protos)
}

/// Render each interior token as `frames_per_token` frames of its prototype
/// plus N(0, sigma^2) noise.
pub fn render_speech(corpus: &Corpus, spec: &SyntheticSpec) -> Result<SpeechSet> {
    if spec.feat_dim == 0 || spec.frames_per_token == 0 {
        return Err(Error::Contract("speech spec needs feat_dim and frames_per_token".into()));
    }
    let protos = speech_prototypes(spec)?;
    let k = protos.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x6e6f6973));
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Contract(e.to_string()))?;
    let mut utterances = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let interior = &seq[1..seq.len() - 1];
        let n_frames = interior.len() * spec.frames_per_token;
        let mut features = Tensor::zeros(vec![n_frames, spec.feat_dim]);
        for (pos, &tok) in interior.iter().enumerate() {
            if tok < FIRST_TOKEN || tok >= k {
                return Err(Error::VocabMismatch(format!("unrenderable token {tok}")));
            }
            for f in 0..spec.frames_per_token {
                let r = pos * spec.frames_per_token + f;
                for c in 0..spec.feat_dim {
                    features.data[r * spec.feat_dim + c] =
                        protos.at(tok, c) + spec.sigma * normal.sample(&mut rng);
                }
            }
        }
        utterances.push(Utterance {
            id: format!("utt{i:06}"),
            features,
            tokens: seq.clone(),
        });
    }
    Ok(SpeechSet {
        utterances,
        feat_dim: spec.feat_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocab_enumeration() {
        let v = build_vocab("ab\nba", 1, TokenMode::Chars).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.token(0), "<unk>");
        assert_eq!(v.token(3), "a");
        assert_eq!(v.token(4), "b");
    }

    #[test]
    fn frequency_then_codepoint_order() {
        // c appears 3x, a and b once each -> c first, then a, b by code point
        let v = build_vocab("ccc\nba", 1, TokenMode::Chars).unwrap();
        assert_eq!(v.token(3), "c");
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
    }

    #[test]
    fn min_count_maps_to_unk() {
        let v = build_vocab("a a b", 2, TokenMode::Whitespace).unwrap();
        assert_eq!(v.lookup("b"), None);
        let enc = v.encode_sentence("b a", TokenMode::Whitespace);
        assert_eq!(enc, vec![SOS, UNK, v.lookup("a").unwrap(), EOS]);
    }

    #[test]
    fn vocab_deterministic_and_file_round_trip() {
        let a = build_vocab("hello\nworld", 1, TokenMode::Chars).unwrap();
        let b = build_vocab("hello\nworld", 1, TokenMode::Chars).unwrap();
        assert_eq!(a.to_lines(), b.to_lines());
        let c = Vocabulary::from_lines(&a.to_lines()).unwrap();
        assert_eq!(a.to_lines(), c.to_lines());
    }

    #[test]
    fn vocab_file_requires_reserved_header() {
        assert!(Vocabulary::from_lines("a\nb\nc").is_err());
        assert!(Vocabulary::from_lines("").is_err());
    }

    #[test]
    fn empty_vocab_input_rejected() {
        assert!(build_vocab("", 1, TokenMode::Chars).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = build_vocab("abc def\nxyz", 1, TokenMode::Whitespace).unwrap();
        for s in ["abc def", "xyz abc", "def"] {
            let enc = v.encode_sentence(s, TokenMode::Whitespace);
            assert_eq!(v.decode_sentence(&enc, TokenMode::Whitespace), s);
        }
    }

    #[test]
    fn corpus_framing_enforced() {
        let v = digit_vocab();
        let c = Corpus::from_text("123\n456", &v, TokenMode::Chars, "t").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sequences[0], vec![SOS, 4, 5, 6, EOS]);
        let bad = Corpus {
            sequences: vec![vec![SOS, EOS]],
            source: "bad".into(),
        };
        assert!(bad.validate(v.size()).is_err());
    }

    #[test]
    fn center_sum_hand_values() {
        assert_eq!((3 + 4), 7);
        assert_eq!((8 + 5) % 10, 3);
        let spec = SyntheticSpec::center_sum(200, 9, 1);
        let c = gen_center_sum(&spec).unwrap();
        for seq in &c.sequences {
            let interior: Vec<usize> = seq[1..seq.len() - 1]
                .iter()
                .map(|&t| t - FIRST_TOKEN)
                .collect();
            assert_eq!(interior.len(), 9);
            // exhaustive mod-10 identity at every even interior position
            for i in (1..interior.len()).step_by(2) {
                assert_eq!(interior[i], (interior[i - 1] + interior[i + 1]) % 10);
            }
        }
    }

    #[test]
    fn center_sum_even_positions_uniform_given_left() {
        // chi-squared over >= 100k samples: center digit given left neighbor 5
        let spec = SyntheticSpec::center_sum(250_000, 3, 7);
        let c = gen_center_sum(&spec).unwrap();
        let mut counts = [0usize; 10];
        let mut total = 0usize;
        for seq in &c.sequences {
            let left = seq[1] - FIRST_TOKEN;
            let center = seq[2] - FIRST_TOKEN;
            if left == 5 {
                counts[center] += 1;
                total += 1;
            }
        }
        assert!(total > 20_000);
        let expect = total as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // 9 degrees of freedom, p > 0.01 threshold
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn center_sum_bit_reproducible() {
        let spec = SyntheticSpec::center_sum(50, 5, 42);
        let a = gen_center_sum(&spec).unwrap();
        let b = gen_center_sum(&spec).unwrap();
        assert_eq!(a.sequences, b.sequences);
    }

    #[test]
    fn center_sum_rejects_even_length() {
        assert!(gen_center_sum(&SyntheticSpec::center_sum(1, 4, 0)).is_err());
    }

    #[test]
    fn augment_degenerate_rates_are_identity() {
        let seqs = vec![vec![SOS, 4, 5, EOS]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_replace(&seqs, 0.0, 0.5, 13, &mut rng).unwrap(), seqs);
        assert_eq!(augment_replace(&seqs, 0.5, 0.0, 13, &mut rng).unwrap(), seqs);
    }

    #[test]
    fn augment_never_touches_reserved() {
        let seqs = vec![vec![SOS, 4, UNK, 5, EOS]; 500];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment_replace(&seqs, 1.0, 1.0, 13, &mut rng).unwrap();
        for seq in &out {
            assert_eq!(seq[0], SOS);
            assert_eq!(seq[2], UNK);
            assert_eq!(*seq.last().unwrap(), EOS);
            assert!(seq[1] >= FIRST_TOKEN && seq[3] >= FIRST_TOKEN);
        }
    }

    #[test]
    fn augment_empirical_rate() {
        // 0.15 x 0.20 = 0.03 expected replaced fraction; but a replacement
        // draw may return the original, so measure selection not change:
        // count draws by comparing against a vocab where any draw changes
        // the token is impossible -- instead measure changed fraction and
        // correct for the 1/V self-draw probability.
        let v = 60usize; // non-reserved count
        let interior = 100usize;
        let n_seq = 1000usize;
        let seqs: Vec<Vec<usize>> = (0..n_seq)
            .map(|i| {
                let mut s = vec![SOS];
                s.extend((0..interior).map(|j| FIRST_TOKEN + (i + j) % v));
                s.push(EOS);
                s
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = augment_replace(&seqs, 0.15, 0.20, FIRST_TOKEN + v, &mut rng).unwrap();
        let mut changed = 0usize;
        let mut total = 0usize;
        for (a, b) in seqs.iter().zip(&out) {
            for (x, y) in a[1..a.len() - 1].iter().zip(&b[1..b.len() - 1]) {
                total += 1;
                if x != y {
                    changed += 1;
                }
            }
        }
        assert_eq!(total, 100_000);
        // observed change rate = 0.03 * (1 - 1/V)
        let replaced = changed as f64 / (1.0 - 1.0 / v as f64) / total as f64;
        assert!((replaced - 0.03).abs() < 0.005, "rate {replaced}");
    }

    #[test]
    fn markov_pairs_get_disjoint_successors() {
        let spec = SyntheticSpec::homophone_speech(27, 10, 8, 5, 0.1, vec![(3, 8), (4, 10), (6, 12)]);
        let succ = markov_successors(&spec).unwrap();
        for &(a, b) in &spec.homophone_pairs {
            assert_eq!(succ[a].len(), 3);
            assert_eq!(succ[b].len(), 3);
            for s in &succ[a] {
                assert!(!succ[b].contains(s), "shared successor for ({a},{b})");
            }
        }
        // generated corpus actually follows the table
        let c = gen_markov(&spec).unwrap();
        for seq in &c.sequences {
            let interior = &seq[1..seq.len() - 1];
            for w in interior.windows(2) {
                assert!(succ[w[0]].contains(&w[1]));
            }
        }
    }

    #[test]
    fn noiseless_speech_nearest_prototype_is_exact() {
        let spec = SyntheticSpec::homophone_speech(10, 20, 6, 2, 0.0, vec![]);
        let c = gen_markov(&spec).unwrap();
        let set = render_speech(&c, &spec).unwrap();
        let protos = speech_prototypes(&spec).unwrap();
        for utt in &set.utterances {
            let interior = &utt.tokens[1..utt.tokens.len() - 1];
            for (pos, &tok) in interior.iter().enumerate() {
                let frame = utt.features.row(pos * spec.frames_per_token);
                let best = (FIRST_TOKEN..protos.rows())
                    .min_by(|&a, &b| {
                        let da: f64 = frame.iter().zip(protos.row(a)).map(|(x, p)| (x - p).powi(2)).sum();
                        let db: f64 = frame.iter().zip(protos.row(b)).map(|(x, p)| (x - p).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best, tok);
            }
        }
    }

    #[test]
    fn homophones_share_acoustics_exactly() {
        let spec = SyntheticSpec::homophone_speech(10, 1, 2, 4, 0.0, vec![(3, 8)]);
        let protos = speech_prototypes(&spec).unwrap();
        assert_eq!(protos.row(3), protos.row(8));
        // sigma = 0: rendering token 3 and token 8 gives identical frames
        let corpus = Corpus {
            sequences: vec![vec![SOS, 3, EOS], vec![SOS, 8, EOS]],
            source: "pair".into(),
        };
        let set = render_speech(&corpus, &spec).unwrap();
        assert_eq!(set.utterances[0].features.data, set.utterances[1].features.data);
    }

    #[test]
    fn speech_bit_reproducible() {
        let spec = SyntheticSpec::homophone_speech(12, 5, 4, 17, 0.2, vec![(3, 5)]);
        let c = gen_markov(&spec).unwrap();
        let a = render_speech(&c, &spec).unwrap();
        let b = render_speech(&c, &spec).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.features.data, y.features.data);
            assert_eq!(x.tokens, y.tokens);
        }
    }
}
