//! Trainable text encoder: prompt templating, mean-of-embeddings context,
//! two extraction heads (mean-pool, mask-slot), and the tied-embedding
//! vocabulary scoring head, with manual backward passes for all of it.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AugmentParams, Document, TokenId, Vocabulary, MASK_ID, UNK_ID};
use crate::error::{CeilError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    XSlot,
    MaskSlot,
    Literal(String),
}

/// Token pattern wrapped around each text: literal tokens interleaved with
/// exactly one input slot ([X]) and exactly one mask slot ([MASK]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(s: &str) -> Result<PromptTemplate> {
        let mut segments = Vec::new();
        let (mut x, mut mask) = (0, 0);
        for word in s.split_whitespace() {
            match word {
                "[X]" => {
                    x += 1;
                    segments.push(Segment::XSlot);
                }
                "[MASK]" => {
                    mask += 1;
                    segments.push(Segment::MaskSlot);
                }
                lit => segments.push(Segment::Literal(lit.to_lowercase())),
            }
        }
        if x != 1 || mask != 1 {
            return Err(CeilError::Config(format!(
                "template must contain exactly one [X] and one [MASK], got {x} and {mask}: {s:?}"
            )));
        }
        Ok(PromptTemplate { segments })
    }

    /// Literal tokens of the template (for verbalizer exclusion).
    pub fn literals(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(l) => Some(l.as_str()),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::XSlot => "[X]",
                Segment::MaskSlot => "[MASK]",
                Segment::Literal(l) => l.as_str(),
            })
            .collect();
        write!(f, "{}", words.join(" "))
    }
}

/// Replace the X-slot with the document tokens and the MASK-slot with the
/// MASK id; returns the prompted sequence and the mask position.
pub fn apply_template(
    template: &PromptTemplate,
    vocab: &Vocabulary,
    tokens: &[TokenId],
) -> (Vec<TokenId>, usize) {
    let mut out = Vec::with_capacity(tokens.len() + template.segments.len());
    let mut mask_pos = 0;
    for seg in &template.segments {
        match seg {
            Segment::XSlot => out.extend_from_slice(tokens),
            Segment::MaskSlot => {
                mask_pos = out.len();
                out.push(MASK_ID);
            }
            Segment::Literal(l) => out.push(vocab.id(l)),
        }
    }
    (out, mask_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// Linear head over the token mean; used in the first pipeline iteration.
    MeanPool,
    /// Affine + tanh head; used once the encoder has been prompt-tuned.
    MaskSlot,
}

/// Trainable parameters: token embeddings (|V| x d), projection (r x d),
/// and the mask-head bias (r).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed: Array2<f64>,
    pub proj: Array2<f64>,
    pub mask_bias: Array1<f64>,
    pub mode: EncoderMode,
}

impl EncoderParams {
    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.ncols()
    }

    pub fn repr_dim(&self) -> usize {
        self.proj.nrows()
    }
}

/// Uniform init in [-0.5/d, 0.5/d]; mask_bias starts at zero.
pub fn init_params(
    seed: u64,
    vocab_size: usize,
    embed_dim: usize,
    repr_dim: usize,
    mode: EncoderMode,
) -> Result<EncoderParams> {
    if embed_dim < 1 || repr_dim < 1 {
        return Err(CeilError::Config("encoder dims must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / embed_dim as f64;
    let mut draw = |n: usize, m: usize| {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-half..half))
    };
    Ok(EncoderParams {
        embed: draw(vocab_size, embed_dim),
        proj: draw(repr_dim, embed_dim),
        mask_bias: Array1::zeros(repr_dim),
        mode,
    })
}

fn clamp_id(params: &EncoderParams, id: TokenId) -> usize {
    let id = id as usize;
    if id < params.vocab_size() {
        id
    } else {
        UNK_ID as usize
    }
}

/// Mean embedding of the prompted tokens.
fn context(params: &EncoderParams, prompted: &[TokenId]) -> Array1<f64> {
    let mut c = Array1::zeros(params.embed_dim());
    for &t in prompted {
        c += &params.embed.row(clamp_id(params, t));
    }
    c / prompted.len() as f64
}

fn head(params: &EncoderParams, c: &Array1<f64>) -> Array1<f64> {
    let z = params.proj.dot(c);
    match params.mode {
        EncoderMode::MeanPool => z,
        EncoderMode::MaskSlot => (z + &params.mask_bias).mapv(f64::tanh),
    }
}

/// Representation of a prompted token sequence.
pub fn encode(params: &EncoderParams, prompted: &[TokenId]) -> Result<Array1<f64>> {
    if prompted.is_empty() {
        return Err(CeilError::Contract("encode requires a nonempty token sequence".into()));
    }
    Ok(head(params, &context(params, prompted)))
}

/// Encode every document; with `augment` set, produces 2M rows where rows
/// 2k and 2k+1 are the two augmented views of document k.
pub fn encode_batch(
    params: &EncoderParams,
    docs: &[&Document],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    augment: Option<&AugmentParams>,
) -> Result<Array2<f64>> {
    let token_lists = batch_token_lists(docs, template, vocab, augment);
    let mut out = Array2::zeros((token_lists.len(), params.repr_dim()));
    for (row, prompted) in token_lists.iter().enumerate() {
        out.row_mut(row).assign(&encode(params, prompted)?);
    }
    Ok(out)
}

/// Prompted token sequences for a batch, in the row order `encode_batch` uses.
pub fn batch_token_lists(
    docs: &[&Document],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    augment: Option<&AugmentParams>,
) -> Vec<Vec<TokenId>> {
    let mut lists = Vec::new();
    for doc in docs {
        match augment {
            None => lists.push(apply_template(template, vocab, &doc.tokens).0),
            Some(params) => {
                for draw in 0..2 {
                    let view = crate::corpus::augment(&doc.tokens, params, doc.id, draw);
                    lists.push(apply_template(template, vocab, &view).0);
                }
            }
        }
    }
    lists
}

/// Scores for every vocabulary token at the mask slot, tied to the input
/// embeddings: logit[t] = embed[t] . (proj^T h).
pub fn vocab_logits(params: &EncoderParams, h: ArrayView1<f64>) -> Result<Array1<f64>> {
    if params.mode != EncoderMode::MaskSlot {
        return Err(CeilError::Contract(
            "vocab_logits requires the encoder to be in MaskSlot mode".into(),
        ));
    }
    let u = params.proj.t().dot(&h);
    Ok(params.embed.dot(&u))
}

/// Gradient accumulator matching the shape of `EncoderParams`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub embed: Array2<f64>,
    pub proj: Array2<f64>,
    pub mask_bias: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> ParamGrads {
        ParamGrads {
            embed: Array2::zeros(params.embed.raw_dim()),
            proj: Array2::zeros(params.proj.raw_dim()),
            mask_bias: Array1::zeros(params.mask_bias.raw_dim()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.embed *= factor;
        self.proj *= factor;
        self.mask_bias *= factor;
    }
}

/// One plain SGD step.
pub fn sgd_step(params: &mut EncoderParams, grads: &ParamGrads, lr: f64) {
    params.embed.scaled_add(-lr, &grads.embed);
    params.proj.scaled_add(-lr, &grads.proj);
    params.mask_bias.scaled_add(-lr, &grads.mask_bias);
}

/// Accumulate d(loss)/d(params) given d(loss)/dh for one encoded sequence.
pub fn encode_backward(
    params: &EncoderParams,
    prompted: &[TokenId],
    dh: ArrayView1<f64>,
    grads: &mut ParamGrads,
) {
    let c = context(params, prompted);
    let dz: Array1<f64> = match params.mode {
        EncoderMode::MeanPool => dh.to_owned(),
        EncoderMode::MaskSlot => {
            let h = (params.proj.dot(&c) + &params.mask_bias).mapv(f64::tanh);
            let mut dz = dh.to_owned();
            dz.zip_mut_with(&h, |g, &hv| *g *= 1.0 - hv * hv);
            grads.mask_bias += &dz;
            dz
        }
    };
    // z = proj . c
    grads.proj += &dz
        .view()
        .insert_axis(Axis(1))
        .dot(&c.view().insert_axis(Axis(0)));
    let dc = params.proj.t().dot(&dz) / prompted.len() as f64;
    for &t in prompted {
        let mut row = grads.embed.row_mut(clamp_id(params, t));
        row += &dc;
    }
}

/// Accumulate d(loss)/d(params) for the vocab head and return d(loss)/dh.
pub fn vocab_logits_backward(
    params: &EncoderParams,
    h: ArrayView1<f64>,
    dlogits: ArrayView1<f64>,
    grads: &mut ParamGrads,
) -> Array1<f64> {
    let u = params.proj.t().dot(&h);
    // logit[t] = embed[t] . u
    grads.embed += &dlogits
        .insert_axis(Axis(1))
        .dot(&u.view().insert_axis(Axis(0)));
    let du = params.embed.t().dot(&dlogits);
    grads.proj += &h
        .insert_axis(Axis(1))
        .dot(&du.view().insert_axis(Axis(0)));
    params.proj.dot(&du)
}

/// Externally produced per-document base vectors; a trainable head still
/// sits on top (h = head(base vector)).
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedBase {
    pub vectors: Array2<f64>,
}

impl PrecomputedBase {
    /// File format: header "N d", then N whitespace-separated rows.
    pub fn load(path: impl AsRef<Path>) -> Result<PrecomputedBase> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| CeilError::io(path.display().to_string(), e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| CeilError::Data("precomputed vectors file is empty".into()))?
            .map_err(|e| CeilError::io(path.display().to_string(), e))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| CeilError::Data(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(CeilError::Data(format!("expected header \"N d\", got {header:?}")));
        }
        let (n, d) = (dims[0], dims[1]);
        let mut vectors = Array2::zeros((n, d));
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| CeilError::Data(format!("expected {n} rows, file ends at {i}")))??
                .to_string();
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| CeilError::Data(format!("bad value in row {i}"))))
                .collect::<Result<_>>()?;
            if vals.len() != d {
                return Err(CeilError::Data(format!(
                    "row {i} has {} values, expected {d}",
                    vals.len()
                )));
            }
            vectors.row_mut(i).assign(&Array1::from(vals));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CeilError::Data("precomputed vectors contain non-finite values".into()));
        }
        Ok(PrecomputedBase { vectors })
    }

    /// Representation of document `i` through the trainable head.
    pub fn encode(&self, params: &EncoderParams, i: usize) -> Array1<f64> {
        head(params, &self.vectors.row(i).to_owned())
    }
}

impl From<std::io::Error> for CeilError {
    fn from(e: std::io::Error) -> Self {
        CeilError::io("<stream>", e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, tokenize, TokenizedCorpus, TokenizedDoc};
    use ndarray::array;

    fn vocab_of(texts: &[&str]) -> Vocabulary {
        let tc = TokenizedCorpus {
            docs: texts
                .iter()
                .map(|t| TokenizedDoc {
                    text: t.to_string(),
                    tokens: tokenize(t),
                    gold_label: None,
                })
                .collect(),
            ..Default::default()
        };
        build_vocabulary(&tc, 1).unwrap()
    }

    #[test]
    fn template_parse_round_trip() {
        for s in [
            "[X] is [MASK] .",
            "[MASK] [X] .",
            "category : [MASK] [X]",
            "[X] this topic is about [MASK] .",
        ] {
            let t = PromptTemplate::parse(s).unwrap();
            assert_eq!(t.to_string(), s);
            assert_eq!(PromptTemplate::parse(&t.to_string()).unwrap(), t);
        }
        assert!(PromptTemplate::parse("[X] only").is_err());
        assert!(PromptTemplate::parse("[MASK] [MASK] [X]").is_err());
    }

    #[test]
    fn apply_template_examples() {
        let vocab = vocab_of(&["hello is a b"]);
        let t = PromptTemplate::parse("[X] is [MASK] .").unwrap();
        let (out, pos) = apply_template(&t, &vocab, &[vocab.id("hello")]);
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], vocab.id("hello"));
        assert_eq!(out[1], vocab.id("is"));
        assert_eq!(out[2], MASK_ID);
        assert_eq!(pos, 2);

        let t2 = PromptTemplate::parse("[MASK] [X] .").unwrap();
        let (out2, pos2) = apply_template(&t2, &vocab, &[vocab.id("a"), vocab.id("b")]);
        assert_eq!(out2[0], MASK_ID);
        assert_eq!(out2.len(), 4);
        assert_eq!(pos2, 0);

        let t3 = PromptTemplate::parse("[X] [MASK] .").unwrap();
        let (out3, pos3) = apply_template(&t3, &vocab, &[]);
        assert_eq!(out3[0], MASK_ID);
        assert_eq!(out3.len(), 2);
        assert_eq!(pos3, 0);
    }

    #[test]
    fn init_deterministic_and_shapes() {
        let a = init_params(5, 10, 4, 3, EncoderMode::MeanPool).unwrap();
        let b = init_params(5, 10, 4, 3, EncoderMode::MeanPool).unwrap();
        assert_eq!(a, b);
        let c = init_params(6, 10, 4, 3, EncoderMode::MeanPool).unwrap();
        assert_ne!(a, c);
        assert!(a.mask_bias.iter().all(|&v| v == 0.0));
        assert!(init_params(0, 10, 0, 3, EncoderMode::MeanPool).is_err());
    }

    #[test]
    fn encode_zero_embeddings() {
        let mut p = init_params(1, 6, 4, 3, EncoderMode::MeanPool).unwrap();
        p.embed.fill(0.0);
        let h = encode(&p, &[2, 3]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        p.mode = EncoderMode::MaskSlot;
        p.mask_bias = array![0.3, -0.1, 0.9];
        let h2 = encode(&p, &[2, 3]).unwrap();
        for (got, &b) in h2.iter().zip(p.mask_bias.iter()) {
            assert!((got - b.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_single_token_is_projection() {
        let p = init_params(2, 6, 4, 3, EncoderMode::MeanPool).unwrap();
        let h = encode(&p, &[4]).unwrap();
        let expect = p.proj.dot(&p.embed.row(4).to_owned());
        assert!(h.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn encode_token_order_invariant() {
        let p = init_params(3, 8, 5, 4, EncoderMode::MaskSlot).unwrap();
        let a = encode(&p, &[2, 5, 7, 3]).unwrap();
        let b = encode(&p, &[7, 3, 2, 5]).unwrap();
        // mean pooling is permutation-invariant up to summation order
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        }
    }

    #[test]
    fn mask_slot_output_in_open_unit_interval() {
        let p = init_params(9, 8, 5, 4, EncoderMode::MaskSlot).unwrap();
        let h = encode(&p, &[2, 3, 4]).unwrap();
        assert!(h.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn out_of_range_token_maps_to_unk() {
        let p = init_params(4, 6, 4, 3, EncoderMode::MeanPool).unwrap();
        let a = encode(&p, &[999]).unwrap();
        let b = encode(&p, &[UNK_ID]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_logits_contract_and_uniformity() {
        let p = init_params(7, 6, 4, 3, EncoderMode::MeanPool).unwrap();
        assert!(vocab_logits(&p, Array1::zeros(3).view()).is_err());

        let mut p = p;
        p.mode = EncoderMode::MaskSlot;
        let logits = vocab_logits(&p, Array1::zeros(3).view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let probs = crate::math::softmax(logits.view());
        assert!(probs.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
        assert!((probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_logits_linear_in_embedding_row() {
        let mut p = init_params(8, 6, 4, 3, EncoderMode::MaskSlot).unwrap();
        let h = array![0.2, -0.4, 0.6];
        let before = vocab_logits(&p, h.view()).unwrap();
        let mut row = p.embed.row_mut(2);
        row *= 2.0;
        let after = vocab_logits(&p, h.view()).unwrap();
        assert!((after[2] - 2.0 * before[2]).abs() < 1e-12);
        for t in (0..6).filter(|&t| t != 2) {
            assert!((after[t] - before[t]).abs() < 1e-15);
        }
    }

    /// Scalar function of encode: f = w . h; gradients vs central differences.
    #[test]
    fn encode_gradients_match_finite_differences() {
        for mode in [EncoderMode::MeanPool, EncoderMode::MaskSlot] {
            let params = init_params(11, 7, 5, 4, mode).unwrap();
            let prompted = vec![1, 3, 3, 6, 0];
            let w = Array1::from_shape_fn(4, |i| 0.3 + 0.1 * i as f64);
            let loss = |p: &EncoderParams| encode(p, &prompted).unwrap().dot(&w);

            let mut grads = ParamGrads::zeros_like(&params);
            encode_backward(&params, &prompted, w.view(), &mut grads);

            let step = 1e-6;
            let check = |get: &dyn Fn(&EncoderParams) -> f64,
                             set: &dyn Fn(&mut EncoderParams, f64),
                             analytic: f64| {
                let base = get(&params);
                let mut p = params.clone();
                set(&mut p, base + step);
                let up = loss(&p);
                set(&mut p, base - step);
                let down = loss(&p);
                let fd = (up - down) / (2.0 * step);
                assert!(
                    (fd - analytic).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "fd {fd} vs analytic {analytic} ({mode:?})"
                );
            };
            for (i, j) in [(1, 0), (3, 2), (6, 4)] {
                check(
                    &|p| p.embed[[i, j]],
                    &|p, v| p.embed[[i, j]] = v,
                    grads.embed[[i, j]],
                );
            }
            for (i, j) in [(0, 0), (2, 3)] {
                check(
                    &|p| p.proj[[i, j]],
                    &|p, v| p.proj[[i, j]] = v,
                    grads.proj[[i, j]],
                );
            }
            if mode == EncoderMode::MaskSlot {
                check(&|p| p.mask_bias[1], &|p, v| p.mask_bias[1] = v, grads.mask_bias[1]);
            }
        }
    }

    #[test]
    fn precomputed_base_round_trip() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 3").unwrap();
        writeln!(f, "1 2 3").unwrap();
        writeln!(f, "-0.5 0 4.25").unwrap();
        let base = PrecomputedBase::load(f.path()).unwrap();
        assert_eq!(base.vectors.shape(), &[2, 3]);
        assert_eq!(base.vectors[[1, 2]], 4.25);

        let params = init_params(13, 4, 3, 2, EncoderMode::MeanPool).unwrap();
        let h = base.encode(&params, 0);
        let expect = params.proj.dot(&base.vectors.row(0).to_owned());
        assert!(h.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn precomputed_base_truncated_file_errors() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "3 2").unwrap();
        writeln!(f, "1 2").unwrap();
        assert!(PrecomputedBase::load(f.path()).is_err());
    }
}
