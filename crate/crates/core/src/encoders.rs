//! Sequence encoders and the dialog feature encoders built from them.
//!
//! Every sequence encoder runs a bidirectional LSTM over its input rows,
//! projects the concatenated directions back to the output width, and pools
//! the projected states with a (optionally query-conditioned) attention
//! distribution. The pooled vector is therefore a convex combination of the
//! rows of `H`.

use candle_core::{Tensor, D};
use rand::Rng;

use crate::corpus::EMPTY_ID;
use crate::error::{Result, VhdaError};
use crate::nn::{self, Embedding, Init, Linear, Lstm, ParamStore};

#[derive(Debug, Clone)]
pub struct SeqEncoder {
    fwd: Lstm,
    bwd: Lstm,
    proj: Linear,
    att_hidden: Linear,
    att_out: Linear,
    pub in_dim: usize,
    pub dim: usize,
    pub query_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SeqEncoding {
    /// Pooled representation `(batch, dim)`.
    pub output: Tensor,
    /// Attention weights `(batch, n)`; zero past each sequence's length.
    pub attention: Tensor,
    /// Projected bidirectional states `(batch, n, dim)`.
    pub states: Tensor,
}

impl SeqEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), in_dim, dim, rng)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), in_dim, dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), 2 * dim, dim, rng)?,
            att_hidden: Linear::new(store, &format!("{name}.att_hidden"), dim + query_dim, dim, rng)?,
            att_out: Linear::new(store, &format!("{name}.att_out"), dim, 1, rng)?,
            in_dim,
            dim,
            query_dim,
        })
    }

    /// Batched encoding of `xs: (batch, n, in_dim)` where row `b` is valid up
    /// to `lengths[b]`. `query` is either `(batch, query_dim)`, broadcast to
    /// every element, or `(batch, n, query_dim)`. A missing query is zero.
    pub fn encode(&self, xs: &Tensor, lengths: &[usize], query: Option<&Tensor>) -> Result<SeqEncoding> {
        let states = self.states(xs, lengths)?;
        self.pool(&states, lengths, query)
    }

    /// Projected bidirectional states `(batch, n, dim)`; independent of the
    /// query, so callers pooling one sequence under several queries can
    /// compute them once.
    pub fn states(&self, xs: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, n, d) = xs.dims3()?;
        if n == 0 || lengths.contains(&0) {
            return Err(VhdaError::EmptySequence);
        }
        if d != self.in_dim {
            return Err(VhdaError::Width {
                what: "sequence encoder input",
                expected: self.in_dim,
                actual: d,
            });
        }
        if lengths.len() != b || lengths.iter().any(|&l| l > n) {
            return Err(VhdaError::Config("sequence lengths do not match the batch".into()));
        }

        let (fwd_out, _) = self.fwd.run(xs, None)?;
        // The backward direction reads each sequence reversed within its own
        // length, so padding never leaks into valid positions.
        let rev: Vec<usize> = lengths
            .iter()
            .enumerate()
            .flat_map(|(bi, &len)| (0..n).map(move |i| bi * n + if i < len { len - 1 - i } else { i }))
            .collect();
        let rev_idx = nn::index_tensor(&rev)?;
        let flip = |t: &Tensor, width: usize| -> Result<Tensor> {
            Ok(t.reshape((b * n, width))?
                .index_select(&rev_idx, 0)?
                .reshape((b, n, width))?)
        };
        let (bwd_rev, _) = self.bwd.run(&flip(xs, d)?, None)?;
        let bwd_out = flip(&bwd_rev, self.dim)?;
        self.proj.forward(&Tensor::cat(&[&fwd_out, &bwd_out], 2)?)
    }

    /// Attention pooling of precomputed `states`.
    pub fn pool(&self, states: &Tensor, lengths: &[usize], query: Option<&Tensor>) -> Result<SeqEncoding> {
        let (b, n, _) = states.dims3()?;
        if n == 0 || lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > n) {
            return Err(VhdaError::EmptySequence);
        }
        let att_in = if self.query_dim == 0 {
            if query.is_some() {
                return Err(VhdaError::Config("encoder has no query input".into()));
            }
            states.clone()
        } else {
            let q = match query {
                None => Tensor::zeros((b, n, self.query_dim), nn::DTYPE, &nn::device())?,
                Some(q) if q.rank() == 2 => q.unsqueeze(1)?.broadcast_as((b, n, self.query_dim))?.contiguous()?,
                Some(q) => q.clone(),
            };
            let qd = q.dim(D::Minus1)?;
            if qd != self.query_dim {
                return Err(VhdaError::Width {
                    what: "attention query",
                    expected: self.query_dim,
                    actual: qd,
                });
            }
            Tensor::cat(&[states, &q], 2)?
        };
        let scores = self
            .att_out
            .forward(&nn::tanh(&self.att_hidden.forward(&att_in)?)?)?
            .squeeze(2)?;
        let scores = (scores + nn::length_mask_bias(lengths, n)?)?;
        let attention = candle_nn::ops::softmax(&scores, 1)?;
        let output = attention.unsqueeze(1)?.matmul(states)?.squeeze(1)?;
        Ok(SeqEncoding {
            output,
            attention,
            states: states.clone(),
        })
    }

    /// Single-sequence form: `x: (n, in_dim)`, optional per-element query
    /// `(n, query_dim)`; returns the pooled `dim`-vector and the weights.
    pub fn encode_sequence(&self, x: &Tensor, query: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (n, _) = x.dims2()?;
        if n == 0 {
            return Err(VhdaError::EmptySequence);
        }
        let q = query.map(|q| q.unsqueeze(0)).transpose()?;
        let enc = self.encode(&x.unsqueeze(0)?, &[n], q.as_ref())?;
        Ok((enc.output.squeeze(0)?, enc.attention.squeeze(0)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderWidths {
    pub word: usize,
    pub act: usize,
    pub goal: usize,
    pub state: usize,
    pub utterance: usize,
    pub conversation: usize,
    pub speaker: usize,
    pub n_speakers: usize,
    pub query: usize,
}

/// Word embeddings, the five sequence encoders and the speaker embedding.
#[derive(Debug, Clone)]
pub struct FeatureEncoders {
    pub words: Embedding,
    pub act: SeqEncoder,
    pub goal: SeqEncoder,
    pub state: SeqEncoder,
    pub utterance: SeqEncoder,
    pub conversation: SeqEncoder,
    pub speaker: Embedding,
    pub widths: EncoderWidths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActSetKind {
    Goal,
    State,
}

impl FeatureEncoders {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        w: EncoderWidths,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            words: Embedding::new(store, "enc.words", vocab_size, w.word, Init::Uniform(0.1), rng)?,
            act: SeqEncoder::new(store, "enc.act", w.word, w.act, 0, rng)?,
            goal: SeqEncoder::new(store, "enc.goal", w.act, w.goal, w.query, rng)?,
            state: SeqEncoder::new(store, "enc.state", w.act, w.state, w.query, rng)?,
            utterance: SeqEncoder::new(store, "enc.utterance", w.word, w.utterance, w.query, rng)?,
            conversation: SeqEncoder::new(store, "post.enc.conversation", w.utterance, w.conversation, 0, rng)?,
            speaker: Embedding::new(store, "enc.speaker", w.n_speakers, w.speaker, Init::Uniform(0.1), rng)?,
            widths: w,
        })
    }

    /// Embeds padded token id rows into `(batch, n, word)`.
    pub fn embed_tokens(&self, rows: &[Vec<usize>]) -> Result<(Tensor, Vec<usize>)> {
        let n = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
        let flat: Vec<usize> = rows
            .iter()
            .flat_map(|r| r.iter().copied().chain(std::iter::repeat_n(0, n - r.len())))
            .collect();
        let e = self.words.lookup(&flat)?.reshape((rows.len(), n, self.widths.word))?;
        Ok((e, lengths))
    }

    /// Encodes act triples given as token-id triples; `(count, act)`.
    pub fn encode_acts(&self, acts: &[Vec<usize>]) -> Result<Tensor> {
        let (x, lengths) = self.embed_tokens(acts)?;
        Ok(self.act.encode(&x, &lengths, None)?.output)
    }

    pub fn encode_act(&self, act_token_ids: [usize; 3]) -> Result<Tensor> {
        Ok(self.encode_acts(&[act_token_ids.to_vec()])?.squeeze(0)?)
    }

    /// Encoding of the reserved empty-set token through the act encoder.
    pub fn empty_act(&self) -> Result<Tensor> {
        Ok(self.encode_acts(&[vec![EMPTY_ID]])?.squeeze(0)?)
    }

    /// Encodes batched act sets. `act_table` holds one act encoding per row
    /// and `sets[b]` lists row indices into it; an empty set must already be
    /// mapped to the row holding the empty-token encoding.
    pub fn encode_act_sets(
        &self,
        kind: ActSetKind,
        act_table: &Tensor,
        sets: &[Vec<usize>],
        global: Option<&Tensor>,
    ) -> Result<Tensor> {
        let m = sets.iter().map(Vec::len).max().unwrap_or(0);
        if m == 0 || sets.iter().any(Vec::is_empty) {
            return Err(VhdaError::EmptySequence);
        }
        let lengths: Vec<usize> = sets.iter().map(Vec::len).collect();
        let flat: Vec<usize> = sets
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat_n(s[0], m - s.len())))
            .collect();
        let da = act_table.dim(1)?;
        let x = act_table
            .index_select(&nn::index_tensor(&flat)?, 0)?
            .reshape((sets.len(), m, da))?;
        let enc = match kind {
            ActSetKind::Goal => &self.goal,
            ActSetKind::State => &self.state,
        };
        Ok(enc.encode(&x, &lengths, global)?.output)
    }

    pub fn encode_utterances(&self, rows: &[Vec<usize>], global: Option<&Tensor>) -> Result<Tensor> {
        let (x, lengths) = self.embed_tokens(rows)?;
        Ok(self.utterance.encode(&x, &lengths, global)?.output)
    }

    /// Query-independent utterance states and lengths, for use with
    /// [`FeatureEncoders::pool_utterances`].
    pub fn utterance_states(&self, rows: &[Vec<usize>]) -> Result<(Tensor, Vec<usize>)> {
        let (x, lengths) = self.embed_tokens(rows)?;
        Ok((self.utterance.states(&x, &lengths)?, lengths))
    }

    pub fn pool_utterances(&self, states: &Tensor, lengths: &[usize], global: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.utterance.pool(states, lengths, global)?.output)
    }

    /// Conversation encoding over `(batch, turns, utterance)` encodings.
    pub fn encode_conversation(&self, utterances: &Tensor, turn_counts: &[usize]) -> Result<Tensor> {
        Ok(self.conversation.encode(utterances, turn_counts, None)?.output)
    }

    pub fn embed_speaker(&self, speaker: usize) -> Result<Tensor> {
        Ok(self.speaker.lookup(&[speaker])?.squeeze(0)?)
    }

    pub fn embed_speakers(&self, speakers: &[usize]) -> Result<Tensor> {
        self.speaker.lookup(speakers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(in_dim: usize, dim: usize, q: usize) -> SeqEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        SeqEncoder::new(&mut store, "t", in_dim, dim, q, &mut rng).unwrap()
    }

    #[test]
    fn single_element_gets_full_attention() {
        let enc = encoder(4, 8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = nn::standard_normal(&mut rng, &[1, 4]).unwrap();
        let (h, a) = enc.encode_sequence(&x, None).unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), vec![1.0]);
        let full = enc.encode(&x.unsqueeze(0).unwrap(), &[1], None).unwrap();
        let row: Vec<f64> = full.states.squeeze(0).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        assert_eq!(h.to_vec1::<f64>().unwrap(), row);
    }

    #[test]
    fn attention_normalized_and_shape() {
        let enc = encoder(5, 8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = nn::standard_normal(&mut rng, &[3, 5]).unwrap();
        let (h, a) = enc.encode_sequence(&x, None).unwrap();
        assert_eq!(h.dims(), &[8]);
        let a: Vec<f64> = a.to_vec1().unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let enc = encoder(2, 4, 0);
        let x = Tensor::zeros((0, 2), nn::DTYPE, &nn::device()).unwrap();
        assert!(matches!(enc.encode_sequence(&x, None), Err(VhdaError::EmptySequence)));
    }

    #[test]
    fn padding_does_not_change_valid_encodings() {
        let enc = encoder(3, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = nn::standard_normal(&mut rng, &[2, 3]).unwrap();
        let q = nn::standard_normal(&mut rng, &[1, 2]).unwrap();
        let alone = enc.encode(&x.unsqueeze(0).unwrap(), &[2], Some(&q)).unwrap().output;
        let pad = nn::standard_normal(&mut rng, &[2, 3]).unwrap();
        let padded = Tensor::cat(&[&x, &pad], 0).unwrap().unsqueeze(0).unwrap();
        let with_pad = enc.encode(&padded, &[2], Some(&q)).unwrap().output;
        let d = (alone - with_pad).unwrap().abs().unwrap().max_all().unwrap();
        assert!(nn::scalar(&d).unwrap() < 1e-12);
    }

    #[test]
    fn broadcast_query_changes_attention() {
        let enc = encoder(4, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = nn::standard_normal(&mut rng, &[1, 4, 4]).unwrap();
        let q1 = nn::standard_normal(&mut rng, &[1, 3]).unwrap();
        let q2 = nn::standard_normal(&mut rng, &[1, 3]).unwrap();
        let a1: Vec<f64> = enc
            .encode(&x, &[4], Some(&q1))
            .unwrap()
            .attention
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let a2: Vec<f64> = enc
            .encode(&x, &[4], Some(&q2))
            .unwrap()
            .attention
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let diff: f64 = a1.iter().zip(&a2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "query had no effect on attention");
    }
}
