//! Gaussian latent machinery: the context recurrence, the conditional prior
//! chain `r -> g -> s -> u` under the global latent, the approximate posterior
//! chain, reparameterized sampling and closed-form KL.

use std::f64::consts::PI;
use std::fmt;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VhdaError};
use crate::nn::{self, Init, Linear, Lstm, LstmState, ParamStore};

/// Lower bound added to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Conversation,
    Speaker,
    Goal,
    State,
    Utterance,
}

impl Level {
    pub const TURN_LEVELS: [Level; 4] = [Level::Speaker, Level::Goal, Level::State, Level::Utterance];
    pub const ALL: [Level; 5] = [
        Level::Conversation,
        Level::Speaker,
        Level::Goal,
        Level::State,
        Level::Utterance,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Level::Conversation => "c",
            Level::Speaker => "r",
            Level::Goal => "g",
            Level::State => "s",
            Level::Utterance => "u",
        }
    }

    /// Position within the turn-level chain (0 for `r`).
    fn depth(self) -> usize {
        match self {
            Level::Conversation | Level::Speaker => 0,
            Level::Goal => 1,
            Level::State => 2,
            Level::Utterance => 3,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Diagonal Gaussian parameters, one distribution per row.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub std: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.dims() != std.dims() {
            return Err(VhdaError::Width {
                what: "gaussian mean/std",
                expected: mean.elem_count(),
                actual: std.elem_count(),
            });
        }
        Ok(Self { mean, std })
    }

    pub fn standard(rows: usize, width: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros((rows, width), nn::DTYPE, &nn::device())?,
            std: Tensor::ones((rows, width), nn::DTYPE, &nn::device())?,
        })
    }

    pub fn from_rows(mean: &[Vec<f64>], std: &[Vec<f64>]) -> Result<Self> {
        Self::new(nn::tensor_from_rows(mean)?, nn::tensor_from_rows(std)?)
    }

    pub fn width(&self) -> usize {
        self.mean.dims().last().copied().unwrap_or(0)
    }

    pub fn rows(&self) -> usize {
        self.mean.dims().first().copied().unwrap_or(0)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }

    pub fn select_rows(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            mean: self.mean.index_select(idx, 0)?,
            std: self.std.index_select(idx, 0)?,
        })
    }

    /// Row-wise log density of `z` (same shape as the parameters).
    pub fn log_density(&self, z: &Tensor) -> Result<Tensor> {
        let k = self.width() as f64;
        let diff = ((z - &self.mean)? / &self.std)?;
        let quad = (diff.sqr()?.sum(1)? * -0.5)?;
        let log_std = self.std.log()?.sum(1)?;
        Ok(((quad - log_std)? - 0.5 * k * (2.0 * PI).ln())?)
    }
}

/// `z = mean + std * noise`; gradients flow to both parameters.
pub fn reparameterize(p: &GaussianParams, noise: &Tensor) -> Result<Tensor> {
    Ok((&p.mean + (&p.std * noise)?)?)
}

pub fn sample_gaussian<R: Rng + ?Sized>(p: &GaussianParams, rng: &mut R) -> Result<Tensor> {
    let noise = nn::standard_normal(rng, p.mean.dims())?;
    reparameterize(p, &noise)
}

/// Closed-form `KL(q || p)` per row for diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() {
        return Err(VhdaError::Width {
            what: "kl operands",
            expected: p.width(),
            actual: q.width(),
        });
    }
    let log_ratio = (p.std.log()? - q.std.log()?)?;
    let num = (q.std.sqr()? + (&q.mean - &p.mean)?.sqr()?)?;
    let den = (p.std.sqr()? * 2.0)?;
    let per_dim = ((log_ratio + (num / den)?)? - 0.5)?;
    Ok(per_dim.sum(1)?)
}

pub fn kl_to_standard(q: &GaussianParams) -> Result<Tensor> {
    let p = GaussianParams::standard(q.rows(), q.width())?;
    gaussian_kl(q, &p)
}

/// Single-hidden-layer tanh network producing `(mean, softplus + floor)`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    hidden: Linear,
    out: Linear,
    pub width: usize,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, width, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, 2 * width, rng)?,
            width,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<GaussianParams> {
        let o = self.out.forward(&nn::tanh(&self.hidden.forward(x)?)?)?;
        let k = self.width;
        let mean = o.narrow(1, 0, k)?;
        let std = (nn::softplus(&o.narrow(1, k, k)?)? + SIGMA_FLOOR)?;
        GaussianParams::new(mean, std)
    }
}

/// Uni-directional recurrence over per-turn feature vectors with a learned
/// initial state.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    cell: Lstm,
    h0: Tensor,
    c0: Tensor,
    pub feature_dim: usize,
    pub dim: usize,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            cell: Lstm::new(store, "ctx.cell", feature_dim, dim, rng)?,
            h0: store.create("ctx.h0", &[dim], Init::Zeros, rng)?,
            c0: store.create("ctx.c0", &[dim], Init::Zeros, rng)?,
            feature_dim,
            dim,
        })
    }

    pub fn initial_state(&self, batch: usize) -> Result<LstmState> {
        Ok(LstmState {
            h: self.h0.unsqueeze(0)?.broadcast_as((batch, self.dim))?.contiguous()?,
            c: self.c0.unsqueeze(0)?.broadcast_as((batch, self.dim))?.contiguous()?,
        })
    }

    /// `h_t` from `h_{t-1}` and the previous turn's features `(batch, feature_dim)`.
    pub fn update_context(&self, prev: &LstmState, features: &Tensor) -> Result<LstmState> {
        let d = features.dims().last().copied().unwrap_or(0);
        if d != self.feature_dim || prev.h.dims().last() != Some(&self.dim) {
            return Err(VhdaError::Width {
                what: "context update",
                expected: self.feature_dim,
                actual: d,
            });
        }
        self.cell.step(features, prev)
    }

    /// Context vectors for all turns: `features` is `(batch, T, feature_dim)`
    /// holding `v_1..v_T`; the result row `t` is `h_{t+1}` computed from
    /// `v_0 = 0, v_1, ..., v_t`. Output `(batch, T, dim)`.
    pub fn run(&self, features: &Tensor) -> Result<Tensor> {
        let (b, t, d) = features.dims3()?;
        let zero = Tensor::zeros((b, 1, d), nn::DTYPE, &nn::device())?;
        let shifted = Tensor::cat(&[&zero, &features.narrow(1, 0, t.saturating_sub(1))?], 1)?;
        let (out, _) = self.cell.run(&shifted, Some(self.initial_state(b)?))?;
        Ok(out)
    }
}

/// Conditioning inputs for a turn-level Gaussian; the upstream latents must
/// be present exactly as the chain requires.
#[derive(Debug, Clone, Copy)]
pub struct ChainInputs<'a> {
    pub context: &'a Tensor,
    pub global: &'a Tensor,
    pub z_speaker: Option<&'a Tensor>,
    pub z_goal: Option<&'a Tensor>,
    pub z_state: Option<&'a Tensor>,
}

impl<'a> ChainInputs<'a> {
    fn concat(&self, level: Level, evidence: Option<&Tensor>) -> Result<Tensor> {
        let mut parts: Vec<&Tensor> = vec![self.context, self.global];
        let needed: [(Option<&Tensor>, &'static str); 3] =
            [(self.z_speaker, "z_r"), (self.z_goal, "z_g"), (self.z_state, "z_s")];
        for (i, (z, name)) in needed.iter().enumerate() {
            if i < level.depth() {
                let z = z.ok_or(VhdaError::ChainOrder {
                    level: level.key(),
                    missing: name,
                })?;
                parts.push(z);
            }
        }
        if let Some(e) = evidence {
            parts.push(e);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentWidths {
    pub conversation: usize,
    pub turn: usize,
}

#[derive(Debug, Clone)]
pub struct LatentChain {
    prior: [GaussianHead; 4],
    posterior: [GaussianHead; 4],
    posterior_global: GaussianHead,
    pub widths: LatentWidths,
}

fn turn_index(level: Level) -> Result<usize> {
    match level {
        Level::Conversation => Err(VhdaError::Config("conversation level has no turn-level head".into())),
        l => Ok(l.depth()),
    }
}

impl LatentChain {
    /// `evidence_dims` are the widths of the speaker, goal, state and
    /// utterance encodings used by the posterior heads.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        context_dim: usize,
        conversation_dim: usize,
        evidence_dims: [usize; 4],
        widths: LatentWidths,
        rng: &mut R,
    ) -> Result<Self> {
        let base = context_dim + widths.conversation;
        let mk = |store: &mut ParamStore, prefix: &str, extra: [usize; 4], rng: &mut R| -> Result<[GaussianHead; 4]> {
            let mut heads = Vec::with_capacity(4);
            for (i, level) in Level::TURN_LEVELS.iter().enumerate() {
                let in_dim = base + i * widths.turn + extra[i];
                heads.push(GaussianHead::new(
                    store,
                    &format!("{prefix}.{}", level.key()),
                    in_dim,
                    widths.turn,
                    rng,
                )?);
            }
            Ok(heads.try_into().expect("four heads"))
        };
        Ok(Self {
            prior: mk(store, "prior", [0; 4], rng)?,
            posterior: mk(store, "post", evidence_dims, rng)?,
            posterior_global: GaussianHead::new(store, "post.c", conversation_dim, widths.conversation, rng)?,
            widths,
        })
    }

    pub fn prior_params(&self, level: Level, inputs: &ChainInputs<'_>) -> Result<GaussianParams> {
        let i = turn_index(level)?;
        self.prior[i].forward(&inputs.concat(level, None)?)
    }

    pub fn posterior_params(
        &self,
        level: Level,
        inputs: &ChainInputs<'_>,
        evidence: &Tensor,
    ) -> Result<GaussianParams> {
        let i = turn_index(level)?;
        self.posterior[i].forward(&inputs.concat(level, Some(evidence))?)
    }

    /// `q(z_c | conversation encoding)`.
    pub fn posterior_global(&self, conversation: &Tensor) -> Result<GaussianParams> {
        self.posterior_global.forward(conversation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(mean: f64, std: f64) -> GaussianParams {
        GaussianParams::from_rows(&[vec![mean]], &[vec![std]]).unwrap()
    }

    fn kl(q: &GaussianParams, p: &GaussianParams) -> f64 {
        gaussian_kl(q, p).unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl(&one(0.3, 1.7), &one(0.3, 1.7)), 0.0);
        assert!((kl(&one(1.0, 1.0), &one(0.0, 1.0)) - 0.5).abs() < 1e-12);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl(&one(0.0, 2.0), &one(0.0, 1.0)) - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_width_mismatch() {
        let a = GaussianParams::standard(1, 2).unwrap();
        let b = GaussianParams::standard(1, 3).unwrap();
        assert!(matches!(gaussian_kl(&a, &b), Err(VhdaError::Width { .. })));
    }

    #[test]
    fn sampling_is_reproducible_and_collapses_at_floor() {
        let p = one(2.5, SIGMA_FLOOR);
        let a: Vec<f64> = sample_gaussian(&p, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f64> = sample_gaussian(&p, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
        assert!((a[0] - 2.5).abs() < 1e-2);
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let p = GaussianParams::standard(n, 1).unwrap();
        let z: Vec<f64> = sample_gaussian(&p, &mut rng)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let m = z.iter().sum::<f64>() / n as f64;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((0.98..=1.02).contains(&v), "var {v}");
    }

    #[test]
    fn log_density_matches_formula() {
        let p = GaussianParams::from_rows(&[vec![0.5, -1.0]], &[vec![2.0, 0.5]]).unwrap();
        let z = nn::tensor_from_rows(&[vec![1.0, 0.0]]).unwrap();
        let got = p.log_density(&z).unwrap().to_vec1::<f64>().unwrap()[0];
        let lp = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln();
        assert!((got - (lp(1.0, 0.5, 2.0) + lp(0.0, -1.0, 0.5))).abs() < 1e-12);
    }

    fn chain() -> (LatentChain, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = LatentChain::new(
            &mut store,
            5,
            4,
            [2, 3, 3, 4],
            LatentWidths {
                conversation: 3,
                turn: 2,
            },
            &mut rng,
        )
        .unwrap();
        (c, store)
    }

    #[test]
    fn chain_order_enforced() {
        let (c, _s) = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = nn::standard_normal(&mut rng, &[1, 5]).unwrap();
        let zc = nn::standard_normal(&mut rng, &[1, 3]).unwrap();
        let zr = nn::standard_normal(&mut rng, &[1, 2]).unwrap();
        let mut inputs = ChainInputs {
            context: &h,
            global: &zc,
            z_speaker: None,
            z_goal: None,
            z_state: None,
        };
        assert!(c.prior_params(Level::Speaker, &inputs).is_ok());
        assert!(matches!(
            c.prior_params(Level::Goal, &inputs),
            Err(VhdaError::ChainOrder { missing: "z_r", .. })
        ));
        inputs.z_speaker = Some(&zr);
        assert!(c.prior_params(Level::Goal, &inputs).is_ok());
        assert!(matches!(
            c.prior_params(Level::Utterance, &inputs),
            Err(VhdaError::ChainOrder { missing: "z_g", .. })
        ));
    }

    #[test]
    fn sigma_respects_floor() {
        let (c, _s) = chain();
        let h = (Tensor::ones((2, 5), nn::DTYPE, &nn::device()).unwrap() * -1e4).unwrap();
        let zc = Tensor::zeros((2, 3), nn::DTYPE, &nn::device()).unwrap();
        let p = c
            .prior_params(
                Level::Speaker,
                &ChainInputs {
                    context: &h,
                    global: &zc,
                    z_speaker: None,
                    z_goal: None,
                    z_state: None,
                },
            )
            .unwrap();
        let s: Vec<f64> = p.std.flatten_all().unwrap().to_vec1().unwrap();
        assert!(s.iter().all(|&v| v >= SIGMA_FLOOR));
    }

    #[test]
    fn context_first_step_on_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ctx = ContextEncoder::new(&mut store, 4, 6, &mut rng).unwrap();
        let v = nn::standard_normal(&mut rng, &[1, 3, 4]).unwrap();
        let all = ctx.run(&v).unwrap();
        let zero = Tensor::zeros((1, 4), nn::DTYPE, &nn::device()).unwrap();
        let h1 = ctx.update_context(&ctx.initial_state(1).unwrap(), &zero).unwrap().h;
        let first: Vec<f64> = all.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(first, h1.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert_eq!(all.dims(), &[1, 3, 6]);
        let bad = Tensor::zeros((1, 5), nn::DTYPE, &nn::device()).unwrap();
        assert!(ctx.update_context(&ctx.initial_state(1).unwrap(), &bad).is_err());
    }
}
