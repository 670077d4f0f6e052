//! Small neural building blocks on top of candle: a deterministic named
//! parameter store, linear maps, LSTM cells and a few numerically stable ops.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VhdaError};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    /// Glorot uniform over the first two dimensions of the shape.
    Glorot,
}

/// Named trainable parameters, iterated in a fixed (lexicographic) order so
/// that reductions over parameters are reproducible.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(VhdaError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Glorot => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(VhdaError::Version(format!(
                "expected {} parameter tensors, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| VhdaError::Version(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(VhdaError::Version(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
        let map = candle_core::safetensors::load(path, &device())?;
        Ok(map.into_iter().collect())
    }
}

/// Affine map `x W + b` on row vectors; accepts inputs of any rank whose last
/// dimension is the input width.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.create(&format!("{name}.w"), &[in_dim, out_dim], Init::Glorot, rng)?,
            b: store.create(&format!("{name}.b"), &[out_dim], Init::Zeros, rng)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or(VhdaError::EmptySequence)?;
        if last != self.in_dim {
            return Err(VhdaError::Width {
                what: "linear input",
                expected: self.in_dim,
                actual: last,
            });
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, self.in_dim))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// One hidden tanh layer followed by a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden_dim, out_dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&tanh(&self.hidden.forward(x)?)?)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }
}

/// LSTM cell with gates ordered (input, forget, output, cell).
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
    gate_scale: Tensor,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.create(&format!("{name}.w_ih"), &[in_dim, 4 * hidden], Init::Uniform(a), rng)?;
        let w_hh = store.create(&format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::Uniform(a), rng)?;
        // forget-gate bias starts at 1
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let b = store.create(&format!("{name}.b"), &[4 * hidden], Init::Zeros, rng)?;
        store
            .get(&format!("{name}.b"))
            .expect("just created")
            .set(&Tensor::from_vec(bias, 4 * hidden, &device())?)?;
        let mut scale = vec![1.0; 4 * hidden];
        scale[3 * hidden..].iter_mut().for_each(|x| *x = 2.0);
        Ok(Self {
            w_ih,
            w_hh,
            b,
            gate_scale: Tensor::from_vec(scale, 4 * hidden, &device())?,
            in_dim,
            hidden,
        })
    }

    pub fn zero_state(&self, batch: usize) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), DTYPE, &device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection `x W_ih + b` for a whole `(batch, len, in)` sequence.
    pub fn project_inputs(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, n, d) = xs.dims3()?;
        if d != self.in_dim {
            return Err(VhdaError::Width {
                what: "lstm input",
                expected: self.in_dim,
                actual: d,
            });
        }
        Ok(xs
            .reshape((b * n, d))?
            .matmul(&self.w_ih)?
            .broadcast_add(&self.b)?
            .reshape((b, n, 4 * self.hidden))?)
    }

    /// One step given the already projected input `(batch, 4h)`. Gate blocks
    /// are laid out as input, forget, output, cell candidate.
    pub fn step_projected(&self, gx: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (gx + state.h.matmul(&self.w_hh)?)?;
        let hd = self.hidden;
        // one sigmoid over all gates; the cell block is pre-scaled by 2 so
        // that 2 s - 1 = tanh
        let s = candle_nn::ops::sigmoid(&gates.broadcast_mul(&self.gate_scale)?)?;
        let i = s.narrow(1, 0, hd)?;
        let f = s.narrow(1, hd, hd)?;
        let o = s.narrow(1, 2 * hd, hd)?;
        let g = ((s.narrow(1, 3 * hd, hd)? * 2.0)? - 1.0)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * tanh(&c)?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gx = x.matmul(&self.w_ih)?.broadcast_add(&self.b)?;
        self.step_projected(&gx, state)
    }

    /// Runs over `(batch, len, in)`; returns hidden outputs `(batch, len, h)`.
    /// Positions past a sequence's end produce values that callers mask out.
    pub fn run(&self, xs: &Tensor, init: Option<LstmState>) -> Result<(Tensor, LstmState)> {
        let (b, n, _) = xs.dims3()?;
        let gx = self.project_inputs(xs)?;
        let mut state = match init {
            Some(s) => s,
            None => self.zero_state(b)?,
        };
        // time-major so each step reads a contiguous block
        let gx = gx.transpose(0, 1)?.contiguous()?;
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            state = self.step_projected(&gx.get(t)?, &state)?;
            outs.push(state.h.clone());
        }
        Ok((Tensor::stack(&outs, 1)?, state))
    }
}

/// Lookup table of row vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            table: store.create(name, &[rows, dim], init, rng)?,
            rows,
            dim,
        })
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.rows) {
            return Err(VhdaError::Index {
                what: "embedding",
                index: bad,
                size: self.rows,
            });
        }
        let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), ids.len(), &device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

// ---------------------------------------------------------------------------
// ops

/// `tanh(x) = 2 sigmoid(2x) - 1`; the sigmoid kernel is several times faster
/// than the f64 tanh kernel on CPU.
pub fn tanh(x: &Tensor) -> Result<Tensor> {
    Ok(((candle_nn::ops::sigmoid(&(x * 2.0)?)? * 2.0)? - 1.0)?)
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn logsumexp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((s + m)?.squeeze(dim)?)
}

/// Elementwise binary cross-entropy between logits and {0,1} targets.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let t = (logits.relu()? - (logits * targets)?)?;
    Ok((t + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Cross-entropy of each row of `logits` against integer `targets`.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let lp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(
        targets.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        (targets.len(), 1),
        &device(),
    )?;
    Ok(lp.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

pub fn tensor_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (n, d), &device())?)
}

pub fn vector(values: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), values.len(), &device())?)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

pub fn index_tensor(ids: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        ids.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        ids.len(),
        &device(),
    )?)
}

/// Additive attention mask `(batch, n)`: 0 at valid positions, a large
/// negative number past each sequence's length.
pub fn length_mask_bias(lengths: &[usize], n: usize) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&len| (0..n).map(move |i| if i < len { 0.0 } else { -1e30 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), n), &device())?)
}

pub fn length_mask(lengths: &[usize], n: usize) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&len| (0..n).map(move |i| if i < len { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), n), &device())?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_is_stable_and_positive() {
        let x = vector(&[-800.0, -1.0, 0.0, 1.0, 800.0]).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((y[2] - 2f64.ln()).abs() < 1e-15);
        assert!((y[4] - 800.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let x = tensor_from_rows(&[vec![1.0, 2.0, 3.0], vec![-1000.0, -1000.0, -1000.0]]).unwrap();
        let y: Vec<f64> = logsumexp(&x, 1).unwrap().to_vec1().unwrap();
        let naive = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((y[0] - naive).abs() < 1e-12);
        assert!((y[1] - (-1000.0 + 3f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn bce_matches_definition() {
        let l = vector(&[0.3, -2.0]).unwrap();
        let t = vector(&[1.0, 0.0]).unwrap();
        let y: Vec<f64> = bce_with_logits(&l, &t).unwrap().to_vec1().unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((y[0] + s(0.3).ln()).abs() < 1e-12);
        assert!((y[1] + (1.0 - s(-2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.create("a", &[2], Init::Zeros, &mut rng).unwrap();
        assert!(s.create("a", &[2], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn embedding_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let e = Embedding::new(&mut s, "e", 3, 2, Init::Uniform(0.1), &mut rng).unwrap();
        assert!(matches!(e.lookup(&[3]), Err(VhdaError::Index { .. })));
    }
}
