//! Layers built on the tape: affine maps, layer norm, multi-head attention and
//! the pre-norm transformer block shared by the text encoder and SASRec.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// One forward pass: a tape plus the parameter stores it reads from.
///
/// Parameters are copied onto the tape once per session no matter how often
/// they are used. Dropout is active only for sessions built with [`Session::train`].
pub struct Session<'s, T: Scalar> {
    tape: Tape<T>,
    stores: Vec<&'s ParamStore<T>>,
    cache: HashMap<ParamId, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn train(stores: &[&'s ParamStore<T>], dropout: f64, rng_seed: u64) -> Self {
        Session {
            tape: Tape::new(),
            stores: stores.to_vec(),
            cache: HashMap::new(),
            dropout: Some((dropout, ChaCha8Rng::seed_from_u64(rng_seed))),
        }
    }

    /// Gradient-free forward pass with dropout disabled.
    pub fn eval(stores: &[&'s ParamStore<T>]) -> Self {
        Session {
            tape: Tape::inference(),
            stores: stores.to_vec(),
            cache: HashMap::new(),
            dropout: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.cache.get(&id) {
            return Ok(v);
        }
        let store = self
            .stores
            .iter()
            .find(|s| s.get(id).is_ok())
            .ok_or_else(|| Error::MissingNode(format!("parameter {id:?} not in session stores")))?;
        let v = self.tape.param(store, id)?;
        self.cache.insert(id, v);
        Ok(v)
    }

    /// Inverted dropout: zero with probability `rate`, otherwise scale by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let rate = *rate;
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.tape.value(x).len();
        let mask: Rc<[T]> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.tape.mul_const(x, mask)
    }

    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// Affine map `x W + b` applied to the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], role, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), role);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Square map initialised to the identity with zero bias.
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, n: usize, role: ParamRole) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::eye(n), role);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n]), role);
        Linear {
            weight,
            bias,
            fan_in: n,
            fan_out: n,
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let h = s.matmul(x, w)?;
        s.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, role: ParamRole) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), role),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), role),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma)?;
        let b = s.param(self.beta)?;
        s.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Which key positions each query position may attend to, for a batch of
/// equal-length (padded) sequences.
#[derive(Clone, Debug)]
pub struct AttnMask {
    batch: usize,
    seq: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// `key_valid[b * seq + t]` marks real (non-pad) positions.
    pub fn new(batch: usize, seq: usize, causal: bool, key_valid: Option<&[bool]>) -> Result<Self> {
        if let Some(v) = key_valid {
            if v.len() != batch * seq {
                return Err(Error::shape(format!(
                    "key mask of {} for batch {batch} x seq {seq}",
                    v.len()
                )));
            }
        }
        let mut allowed = Vec::with_capacity(batch * seq * seq);
        for b in 0..batch {
            for q in 0..seq {
                for k in 0..seq {
                    let ok = (!causal || k <= q) && key_valid.is_none_or(|v| v[b * seq + k]);
                    allowed.push(ok);
                }
            }
        }
        Ok(AttnMask {
            batch,
            seq,
            allowed,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// The mask repeated for every head, laid out as `[B*H, S, S]`.
    fn per_head(&self, heads: usize) -> Vec<bool> {
        let block = self.seq * self.seq;
        let mut out = Vec::with_capacity(self.allowed.len() * heads);
        for b in 0..self.batch {
            for _ in 0..heads {
                out.extend_from_slice(&self.allowed[b * block..(b + 1) * block]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, role, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, role, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, role, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, role, rng),
            heads,
            dim,
        })
    }

    /// Returns the output `[B*S, d]` and the attention weights `[B*H, S, S]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, mask: &AttnMask) -> Result<(Var, Var)> {
        let (batch, seq, h) = (mask.batch(), mask.seq(), self.heads);
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let q = s.split_heads(q, batch, seq, h)?;
        let k = s.split_heads(k, batch, seq, h)?;
        let v = s.split_heads(v, batch, seq, h)?;
        let scores = s.bmm(q, k, true)?;
        let scale = T::lit(1.0 / ((self.dim / h) as f64).sqrt());
        let scores = s.scale(scores, scale)?;
        let probs = s.softmax(scores, Some(&mask.per_head(h)))?;
        let dropped = s.dropout(probs)?;
        let ctx = s.bmm(dropped, v, false)?;
        let ctx = s.merge_heads(ctx, batch, seq, h)?;
        Ok((self.out.forward(s, ctx)?, probs))
    }

    pub fn num_params(&self) -> usize {
        4 * self.query.num_params()
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + FFN(LN(h))` with a
/// GELU feed-forward of inner width `4d`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, role),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, role, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, role),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 4 * dim, role, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * dim, dim, role, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, mask: &AttnMask) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, mask)?.0)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        mask: &AttnMask,
    ) -> Result<(Var, Var)> {
        let n = self.norm1.forward(s, x)?;
        let (a, weights) = self.attn.forward(s, n, mask)?;
        let a = s.dropout(a)?;
        let h = s.add(x, a)?;
        let n = self.norm2.forward(s, h)?;
        let f = self.ff_in.forward(s, n)?;
        let f = s.gelu(f)?;
        let f = self.ff_out.forward(s, f)?;
        let f = s.dropout(f)?;
        Ok((s.add(h, f)?, weights))
    }

    pub fn num_params(&self) -> usize {
        let d = self.attn.dim;
        4 * d + self.attn.num_params() + self.ff_in.num_params() + self.ff_out.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn block(dim: usize, heads: usize) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = TransformerBlock::new(&mut store, "blk", dim, heads, ParamRole::Backbone, &mut rng).unwrap();
        (store, b)
    }

    fn random_input(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = TransformerBlock::new(&mut store, "b", 6, 4, ParamRole::Backbone, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, b) = block(8, 2);
        let mut s = Session::eval(&[&store]);
        let x = s.constant(random_input(1, 8, 1));
        let mask = AttnMask::new(1, 1, true, None).unwrap();
        let (_, w) = b.forward_with_weights(&mut s, x, &mask).unwrap();
        assert!(s.value(w).data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn zero_query_key_projections_give_uniform_rows() {
        let (mut store, b) = block(8, 2);
        for id in [b.attn.query.weight, b.attn.key.weight] {
            store.get_mut(id).unwrap().value = Tensor::zeros(&[8, 8]);
        }
        let mut s = Session::eval(&[&store]);
        let x = s.constant(random_input(5, 8, 2));
        let mask = AttnMask::new(1, 5, false, None).unwrap();
        let (_, w) = b.forward_with_weights(&mut s, x, &mask).unwrap();
        for &p in s.value(w).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_block_ignores_future_positions() {
        let (store, b) = block(8, 2);
        let seq = 6;
        let base = random_input(seq, 8, 3);
        let mut perturbed = base.clone();
        for v in &mut perturbed.data_mut()[4 * 8..5 * 8] {
            *v += 0.7;
        }
        let run = |input: Tensor<f64>| {
            let mut s = Session::eval(&[&store]);
            let x = s.constant(input);
            let mask = AttnMask::new(1, seq, true, None).unwrap();
            let y = b.forward(&mut s, x, &mask).unwrap();
            s.value(y).clone()
        };
        let (a, c) = (run(base), run(perturbed));
        assert_eq!(&a.data()[..4 * 8], &c.data()[..4 * 8]);
        assert_ne!(&a.data()[4 * 8..], &c.data()[4 * 8..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, b) = block(8, 4);
        let mut s = Session::eval(&[&store]);
        let x = s.constant(random_input(2 * 7, 8, 4));
        let valid: Vec<bool> = (0..14).map(|i| i % 7 >= 2).collect();
        let mask = AttnMask::new(2, 7, true, Some(&valid)).unwrap();
        let (_, w) = b.forward_with_weights(&mut s, x, &mask).unwrap();
        for row in s.value(w).data().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9, "{sum}");
        }
    }

    #[test]
    fn block_parameter_count() {
        let (store, b) = block(8, 2);
        assert_eq!(store.num_tunable(), b.num_params());
        assert_eq!(b.num_params(), 4 * 8 + 4 * (64 + 8) + (8 * 32 + 32) + (32 * 8 + 8));
    }

    #[test]
    fn dropout_is_inverted_and_eval_is_identity() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::train(&[&store], 0.5, 9);
        let x = s.constant(Tensor::full(&[1000], 1.0));
        let y = s.dropout(x).unwrap();
        let v = s.value(y);
        assert!(v.data().iter().all(|&z| z == 0.0 || z == 2.0));
        let kept = v.data().iter().filter(|&&z| z == 2.0).count();
        assert!((400..600).contains(&kept));

        let mut e = Session::eval(&[&store]);
        let x = e.constant(Tensor::full(&[10], 1.0));
        let y = e.dropout(x).unwrap();
        assert_eq!(x, y);
    }
}
