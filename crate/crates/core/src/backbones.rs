//! User-side architectures (SASRec and DSSM) and the full recommender that
//! pairs one of them with an item encoder.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::encoders::{EncoderSpec, ItemData, ItemEncoder, Tower};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, LayerNorm, Session, TransformerBlock};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SasrecSpec {
    pub blocks: usize,
    pub heads: usize,
    /// Positional table size, i.e. the longest history the model reads.
    pub max_len: usize,
}

impl Default for SasrecSpec {
    fn default() -> Self {
        SasrecSpec {
            blocks: 2,
            heads: 2,
            max_len: 23,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DssmSpec {
    pub layers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackboneSpec {
    Sasrec(SasrecSpec),
    Dssm(DssmSpec),
}

impl BackboneSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BackboneSpec::Sasrec(_) => "sasrec",
            BackboneSpec::Dssm(_) => "dssm",
        }
    }
}

/// Causal transformer over left-padded item sequences. Positions count back
/// from the most recent item, so the final slot always has position 0.
#[derive(Clone, Debug)]
pub struct Sasrec {
    pub spec: SasrecSpec,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Sasrec {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: SasrecSpec, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let role = ParamRole::Backbone;
        let positions = store.add_normal("sasrec.position_embedding", &[spec.max_len, d], role, rng);
        let blocks = (0..spec.blocks)
            .map(|b| TransformerBlock::new(store, &format!("sasrec.block{b}"), d, spec.heads, role, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "sasrec.final_norm", d, role);
        Ok(Sasrec {
            spec,
            positions,
            blocks,
            norm,
        })
    }

    /// Hidden states `[B*S, d]` for item vectors laid out `[B*S, d]`; rows whose
    /// `valid` flag is false are padding and come out as zeros.
    pub fn user_states<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        item_vecs: Var,
        batch: usize,
        seq: usize,
        valid: &[bool],
    ) -> Result<Var> {
        if seq > self.spec.max_len {
            return Err(Error::Length {
                len: seq,
                max: self.spec.max_len,
            });
        }
        if valid.len() != batch * seq || s.shape(item_vecs)[0] != batch * seq {
            return Err(Error::shape(format!(
                "{} item rows and {} flags for batch {batch} x seq {seq}",
                s.shape(item_vecs)[0],
                valid.len()
            )));
        }
        let keep: Rc<[T]> = valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        let x = s.mul_rows(item_vecs, keep.clone())?;
        let table = s.param(self.positions)?;
        let pos: Vec<usize> = (0..batch).flat_map(|_| (0..seq).rev()).collect();
        let p = s.gather_rows(table, pos)?;
        let mut h = s.add(x, p)?;
        h = s.dropout(h)?;
        let mask = AttnMask::new(batch, seq, true, Some(valid))?;
        for b in &self.blocks {
            h = b.forward(s, h, &mask)?;
        }
        let h = self.norm.forward(s, h)?;
        s.mul_rows(h, keep)
    }
}

/// Two-tower user side: an embedding row per user, then `layers` GELU layers.
#[derive(Clone, Debug)]
pub struct Dssm {
    pub spec: DssmSpec,
    pub users: ParamId,
    pub num_users: usize,
    pub tower: Tower,
}

impl Dssm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        spec: DssmSpec,
        num_users: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Dssm {
            spec,
            users: store.add_normal("dssm.user_table", &[num_users, d], ParamRole::Backbone, rng),
            num_users,
            tower: Tower::new(store, "dssm.tower", spec.layers, d, rng),
        }
    }

    pub fn user_vectors<T: Scalar>(&self, s: &mut Session<'_, T>, users: &[usize]) -> Result<Var> {
        if let Some(&u) = users.iter().find(|&&u| u >= self.num_users) {
            return Err(Error::Bounds {
                what: "user",
                index: u,
                len: self.num_users,
            });
        }
        let t = s.param(self.users)?;
        let x = s.gather_rows(t, users.to_vec())?;
        self.tower.forward(s, x)
    }
}

/// Raw matching score `u · v`; the sigmoid only ever appears inside the loss.
pub fn score<T: Scalar>(user: &[T], item: &[T]) -> Result<T> {
    if user.len() != item.len() {
        return Err(Error::shape(format!("score of {}-dim user and {}-dim item", user.len(), item.len())));
    }
    Ok(user.iter().zip(item).map(|(&a, &b)| a * b).sum())
}

/// Scores of every user row against every item row, `[n, m]`.
pub fn score_all<T: Scalar>(users: &Tensor<T>, items: &Tensor<T>) -> Result<Tensor<T>> {
    users.matmul(&items.transpose()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub d: usize,
    pub backbone: BackboneSpec,
    pub encoder: EncoderSpec,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Sasrec(Sasrec),
    Dssm(Dssm),
}

/// A backbone, an item encoder and the parameters of both.
#[derive(Clone, Debug)]
pub struct Recommender<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub encoder: ItemEncoder,
    pub backbone: Backbone,
}

impl<T: Scalar> Recommender<T> {
    pub fn new(spec: ModelSpec, num_users: usize, data: &ItemData<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ItemEncoder::new(&mut store, &spec.encoder, spec.d, data, &mut rng)?;
        let backbone = match spec.backbone {
            BackboneSpec::Sasrec(s) => Backbone::Sasrec(Sasrec::new(&mut store, s, spec.d, &mut rng)?),
            BackboneSpec::Dssm(s) => Backbone::Dssm(Dssm::new(&mut store, s, num_users, spec.d, &mut rng)),
        };
        Ok(Recommender {
            spec,
            store,
            encoder,
            backbone,
        })
    }

    pub fn num_tunable(&self) -> usize {
        self.store.num_tunable()
    }

    pub fn item_vectors(&self, data: &ItemData<T>) -> Result<Tensor<T>> {
        self.encoder.encode_all(&self.store, data)
    }

    /// Evaluation-mode user vectors `[users.len(), d]`. SASRec reads the most
    /// recent `max_len` items of each history through the precomputed
    /// `item_table`; DSSM reads only the user index.
    pub fn user_vectors(&self, users: &[usize], histories: &[Vec<usize>], item_table: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::eval(&[&self.store]);
        let out = match &self.backbone {
            Backbone::Dssm(dssm) => dssm.user_vectors(&mut s, users)?,
            Backbone::Sasrec(sas) => {
                let recent: Vec<&[usize]> = histories
                    .iter()
                    .map(|h| &h[h.len().saturating_sub(sas.spec.max_len)..])
                    .collect();
                let (slots, valid, seq) = left_pad(&recent);
                let table = s.constant(item_table.clone());
                let x = s.gather_rows(table, slots)?;
                let states = sas.user_states(&mut s, x, recent.len(), seq, &valid)?;
                let last: Vec<usize> = (0..recent.len()).map(|b| b * seq + seq - 1).collect();
                s.gather_rows(states, last)?
            }
        };
        Ok(s.value(out).clone())
    }
}

/// Left-pads item sequences to a common length; returns per-slot item indices
/// (0 in padding), validity flags and the padded length (at least 1).
pub fn left_pad(seqs: &[&[usize]]) -> (Vec<usize>, Vec<bool>, usize) {
    let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut slots = Vec::with_capacity(seqs.len() * seq);
    let mut valid = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        let pad = seq - s.len();
        slots.extend(std::iter::repeat_n(0, pad));
        valid.extend(std::iter::repeat_n(false, pad));
        slots.extend_from_slice(s);
        valid.extend(std::iter::repeat_n(true, s.len()));
    }
    (slots, valid, seq)
}
