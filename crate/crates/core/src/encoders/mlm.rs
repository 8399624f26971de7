//! Masked-language-model pre-training of the text encoder on item titles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TextEncoder;
use crate::catalog::{MASK_ID, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{Linear, Session};
use crate::optim::{AdamW, AdamWConfig, ParamGroup};
use crate::params::{ParamRole, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_prob: 0.15,
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Vocabulary projection used only during pre-training.
pub struct MlmHead<T> {
    pub store: ParamStore<T>,
    pub out: Linear,
}

impl<T: Scalar> MlmHead<T> {
    pub fn new(width: usize, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let out = Linear::new(&mut store, "mlm.out", width, vocab_size, ParamRole::ModalityEncoder, rng);
        MlmHead { store, out }
    }
}

/// Replaces each non-special token with MASK with probability `p`; returns the
/// masked sequence and `(position, original id)` for every replacement.
pub fn mask_tokens(seq: &[u32], p: f64, rng: &mut impl Rng) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut out = seq.to_vec();
    let mut masked = Vec::new();
    for (pos, tok) in out.iter_mut().enumerate() {
        if *tok >= SPECIAL_TOKENS && rng.random::<f64>() < p {
            masked.push((pos, *tok));
            *tok = MASK_ID;
        }
    }
    (out, masked)
}

/// Trains `encoder` (whose parameters live in `store`) with the MLM objective and
/// returns the mean masked-token loss of every epoch. Batches in which no token
/// was masked are skipped.
pub fn mlm_pretrain<T: Scalar>(
    encoder: &TextEncoder,
    store: &mut ParamStore<T>,
    corpus: &[Vec<u32>],
    vocab_size: usize,
    config: &MlmConfig,
) -> Result<Vec<f64>> {
    if !(config.mask_prob > 0.0 && config.mask_prob < 1.0) {
        return Err(Error::config(format!("mask probability {} outside (0, 1)", config.mask_prob)));
    }
    let titles: Vec<&Vec<u32>> = corpus.iter().filter(|t| t.iter().any(|&x| x >= SPECIAL_TOKENS)).collect();
    if titles.is_empty() {
        return Err(Error::contract("MLM corpus has no non-empty title"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = MlmHead::<T>::new(encoder.spec.width, vocab_size, &mut rng);
    let enc_ids = encoder.encoder_params(store);
    let mut enc_opt = AdamW::new(
        store,
        vec![ParamGroup {
            name: "modality".into(),
            lr: config.lr,
            params: enc_ids,
        }],
        AdamWConfig::default(),
    )?;
    let head_ids = head.store.ids().collect();
    let mut head_opt = AdamW::new(
        &head.store,
        vec![ParamGroup {
            name: "mlm".into(),
            lr: config.lr,
            params: head_ids,
        }],
        AdamWConfig::default(),
    )?;

    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..titles.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch.max(1)).enumerate() {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            let mut rows = Vec::new();
            let longest = chunk.iter().map(|&i| titles[i].len()).max().unwrap_or(1);
            for (k, &i) in chunk.iter().enumerate() {
                let (masked, hits) = mask_tokens(titles[i], config.mask_prob, &mut rng);
                for (pos, orig) in hits {
                    rows.push(k * longest + pos);
                    targets.push(orig as usize);
                }
                seqs.push(masked);
            }
            if targets.is_empty() {
                continue;
            }
            let seed = rng.random::<u64>() ^ ((epoch as u64) << 32 | b as u64);
            let grads = {
                let mut s = Session::train(&[&*store, &head.store], 0.0, seed);
                let views: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
                let (h, seq) = encoder.hidden(&mut s, &views)?;
                debug_assert_eq!(seq, longest);
                let picked = s.gather_rows(h, rows)?;
                let logits = head.out.forward(&mut s, picked)?;
                let loss = s.cross_entropy(logits, &targets)?;
                total += s.value(loss).item().to_f64_lossy();
                s.backward(loss)?
            };
            batches += 1;
            for (st, opt) in [(&mut *store, &mut enc_opt), (&mut head.store, &mut head_opt)] {
                st.accumulate(&grads);
                st.fill_missing_grads();
                opt.step(st)?;
                st.zero_grad();
            }
        }
        curve.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_tokens_are_never_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, hits) = mask_tokens(&[2, 0, 1, 3], 0.99, &mut rng);
        assert_eq!(out, vec![2, 0, 1, 3]);
        assert!(hits.is_empty());
        let (out, hits) = mask_tokens(&[2, 9, 9], 0.999_999, &mut rng);
        assert_eq!(out, vec![2, MASK_ID, MASK_ID]);
        assert_eq!(hits, vec![(1, 9), (2, 9)]);
    }
}
