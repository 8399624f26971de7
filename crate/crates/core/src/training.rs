//! Negative sampling, the pairwise BCE objective for both backbones, the epoch
//! loop with early stopping, and collapse detection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sigmoid, Var};
use crate::backbones::{left_pad, Backbone, Recommender};
use crate::catalog::DatasetSplit;
use crate::encoders::ItemData;
use crate::error::{Error, Result};
use crate::eval::{hr_at_n, model_ranks, ndcg_at_n, EvalOptions, Target};
use crate::nn::Session;
use crate::optim::{build_optimizer_groups, AdamW, AdamWConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    /// Learning rate of everything outside the modality encoder (γ^R).
    pub lr: f64,
    /// Learning rate of the modality encoder (γ^M); `None` means "same as `lr`".
    pub lr_modality: Option<f64>,
    pub batch: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Collapse threshold as a multiple of the random-baseline HR@N.
    pub collapse_eps: f64,
    /// Cut-off and candidate pool of the per-epoch validation ranking.
    pub eval: EvalOptions,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 1e-3,
            lr_modality: None,
            batch: 128,
            weight_decay: 0.0,
            dropout: 0.1,
            epochs: 30,
            patience: 5,
            seed: 0,
            collapse_eps: 1.0,
            eval: EvalOptions::default(),
        }
    }
}

impl HyperParams {
    pub fn lr_modality(&self) -> f64 {
        self.lr_modality.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lr_modality() >= 0.0 && self.lr_modality().is_finite()) {
            return bad(format!("modality learning rate must be non-negative, got {}", self.lr_modality()));
        }
        if self.batch == 0 || self.epochs == 0 || self.eval.n == 0 {
            return bad("batch, epochs and eval.n must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Independent seed for one (epoch, batch) cell of a run.
pub fn stream_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ batch.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw from the items in `[0, m)` that are not in `positives` (sorted, deduplicated).
pub fn sample_negative(positives: &[usize], m: usize, rng: &mut impl Rng) -> Result<usize> {
    let free = m - positives.iter().filter(|&&p| p < m).count();
    if free == 0 {
        return Err(Error::Sampling(format!("user interacted with all {m} items")));
    }
    if 2 * free >= m {
        loop {
            let j = rng.random_range(0..m);
            if positives.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
    }
    let mut k = rng.random_range(0..free);
    for j in 0..m {
        if positives.binary_search(&j).is_err() {
            if k == 0 {
                return Ok(j);
            }
            k -= 1;
        }
    }
    unreachable!("free count matches complement size")
}

/// `−log σ(pos) − log(1 − σ(neg))` in the overflow-free form.
pub fn bce_pair_loss(pos: f64, neg: f64) -> f64 {
    -log_sigmoid(pos) - log_sigmoid(-neg)
}

/// Mean pairwise loss on the tape and the number of (position, pair) terms in it.
pub struct PairLoss {
    pub loss: Var,
    pub terms: usize,
}

/// Pairwise BCE averaged over the rows of `states` whose `valid` flag is set;
/// row `r` is matched with `pos` row `r` and `neg` row `r`. Returns `None`
/// when every row is padding.
pub fn seq2seq_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    states: Var,
    pos: Var,
    neg: Var,
    valid: &[bool],
) -> Result<Option<PairLoss>> {
    let rows: Vec<usize> = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let terms = rows.len();
    let rows: Rc<[usize]> = rows.into();
    let h = s.gather_rows(states, rows.clone())?;
    let p = s.gather_rows(pos, rows.clone())?;
    let n = s.gather_rows(neg, rows)?;
    let sp = s.row_dot(h, p)?;
    let sn = s.row_dot(h, n)?;
    let lp = s.log_sigmoid(sp)?;
    let nsn = s.neg(sn)?;
    let ln = s.log_sigmoid(nsn)?;
    let both = s.add(lp, ln)?;
    let total = s.sum(both)?;
    let loss = s.scale(total, T::lit(-1.0 / terms as f64))?;
    Ok(Some(PairLoss { loss, terms }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_hr: f64,
    pub val_ndcg: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub tunable_params: usize,
    pub collapsed: bool,
    pub collapse_reason: Option<String>,
    pub best_epoch: usize,
    pub best_val_hr: f64,
}

impl TrainReport {
    pub fn mean_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# epoch\tloss\tval_hr10\tval_ndcg10\tseconds\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:.8}\t{:.6}\t{:.6}\t{:.3}",
                r.epoch, r.loss, r.val_hr, r.val_ndcg, r.seconds
            );
        }
        let _ = writeln!(
            s,
            "summary\tcollapsed={}\tbest_epoch={}\ttunable_params={}",
            self.collapsed, self.best_epoch, self.tunable_params
        );
        if let Some(reason) = &self.collapse_reason {
            let _ = writeln!(s, "# collapse: {reason}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rep = TrainReport::default();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f[0] == "summary" {
                for kv in &f[1..] {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("summary field without `=`"))?;
                    match k {
                        "collapsed" => rep.collapsed = v == "true",
                        "best_epoch" => rep.best_epoch = v.parse().map_err(|_| bad("bad best_epoch"))?,
                        "tunable_params" => rep.tunable_params = v.parse().map_err(|_| bad("bad tunable_params"))?,
                        _ => {}
                    }
                }
                continue;
            }
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("bad number"));
            rep.records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                loss: num(1)?,
                val_hr: num(2)?,
                val_ndcg: num(3)?,
                seconds: num(4)?,
            });
        }
        rep.best_val_hr = rep
            .records
            .iter()
            .find(|r| r.epoch == rep.best_epoch)
            .map_or(0.0, |r| r.val_hr);
        Ok(rep)
    }
}

/// True when validation HR has fallen below `eps · baseline` after once exceeding
/// twice the baseline, or when the latest loss is NaN.
pub fn collapse_monitor(val_hr: &[f64], last_loss: f64, baseline: f64, eps: f64) -> bool {
    if last_loss.is_nan() {
        return true;
    }
    if val_hr.len() < 2 {
        return false;
    }
    let (last, earlier) = val_hr.split_last().expect("len >= 2");
    earlier.iter().any(|&h| h > 2.0 * baseline) && *last < eps * baseline
}

/// Training sequences of users that yield at least one prediction position.
fn seq_users(split: &DatasetSplit) -> Vec<usize> {
    (0..split.num_users()).filter(|&u| split.train[u].len() >= 2).collect()
}

fn observed_sets(split: &DatasetSplit) -> Vec<Vec<usize>> {
    split
        .train
        .iter()
        .map(|seq| seq.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
        .collect()
}

/// Encodes the distinct items of `wanted` once and returns one row per entry.
fn encode_rows<T: Scalar>(
    model: &Recommender<T>,
    s: &mut Session<'_, T>,
    data: &ItemData<T>,
    wanted: &[&[usize]],
) -> Result<Vec<Var>> {
    let mut uniq: Vec<usize> = wanted.iter().flat_map(|w| w.iter().copied()).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let table = model.encoder.encode(s, &uniq, data)?;
    wanted
        .iter()
        .map(|w| {
            let idx: Vec<usize> = w.iter().map(|i| uniq.binary_search(i).expect("collected above")).collect();
            s.gather_rows(table, idx)
        })
        .collect()
}

/// One optimisation batch; returns the batch loss or `None` when it has no terms.
fn sasrec_batch<T: Scalar>(
    model: &Recommender<T>,
    data: &ItemData<T>,
    split: &DatasetSplit,
    observed: &[Vec<usize>],
    users: &[usize],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, crate::autodiff::Gradients<T>)>> {
    let Backbone::Sasrec(sas) = &model.backbone else {
        unreachable!("caller dispatches on backbone")
    };
    let inputs: Vec<&[usize]> = users
        .iter()
        .map(|&u| {
            let seq = &split.train[u];
            let inp = &seq[..seq.len() - 1];
            &inp[inp.len().saturating_sub(sas.spec.max_len)..]
        })
        .collect();
    let (slots, valid, seq) = left_pad(&inputs);
    let mut pos = vec![0usize; slots.len()];
    let mut neg = vec![0usize; slots.len()];
    for (b, &u) in users.iter().enumerate() {
        let train = &split.train[u];
        let n = inputs[b].len();
        for k in 0..n {
            let slot = b * seq + (seq - n) + k;
            pos[slot] = train[train.len() - n + k];
            neg[slot] = sample_negative(&observed[u], split.num_items, rng)?;
        }
    }
    let seed = rng.random::<u64>();
    let mut s = Session::train(&[&model.store], dropout, seed);
    let rows = encode_rows(model, &mut s, data, &[&slots, &pos, &neg])?;
    let states = sas.user_states(&mut s, rows[0], users.len(), seq, &valid)?;
    let Some(pl) = seq2seq_loss(&mut s, states, rows[1], rows[2], &valid)? else {
        return Ok(None);
    };
    let value = s.value(pl.loss).item().to_f64_lossy();
    Ok(Some((value, s.backward(pl.loss)?)))
}

fn dssm_batch<T: Scalar>(
    model: &Recommender<T>,
    data: &ItemData<T>,
    split: &DatasetSplit,
    observed: &[Vec<usize>],
    pairs: &[(usize, usize)],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, crate::autodiff::Gradients<T>)>> {
    let Backbone::Dssm(dssm) = &model.backbone else {
        unreachable!("caller dispatches on backbone")
    };
    let users: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pos: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let neg = users
        .iter()
        .map(|&u| sample_negative(&observed[u], split.num_items, rng))
        .collect::<Result<Vec<_>>>()?;
    let seed = rng.random::<u64>();
    let mut s = Session::train(&[&model.store], dropout, seed);
    let uv = dssm.user_vectors(&mut s, &users)?;
    let rows = encode_rows(model, &mut s, data, &[&pos, &neg])?;
    let valid = vec![true; pairs.len()];
    let Some(pl) = seq2seq_loss(&mut s, uv, rows[0], rows[1], &valid)? else {
        return Ok(None);
    };
    let value = s.value(pl.loss).item().to_f64_lossy();
    Ok(Some((value, s.backward(pl.loss)?)))
}

/// Validation HR@N / NDCG@N over all users.
pub fn validation_metrics<T: Scalar>(
    model: &Recommender<T>,
    split: &DatasetSplit,
    data: &ItemData<T>,
    opts: EvalOptions,
) -> Result<(f64, f64)> {
    let n = opts.n;
    let ranks = model_ranks(model, split, data, Target::Valid, opts)?;
    let k = ranks.len().max(1) as f64;
    let hr = ranks.iter().map(|&r| hr_at_n(r, n)).sum::<f64>() / k;
    let ndcg = ranks.iter().map(|&r| ndcg_at_n(r, n)).sum::<f64>() / k;
    Ok((hr, ndcg))
}

/// Trains `model` in place and leaves it holding the best-validation weights.
pub fn train<T: Scalar>(
    model: &mut Recommender<T>,
    split: &DatasetSplit,
    data: &ItemData<T>,
    hp: &HyperParams,
) -> Result<TrainReport> {
    hp.validate()?;
    if split.num_items != data.num_items {
        return Err(Error::shape(format!(
            "split has {} items but item data has {}",
            split.num_items, data.num_items
        )));
    }
    let groups = build_optimizer_groups(&model.store, hp.lr, hp.lr_modality())?;
    let config = AdamWConfig {
        weight_decay: hp.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(&model.store, groups, config)?;
    let observed = observed_sets(split);
    let baseline = (hp.eval.n as f64 / split.num_items as f64).min(1.0);
    let mut report = TrainReport {
        tunable_params: model.num_tunable(),
        ..Default::default()
    };
    let mut best = model.store.snapshot();
    let mut best_hr = f64::NEG_INFINITY;
    let mut hrs = Vec::new();

    let seq_users = seq_users(split);
    let pairs: Vec<(usize, usize)> = split
        .train
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| seq.iter().map(move |&i| (u, i)))
        .collect();

    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(hp.seed, epoch as u64, 0));
        let (mut total, mut batches) = (0.0, 0usize);
        let is_sasrec = matches!(model.backbone, Backbone::Sasrec(_));
        let n_units = if is_sasrec { seq_users.len() } else { pairs.len() };
        let mut order: Vec<usize> = (0..n_units).collect();
        order.shuffle(&mut order_rng);
        for (b, chunk) in order.chunks(hp.batch).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(hp.seed, epoch as u64, b as u64 + 1));
            let out = if is_sasrec {
                let users: Vec<usize> = chunk.iter().map(|&k| seq_users[k]).collect();
                sasrec_batch(model, data, split, &observed, &users, hp.dropout, &mut rng)?
            } else {
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&k| pairs[k]).collect();
                dssm_batch(model, data, split, &observed, &batch, hp.dropout, &mut rng)?
            };
            let Some((loss, grads)) = out else { continue };
            total += loss;
            batches += 1;
            if loss.is_nan() {
                break;
            }
            model.store.accumulate(&grads);
            model.store.fill_missing_grads();
            opt.step(&mut model.store)?;
            model.store.zero_grad();
        }
        let loss = if batches == 0 { 0.0 } else { total / batches as f64 };
        let (val_hr, val_ndcg) = if loss.is_nan() {
            (0.0, 0.0)
        } else {
            validation_metrics(model, split, data, hp.eval)?
        };
        report.records.push(EpochRecord {
            epoch,
            loss,
            val_hr,
            val_ndcg,
            seconds: started.elapsed().as_secs_f64(),
        });
        hrs.push(val_hr);
        if !loss.is_nan() && val_hr > best_hr {
            best_hr = val_hr;
            report.best_epoch = epoch;
            report.best_val_hr = val_hr;
            best = model.store.snapshot();
        }
        if collapse_monitor(&hrs, loss, baseline, hp.collapse_eps) {
            report.collapsed = true;
            report.collapse_reason = Some(if loss.is_nan() {
                format!("loss became NaN at epoch {epoch}")
            } else {
                format!("validation HR@{} fell to {val_hr:.4} at epoch {epoch} (random baseline {baseline:.4})", hp.eval.n)
            });
            break;
        }
        if report.best_epoch > 0 && epoch - report.best_epoch >= hp.patience {
            break;
        }
    }
    model.store.restore(&best)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_negative(&[0], 2, &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_negative(&[0, 1], 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn dense_positive_sets_use_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..99).filter(|&i| i != 42).collect();
        for _ in 0..20 {
            assert_eq!(sample_negative(&pos, 99, &mut rng).unwrap(), 42);
        }
    }

    #[test]
    fn pair_loss_values() {
        assert!((bce_pair_loss(0.0, 0.0) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((bce_pair_loss(1.0, -1.0) - 0.626_523).abs() < 1e-6);
        assert!(bce_pair_loss(800.0, -800.0) < 1e-300);
        assert!(bce_pair_loss(-800.0, 800.0).is_finite());
    }

    #[test]
    fn collapse_rules() {
        let base = 0.02;
        assert!(collapse_monitor(&[0.16, 0.0], 0.5, base, 1.0));
        assert!(!collapse_monitor(&[0.01, 0.03, 0.05, 0.08], 0.5, base, 1.0));
        assert!(!collapse_monitor(&[0.03, 0.0], 0.5, base, 1.0));
        assert!(collapse_monitor(&[0.1], f64::NAN, base, 1.0));
        assert!(!collapse_monitor(&[0.1], 0.3, base, 1.0));
    }

    #[test]
    fn report_round_trip() {
        let r = TrainReport {
            records: vec![EpochRecord {
                epoch: 1,
                loss: 1.25,
                val_hr: 0.1,
                val_ndcg: 0.05,
                seconds: 0.5,
            }],
            tunable_params: 42,
            collapsed: false,
            collapse_reason: None,
            best_epoch: 1,
            best_val_hr: 0.1,
        };
        assert_eq!(TrainReport::parse(&r.to_tsv()).unwrap(), r);
    }
}
