//! Item encoders: every variant maps item indices to `d`-dimensional vectors,
//! so backbones can swap one for another without shape changes.

mod checkpoint;
mod mlm;

pub use checkpoint::{load_checkpoint, restore_checkpoint, save_checkpoint};
pub use mlm::{mask_tokens, mlm_pretrain, MlmConfig, MlmHead};

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::autodiff::Var;
use crate::catalog::{ItemRecords, PAD_ID};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, LayerNorm, Linear, Session, TransformerBlock};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adapter depths for the two-stage pathway.
pub const ADAPTER_DEPTHS: [usize; 7] = [0, 2, 4, 6, 8, 10, 12];

/// Modality payload of every catalog item, in the model's scalar type.
#[derive(Clone, Debug)]
pub struct ItemData<T> {
    pub tokens: Vec<Vec<u32>>,
    pub features: Option<Tensor<T>>,
    pub vocab_size: usize,
    pub num_items: usize,
}

impl<T: Scalar> ItemData<T> {
    pub fn from_records(records: &ItemRecords) -> Result<Self> {
        let features = match &records.features {
            None => None,
            Some(rows) => {
                let t = Tensor::<f64>::from_rows(rows)?;
                Some(t.cast())
            }
        };
        Ok(ItemData {
            tokens: records.tokens.clone(),
            features,
            vocab_size: records.vocab_size,
            num_items: records.num_items(),
        })
    }

    /// Items identified by index only.
    pub fn ids_only(num_items: usize) -> Self {
        ItemData {
            tokens: Vec::new(),
            features: None,
            vocab_size: 0,
            num_items,
        }
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f.shape()[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextSpec {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Positional table size: maximum title tokens plus CLS.
    pub max_positions: usize,
}

impl Default for TextSpec {
    fn default() -> Self {
        TextSpec {
            width: 64,
            blocks: 2,
            heads: 2,
            max_positions: crate::catalog::MAX_TITLE_TOKENS + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Add,
    Con,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Add => "add",
            FusionMode::Con => "con",
        })
    }
}

/// Which item encoder a model uses.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSpec {
    Id,
    TextE2e(TextSpec),
    /// Trainable linear encoder of the given width over the feature vectors.
    VisionE2e { width: usize },
    /// Frozen feature vectors behind `depth` hidden layers and a DT-layer.
    Frozen { depth: usize, identity_init: bool },
    Fusion {
        mode: FusionMode,
        depth: usize,
        modality: Box<EncoderSpec>,
    },
}

impl EncoderSpec {
    pub fn is_id(&self) -> bool {
        matches!(self, EncoderSpec::Id)
    }

    pub fn needs_text(&self) -> bool {
        match self {
            EncoderSpec::TextE2e(_) => true,
            EncoderSpec::Fusion { modality, .. } => modality.needs_text(),
            _ => false,
        }
    }

    pub fn needs_features(&self) -> bool {
        match self {
            EncoderSpec::VisionE2e { .. } | EncoderSpec::Frozen { .. } => true,
            EncoderSpec::Fusion { modality, .. } => modality.needs_features(),
            _ => false,
        }
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderSpec::Id => write!(f, "id"),
            EncoderSpec::TextE2e(_) => write!(f, "text_e2e"),
            EncoderSpec::VisionE2e { .. } => write!(f, "vision_e2e"),
            EncoderSpec::Frozen { depth, .. } => write!(f, "frozen({depth})"),
            EncoderSpec::Fusion { mode, depth, modality } => write!(f, "fusion({mode},{depth},{modality})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IdEmbedding {
    pub table: ParamId,
    pub num_items: usize,
}

impl IdEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, num_items: usize, d: usize, rng: &mut impl Rng) -> Self {
        IdEmbedding {
            table: store.add_normal("item_id.table", &[num_items, d], ParamRole::Backbone, rng),
            num_items,
        }
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, items: &[usize]) -> Result<Var> {
        let t = s.param(self.table)?;
        s.gather_rows(t, items.to_vec())
    }
}

/// Tiny transformer over title tokens, pooled at CLS, followed by the DT-layer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub spec: TextSpec,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub dt: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        spec: TextSpec,
        vocab_size: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let me = ParamRole::ModalityEncoder;
        let tokens = store.add_normal("text.token_embedding", &[vocab_size, spec.width], me, rng);
        let positions = store.add_normal("text.position_embedding", &[spec.max_positions, spec.width], me, rng);
        let blocks = (0..spec.blocks)
            .map(|b| TransformerBlock::new(store, &format!("text.block{b}"), spec.width, spec.heads, me, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "text.final_norm", spec.width, me);
        let dt = Linear::new(store, "text.dt", spec.width, d, ParamRole::Backbone, rng);
        Ok(TextEncoder {
            spec,
            tokens,
            positions,
            blocks,
            norm,
            dt,
        })
    }

    /// Final-norm hidden states `[B*S, width]` of padded token sequences.
    pub fn hidden<T: Scalar>(&self, s: &mut Session<'_, T>, seqs: &[&[u32]]) -> Result<(Var, usize)> {
        let seq = seqs.iter().map(|t| t.len()).max().unwrap_or(0).max(1);
        if seq > self.spec.max_positions {
            return Err(Error::Length {
                len: seq,
                max: self.spec.max_positions,
            });
        }
        let batch = seqs.len();
        let mut ids = Vec::with_capacity(batch * seq);
        let mut valid = Vec::with_capacity(batch * seq);
        for t in seqs {
            for p in 0..seq {
                let tok = t.get(p).copied().unwrap_or(PAD_ID);
                ids.push(tok as usize);
                valid.push(p < t.len());
            }
        }
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let table = s.param(self.tokens)?;
        let x = s.gather_rows(table, ids)?;
        let ptable = s.param(self.positions)?;
        let p = s.gather_rows(ptable, pos)?;
        let mut h = s.add(x, p)?;
        h = s.dropout(h)?;
        let mask = AttnMask::new(batch, seq, false, Some(&valid))?;
        for b in &self.blocks {
            h = b.forward(s, h, &mask)?;
        }
        Ok((self.norm.forward(s, h)?, seq))
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, seqs: &[&[u32]]) -> Result<Var> {
        let (h, seq) = self.hidden(s, seqs)?;
        let cls: Vec<usize> = (0..seqs.len()).map(|b| b * seq).collect();
        let pooled = s.gather_rows(h, cls)?;
        self.dt.forward(s, pooled)
    }

    /// Parameters of the encoder proper (everything but the DT-layer).
    pub fn encoder_params<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.role == ParamRole::ModalityEncoder && p.name.starts_with("text."))
            .map(|(id, _)| id)
            .collect()
    }
}

/// `depth` GELU layers of width `d` followed by an affine DT-layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub dt: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        depth: usize,
        d: usize,
        identity_dt: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(depth);
        let mut width = fan_in;
        for k in 0..depth {
            hidden.push(Linear::new(store, &format!("{name}.layer{k}"), width, d, ParamRole::Backbone, rng));
            width = d;
        }
        let dt = if identity_dt {
            if width != d {
                return Err(Error::shape(format!(
                    "identity DT-layer needs input width {width} to equal d = {d}"
                )));
            }
            Linear::identity(store, &format!("{name}.dt"), d, ParamRole::Backbone)
        } else {
            Linear::new(store, &format!("{name}.dt"), width, d, ParamRole::Backbone, rng)
        };
        Ok(Mlp { hidden, dt })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
        for l in &self.hidden {
            x = l.forward(s, x)?;
            x = s.gelu(x)?;
        }
        self.dt.forward(s, x)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.iter().map(Linear::num_params).sum::<usize>() + self.dt.num_params()
    }
}

/// Stack of `depth` GELU layers of width `d`, used after fusion and in the DSSM user tower.
#[derive(Clone, Debug, Default)]
pub struct Tower {
    pub layers: Vec<Linear>,
}

impl Tower {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, depth: usize, d: usize, rng: &mut impl Rng) -> Self {
        Tower {
            layers: (0..depth)
                .map(|k| Linear::new(store, &format!("{name}.layer{k}"), d, d, ParamRole::Backbone, rng))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(s, x)?;
            x = s.gelu(x)?;
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub project: Option<Linear>,
    pub stack: Tower,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, mode: FusionMode, depth: usize, d: usize, rng: &mut impl Rng) -> Self {
        let project = match mode {
            FusionMode::Add => None,
            FusionMode::Con => Some(Linear::new(store, "fusion.project", 2 * d, d, ParamRole::Backbone, rng)),
        };
        Fusion {
            mode,
            project,
            stack: Tower::new(store, "fusion.stack", depth, d, rng),
        }
    }

    pub fn fuse<T: Scalar>(&self, s: &mut Session<'_, T>, id: Var, mo: Var) -> Result<Var> {
        let x = match self.mode {
            FusionMode::Add => s.add(id, mo)?,
            FusionMode::Con => {
                let c = s.concat_cols(id, mo)?;
                self.project.as_ref().expect("CON has a projection").forward(s, c)?
            }
        };
        self.stack.forward(s, x)
    }
}

#[derive(Clone, Debug)]
pub enum ItemEncoder {
    Id(IdEmbedding),
    Text(TextEncoder),
    Vision { encoder: Linear, dt: Linear },
    Frozen(Mlp),
    Fused {
        id: IdEmbedding,
        modality: Box<ItemEncoder>,
        fusion: Fusion,
    },
}

impl ItemEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        spec: &EncoderSpec,
        d: usize,
        data: &ItemData<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let need_features = || {
            data.feature_width()
                .ok_or_else(|| Error::config(format!("encoder {spec} needs item feature vectors")))
        };
        Ok(match spec {
            EncoderSpec::Id => ItemEncoder::Id(IdEmbedding::new(store, data.num_items, d, rng)),
            EncoderSpec::TextE2e(ts) => {
                if data.tokens.len() != data.num_items || data.vocab_size == 0 {
                    return Err(Error::config("text encoder needs item titles"));
                }
                let longest = data.tokens.iter().map(Vec::len).max().unwrap_or(0);
                if longest > ts.max_positions {
                    return Err(Error::Length {
                        len: longest,
                        max: ts.max_positions,
                    });
                }
                ItemEncoder::Text(TextEncoder::new(store, *ts, data.vocab_size, d, rng)?)
            }
            EncoderSpec::VisionE2e { width } => {
                let f = need_features()?;
                ItemEncoder::Vision {
                    encoder: Linear::new(store, "vision.encoder", f, *width, ParamRole::ModalityEncoder, rng),
                    dt: Linear::new(store, "vision.dt", *width, d, ParamRole::Backbone, rng),
                }
            }
            EncoderSpec::Frozen { depth, identity_init } => {
                let f = need_features()?;
                ItemEncoder::Frozen(Mlp::new(store, "adapter", f, *depth, d, *identity_init, rng)?)
            }
            EncoderSpec::Fusion { mode, depth, modality } => {
                if matches!(**modality, EncoderSpec::Id | EncoderSpec::Fusion { .. }) {
                    return Err(Error::config("fusion needs a modality encoder as its second input"));
                }
                let id = IdEmbedding::new(store, data.num_items, d, rng);
                let modality = Box::new(ItemEncoder::new(store, modality, d, data, rng)?);
                ItemEncoder::Fused {
                    id,
                    modality,
                    fusion: Fusion::new(store, *mode, *depth, d, rng),
                }
            }
        })
    }

    /// Vectors `[items.len(), d]` for the given item indices.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, items: &[usize], data: &ItemData<T>) -> Result<Var> {
        if let Some(&bad) = items.iter().find(|&&i| i >= data.num_items) {
            return Err(Error::Bounds {
                what: "item",
                index: bad,
                len: data.num_items,
            });
        }
        match self {
            ItemEncoder::Id(e) => e.encode(s, items),
            ItemEncoder::Text(e) => {
                let seqs: Vec<&[u32]> = items.iter().map(|&i| data.tokens[i].as_slice()).collect();
                e.encode(s, &seqs)
            }
            ItemEncoder::Vision { encoder, dt } => {
                let x = feature_rows(s, items, data)?;
                let h = encoder.forward(s, x)?;
                dt.forward(s, h)
            }
            ItemEncoder::Frozen(mlp) => {
                let x = feature_rows(s, items, data)?;
                mlp.forward(s, x)
            }
            ItemEncoder::Fused { id, modality, fusion } => {
                let a = id.encode(s, items)?;
                let b = modality.encode(s, items, data)?;
                fusion.fuse(s, a, b)
            }
        }
    }

    /// Every item's vector in evaluation mode, `[m, d]`, encoded in chunks.
    pub fn encode_all<T: Scalar>(&self, store: &ParamStore<T>, data: &ItemData<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 512;
        let mut rows: Vec<T> = Vec::new();
        let mut d = 0;
        let all: Vec<usize> = (0..data.num_items).collect();
        for chunk in all.chunks(CHUNK) {
            let mut s = Session::eval(&[store]);
            let v = self.encode(&mut s, chunk, data)?;
            d = s.shape(v)[1];
            rows.extend_from_slice(s.value(v).data());
        }
        Tensor::new(vec![data.num_items, d], rows)
    }

    pub fn text(&self) -> Option<&TextEncoder> {
        match self {
            ItemEncoder::Text(t) => Some(t),
            ItemEncoder::Fused { modality, .. } => modality.text(),
            _ => None,
        }
    }
}

fn feature_rows<T: Scalar>(s: &mut Session<'_, T>, items: &[usize], data: &ItemData<T>) -> Result<Var> {
    let f = data
        .features
        .as_ref()
        .ok_or_else(|| Error::config("items carry no feature vectors"))?;
    let (_, width) = f.dims2();
    let mut rows = Vec::with_capacity(items.len() * width);
    for &i in items {
        rows.extend_from_slice(f.row(i));
    }
    Ok(s.constant(Tensor::new(vec![items.len(), width], rows)?))
}

/// Parameter counts per role, keyed by role name.
pub fn count_by_role<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for (_, p) in store.iter().filter(|(_, p)| p.requires_grad) {
        let key = match p.role {
            ParamRole::Backbone => "rest",
            ParamRole::ModalityEncoder => "modality",
        };
        *out.entry(key).or_insert(0) += p.value.len();
    }
    out
}

/// `a · b` for every row pair; shared helper for tests of score invariants.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn text_data() -> ItemData<f64> {
        ItemData {
            tokens: vec![vec![2, 4, 5, 6], vec![2, 4, 5, 6], vec![2, 6, 5, 4], vec![2], vec![2, 7]],
            features: Some(Tensor::new(vec![5, 3], (0..15).map(|x| x as f64 * 0.1).collect()).unwrap()),
            vocab_size: 8,
            num_items: 5,
        }
    }

    fn small_text() -> TextSpec {
        TextSpec {
            width: 8,
            blocks: 1,
            heads: 2,
            max_positions: 5,
        }
    }

    #[test]
    fn text_encoder_determinism_and_order_sensitivity() {
        let data = text_data();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ItemEncoder::new(&mut store, &EncoderSpec::TextE2e(small_text()), 6, &data, &mut rng).unwrap();
        let all = enc.encode_all(&store, &data).unwrap();
        assert_eq!(all.shape(), &[5, 6]);
        assert_eq!(all.row(0), all.row(1));
        let diff = all.row(0).iter().zip(all.row(2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn titles_longer_than_position_table_fail() {
        let mut data = text_data();
        data.tokens[0] = vec![2, 4, 4, 4, 4, 4];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = ItemEncoder::new(&mut store, &EncoderSpec::TextE2e(small_text()), 6, &data, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Length { len: 6, max: 5 }));
    }

    #[test]
    fn frozen_identity_passes_features_through() {
        let data = text_data();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = EncoderSpec::Frozen {
            depth: 0,
            identity_init: true,
        };
        let enc = ItemEncoder::new(&mut store, &spec, 3, &data, &mut rng).unwrap();
        let all = enc.encode_all(&store, &data).unwrap();
        assert_eq!(&all, data.features.as_ref().unwrap());
    }

    #[test]
    fn id_lookup_out_of_range() {
        let data = ItemData::<f64>::ids_only(4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ItemEncoder::new(&mut store, &EncoderSpec::Id, 2, &data, &mut rng).unwrap();
        let mut s = Session::eval(&[&store]);
        assert!(matches!(
            enc.encode(&mut s, &[4], &data),
            Err(Error::Bounds { index: 4, len: 4, .. })
        ));
    }
}
