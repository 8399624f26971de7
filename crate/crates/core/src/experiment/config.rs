//! Experiment configuration files: sectioned `key = value` text.
//!
//! Every setting has a default; [`ExperimentConfig::to_ini`] prints all of
//! them so a resolved snapshot reproduces a run on its own. A `[grid]`
//! section maps `section.key` to a comma-separated list of values and expands
//! into the cartesian product of configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::backbones::{BackboneSpec, DssmSpec, ModelSpec, SasrecSpec};
use crate::catalog::{ColumnSpec, MAX_TITLE_TOKENS, MIN_USER_INTERACTIONS};
use crate::encoders::{EncoderSpec, FusionMode, MlmConfig, TextSpec};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::synthgen::GenConfig;
use crate::training::HyperParams;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files {
        interactions: PathBuf,
        items: Option<PathBuf>,
        columns: ColumnSpec,
    },
    Synthetic(GenConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub min_user_interactions: usize,
    /// Drop items with fewer interactions than this before splitting (0 = off).
    pub warm_filter: usize,
    pub truncate: usize,
    pub max_title_tokens: usize,
    pub model: ModelSpec,
    pub hp: HyperParams,
    /// Masked-token pre-training of the text encoder; `epochs == 0` disables it.
    pub mlm: MlmConfig,
    pub precision: Precision,
    pub eval: EvalOptions,
    pub warm_ks: Vec<usize>,
    pub label: String,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(GenConfig::default()),
            min_user_interactions: MIN_USER_INTERACTIONS,
            warm_filter: 0,
            truncate: 23,
            max_title_tokens: MAX_TITLE_TOKENS,
            model: ModelSpec {
                d: 64,
                backbone: BackboneSpec::Sasrec(SasrecSpec::default()),
                encoder: EncoderSpec::Id,
            },
            hp: HyperParams::default(),
            mlm: MlmConfig {
                epochs: 0,
                ..MlmConfig::default()
            },
            precision: Precision::F64,
            eval: EvalOptions::default(),
            warm_ks: vec![20, 50, 200],
            label: String::new(),
            output: PathBuf::from("runs/experiment"),
        }
    }
}

/// Parsed sections with bookkeeping of which keys were consumed.
struct Settings {
    map: BTreeMap<String, BTreeMap<String, String>>,
}

impl Settings {
    fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            line: e.line,
            msg: e.msg.to_string(),
        })?;
        let mut map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (sec, props) in ini.iter() {
            let sec = sec.unwrap_or("").to_string();
            let entry = map.entry(sec.clone()).or_default();
            for (k, v) in props.iter() {
                if entry.insert(k.to_string(), v.trim().to_string()).is_some() {
                    return Err(Error::config(format!("key `{sec}.{k}` given twice")));
                }
            }
        }
        Ok(Settings { map })
    }

    fn take_raw(&mut self, sec: &str, key: &str) -> Option<String> {
        self.map.get_mut(sec)?.remove(key)
    }

    fn take<T: FromStr>(&mut self, sec: &str, key: &str, default: T) -> Result<T> {
        match self.take_raw(sec, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("cannot parse `{sec}.{key} = {v}`"))),
        }
    }

    fn take_opt<T: FromStr>(&mut self, sec: &str, key: &str) -> Result<Option<T>> {
        match self.take_raw(sec, key) {
            None => Ok(None),
            Some(v) if v.is_empty() || v == "none" => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("cannot parse `{sec}.{key} = {v}`"))),
        }
    }

    fn finish(self) -> Result<()> {
        let leftover: Vec<String> = self
            .map
            .iter()
            .flat_map(|(s, kv)| kv.keys().map(move |k| format!("{s}.{k}")))
            .collect();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown keys: {}", leftover.join(", "))))
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("bad list entry `{s}`"))))
        .collect()
}

/// Every encoder key is read whatever the chosen type, so a grid can share one
/// base config across encoder types.
struct EncoderKeys {
    text: TextSpec,
    vision_width: usize,
    adapter_depth: usize,
    identity_init: bool,
}

impl EncoderKeys {
    fn take(s: &mut Settings) -> Result<Self> {
        let sec = "item_encoder";
        let d = TextSpec::default();
        Ok(EncoderKeys {
            text: TextSpec {
                width: s.take(sec, "text_width", d.width)?,
                blocks: s.take(sec, "text_blocks", d.blocks)?,
                heads: s.take(sec, "text_heads", d.heads)?,
                max_positions: d.max_positions,
            },
            vision_width: s.take(sec, "vision_width", 64)?,
            adapter_depth: s.take(sec, "adapter_depth", 0)?,
            identity_init: s.take(sec, "identity_init", false)?,
        })
    }

    fn modality(&self, name: &str) -> Result<EncoderSpec> {
        Ok(match name {
            "id" => EncoderSpec::Id,
            "text_e2e" => EncoderSpec::TextE2e(self.text),
            "vision_e2e" => EncoderSpec::VisionE2e {
                width: self.vision_width,
            },
            "frozen" => EncoderSpec::Frozen {
                depth: self.adapter_depth,
                identity_init: self.identity_init,
            },
            other => return Err(Error::config(format!("unknown item encoder `{other}`"))),
        })
    }
}

impl ExperimentConfig {
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut s = Settings::parse(text)?;
        if s.map.get("grid").is_some_and(|g| !g.is_empty()) {
            return Err(Error::config("config has a [grid] section; expand it with `expand_grid`"));
        }
        let cfg = Self::from_settings(&mut s)?;
        s.finish()?;
        Ok(cfg)
    }

    fn from_settings(s: &mut Settings) -> Result<Self> {
        let d = ExperimentConfig::default();
        let source: String = s.take("data", "source", "synthetic".to_string())?;
        let data = match source.as_str() {
            "synthetic" => {
                let g = GenConfig::default();
                let sec = "synthetic";
                DataSource::Synthetic(GenConfig {
                    users: s.take(sec, "users", g.users)?,
                    items: s.take(sec, "items", g.items)?,
                    topics: s.take(sec, "topics", g.topics)?,
                    title_tokens: s.take(sec, "title_tokens", g.title_tokens)?,
                    vocab: s.take(sec, "vocab", g.vocab)?,
                    min_interactions: s.take(sec, "min_interactions", g.min_interactions)?,
                    max_interactions: s.take(sec, "max_interactions", g.max_interactions)?,
                    cold_fraction: s.take(sec, "cold_fraction", g.cold_fraction)?,
                    new_fraction: s.take(sec, "new_fraction", g.new_fraction)?,
                    cold_target_rate: s.take(sec, "cold_target_rate", g.cold_target_rate)?,
                    zipf: s.take(sec, "zipf", g.zipf)?,
                    tau: s.take(sec, "tau", g.tau)?,
                    topic_sharpness: s.take(sec, "topic_sharpness", g.topic_sharpness)?,
                    title_noise: s.take(sec, "title_noise", g.title_noise)?,
                    feature_noise: s.take(sec, "feature_noise", g.feature_noise)?,
                    seed: s.take(sec, "seed", g.seed)?,
                })
            }
            "files" => {
                let c = ColumnSpec::default();
                DataSource::Files {
                    interactions: s
                        .take_opt("data", "interactions")?
                        .ok_or_else(|| Error::config("data.source = files needs data.interactions"))?,
                    items: s.take_opt("data", "items")?,
                    columns: ColumnSpec {
                        user: s.take("data", "user_column", c.user)?,
                        item: s.take("data", "item_column", c.item)?,
                        timestamp: s.take("data", "timestamp_column", c.timestamp)?,
                    },
                }
            }
            other => return Err(Error::config(format!("unknown data source `{other}`"))),
        };

        let dim = s.take("backbone", "d", d.model.d)?;
        let kind: String = s.take("backbone", "type", "sasrec".to_string())?;
        let sd = SasrecSpec::default();
        let sasrec = SasrecSpec {
            blocks: s.take("backbone", "blocks", sd.blocks)?,
            heads: s.take("backbone", "heads", sd.heads)?,
            max_len: s.take("backbone", "max_len", sd.max_len)?,
        };
        let dssm = DssmSpec {
            layers: s.take("backbone", "layers", DssmSpec::default().layers)?,
        };
        let backbone = match kind.as_str() {
            "sasrec" => BackboneSpec::Sasrec(sasrec),
            "dssm" => BackboneSpec::Dssm(dssm),
            other => return Err(Error::config(format!("unknown backbone `{other}`"))),
        };
        let enc: String = s.take("item_encoder", "type", "id".to_string())?;
        let keys = EncoderKeys::take(s)?;
        let mode = match s.take("item_encoder", "fusion_mode", "add".to_string())?.as_str() {
            "add" => FusionMode::Add,
            "con" => FusionMode::Con,
            other => return Err(Error::config(format!("unknown fusion mode `{other}`"))),
        };
        let fusion_depth = s.take("item_encoder", "fusion_depth", 0)?;
        let modality: String = s.take("item_encoder", "modality", "text_e2e".to_string())?;
        let encoder = if enc == "fusion" {
            if modality == "id" || modality == "fusion" {
                return Err(Error::config("fusion modality must be a content encoder"));
            }
            EncoderSpec::Fusion {
                mode,
                depth: fusion_depth,
                modality: Box::new(keys.modality(&modality)?),
            }
        } else {
            keys.modality(&enc)?
        };

        let h = HyperParams::default();
        let hp = HyperParams {
            lr: s.take("train", "lr", h.lr)?,
            lr_modality: s.take_opt("train", "lr_modality")?,
            batch: s.take("train", "batch", h.batch)?,
            weight_decay: s.take("train", "weight_decay", h.weight_decay)?,
            dropout: s.take("train", "dropout", h.dropout)?,
            epochs: s.take("train", "epochs", h.epochs)?,
            patience: s.take("train", "patience", h.patience)?,
            seed: s.take("train", "seed", h.seed)?,
            collapse_eps: s.take("train", "collapse_eps", h.collapse_eps)?,
            eval: d.eval,
        };
        let precision = match s.take("train", "precision", "f64".to_string())?.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::config(format!("unknown precision `{other}`"))),
        };
        let mlm = MlmConfig {
            epochs: s.take("train", "mlm_epochs", d.mlm.epochs)?,
            mask_prob: s.take("train", "mlm_mask_prob", d.mlm.mask_prob)?,
            batch: s.take("train", "mlm_batch", d.mlm.batch)?,
            lr: s.take("train", "mlm_lr", d.mlm.lr)?,
            seed: hp.seed,
        };
        let eval = EvalOptions {
            n: s.take("eval", "n", d.eval.n)?,
            exclude_history: s.take("eval", "exclude_history", d.eval.exclude_history)?,
        };
        let warm_ks = match s.take_raw("eval", "warm_k") {
            None => d.warm_ks.clone(),
            Some(v) => parse_list(&v)?,
        };
        let cfg = ExperimentConfig {
            data,
            min_user_interactions: s.take("data", "min_user_interactions", d.min_user_interactions)?,
            warm_filter: s.take("data", "warm_filter", d.warm_filter)?,
            truncate: s.take("data", "truncate", d.truncate)?,
            max_title_tokens: s.take("data", "max_title_tokens", d.max_title_tokens)?,
            model: ModelSpec {
                d: dim,
                backbone,
                encoder,
            },
            hp: HyperParams { eval, ..hp },
            mlm,
            precision,
            eval,
            warm_ks,
            label: s.take("output", "label", String::new())?,
            output: s.take("output", "dir", d.output.clone())?,
        };
        Ok(cfg)
    }

    /// Checks everything that can be checked before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if let DataSource::Synthetic(g) = &self.data {
            g.validate()?;
        }
        if let DataSource::Files { interactions, items, .. } = &self.data {
            for p in std::iter::once(interactions).chain(items) {
                if !p.exists() {
                    return Err(Error::config(format!("input file {} does not exist", p.display())));
                }
            }
            let enc = &self.model.encoder;
            if (enc.needs_text() || enc.needs_features()) && items.is_none() {
                return Err(Error::config(format!("item encoder {enc} needs an item file")));
            }
        }
        if self.model.d == 0 {
            return Err(Error::config("d must be positive"));
        }
        if self.truncate < crate::catalog::MIN_SPLIT_LEN {
            return Err(Error::config(format!("truncate {} is below 3", self.truncate)));
        }
        if let BackboneSpec::Sasrec(sp) = &self.model.backbone {
            if sp.heads == 0 || self.model.d % sp.heads != 0 {
                return Err(Error::config(format!("d = {} is not divisible by {} heads", self.model.d, sp.heads)));
            }
            if sp.max_len == 0 {
                return Err(Error::config("backbone.max_len must be positive"));
            }
        }
        if let Some(t) = text_spec(&self.model.encoder) {
            if t.heads == 0 || t.width % t.heads != 0 {
                return Err(Error::config(format!("text width {} is not divisible by {} heads", t.width, t.heads)));
            }
            if self.max_title_tokens + 1 > t.max_positions {
                return Err(Error::config(format!(
                    "titles of {} tokens exceed the text encoder's {} positions",
                    self.max_title_tokens, t.max_positions
                )));
            }
        }
        if self.mlm.epochs > 0 && !self.model.encoder.needs_text() {
            return Err(Error::config("MLM pre-training needs a text encoder"));
        }
        Ok(())
    }

    /// The resolved snapshot: every setting, defaults included.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut sec = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        let mut data = Vec::new();
        match &self.data {
            DataSource::Synthetic(_) => data.push(("source", "synthetic".to_string())),
            DataSource::Files { interactions, items, columns } => {
                data.push(("source", "files".to_string()));
                data.push(("interactions", interactions.display().to_string()));
                data.push(("items", items.as_ref().map_or("none".to_string(), |p| p.display().to_string())));
                data.push(("user_column", columns.user.to_string()));
                data.push(("item_column", columns.item.to_string()));
                data.push(("timestamp_column", columns.timestamp.to_string()));
            }
        }
        data.push(("min_user_interactions", self.min_user_interactions.to_string()));
        data.push(("warm_filter", self.warm_filter.to_string()));
        data.push(("truncate", self.truncate.to_string()));
        data.push(("max_title_tokens", self.max_title_tokens.to_string()));
        sec("data", data);
        if let DataSource::Synthetic(g) = &self.data {
            sec(
                "synthetic",
                vec![
                    ("users", g.users.to_string()),
                    ("items", g.items.to_string()),
                    ("topics", g.topics.to_string()),
                    ("title_tokens", g.title_tokens.to_string()),
                    ("vocab", g.vocab.to_string()),
                    ("min_interactions", g.min_interactions.to_string()),
                    ("max_interactions", g.max_interactions.to_string()),
                    ("cold_fraction", g.cold_fraction.to_string()),
                    ("new_fraction", g.new_fraction.to_string()),
                    ("cold_target_rate", g.cold_target_rate.to_string()),
                    ("zipf", g.zipf.to_string()),
                    ("tau", g.tau.to_string()),
                    ("topic_sharpness", g.topic_sharpness.to_string()),
                    ("title_noise", g.title_noise.to_string()),
                    ("feature_noise", g.feature_noise.to_string()),
                    ("seed", g.seed.to_string()),
                ],
            );
        }
        let mut bb = vec![("type", self.model.backbone.name().to_string()), ("d", self.model.d.to_string())];
        match &self.model.backbone {
            BackboneSpec::Sasrec(sp) => {
                bb.push(("blocks", sp.blocks.to_string()));
                bb.push(("heads", sp.heads.to_string()));
                bb.push(("max_len", sp.max_len.to_string()));
            }
            BackboneSpec::Dssm(sp) => bb.push(("layers", sp.layers.to_string())),
        }
        sec("backbone", bb);
        sec("item_encoder", encoder_pairs(&self.model.encoder));
        let h = &self.hp;
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        sec(
            "train",
            vec![
                ("lr", h.lr.to_string()),
                ("lr_modality", h.lr_modality.map_or("none".to_string(), |v| v.to_string())),
                ("batch", h.batch.to_string()),
                ("weight_decay", h.weight_decay.to_string()),
                ("dropout", h.dropout.to_string()),
                ("epochs", h.epochs.to_string()),
                ("patience", h.patience.to_string()),
                ("seed", h.seed.to_string()),
                ("collapse_eps", h.collapse_eps.to_string()),
                ("precision", precision.to_string()),
                ("mlm_epochs", self.mlm.epochs.to_string()),
                ("mlm_mask_prob", self.mlm.mask_prob.to_string()),
                ("mlm_batch", self.mlm.batch.to_string()),
                ("mlm_lr", self.mlm.lr.to_string()),
            ],
        );
        let ks: Vec<String> = self.warm_ks.iter().map(usize::to_string).collect();
        sec(
            "eval",
            vec![
                ("n", self.eval.n.to_string()),
                ("exclude_history", self.eval.exclude_history.to_string()),
                ("warm_k", ks.join(",")),
            ],
        );
        sec(
            "output",
            vec![("dir", self.output.display().to_string()), ("label", self.label.clone())],
        );
        out
    }

    /// Hash of the resolved snapshot without the `[output]` section, so the
    /// same experiment written to two places hashes the same.
    pub fn config_hash(&self) -> String {
        let text = self.to_ini();
        let body = text.split("[output]").next().unwrap_or(&text);
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Short name used for grid subdirectories and report labels.
    pub fn cell_name(&self) -> String {
        format!("{}-{}", self.model.backbone.name(), self.model.encoder)
            .replace(['(', ')'], "")
            .replace(',', "_")
    }
}

fn text_spec(e: &EncoderSpec) -> Option<TextSpec> {
    match e {
        EncoderSpec::TextE2e(t) => Some(*t),
        EncoderSpec::Fusion { modality, .. } => text_spec(modality),
        _ => None,
    }
}

fn encoder_pairs(e: &EncoderSpec) -> Vec<(&'static str, String)> {
    match e {
        EncoderSpec::Id => vec![("type", "id".into())],
        EncoderSpec::TextE2e(t) => vec![
            ("type", "text_e2e".into()),
            ("text_width", t.width.to_string()),
            ("text_blocks", t.blocks.to_string()),
            ("text_heads", t.heads.to_string()),
        ],
        EncoderSpec::VisionE2e { width } => vec![("type", "vision_e2e".into()), ("vision_width", width.to_string())],
        EncoderSpec::Frozen { depth, identity_init } => vec![
            ("type", "frozen".into()),
            ("adapter_depth", depth.to_string()),
            ("identity_init", identity_init.to_string()),
        ],
        EncoderSpec::Fusion { mode, depth, modality } => {
            let mut v = vec![
                ("type", "fusion".into()),
                ("fusion_mode", mode.to_string()),
                ("fusion_depth", depth.to_string()),
            ];
            let inner = encoder_pairs(modality);
            v.push(("modality", inner[0].1.clone()));
            v.extend(inner.into_iter().skip(1));
            v
        }
    }
}

/// Expands the `[grid]` section of `text` into one config per combination.
/// Grid keys are `section.key`; values are comma-separated. Each config's
/// output directory is `<output.dir>/<cell>` where the cell name joins the
/// chosen values.
pub fn expand_grid(text: &str) -> Result<Vec<ExperimentConfig>> {
    let mut base = Ini::load_from_str(text).map_err(|e| Error::Parse {
        line: e.line,
        msg: e.msg.to_string(),
    })?;
    let grid: Vec<(String, Vec<String>)> = match base.section(Some("grid")) {
        None => Vec::new(),
        Some(g) => g
            .iter()
            .map(|(k, v)| (k.to_string(), v.split(',').map(|x| x.trim().to_string()).collect()))
            .collect(),
    };
    base.delete(Some("grid"));
    if grid.is_empty() {
        let mut buf = Vec::new();
        base.write_to(&mut buf)?;
        return Ok(vec![ExperimentConfig::from_ini(&String::from_utf8_lossy(&buf))?]);
    }
    for (k, vals) in &grid {
        if !k.contains('.') || vals.iter().any(String::is_empty) {
            return Err(Error::config(format!("grid key `{k}` must be `section.key` with non-empty values")));
        }
    }
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for (_, vals) in &grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..vals.len()).map(move |i| {
                    let mut c = c.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }
    let base_dir = base
        .get_from(Some("output"), "dir")
        .map_or_else(|| ExperimentConfig::default().output, PathBuf::from);
    let mut out = Vec::with_capacity(combos.len());
    let mut seen = std::collections::BTreeSet::new();
    for combo in combos {
        let mut ini = base.clone();
        let mut name = Vec::new();
        for ((key, vals), &i) in grid.iter().zip(&combo) {
            let (sec, k) = key.split_once('.').expect("checked above");
            ini.with_section(Some(sec)).set(k, vals[i].clone());
            name.push(vals[i].replace(['/', ' '], "_"));
        }
        let name = name.join("-");
        if !seen.insert(name.clone()) {
            return Err(Error::config(format!("grid produces duplicate cell `{name}`")));
        }
        ini.with_section(Some("output")).set("dir", base_dir.join(&name).display().to_string());
        let mut buf = Vec::new();
        ini.write_to(&mut buf)?;
        out.push(ExperimentConfig::from_ini(&String::from_utf8_lossy(&buf))?);
    }
    Ok(out)
}

/// Sets `section.key = value` pairs in config text, e.g. from command-line flags.
pub fn apply_overrides(text: &str, overrides: &[(String, String)]) -> Result<String> {
    let mut ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
        line: e.line,
        msg: e.msg.to_string(),
    })?;
    for (key, value) in overrides {
        let (sec, k) = key
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override `{key}` must be `section.key`")))?;
        ini.with_section(Some(sec)).set(k, value.clone());
    }
    let mut buf = Vec::new();
    ini.write_to(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = ExperimentConfig::default();
        let again = ExperimentConfig::from_ini(&cfg.to_ini()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_ini("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("train.learning_rate")));
    }

    #[test]
    fn grid_expands_to_cartesian_product() {
        let text = "[output]\ndir = out\n[grid]\nbackbone.type = sasrec, dssm\nitem_encoder.type = id, text_e2e\n";
        let cells = expand_grid(text).unwrap();
        let dirs: Vec<String> = cells.iter().map(|c| c.output.display().to_string()).collect();
        assert_eq!(dirs, ["out/sasrec-id", "out/sasrec-text_e2e", "out/dssm-id", "out/dssm-text_e2e"]);
        assert!(matches!(ExperimentConfig::from_ini(text), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_replace_values() {
        let text = apply_overrides("[train]\nlr = 0.1\n", &[("train.lr".into(), "0.5".into())]).unwrap();
        assert_eq!(ExperimentConfig::from_ini(&text).unwrap().hp.lr, 0.5);
        assert!(apply_overrides("", &[("lr".into(), "1".into())]).is_err());
    }

    #[test]
    fn fusion_round_trip() {
        let text = "[item_encoder]\ntype = fusion\nfusion_mode = con\nfusion_depth = 2\nmodality = frozen\nadapter_depth = 3\n";
        let cfg = ExperimentConfig::from_ini(text).unwrap();
        assert_eq!(ExperimentConfig::from_ini(&cfg.to_ini()).unwrap(), cfg);
        assert_eq!(cfg.model.encoder.to_string(), "fusion(con,2,frozen(3))");
    }
}
