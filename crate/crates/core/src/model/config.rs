use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the tiny decoder-only seed model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyTransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        TinyTransformerConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            vocab: 64,
            max_seq: 48,
        }
    }
}

/// Parameter tensors of one decoder block, in storage order.
const BLOCK_KINDS: [LayerKind; 9] = [
    LayerKind::AttnNorm,
    LayerKind::Query,
    LayerKind::Key,
    LayerKind::Value,
    LayerKind::AttnOut,
    LayerKind::FfnNorm,
    LayerKind::FfnGate,
    LayerKind::FfnUp,
    LayerKind::FfnDown,
];

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.d_model == 0 || c.n_layers == 0 || c.n_heads == 0 || c.ffn_hidden == 0 || c.max_seq == 0 {
            return Err(Error::Config(format!("all model dimensions must be positive: {c:?}")));
        }
        if !c.d_model.is_multiple_of(c.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                c.d_model, c.n_heads
            )));
        }
        if c.vocab < crate::model::tokenizer::PAYLOAD_BASE + 1 {
            return Err(Error::Config(format!("vocab {} leaves no payload symbols", c.vocab)));
        }
        Ok(())
    }

    /// Every parameter tensor, in architecture order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids = vec![LayerId::global(LayerKind::TokEmb), LayerId::global(LayerKind::PosEmb)];
        for depth in 0..self.n_layers {
            ids.extend(BLOCK_KINDS.iter().map(|&kind| LayerId::block(kind, depth)));
        }
        ids.push(LayerId::global(LayerKind::FinalNorm));
        ids.push(LayerId::global(LayerKind::LmHead));
        ids
    }

    /// Position of `id` in [`Self::layer_ids`].
    pub fn index_of(&self, id: LayerId) -> Option<usize> {
        let blocks = self.n_layers * BLOCK_KINDS.len();
        match (id.kind, id.depth) {
            (LayerKind::TokEmb, None) => Some(0),
            (LayerKind::PosEmb, None) => Some(1),
            (LayerKind::FinalNorm, None) => Some(2 + blocks),
            (LayerKind::LmHead, None) => Some(3 + blocks),
            (kind, Some(d)) if d < self.n_layers => BLOCK_KINDS
                .iter()
                .position(|&k| k == kind)
                .map(|k| 2 + d * BLOCK_KINDS.len() + k),
            _ => None,
        }
    }

    pub fn shape_of(&self, id: LayerId) -> Vec<usize> {
        let (d, f, v) = (self.d_model, self.ffn_hidden, self.vocab);
        match id.kind {
            LayerKind::TokEmb | LayerKind::LmHead => vec![v, d],
            LayerKind::PosEmb => vec![self.max_seq, d],
            LayerKind::AttnNorm | LayerKind::FfnNorm | LayerKind::FinalNorm => vec![d],
            LayerKind::Query | LayerKind::Key | LayerKind::Value | LayerKind::AttnOut => vec![d, d],
            LayerKind::FfnGate | LayerKind::FfnUp => vec![f, d],
            LayerKind::FfnDown => vec![d, f],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_ids()
            .into_iter()
            .map(|id| self.shape_of(id).iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    TokEmb,
    PosEmb,
    AttnNorm,
    Query,
    Key,
    Value,
    AttnOut,
    FfnNorm,
    FfnGate,
    FfnUp,
    FfnDown,
    FinalNorm,
    LmHead,
}

impl LayerKind {
    /// Coarse layer-type tag used for capacity reporting.
    pub fn type_tag(self) -> &'static str {
        match self {
            LayerKind::TokEmb => "embedding",
            LayerKind::PosEmb => "pos_embedding",
            LayerKind::AttnNorm | LayerKind::FfnNorm | LayerKind::FinalNorm => "norm",
            LayerKind::Query => "query",
            LayerKind::Key => "key",
            LayerKind::Value => "value",
            LayerKind::AttnOut => "attn_out",
            LayerKind::FfnGate => "ffn_gate",
            LayerKind::FfnUp => "ffn_up",
            LayerKind::FfnDown => "ffn_down",
            LayerKind::LmHead => "lm_head",
        }
    }

    fn slot_name(self) -> &'static str {
        match self {
            LayerKind::TokEmb => "tok_emb",
            LayerKind::PosEmb => "pos_emb",
            LayerKind::AttnNorm => "attn_norm",
            LayerKind::FfnNorm => "ffn_norm",
            LayerKind::FinalNorm => "final_norm",
            other => other.type_tag(),
        }
    }

    pub fn is_norm(self) -> bool {
        self.type_tag() == "norm"
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, LayerKind::FfnGate | LayerKind::FfnUp | LayerKind::FfnDown)
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, LayerKind::TokEmb | LayerKind::PosEmb)
    }
}

/// Stable name of one parameter tensor: layer type plus block depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub kind: LayerKind,
    pub depth: Option<usize>,
}

impl LayerId {
    pub fn global(kind: LayerKind) -> Self {
        LayerId { kind, depth: None }
    }

    pub fn block(kind: LayerKind, depth: usize) -> Self {
        LayerId {
            kind,
            depth: Some(depth),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn parse(name: &str) -> Option<LayerId> {
        let all = [
            LayerKind::TokEmb,
            LayerKind::PosEmb,
            LayerKind::FinalNorm,
            LayerKind::LmHead,
        ];
        if let Some(k) = all.iter().find(|k| k.slot_name() == name) {
            return Some(LayerId::global(*k));
        }
        let rest = name.strip_prefix("blocks.")?;
        let (depth, slot) = rest.split_once('.')?;
        let depth = depth.parse().ok()?;
        BLOCK_KINDS
            .iter()
            .find(|k| k.slot_name() == slot)
            .map(|&k| LayerId::block(k, depth))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.depth {
            Some(d) => write!(f, "blocks.{d}.{}", self.kind.slot_name()),
            None => f.write_str(self.kind.slot_name()),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LayerId::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown layer id {s}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_index() {
        let c = TinyTransformerConfig::default();
        let ids = c.layer_ids();
        assert_eq!(ids.len(), 2 + 2 * 9 + 2);
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(LayerId::parse(&id.name()), Some(*id));
            assert_eq!(c.index_of(*id), Some(i));
        }
        assert_eq!(
            LayerId::parse("blocks.1.query"),
            Some(LayerId::block(LayerKind::Query, 1))
        );
        assert_eq!(LayerId::parse("blocks.x.query"), None);
        assert_eq!(c.index_of(LayerId::block(LayerKind::Query, 5)), None);
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let c = TinyTransformerConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        TinyTransformerConfig::default().validate().unwrap();
    }
}
