//! Named activation sites and the cache that holds their snapshots.
//!
//! Names follow the `TransformerLens` convention:
//! `layers.{l}.attn.hook_v.{h}`, `layers.{l}.attn.hook_z.{h}`,
//! `layers.{l}.mlp.hook_pre`, `layers.{l}.mlp.hook_post`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use factlab_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookSite {
    /// Per-head value vectors, before attention mixing and `o_proj`.
    AttnV,
    /// Per-head attention output, before concatenation and `o_proj`.
    AttnZ,
    /// Output of `gate_up_proj` (gate half then up half), before the nonlinearity.
    MlpPre,
    /// `silu(gate) ⊙ up`, the input of `down_proj`.
    MlpPost,
}

impl HookSite {
    pub const ALL: [HookSite; 4] = [HookSite::AttnV, HookSite::AttnZ, HookSite::MlpPre, HookSite::MlpPost];

    pub fn is_attention(self) -> bool {
        matches!(self, HookSite::AttnV | HookSite::AttnZ)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HookSite::AttnV => "attn.hook_v",
            HookSite::AttnZ => "attn.hook_z",
            HookSite::MlpPre => "mlp.hook_pre",
            HookSite::MlpPost => "mlp.hook_post",
        }
    }
}

/// One capture/patch location. Attention sites carry a head index; MLP sites do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookPoint {
    pub layer: usize,
    pub site: HookSite,
    pub head: Option<usize>,
}

impl HookPoint {
    pub fn attn_v(layer: usize, head: usize) -> Self {
        Self {
            layer,
            site: HookSite::AttnV,
            head: Some(head),
        }
    }

    pub fn attn_z(layer: usize, head: usize) -> Self {
        Self {
            layer,
            site: HookSite::AttnZ,
            head: Some(head),
        }
    }

    pub fn mlp_pre(layer: usize) -> Self {
        Self {
            layer,
            site: HookSite::MlpPre,
            head: None,
        }
    }

    pub fn mlp_post(layer: usize) -> Self {
        Self {
            layer,
            site: HookSite::MlpPost,
            head: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Hook(format!("{self}: layer out of range (n_layers {})", config.n_layers)));
        }
        match (self.site.is_attention(), self.head) {
            (true, Some(h)) if h < config.n_heads => Ok(()),
            (true, Some(_)) => Err(Error::Hook(format!("{self}: head out of range (n_heads {})", config.n_heads))),
            (true, None) => Err(Error::Hook(format!("{self}: attention site needs a head index"))),
            (false, Some(_)) => Err(Error::Hook(format!("{self}: MLP site takes no head index"))),
            (false, None) => Ok(()),
        }
    }

    /// Number of columns of this hook's snapshot; rows are sequence positions.
    pub fn width(&self, config: &ModelConfig) -> usize {
        match self.site {
            HookSite::AttnV | HookSite::AttnZ => config.d_head(),
            HookSite::MlpPre => 2 * config.d_ff,
            HookSite::MlpPost => config.d_ff,
        }
    }

    /// Every hook point of a model, in canonical order.
    pub fn all(config: &ModelConfig) -> BTreeSet<HookPoint> {
        let mut out = BTreeSet::new();
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                out.insert(Self::attn_v(layer, head));
                out.insert(Self::attn_z(layer, head));
            }
            out.insert(Self::mlp_pre(layer));
            out.insert(Self::mlp_post(layer));
        }
        out
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.site.as_str())?;
        if let Some(h) = self.head {
            write!(f, ".{h}")?;
        }
        Ok(())
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Hook(format!("unparseable hook name {s:?}"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, rest) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        for site in HookSite::ALL {
            if let Some(tail) = rest.strip_prefix(site.as_str()) {
                let head = match tail.strip_prefix('.') {
                    Some(h) => Some(h.parse().map_err(|_| bad())?),
                    None if tail.is_empty() => None,
                    None => continue,
                };
                return Ok(Self { layer, site, head });
            }
        }
        Err(bad())
    }
}

/// Snapshots captured during one forward pass, keyed by hook point.
#[derive(Clone, Debug, Default)]
pub struct ActivationCache<F> {
    entries: BTreeMap<HookPoint, Tensor<F>>,
}

impl<F> ActivationCache<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn get(&self, hook: &HookPoint) -> Option<&Tensor<F>> {
        self.entries.get(hook)
    }

    pub fn insert(&mut self, hook: HookPoint, value: Tensor<F>) {
        self.entries.insert(hook, value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookPoint> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookPoint, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn into_map(self) -> BTreeMap<HookPoint, Tensor<F>> {
        self.entries
    }
}
