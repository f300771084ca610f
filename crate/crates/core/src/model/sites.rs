use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::formats::BlockFormat;
use crate::util::Fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Matmul,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Layer => "layer",
            Granularity::Matmul => "matmul",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Granularity::Layer),
            "matmul" => Ok(Granularity::Matmul),
            _ => Err(Error::InvalidInput(format!("unknown granularity {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Matmul {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Matmul {
    pub const ALL: [Matmul; 7] = [
        Matmul::Q,
        Matmul::K,
        Matmul::V,
        Matmul::O,
        Matmul::Gate,
        Matmul::Up,
        Matmul::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Matmul::Q => "q",
            Matmul::K => "k",
            Matmul::V => "v",
            Matmul::O => "o",
            Matmul::Gate => "gate",
            Matmul::Up => "up",
            Matmul::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One precision-assignment site: a whole layer, or one matmul of a layer.
///
/// Text form: `L3` (layer) or `L3.gate` (matmul).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub matmul: Option<Matmul>,
}

impl SiteId {
    pub fn layer(layer: usize) -> Self {
        SiteId {
            layer,
            matmul: None,
        }
    }

    pub fn matmul(layer: usize, m: Matmul) -> Self {
        SiteId {
            layer,
            matmul: Some(m),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self.matmul {
            None => Granularity::Layer,
            Some(_) => Granularity::Matmul,
        }
    }

    pub fn covers(&self, layer: usize, m: Matmul) -> bool {
        self.layer == layer && self.matmul.is_none_or(|own| own == m)
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.matmul {
            None => write!(f, "L{}", self.layer),
            Some(m) => write!(f, "L{}.{}", self.layer, m.name()),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad site id {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, mm) = match rest.split_once('.') {
            Some((l, m)) => (l, Some(m)),
            None => (rest, None),
        };
        let layer = layer.parse().map_err(|_| bad())?;
        let matmul = match mm {
            None => None,
            Some(name) => Some(
                Matmul::ALL
                    .into_iter()
                    .find(|m| m.name() == name)
                    .ok_or_else(bad)?,
            ),
        };
        Ok(SiteId { layer, matmul })
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Lists quantization sites with their parameter counts. Embeddings and the
/// output head are never sites.
pub fn enumerate_sites(
    config: &ModelConfig,
    granularity: Granularity,
) -> Result<Vec<(SiteId, u64)>> {
    config.validate()?;
    let mut out = Vec::new();
    for layer in 0..config.n_layers {
        match granularity {
            Granularity::Layer => out.push((SiteId::layer(layer), config.layer_params())),
            Granularity::Matmul => {
                for m in Matmul::ALL {
                    let (r, c) = config.matmul_shape(m);
                    out.push((SiteId::matmul(layer, m), (r * c) as u64));
                }
            }
        }
    }
    Ok(out)
}

/// Per-site precision assignment. Sites outside `low_precision_sites` run in
/// full precision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub method: BlockFormat,
    pub weight_and_activation: bool,
    pub low_precision_sites: BTreeSet<SiteId>,
    pub site_param_counts: BTreeMap<SiteId, u64>,
}

impl QuantPlan {
    pub fn new(
        method: BlockFormat,
        weight_and_activation: bool,
        sites: &[(SiteId, u64)],
        low: impl IntoIterator<Item = SiteId>,
    ) -> Result<Self> {
        let site_param_counts: BTreeMap<SiteId, u64> = sites.iter().copied().collect();
        if site_param_counts.len() != sites.len() {
            return Err(Error::InvalidInput("duplicate site in site list".into()));
        }
        let low_precision_sites: BTreeSet<SiteId> = low.into_iter().collect();
        if let Some(s) = low_precision_sites
            .iter()
            .find(|s| !site_param_counts.contains_key(s))
        {
            return Err(Error::InvalidInput(format!(
                "low-precision site {s} not in site list"
            )));
        }
        if let Some(g) = sites.first().map(|(s, _)| s.granularity()) {
            if sites.iter().any(|(s, _)| s.granularity() != g) {
                return Err(Error::InvalidInput(
                    "sites mix layer and matmul granularity".into(),
                ));
            }
        }
        Ok(QuantPlan {
            method,
            weight_and_activation,
            low_precision_sites,
            site_param_counts,
        })
    }

    /// Plan that quantizes every site.
    pub fn full(
        method: BlockFormat,
        weight_and_activation: bool,
        sites: &[(SiteId, u64)],
    ) -> Result<Self> {
        Self::new(
            method,
            weight_and_activation,
            sites,
            sites.iter().map(|(s, _)| *s),
        )
    }

    pub fn is_low(&self, layer: usize, m: Matmul) -> bool {
        self.low_precision_sites.iter().any(|s| s.covers(layer, m))
    }

    pub fn low_params(&self) -> u64 {
        self.low_precision_sites
            .iter()
            .map(|s| self.site_param_counts[s])
            .sum()
    }

    pub fn total_params(&self) -> u64 {
        self.site_param_counts.values().sum()
    }

    /// Fraction of site parameters assigned to the low-precision format.
    pub fn achieved_ratio(&self) -> f64 {
        let total = self.total_params();
        if total == 0 {
            0.0
        } else {
            self.low_params() as f64 / total as f64
        }
    }

    /// Order-independent content digest (hex FNV-1a).
    pub fn digest(&self) -> String {
        let mut h = Fnv1a::new();
        h.update(self.method.to_string().as_bytes());
        h.update(if self.weight_and_activation {
            b"|wa"
        } else {
            b"|w"
        });
        for s in &self.low_precision_sites {
            h.update(b"|");
            h.update(s.to_string().as_bytes());
        }
        format!("{:016x}", h.finish())
    }

    /// Checks the plan's sites against a model configuration.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if let Some(s) = self
            .site_param_counts
            .keys()
            .find(|s| s.layer >= config.n_layers)
        {
            return Err(Error::InvalidInput(format!(
                "site {s} out of range for {} layers",
                config.n_layers
            )));
        }
        Ok(())
    }
}
