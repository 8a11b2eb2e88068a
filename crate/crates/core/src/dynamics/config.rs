use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the divergence of the velocity field is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    /// Exact, from the self slot of the per-dimension output network.
    ClosedForm,
    /// Identically zero; volume-preserving dynamics only.
    Zero,
    /// One Rademacher probe per evaluation.
    Hutchinson,
    /// Exact sum of per-point diagonal blocks, one forward pass per dimension.
    #[serde(rename = "block")]
    BlockExact,
    /// Exact trace of the full Jacobian, one pass per slot.
    ExactDense,
}

impl TraceMode {
    pub const ALL: [TraceMode; 5] = [
        TraceMode::ClosedForm,
        TraceMode::Zero,
        TraceMode::Hutchinson,
        TraceMode::BlockExact,
        TraceMode::ExactDense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceMode::ClosedForm => "closed-form",
            TraceMode::Zero => "zero",
            TraceMode::Hutchinson => "hutchinson",
            TraceMode::BlockExact => "block",
            TraceMode::ExactDense => "exact-dense",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self == TraceMode::Hutchinson
    }
}

impl fmt::Display for TraceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TraceMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown trace mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsKind {
    DeepSet,
    Attention,
}

/// Reduction over the other points of a set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub kind: DynamicsKind,
    pub point_dim: usize,
    pub hidden_dim: usize,
    /// Width of each per-dimension within-point feature; 0 disables it.
    pub latent_dim: usize,
    /// Width of the between-points feature; 0 disables it.
    pub between_dim: usize,
    pub aggregation: Aggregation,
    pub num_heads: usize,
    pub key_dim: usize,
    pub trace_mode: TraceMode,
    /// Whether the within-point network is masked so that feature group `j`
    /// ignores coordinate `j`.
    #[serde(default = "yes")]
    pub within_masked: bool,
    /// Whether the output network reads the coordinate it moves.
    #[serde(default = "yes")]
    pub self_slot: bool,
    /// Hidden layers of the per-dimension output network; 0 makes it affine.
    #[serde(default = "two")]
    pub tau_layers: usize,
}

impl DynamicsConfig {
    pub fn deep_set(point_dim: usize) -> Self {
        Self {
            kind: DynamicsKind::DeepSet,
            point_dim,
            hidden_dim: 64,
            latent_dim: 2,
            between_dim: 64,
            aggregation: Aggregation::Mean,
            num_heads: 4,
            key_dim: 16,
            trace_mode: TraceMode::ClosedForm,
            within_masked: true,
            self_slot: true,
            tau_layers: 2,
        }
    }

    pub fn attention(point_dim: usize) -> Self {
        Self {
            kind: DynamicsKind::Attention,
            ..Self::deep_set(point_dim)
        }
    }

    /// Volume-preserving dynamics: every coordinate moves as a function of
    /// the other points only.
    pub fn between_only(point_dim: usize) -> Self {
        Self {
            latent_dim: 0,
            self_slot: false,
            trace_mode: TraceMode::Zero,
            ..Self::deep_set(point_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.point_dim == 0 {
            return bad("point_dim must be positive");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if self.kind == DynamicsKind::Attention {
            if self.between_dim == 0 || self.num_heads == 0 || self.key_dim == 0 {
                return bad("attention needs positive between_dim, num_heads and key_dim");
            }
            if !self.between_dim.is_multiple_of(self.num_heads) {
                return bad("num_heads must divide between_dim");
            }
        }
        match self.trace_mode {
            TraceMode::ClosedForm if self.latent_dim > 0 && !self.within_masked => {
                bad("closed-form trace needs the masked within-point network")
            }
            TraceMode::Zero if self.self_slot => {
                bad("zero trace needs dynamics that ignore each coordinate's own value")
            }
            TraceMode::Zero if self.latent_dim > 0 && !self.within_masked => {
                bad("zero trace needs the masked within-point network")
            }
            _ => Ok(()),
        }
    }
}
