use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::quant::QuantScheme;

/// How a convolutional layer is quantized and requantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Per-layer weights with batch-norm folded into them.
    PlFb,
    /// Per-layer weights, batch-norm kept in per-channel ICN parameters.
    PlIcn,
    /// Per-channel weights with ICN parameters.
    PcIcn,
    /// Per-channel weights with integer thresholds (memory model only).
    PcThresholds,
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] = [
        QuantMode::PlFb,
        QuantMode::PlIcn,
        QuantMode::PcIcn,
        QuantMode::PcThresholds,
    ];

    /// Modes the converter and executors support.
    pub const EXECUTABLE: [QuantMode; 3] = [QuantMode::PlFb, QuantMode::PlIcn, QuantMode::PcIcn];

    pub fn per_channel(self) -> bool {
        matches!(self, QuantMode::PcIcn | QuantMode::PcThresholds)
    }

    pub fn weight_scheme(self) -> QuantScheme {
        if self.per_channel() {
            QuantScheme::PER_CHANNEL
        } else {
            QuantScheme::PER_LAYER
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::PlFb => "pl-fb",
            QuantMode::PlIcn => "pl-icn",
            QuantMode::PcIcn => "pc-icn",
            QuantMode::PcThresholds => "pc-thresholds",
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuantMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s) || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown mode '{s}' (pl-fb, pl-icn, pc-icn, pc-thresholds)"))
    }
}
