use std::fmt;

use serde::{Deserialize, Serialize};

/// Base self-supervised framework the distillation objective is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Simclr,
    Byol,
    Mocov3,
}

impl Framework {
    pub fn has_teacher(self) -> bool {
        !matches!(self, Framework::Simclr)
    }

    pub fn has_predictor(self) -> bool {
        !matches!(self, Framework::Simclr)
    }

    pub fn is_contrastive(self) -> bool {
        !matches!(self, Framework::Byol)
    }

    /// Batch normalization on the output layer of every head.
    pub fn bn_on_output(self) -> bool {
        !matches!(self, Framework::Byol)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Simclr => "simclr",
            Framework::Byol => "byol",
            Framework::Mocov3 => "mocov3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simclr" => Some(Framework::Simclr),
            "byol" => Some(Framework::Byol),
            "mocov3" => Some(Framework::Mocov3),
            _ => None,
        }
    }

    pub const ALL: [Framework; 3] = [Framework::Simclr, Framework::Byol, Framework::Mocov3];
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
