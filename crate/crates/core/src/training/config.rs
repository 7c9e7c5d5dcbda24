use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Which networks a run trains and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// SED branch alone, BCE loss.
    Sed,
    /// DOA branch starting from a trained SED branch's feature layers.
    DoaTransfer,
    /// DOA branch from fresh init.
    DoaNt,
    /// Shared trunk with both heads, weighted loss.
    Joint,
    /// `Sed` followed by `DoaTransfer` in one run.
    TwoStage,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Sed,
        Regime::DoaTransfer,
        Regime::DoaNt,
        Regime::Joint,
        Regime::TwoStage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Sed => "sed",
            Regime::DoaTransfer => "doa_transfer",
            Regime::DoaNt => "doa_nt",
            Regime::Joint => "joint",
            Regime::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

/// Which rendering of the dataset feeds the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioFormat {
    Foa,
    Mic,
}

impl AudioFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            AudioFormat::Foa => "foa",
            AudioFormat::Mic => "mic",
        }
    }
}

impl FromStr for AudioFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foa" => Ok(AudioFormat::Foa),
            "mic" => Ok(AudioFormat::Mic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown format {s:?} (foa or mic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr: f64,
    /// First 0-indexed epoch whose rate is decayed.
    pub decay_start_epoch: usize,
    /// Multiplier applied once per epoch from `decay_start_epoch` on.
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Seconds.
    pub segment_len: f64,
    /// Seconds.
    pub segment_hop: f64,
    pub seed: u64,
    /// Trained SED checkpoint for `doa_transfer`.
    pub sed_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::TwoStage,
            epochs: 50,
            lr: 0.001,
            decay_start_epoch: 30,
            decay_factor: 0.9,
            batch_size: 32,
            segment_len: 2.0,
            segment_hop: 1.0,
            seed: 0,
            sed_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epochs >= 1,
            InvalidArgument,
            "epochs must be at least 1"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            InvalidArgument,
            "learning rate must be positive, got {}",
            self.lr
        );
        ensure!(
            self.decay_factor > 0.0 && self.decay_factor <= 1.0,
            InvalidArgument,
            "decay factor must be in (0, 1], got {}",
            self.decay_factor
        );
        ensure!(
            self.batch_size >= 1,
            InvalidArgument,
            "batch size must be at least 1"
        );
        ensure!(
            self.segment_len > 0.0 && self.segment_hop > 0.0,
            InvalidArgument,
            "segment length and hop must be positive"
        );
        ensure!(
            self.segment_hop <= self.segment_len,
            InvalidArgument,
            "segment hop {} exceeds segment length {}",
            self.segment_hop,
            self.segment_len
        );
        Ok(())
    }

    /// Learning rate of 0-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }
}

/// `lr` until `decay_start_epoch`, then multiplied by `decay_factor` once per epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = (epoch + 1).saturating_sub(cfg.decay_start_epoch);
    cfg.lr * cfg.decay_factor.powi(decays as i32)
}
