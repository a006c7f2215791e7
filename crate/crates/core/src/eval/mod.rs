//! Instruction-task evaluation: exact match, seen/unseen aggregation and
//! zero-shot metrics under LoRA scaling.

mod metrics;
mod runner;
mod table;
mod tasks;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    aggregate, exact_match, normalize_answer, normalized_set, success_from_rates, zero_shot_metrics,
    AllowedSetDetector, EvalReport, FollowDetector, GroupStat, InstanceResult, QuestionOutcome, ZeroShotReport,
    ZeroShotResponse,
};
pub use runner::{
    evaluate_instances, lora_scale_sweep, zero_shot_responses, DestaResponder, InstructionModel, Prediction, SweepRow,
};
pub use table::{format_instance_table, format_sweep_table, SWEEP_SCALES};
pub use tasks::{instruction_pairs, synthesize_tasks, validate_tasks, TaskInstance, TaskSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("{0}")]
    Scale(String),
    #[error("success identity violated at scale {scale}")]
    Identity { scale: f64 },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "CON")]
    Con,
    #[serde(rename = "SEM")]
    Sem,
    #[serde(rename = "PAR")]
    Par,
    #[serde(rename = "DEG")]
    Deg,
    #[serde(rename = "SPK")]
    Spk,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [Dimension::Con, Dimension::Sem, Dimension::Par, Dimension::Deg, Dimension::Spk];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Con => "CON",
            Dimension::Sem => "SEM",
            Dimension::Par => "PAR",
            Dimension::Deg => "DEG",
            Dimension::Spk => "SPK",
        }
    }
}

impl FromStr for Dimension {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::Invalid(format!("unknown dimension `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Seen, Split::Unseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}
