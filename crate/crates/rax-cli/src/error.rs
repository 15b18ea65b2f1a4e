//! Error taxonomy mapped to process exit codes: 1 usage/config, 2 data,
//! 3 backend/transport. Every failure is emitted as one JSON object on
//! stderr so callers can parse outcomes without scraping prose.

use std::fmt;

use rax_core::imbalance::ImbalanceError;
use rax_core::ingest::IngestError;
use rax_core::metrics::MetricsError;
use rax_core::models::serialize::ModelIoError;
use rax_core::models::ModelError;
use rax_core::narrative::NarrativeError;
use rax_core::schema::SchemaError;
use rax_core::shap::ShapError;
use rax_core::store::StoreError;
use rax_core::synth::SynthError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config, unresolvable configured paths.
    Usage(String),
    /// Inputs that parse but cannot be processed: corrupt store, schema
    /// mismatch, degenerate training data, unreadable model file.
    Data(String),
    /// Narrative backend unreachable or failing after retries.
    Backend(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Backend(_) => "backend",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "code": self.exit_code(),
                "message": self.message(),
            }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ShapError> for CliError {
    fn from(e: ShapError) -> CliError {
        match e {
            ShapError::UnsupportedModel(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NarrativeError> for CliError {
    fn from(e: NarrativeError) -> CliError {
        match e {
            NarrativeError::Transport { .. } => CliError::Backend(e.to_string()),
            NarrativeError::InvalidLexicon(_) | NarrativeError::InvalidGating(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ImbalanceError> for CliError {
    fn from(e: ImbalanceError) -> CliError {
        match e {
            ImbalanceError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
