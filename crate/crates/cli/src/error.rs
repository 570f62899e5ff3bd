use std::fmt;
use std::io;

use schemalink_core::calibration::CalibrationError;
use schemalink_core::catalog::CatalogError;
use schemalink_core::embedding::EmbeddingError;
use schemalink_core::eval::EvalError;
use schemalink_core::index::IndexError;
use schemalink_core::linker::LinkError;
use schemalink_core::llm::LlmError;
use serde::Serialize;

/// Machine-readable failure class; each maps to its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Usage,
    Input,
    Config,
    Provider,
    Pipeline,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Input => 3,
            Category::Config => 4,
            Category::Provider => 5,
            Category::Pipeline => 6,
            Category::Io => 7,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl Failure {
    pub fn new(category: Category, message: impl fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self::new(Category::Usage, message)
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn provider(message: impl fmt::Display) -> Self {
        Self::new(Category::Provider, message)
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "category": self.category,
                "exit_code": self.category.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, Failure>;

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        let category = match e.kind() {
            io::ErrorKind::NotFound => Category::Input,
            _ => Category::Io,
        };
        Failure::new(category, e)
    }
}

impl From<CatalogError> for Failure {
    fn from(e: CatalogError) -> Self {
        Failure::new(Category::Input, e)
    }
}

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        Failure::provider(e)
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        let category = match &e {
            IndexError::Embedding(_) => Category::Provider,
            IndexError::DimensionMismatch { .. } => Category::Config,
            IndexError::Version { .. } | IndexError::Checksum | IndexError::Corrupt(_) => Category::Input,
            IndexError::Io(io) if io.kind() == io::ErrorKind::NotFound => Category::Input,
            IndexError::Io(_) => Category::Io,
            IndexError::Empty | IndexError::DuplicateId(_) => Category::Input,
            IndexError::InvalidK => Category::Config,
        };
        Failure::new(category, e)
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        let category = match &e {
            CalibrationError::Version { .. }
            | CalibrationError::Format(_)
            | CalibrationError::EmptyTraining
            | CalibrationError::EmptyGold(_) => Category::Input,
            CalibrationError::Io(io) if io.kind() == io::ErrorKind::NotFound => Category::Input,
            CalibrationError::Io(_) => Category::Io,
            CalibrationError::InvalidNMax => Category::Usage,
            CalibrationError::Degenerate => Category::Pipeline,
        };
        Failure::new(category, e)
    }
}

impl From<LinkError> for Failure {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::EmptyQuestion => Failure::usage(e),
            LinkError::Config(_) => Failure::config(e),
            LinkError::Retrieval(inner) => Failure::from(inner),
            LinkError::CatalogDrift(_) => Failure::new(Category::Input, e),
            LinkError::Calibration(inner) => Failure::from(inner),
        }
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        let category = match &e {
            LlmError::Model(_) | LlmError::Parse { .. } => Category::Provider,
            _ => Category::Pipeline,
        };
        Failure::new(category, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Parse { .. }
            | EvalError::EmptyDataset
            | EvalError::EmptyGold(_)
            | EvalError::DuplicateId(_)
            | EvalError::UnknownGoldTable { .. } => Failure::new(Category::Input, e),
            EvalError::InvalidCutoff => Failure::usage(e),
            EvalError::Missing(..) => Failure::config(e),
            EvalError::Link(inner) => Failure::from(inner),
            EvalError::Catalog(inner) => Failure::from(inner),
            EvalError::Embedding(inner) => Failure::from(inner),
            EvalError::Io(inner) => Failure::from(inner),
            EvalError::Bm25(_) | EvalError::Serialize(_) => Failure::new(Category::Pipeline, e),
        }
    }
}
