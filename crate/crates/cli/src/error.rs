use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{origin}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config { origin: String, line: Option<usize>, key: Option<String>, message: String },

    #[error("test partitions differ for table {table:?}: {first} has {first_hash}, {second} has {second_hash}")]
    PartitionMismatch { table: String, first: String, first_hash: String, second: String, second_hash: String },

    #[error("{0}")]
    Io(String),

    #[error("child run {dir} failed: {message}")]
    Child { dir: String, message: String },

    #[error(transparent)]
    Core(#[from] tsleak::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config { .. } => "config",
            Self::PartitionMismatch { .. } => "partition_mismatch",
            Self::Io(_) => "io",
            Self::Child { .. } => "child_run",
            Self::Core(e) => match e {
                tsleak::Error::Config(_) => "config",
                tsleak::Error::Shape(_) => "shape",
                tsleak::Error::Schema { .. } => "schema",
                tsleak::Error::Data(_) => "data",
                tsleak::Error::Undefined(_) => "metric_undefined",
                tsleak::Error::Diverged { .. } => "diverged",
                tsleak::Error::Checkpoint(_) => "checkpoint",
                tsleak::Error::Io(_) | tsleak::Error::Json(_) => "io",
            },
        }
    }

    /// 2 for problems with the invocation or config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" | "config" => 2,
            _ => 1,
        }
    }

    /// Machine-readable error record.
    pub fn to_json(&self, experiment: Option<&str>) -> serde_json::Value {
        let mut v = json!({ "kind": self.kind(), "message": self.to_string(), "experiment": experiment });
        if let Self::Config { line, key, origin, .. } = self {
            v["line"] = json!(line);
            v["key"] = json!(key);
            v["origin"] = json!(origin);
        }
        if let Self::Core(tsleak::Error::Diverged { epoch, step, .. }) = self {
            v["epoch"] = json!(epoch);
            v["step"] = json!(step);
        }
        v
    }
}
