use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FamError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {what}{}", describe_location(*round, *client, *task))]
    Numeric {
        what: String,
        round: Option<usize>,
        client: Option<usize>,
        task: Option<usize>,
    },

    #[error("episode: {0}")]
    Episode(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("ingestion failed for {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("wire: {0}")]
    Wire(String),

    #[error("client {client_id} in round {round}: {source}")]
    Client {
        client_id: usize,
        round: usize,
        #[source]
        source: Box<FamError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn describe_location(round: Option<usize>, client: Option<usize>, task: Option<usize>) -> String {
    let mut parts = Vec::new();
    if let Some(r) = round {
        parts.push(format!("round {r}"));
    }
    if let Some(c) = client {
        parts.push(format!("client {c}"));
    }
    if let Some(t) = task {
        parts.push(format!("task {t}"));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!(" ({})", parts.join(", "))
    }
}

impl FamError {
    pub fn numeric(what: impl Into<String>) -> Self {
        FamError::Numeric {
            what: what.into(),
            round: None,
            client: None,
            task: None,
        }
    }

    /// Fills in the task index of a numeric error if it is not already set.
    pub fn at_task(self, index: usize) -> Self {
        match self {
            FamError::Numeric {
                what,
                round,
                client,
                task,
            } => FamError::Numeric {
                what,
                round,
                client,
                task: task.or(Some(index)),
            },
            other => other,
        }
    }

    /// Tags an error with the client and round it originated from.
    pub fn in_client(self, client_id: usize, round: usize) -> Self {
        match self {
            FamError::Numeric { what, task, .. } => FamError::Client {
                client_id,
                round,
                source: Box::new(FamError::Numeric {
                    what,
                    round: Some(round),
                    client: Some(client_id),
                    task,
                }),
            },
            FamError::Client { .. } => self,
            other => FamError::Client {
                client_id,
                round,
                source: Box::new(other),
            },
        }
    }
}
