use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Spatial dynamics divide by speed; evaluation below the floor is refused.
    #[error("speed {speed} m/s is below the singularity floor {floor} m/s")]
    Singularity { speed: f64, floor: f64 },

    #[error("degenerate zone boundaries on vehicle {vehicle}: {first} and {second} are distinct but closer than {tol} m")]
    DegenerateZone {
        vehicle: usize,
        first: f64,
        second: f64,
        tol: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
