use thiserror::Error;
use vrckit_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("k = {k} exceeds cloud size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("cannot draw {requested} points from {available}")]
    TooFewPoints { requested: usize, available: usize },

    #[error("only {visible} points visible from camera {camera:?}, {requested} requested")]
    UnderVisible {
        visible: usize,
        requested: usize,
        camera: [f64; 3],
    },

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("manifest {pointer}: {detail}")]
    Manifest { pointer: String, detail: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: ctx(),
            source: Box::new(e.into()),
        })
    }
}
