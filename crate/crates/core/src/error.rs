use thiserror::Error;

use crate::dataset::AppearanceKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (deviation {0:e})")]
    NotARotation(f64),
    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {0} has no refined pose")]
    MissingRefinedPose(String),
    #[error("unknown semantic label id {0}")]
    UnknownLabel(u8),
    #[error("mask dimensions {mask:?} do not match image dimensions {image:?}")]
    MaskMismatch {
        mask: (u32, u32),
        image: (u32, u32),
    },

    #[error("unknown appearance sequence (trip {}, camera {})", .0.trip, .0.camera)]
    UnknownSequence(AppearanceKey),
    #[error("no sequences recorded for camera {0}")]
    UnknownCamera(u32),

    #[error("depth target {depth} outside ray bounds ({near}, {far})")]
    DepthOutOfRange { depth: f64, near: f64, far: f64 },
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("degenerate trajectory segment at index {0}")]
    DegenerateSegment(usize),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("image {image_id}: {message}")]
    Ingest { image_id: String, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
