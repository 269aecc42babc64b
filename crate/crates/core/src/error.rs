use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth in the camera frame")]
    NonPositiveDepth,
    #[error("camera intrinsics violate fx, fy > 0 and principal point inside the image")]
    InvalidIntrinsics,
    #[error("rotation is not a proper orthonormal matrix")]
    InvalidPose,

    #[error("patch of size {size} around ({u}, {v}) leaves the image")]
    BorderViolation { u: f64, v: f64, size: usize },
    #[error("patch size must be odd, got {0}")]
    EvenPatchSize(usize),
    #[error("vector norm below 1e-12")]
    ZeroVector,
    #[error("channel count mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("descriptor map shape is invalid: {0}")]
    InvalidMap(String),

    #[error("degenerate triangulation geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("optimizer did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("inverse depth driven to {0:e}")]
    NegativeDepth(f64),

    #[error("sample point lies outside the voxel cube")]
    OutOfBounds,
    #[error("ray does not intersect the voxel")]
    NoIntersection,
    #[error("voxel center does not project inside the image with the required margin")]
    OutOfFrustum,
    #[error("rendered descriptor is the zero vector")]
    ZeroRendered,
    #[error("training loss became non-finite at epoch {0}")]
    Divergence(usize),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate point configuration for PnP")]
    DegenerateConfiguration,
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("no pose model with at least 4 inliers")]
    NoModelFound,
    #[error("localization failed on the first iteration")]
    LocalizationFailed,

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("parse error: {0}")]
    Parse(String),
}
