use std::fmt;
use std::path::PathBuf;

use crate::geometry::Pose;

/// Pipeline stage that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RoughSync,
    PairExtraction,
    Rotation,
    TranslationScale,
    LagRefinement,
    JointRefinement,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::RoughSync => "rough-sync",
            Stage::PairExtraction => "pair-extraction",
            Stage::Rotation => "rotation",
            Stage::TranslationScale => "translation-scale",
            Stage::LagRefinement => "lag-refinement",
            Stage::JointRefinement => "joint-refinement",
        };
        f.write_str(s)
    }
}

/// Best state reached before a refinement gave up.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSoFar {
    /// LiDAR-from-camera extrinsic.
    pub extrinsic: Pose,
    pub tau: f64,
    pub cost: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate rotation: angle {angle} rad is within 1e-6 of pi")]
    DegenerateRotation { angle: f64 },

    #[error("query time {t} s outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("onset-not-found: no sample stays above {threshold} for {hold} samples (is the dataset stationary?)")]
    OnsetNotFound { threshold: f64, hold: usize },

    #[error("insufficient rotational excitation: only {found} relative pose pairs reach the minimum angle, 3 needed; add roll/pitch/yaw motion")]
    InsufficientExcitation { found: usize },

    #[error("degenerate motion: rotation axes do not span 3D (singular value ratio {ratio:e}); rotate about more than one axis")]
    DegenerateMotion { ratio: f64 },

    #[error("unobservable translation: stacked system conditioning {ratio:e}; add rotation and translation motion")]
    UnobservableTranslation { ratio: f64 },

    #[error("scale-sign error: estimated monocular scale {scale} is not positive; check trajectory pairing and time sync")]
    ScaleSign { scale: f64 },

    #[error("low parallax: triangulation angle {angle_deg:.3} deg below threshold")]
    LowParallax { angle_deg: f64 },

    #[error("cheirality: triangulated point is behind the observing cameras")]
    Cheirality,

    #[error("no valid residuals to build normal equations")]
    NoConstraints,

    #[error("unobservable core parameters; null direction (rx, ry, rz, tx, ty, tz, tau) = {direction:?}")]
    UnobservableCore { direction: [f64; 7] },

    #[error("refinement did not converge (best cost {})", best.cost)]
    NonConvergence { best: BestSoFar },

    #[error("{excluded} of {total} observations fall outside the LiDAR trajectory span after the time shift")]
    TooManyExcluded { excluded: usize, total: usize },

    #[error("scenario infeasible: {0}")]
    ScenarioInfeasible(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: trajectory needs at least 2 records, found {found}")]
    TooShort { path: PathBuf, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// True for file-system and file-format failures (CLI exit status 1).
    pub fn is_io(&self) -> bool {
        matches!(
            self.root(),
            Error::Io { .. } | Error::Format { .. } | Error::TooShort { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
