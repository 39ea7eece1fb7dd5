use alloc::string::String;
use core::fmt;

use crate::volume::Shape3;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    EmptyExtent,
    PayloadMismatch { expected: usize, found: usize },
    ShapeMismatch { expected: Shape3, found: Shape3 },
    NonFinite,
    LabelOutOfRange { value: u8, num_classes: usize },
    InvalidNumClasses(usize),
    ClassMismatch { expected: usize, found: usize },
    TargetLarger { source: Shape3, target: Shape3 },
    TargetSmaller { source: Shape3, target: Shape3 },
    ProbabilityOutOfRange(f64),
    ProbabilityNotNormalized(f64),
    ChannelMismatch { expected: usize, found: usize },
    GridLargerThanVolume { grid: Shape3, volume: Shape3 },
    NoPrototype,
    EmptyPool,
    EmptyCertainSet,
    QueryIsCertain(String),
    UnknownId(String),
    DuplicateId(String),
    NoNeighbors,
    InvalidQuantile(f64),
    InvalidParameter(&'static str),
    EmptyBatch,
    VoxelOutOfRange { index: [usize; 3], shape: Shape3 },
    InfeasibleGeometry(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyExtent => write!(f, "shape has an empty extent"),
            Error::PayloadMismatch { expected, found } => write!(
                f,
                "shape/payload mismatch: shape needs {expected} values, payload has {found}"
            ),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::NonFinite => write!(f, "non-finite value in data"),
            Error::LabelOutOfRange { value, num_classes } => write!(
                f,
                "label {value} out of range for {num_classes} classes"
            ),
            Error::InvalidNumClasses(n) => write!(f, "invalid class count {n} (need 2..=256)"),
            Error::ClassMismatch { expected, found } => {
                write!(f, "class count mismatch: expected {expected}, found {found}")
            }
            Error::TargetLarger { source, target } => write!(
                f,
                "target {target} is larger than source {source} on some axis"
            ),
            Error::TargetSmaller { source, target } => write!(
                f,
                "target {target} is smaller than source {source} on some axis"
            ),
            Error::ProbabilityOutOfRange(p) => write!(f, "probability {p} outside [0, 1]"),
            Error::ProbabilityNotNormalized(s) => {
                write!(f, "class probabilities sum to {s}, not 1")
            }
            Error::ChannelMismatch { expected, found } => write!(
                f,
                "channel mismatch: expected {expected} channels, found {found}"
            ),
            Error::GridLargerThanVolume { grid, volume } => {
                write!(f, "feature grid {grid} is larger than volume {volume}")
            }
            Error::NoPrototype => write!(f, "no class has a usable prototype"),
            Error::EmptyPool => write!(f, "unlabeled pool is empty"),
            Error::EmptyCertainSet => write!(f, "certain set is empty"),
            Error::QueryIsCertain(id) => write!(f, "query {id} is in the certain set"),
            Error::UnknownId(id) => write!(f, "unknown volume id {id}"),
            Error::DuplicateId(id) => write!(f, "duplicate volume id {id}"),
            Error::NoNeighbors => write!(f, "neighbor set is empty"),
            Error::InvalidQuantile(q) => write!(f, "quantile {q} outside (0, 1]"),
            Error::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            Error::EmptyBatch => write!(f, "batch partition is empty"),
            Error::VoxelOutOfRange { index, shape } => write!(
                f,
                "voxel ({}, {}, {}) outside volume {shape}",
                index[0], index[1], index[2]
            ),
            Error::InfeasibleGeometry(what) => write!(f, "infeasible phantom geometry: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
