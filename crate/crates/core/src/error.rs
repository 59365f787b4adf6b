use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}, row {row}: {msg}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("coordinate reference system: {0}")]
    Crs(String),

    #[error("{path}: no valid polygons")]
    NoValidPolygons { path: PathBuf },

    #[error("row {row}: unknown class `{token}` for field `{field}`")]
    UnknownLabel {
        row: usize,
        field: &'static str,
        token: String,
    },

    #[error("duplicate building id `{0}`")]
    DuplicateBuilding(String),

    #[error("panorama image not found: {0}")]
    MissingImage(PathBuf),

    #[error("raster: {0}")]
    Raster(String),

    #[error("building `{0}` lies outside the raster extent")]
    OutOfExtent(String),

    #[error("window over building `{0}` contains only nodata")]
    AllNodata(String),

    #[error("angular window has zero width")]
    DegenerateWindow,

    #[error("capture `{capture}` lies inside building `{building}`; bearing span undefined")]
    CaptureInsideBuilding { capture: String, building: String },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("statistics: {0}")]
    Stats(String),

    #[error("no records with valid thermal data")]
    NoValidThermalData,

    #[error("need at least {needed} spatial blocks, found {found}")]
    TooFewBlocks { needed: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
