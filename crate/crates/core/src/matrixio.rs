//! On-disk formats: the `FMAT` matrix container, dataset manifests and the
//! JSON run configuration.

mod config;
mod fmat;
mod manifest;

pub use config::{FugwConfig, PreprocessConfig, RetrievalConfig, RidgeConfig, RunConfig};
pub use fmat::{
    read_array, read_matrix, read_vector, write_array, write_matrix, write_vector, Dtype,
    FeatureMatrix, HEADER_LEN, MAGIC, VERSION,
};
pub use manifest::{
    read_json, write_json, Dataset, DatasetManifest, GeometryFiles, GridShape, RunRecord, Segment,
    Split, SubjectData, SubjectRecord,
};
