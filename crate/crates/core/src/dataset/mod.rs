//! Event-sample data model, file formats, standardization and toy generation.

mod io;
mod schema;
mod standardize;
mod table;
mod toy;

pub use io::{
    read_events, read_metadata, sidecar_path, write_events, EventFormat, Metadata, BINARY_MAGIC,
};
pub use schema::{FeatureKind, FeatureSchema, FeatureSpec};
pub use standardize::Standardizer;
pub use table::{EventTable, Provenance};
pub use toy::{cholesky, generate_toy, generate_toy_pair, Marginal, PaddingGroup, ToyConfig};
