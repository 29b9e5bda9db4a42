//! Dataset loading: manifests, TSV tables, gene selection, expression
//! normalization, PCA compression, and bag assembly.

pub mod bags;
pub mod hvg;
pub mod manifest;
pub mod normalize;
pub mod pca;
pub mod stub;
pub mod tsv;

pub use bags::{assign_cells_to_spots, grid_bulk_bags, Bag, BagSet};
pub use manifest::{load_manifest, DatasetDescriptor, SampleEntry, TaskKind};
pub use normalize::{denormalize_expression, normalize_expression};
pub use pca::{apply_pca, fit_pca, PcaModel};
pub use tsv::{CellTable, ExpressionFrame, Space};
