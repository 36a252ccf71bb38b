//! Record files, batch iteration and synthetic data.

mod blobs;
mod iter;
mod record;

pub use blobs::{blobs, BlobsConfig};
pub use iter::{epoch_order, Affine, Batch, BatchConfig, BatchIterator, Dataset, ExampleSource};
pub use record::{index_path, pack, read_csv, scan, DataError, Example, RecordReader, Scanner, MAGIC, VERSION};
