//! Synthetic PDE trajectory generation, the portable dataset container, and
//! ingestion of externally exported raw arrays.

pub mod container;
pub mod fft;
pub mod generate;

pub use container::{
    ingest_raw, read_container, read_header, write_container, ContainerError, DatasetContainer,
    DatasetHeader, SCHEMA_VERSION,
};
pub use generate::{gen_advection, gen_burgers, gen_diffusion, generate, simulate_burgers, Family, FourierInit, GenError, GenSpec};
