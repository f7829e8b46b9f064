//! Layer-grouped KV eviction with linear reconstruction of dropped heads.
//!
//! Layers are split into groups of `S`. The first layer of each group keeps
//! its whole cache; every other layer keeps only its first `local_dim`
//! channels (plus full sink and window rows). Reads of a compressed layer
//! predict the missing channels from `[leader row ; local slice]`.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod predictor;
pub mod store;

pub use cache::{CacheHandle, CacheMode, FullCache};
pub use config::{partition_layers, predictor_param_count, EchoConfig, GroupLayout};
pub use predictor::{
    BankGeometry, FeatureMode, KvKind, MeanPredictor, OraclePredictor, Predictor, PredictorBank, Reconstructor,
};
pub use store::{
    evict, full_cache_bytes, middle_rows, reconstruct_layer, ByteReport, EchoForward, EchoStore, LayerBytes,
    LayerRole, StoredLayer,
};
