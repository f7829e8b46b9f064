//! Linear predictors for the dropped heads, plus the reference
//! reconstructors used as test doubles and baselines.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::echo::config::{partition_layers, EchoConfig, GroupLayout};
use crate::error::{ensure, Error, Result};
use crate::model::{LayerKV, ModelConfig};
use crate::tensor::{matmul_t, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvKind {
    Key,
    Value,
}

/// Which parts of the predictor input are populated; the others are zeroed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    GlobalOnly,
    LocalOnly,
    #[default]
    Combined,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_only" => Ok(Self::GlobalOnly),
            "local_only" => Ok(Self::LocalOnly),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Predicts the dropped channels of a compressed layer from assembled
/// features. `positions` gives the absolute token index of each feature row.
pub trait Reconstructor: Send + Sync {
    fn predict(&self, layer: usize, kind: KvKind, features: &Matrix, positions: Range<usize>) -> Result<Matrix>;

    fn feature_mode(&self) -> FeatureMode {
        FeatureMode::Combined
    }
}

/// Bias-free maps `[leader ; local] → dropped` for one compressed layer,
/// stored `[output × input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub layer: usize,
    pub w_key: Matrix,
    pub w_value: Matrix,
}

impl Predictor {
    pub fn weights(&self, kind: KvKind) -> &Matrix {
        match kind {
            KvKind::Key => &self.w_key,
            KvKind::Value => &self.w_value,
        }
    }

    pub fn weights_mut(&mut self, kind: KvKind) -> &mut Matrix {
        match kind {
            KvKind::Key => &mut self.w_key,
            KvKind::Value => &mut self.w_value,
        }
    }

    /// `features × Wᵀ`, one output row per feature row.
    pub fn predict_dropped(&self, features: &Matrix, kind: KvKind) -> Result<Matrix> {
        let w = self.weights(kind);
        ensure!(
            features.cols() == w.cols(),
            Config,
            "layer {} predictor expects {} input channels, got {}",
            self.layer,
            w.cols(),
            features.cols()
        );
        matmul_t(features, w)
    }
}

/// Fields that must agree between a bank and the model/cache it serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankGeometry {
    pub n_layers: usize,
    pub group_size: usize,
    pub local_dim: usize,
    pub d_kv: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl BankGeometry {
    pub fn for_model(model: &ModelConfig, echo: &EchoConfig) -> Result<Self> {
        ensure!(
            echo.d_kv == model.d_kv(),
            Config,
            "echo KV width {} does not match model KV width {}",
            echo.d_kv,
            model.d_kv()
        );
        echo.validate_for(model.n_layers)?;
        Ok(Self {
            n_layers: model.n_layers,
            group_size: echo.group_size,
            local_dim: echo.local_dim,
            d_kv: echo.d_kv,
            n_kv_heads: model.geometry.n_kv_heads,
            d_head: model.geometry.d_head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_kv_heads * self.d_head == self.d_kv,
            Config,
            "{} heads of width {} do not make a KV width of {}",
            self.n_kv_heads,
            self.d_head,
            self.d_kv
        );
        EchoConfig::new(self.group_size, self.local_dim, self.d_kv).validate_for(self.n_layers)
    }
}

/// One predictor per compressed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorBank {
    geometry: BankGeometry,
    echo: EchoConfig,
    predictors: BTreeMap<usize, Predictor>,
    features: FeatureMode,
}

impl PredictorBank {
    fn build(geometry: BankGeometry, echo: EchoConfig, mut init: impl FnMut(usize, usize) -> Matrix) -> Result<Self> {
        geometry.validate()?;
        let layout = partition_layers(geometry.n_layers, geometry.group_size)?;
        let (out, inp) = (echo.output_dim(), echo.input_dim());
        let predictors = layout
            .compressed()
            .into_iter()
            .map(|layer| (layer, Predictor { layer, w_key: init(out, inp), w_value: init(out, inp) }))
            .collect();
        Ok(Self { geometry, echo, predictors, features: FeatureMode::Combined })
    }

    fn check_echo(geometry: &BankGeometry, echo: &EchoConfig) -> Result<()> {
        ensure!(
            echo.group_size == geometry.group_size && echo.local_dim == geometry.local_dim && echo.d_kv == geometry.d_kv,
            Config,
            "echo config {echo:?} disagrees with bank geometry {geometry:?}"
        );
        Ok(())
    }

    /// Uniform `±1/√input` initialisation, drawn layer by layer (key then value).
    pub fn random(geometry: BankGeometry, echo: EchoConfig, seed: u64) -> Result<Self> {
        Self::check_echo(&geometry, &echo)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (echo.input_dim() as f32).sqrt();
        Self::build(geometry, echo, |r, c| Matrix::uniform(r, c, bound, &mut rng))
    }

    pub fn zeros(geometry: BankGeometry, echo: EchoConfig) -> Result<Self> {
        Self::check_echo(&geometry, &echo)?;
        Self::build(geometry, echo, Matrix::zeros)
    }

    /// Assembles a bank from explicit predictors (one per compressed layer).
    pub fn from_predictors(geometry: BankGeometry, echo: EchoConfig, predictors: Vec<Predictor>) -> Result<Self> {
        Self::check_echo(&geometry, &echo)?;
        let mut bank = Self::zeros(geometry, echo)?;
        ensure!(
            predictors.len() == bank.predictors.len(),
            Config,
            "expected {} predictors, got {}",
            bank.predictors.len(),
            predictors.len()
        );
        for p in predictors {
            let slot = bank
                .predictors
                .get_mut(&p.layer)
                .ok_or_else(|| Error::Config(format!("layer {} is not a compressed layer", p.layer)))?;
            ensure!(
                p.w_key.shape() == slot.w_key.shape() && p.w_value.shape() == slot.w_value.shape(),
                Config,
                "predictor for layer {} has shapes {:?}/{:?}, expected {:?}",
                p.layer,
                p.w_key.shape(),
                p.w_value.shape(),
                slot.w_key.shape()
            );
            *slot = p;
        }
        Ok(bank)
    }

    pub fn geometry(&self) -> &BankGeometry {
        &self.geometry
    }

    pub fn echo_config(&self) -> &EchoConfig {
        &self.echo
    }

    /// Replaces sink/window sizes (they do not affect predictor shapes).
    pub fn with_retention(mut self, sink_tokens: usize, window: usize) -> Self {
        self.echo.sink_tokens = sink_tokens;
        self.echo.window = window;
        self
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout { n_layers: self.geometry.n_layers, group_size: self.geometry.group_size }
    }

    pub fn with_feature_mode(mut self, mode: FeatureMode) -> Self {
        self.features = mode;
        self
    }

    pub fn predictor(&self, layer: usize) -> Option<&Predictor> {
        self.predictors.get(&layer)
    }

    pub fn predictors(&self) -> impl Iterator<Item = &Predictor> {
        self.predictors.values()
    }

    pub fn predictors_mut(&mut self) -> impl Iterator<Item = &mut Predictor> {
        self.predictors.values_mut()
    }

    pub fn len(&self) -> usize {
        self.predictors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.predictors.values().map(|p| p.w_key.len() + p.w_value.len()).sum()
    }

    /// Hash over every weight in ascending layer order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.predictors.values() {
            h.update(p.w_key.checksum());
            h.update(p.w_value.checksum());
        }
        hex::encode(h.finalize())
    }

    pub fn ensure_matches(&self, model: &ModelConfig) -> Result<()> {
        let want = BankGeometry::for_model(model, &self.echo)?;
        ensure!(
            want == self.geometry,
            Config,
            "bank geometry {:?} does not match model geometry {want:?}",
            self.geometry
        );
        Ok(())
    }
}

impl Reconstructor for PredictorBank {
    fn predict(&self, layer: usize, kind: KvKind, features: &Matrix, _positions: Range<usize>) -> Result<Matrix> {
        self.predictors
            .get(&layer)
            .ok_or_else(|| Error::Usage(format!("no predictor for layer {layer}")))?
            .predict_dropped(features, kind)
    }

    fn feature_mode(&self) -> FeatureMode {
        self.features
    }
}

/// Test double that returns the true dropped channels.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    truth: Vec<LayerKV>,
    local_dim: usize,
}

impl OraclePredictor {
    pub fn new(truth: Vec<LayerKV>, local_dim: usize) -> Self {
        Self { truth, local_dim }
    }
}

impl Reconstructor for OraclePredictor {
    fn predict(&self, layer: usize, kind: KvKind, features: &Matrix, positions: Range<usize>) -> Result<Matrix> {
        let kv = self
            .truth
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("oracle has no layer {layer}")))?;
        ensure!(features.rows() == positions.len(), Dimension, "{} feature rows for {positions:?}", features.rows());
        ensure!(
            positions.end <= kv.tokens(),
            Usage,
            "oracle knows {} tokens of layer {layer}, asked for {positions:?}",
            kv.tokens()
        );
        let src = match kind {
            KvKind::Key => &kv.k,
            KvKind::Value => &kv.v,
        };
        Ok(src.slice_rows(positions).slice_cols(self.local_dim..src.cols()))
    }
}

/// Baseline that predicts each layer's mean dropped row, ignoring features.
#[derive(Debug, Clone)]
pub struct MeanPredictor {
    means: BTreeMap<(usize, KvKind), Vec<f32>>,
}

impl MeanPredictor {
    /// Averages dropped channels over the evicted (middle) rows of every
    /// compressed layer in `traces`.
    pub fn fit<'a>(traces: impl IntoIterator<Item = &'a [LayerKV]>, echo: &EchoConfig, n_layers: usize) -> Result<Self> {
        let layout = partition_layers(n_layers, echo.group_size)?;
        let width = echo.output_dim();
        let mut sums: BTreeMap<(usize, KvKind), Vec<f64>> = BTreeMap::new();
        let mut count = 0usize;
        for layers in traces {
            ensure!(layers.len() == n_layers, Dimension, "trace with {} layers", layers.len());
            let tokens = layers[0].tokens();
            let middle = crate::echo::store::middle_rows(echo, tokens);
            count += middle.len();
            for &l in &layout.compressed() {
                for (kind, m) in [(KvKind::Key, &layers[l].k), (KvKind::Value, &layers[l].v)] {
                    let acc = sums.entry((l, kind)).or_insert_with(|| vec![0.0; width]);
                    for r in middle.clone() {
                        for (a, &x) in acc.iter_mut().zip(&m.row(r)[echo.local_dim..]) {
                            *a += x as f64;
                        }
                    }
                }
            }
        }
        ensure!(count > 0, Input, "no evicted rows to average over");
        let means = sums
            .into_iter()
            .map(|(key, acc)| (key, acc.into_iter().map(|s| (s / count as f64) as f32).collect()))
            .collect();
        Ok(Self { means })
    }
}

impl Reconstructor for MeanPredictor {
    fn predict(&self, layer: usize, kind: KvKind, features: &Matrix, _positions: Range<usize>) -> Result<Matrix> {
        let mean = self
            .means
            .get(&(layer, kind))
            .ok_or_else(|| Error::Usage(format!("no mean for layer {layer}")))?;
        let mut out = Matrix::zeros(features.rows(), mean.len());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(mean);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(group: usize, local: usize) -> (BankGeometry, EchoConfig) {
        let g = BankGeometry { n_layers: 8, group_size: group, local_dim: local, d_kv: 64, n_kv_heads: 4, d_head: 16 };
        (g, EchoConfig::new(group, local, 64))
    }

    #[test]
    fn one_predictor_per_compressed_layer() {
        let (g, e) = geometry(4, 16);
        let bank = PredictorBank::random(g, e, 0).unwrap();
        assert_eq!(bank.len(), 6);
        assert_eq!(bank.param_count(), 6 * 2 * 80 * 48);
        assert_eq!(bank.param_count(), crate::echo::predictor_param_count(8, &e));
        let p = bank.predictor(1).unwrap();
        assert_eq!(p.w_key.shape(), (48, 80));
        assert!(bank.predictor(4).is_none());
    }

    #[test]
    fn zero_weights_predict_zero() {
        let (g, e) = geometry(2, 16);
        let bank = PredictorBank::zeros(g, e).unwrap();
        let f = Matrix::from_vec(3, 80, (0..240).map(|i| i as f32).collect()).unwrap();
        let out = bank.predict(1, KvKind::Value, &f, 0..3).unwrap();
        assert_eq!(out.shape(), (3, 48));
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn input_width_mismatch_is_config_error() {
        let (g, e) = geometry(2, 16);
        let bank = PredictorBank::zeros(g, e).unwrap();
        let f = Matrix::zeros(2, 64);
        assert!(matches!(bank.predict(1, KvKind::Key, &f, 0..2), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_bank() {
        let (g, e) = geometry(2, 16);
        let a = PredictorBank::random(g, e, 5).unwrap();
        let b = PredictorBank::random(g, e, 5).unwrap();
        let c = PredictorBank::random(g, e, 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        let (mut g, e) = geometry(2, 16);
        g.n_kv_heads = 3;
        assert!(PredictorBank::zeros(g, e).is_err());
        let (g, _) = geometry(2, 16);
        assert!(PredictorBank::zeros(g, EchoConfig::new(2, 32, 64)).is_err());
    }
}
