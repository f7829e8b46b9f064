//! Finite-difference checks of the predictor-bank losses on a toy model.

use super::{attention, central_diff, kl, linear, mse, rel_err, rope, M64};
use echokv::echo::{BankGeometry, EchoConfig, PredictorBank};
use echokv::kernel::{AttentionGeometry, KL_EPS};
use echokv::model::{LayerKV, Model, ModelConfig};
use echokv::trainer::{loss_gradients, Sample, Stage2Loss};
use echokv::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

pub fn to64(m: &Matrix) -> M64 {
    M64::from_f32(m.rows(), m.cols(), m.as_slice())
}

pub fn grad64(m: &Matrix) -> Vec<f64> {
    m.as_slice().iter().map(|&x| x as f64).collect()
}

/// Two-layer model with one KV head of width `d_head`, the second layer
/// compressed, and a hand-built sample of `l` tokens with random contents.
pub struct Toy {
    pub model: Model,
    pub bank: PredictorBank,
    pub sample: Sample,
    pub echo: EchoConfig,
}

pub fn toy(l: usize, d_head: usize, n_q: usize, local_dim: usize, seed: u64) -> Toy {
    let geometry = AttentionGeometry::new(n_q, 1, d_head).unwrap();
    let cfg = ModelConfig { n_layers: 2, geometry, d_model: n_q * d_head, d_ff: 8, ..Default::default() };
    let model = Model::init(cfg).unwrap();
    let mut echo = EchoConfig::new(2, local_dim, d_head);
    echo.sink_tokens = 1;
    echo.window = 1;
    let bank_geom = BankGeometry::for_model(&cfg, &echo).unwrap();
    let mut bank = PredictorBank::random(bank_geom, echo, seed).unwrap().with_retention(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Order-one weights so the losses are far from flat.
    for p in bank.predictors_mut() {
        p.w_key = Matrix::randn(p.w_key.rows(), p.w_key.cols(), 1.0, &mut rng);
        p.w_value = Matrix::randn(p.w_value.rows(), p.w_value.cols(), 1.0, &mut rng);
    }
    let kv: Vec<LayerKV> = (0..2)
        .map(|layer| LayerKV {
            layer,
            k: Matrix::randn(l, d_head, 1.0, &mut rng),
            v: Matrix::randn(l, d_head, 1.0, &mut rng),
        })
        .collect();
    let q = Matrix::randn(l, n_q * d_head, 1.0, &mut rng);
    let target = Matrix::randn(l, n_q * d_head, 0.5, &mut rng);
    let sample = Sample {
        tokens: vec![0; l],
        kv,
        q: vec![None, Some(q)],
        attn_out: vec![None, Some(target)],
    };
    Toy { model, bank, sample, echo }
}

/// Features `[leader row ; own local slice]` of the evicted rows.
fn features(leader: &M64, own: &M64, rows: std::ops::Range<usize>, local_dim: usize) -> M64 {
    let width = leader.cols + local_dim;
    let mut f = M64::zeros(rows.len(), width);
    for (i, r) in rows.enumerate() {
        for c in 0..leader.cols {
            *f.at_mut(i, c) = leader.at(r, c);
        }
        for c in 0..local_dim {
            *f.at_mut(i, leader.cols + c) = own.at(r, c);
        }
    }
    f
}

fn splice(full: &M64, rows: std::ops::Range<usize>, local_dim: usize, pred: &M64) -> M64 {
    let mut out = full.clone();
    for (i, r) in rows.enumerate() {
        for c in local_dim..full.cols {
            *out.at_mut(r, c) = pred.at(i, c - local_dim);
        }
    }
    out
}

fn dropped(full: &M64, rows: std::ops::Range<usize>, local_dim: usize) -> M64 {
    let mut out = M64::zeros(rows.len(), full.cols - local_dim);
    for (i, r) in rows.enumerate() {
        for c in local_dim..full.cols {
            *out.at_mut(i, c - local_dim) = full.at(r, c);
        }
    }
    out
}

pub struct Oracle {
    leader_k: M64,
    leader_v: M64,
    k: M64,
    v: M64,
    q: M64,
    target: M64,
    rows: std::ops::Range<usize>,
    local_dim: usize,
    n_q: usize,
    d: usize,
    base: f64,
}

impl Oracle {
    fn new(t: &Toy) -> Self {
        let l = t.sample.tokens.len();
        Oracle {
            leader_k: to64(&t.sample.kv[0].k),
            leader_v: to64(&t.sample.kv[0].v),
            k: to64(&t.sample.kv[1].k),
            v: to64(&t.sample.kv[1].v),
            q: to64(t.sample.q[1].as_ref().unwrap()),
            target: to64(t.sample.attn_out[1].as_ref().unwrap()),
            rows: 1..l - 1,
            local_dim: t.echo.local_dim,
            n_q: t.model.config().geometry.n_q_heads,
            d: t.model.config().geometry.d_head,
            base: t.model.config().rope_base,
        }
    }

    fn predictions(&self, wk: &M64, wv: &M64) -> (M64, M64) {
        let fk = features(&self.leader_k, &self.k, self.rows.clone(), self.local_dim);
        let fv = features(&self.leader_v, &self.v, self.rows.clone(), self.local_dim);
        (linear(&fk, wk), linear(&fv, wv))
    }

    /// Mean of the key and value reconstruction errors.
    pub fn reconstruction(&self, wk: &M64, wv: &M64) -> f64 {
        let (pk, pv) = self.predictions(wk, wv);
        let tk = dropped(&self.k, self.rows.clone(), self.local_dim);
        let tv = dropped(&self.v, self.rows.clone(), self.local_dim);
        (mse(&pk, &tk) + mse(&pv, &tv)) / 2.0
    }

    fn recon_kv(&self, wk: &M64, wv: &M64) -> (M64, M64) {
        let (pk, pv) = self.predictions(wk, wv);
        (
            splice(&self.k, self.rows.clone(), self.local_dim, &pk),
            splice(&self.v, self.rows.clone(), self.local_dim, &pv),
        )
    }

    pub fn output_mse(&self, wk: &M64, wv: &M64) -> f64 {
        let (k, v) = self.recon_kv(wk, wv);
        let o = attention(&self.q, &rope(&k, self.d, self.base), &v, self.n_q, 1, self.d);
        mse(&o, &self.target)
    }

    pub fn kl(&self, wk: &M64, wv: &M64) -> f64 {
        let (k, _) = self.recon_kv(wk, wv);
        let kt = rope(&self.k, self.d, self.base);
        let kr = rope(&k, self.d, self.base);
        kl(&self.q, &kt, &kr, self.n_q, 1, self.d, KL_EPS as f64)
    }
}

/// Relative errors of the analytic stage loss and gradients against the
/// oracle: `(loss, key map, value map)`. The value-map error is `None` when
/// the oracle gradient vanishes identically and the analytic one is exactly
/// zero too.
pub fn gradient_errors(
    t: &Toy,
    objective: Option<Stage2Loss>,
    oracle_loss: impl Fn(&Oracle, &M64, &M64) -> f64,
) -> (f64, f64, Option<f64>) {
    let (loss, grads) = loss_gradients(&t.model, &t.bank, &t.sample, objective).unwrap();
    assert_eq!(grads.len(), 1);
    let (layer, gk, gv) = &grads[0];
    assert_eq!(*layer, 1);
    let oracle = Oracle::new(t);
    let p = t.bank.predictor(1).unwrap();
    let (wk, wv) = (to64(&p.w_key), to64(&p.w_value));
    let want = oracle_loss(&oracle, &wk, &wv);
    let loss_err = (loss - want).abs() / want.abs().max(1e-3);
    let fd_k = central_diff(&wk.data, H, |x| oracle_loss(&oracle, &M64 { data: x.to_vec(), ..wk.clone() }, &wv));
    let fd_v = central_diff(&wv.data, H, |x| oracle_loss(&oracle, &wk, &M64 { data: x.to_vec(), ..wv.clone() }));
    let ek = rel_err(&grad64(gk), &fd_k);
    let ev = if fd_v.iter().any(|x| x.abs() > 0.0) {
        Some(rel_err(&grad64(gv), &fd_v))
    } else if gv.as_slice().iter().all(|&x| x == 0.0) {
        None
    } else {
        Some(f64::INFINITY)
    };
    (loss_err, ek, ev)
}
