//! Noise-prediction network: a dense SiLU MLP on `[x, time_emb + cond_emb]`
//! with a learned token table, and hand-written reverse-mode gradients.
//!
//! Prompts are split into whitespace tokens; the pooled condition is the
//! mean of the token embeddings passed through a linear projection. Row 0
//! of the embedding table is the null (unconditional) token; it starts at
//! zero and training keeps it there, so the unconditional pathway runs
//! through the projection bias alone.

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use train::{train, Adam, TrainConfig, TrainMode, TrainReport};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScoreField};
use crate::error::{Error, Result};
use crate::world::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Width of the time and condition embeddings.
    pub embed_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            time_features: 32,
            embed_dim: 32,
            hidden: vec![128, 128],
        }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return Err(Error::Config("time_features must be a positive even number".into()));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    fn tensor_layout(&self, n_tokens: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("embeddings".to_string(), vec![n_tokens + 1, d]),
            ("time.w".to_string(), vec![d, self.time_features]),
            ("time.b".to_string(), vec![d]),
            ("cond.w".to_string(), vec![d, d]),
            ("cond.b".to_string(), vec![d]),
        ];
        let mut fan_in = 2 + d;
        for (i, &w) in self.hidden.iter().chain(std::iter::once(&2)).enumerate() {
            out.push((format!("dense{i}.w"), vec![w, fan_in]));
            out.push((format!("dense{i}.b"), vec![w]));
            fan_in = w;
        }
        out
    }
}

/// A named, dense, row-major parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name,
            shape,
            data: vec![0.0; len],
        }
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("layout checked on construction")
    }

    fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("layout checked on construction")
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => unreachable!("parameters are at most 2-D"),
        }
    }
}

const EMB: usize = 0;
const TIME_W: usize = 1;
const TIME_B: usize = 2;
const COND_W: usize = 3;
const COND_B: usize = 4;
const DENSE0: usize = 5;

/// Parameters (or gradients, which share the layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn dense_w(&self, i: usize) -> &Tensor {
        &self.tensors[DENSE0 + 2 * i]
    }

    fn dense_b(&self, i: usize) -> &Tensor {
        &self.tensors[DENSE0 + 2 * i + 1]
    }
}

/// Encoded condition: token ids into the embedding table (never empty).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CondTokens(Vec<usize>);

impl CondTokens {
    pub fn null() -> Self {
        CondTokens(vec![0])
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: Vec2,
    pub t: usize,
    pub eps: Vec2,
    pub cond: CondTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    config: NetConfig,
    tokens: Vec<String>,
    params: ParamSet,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Activations kept for the backward pass.
struct ForwardCache {
    time_feats: Array2<f64>,
    pooled: Array2<f64>,
    /// Input of each dense layer (`[x, h]` first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each dense layer; the last one is the output.
    pre: Vec<Array2<f64>>,
}

impl ScoreNet {
    /// Fresh network: uniform fan-in weights, zero biases, zero output layer,
    /// standard-normal token embeddings (zero null token) and a zero
    /// condition projection.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, tokens: Vec<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tokens = tokens;
        tokens.sort();
        tokens.dedup();
        let layout = config.tensor_layout(tokens.len());
        let n_dense = config.hidden.len() + 1;
        let mut tensors = Vec::with_capacity(layout.len());
        for (idx, (name, shape)) in layout.into_iter().enumerate() {
            let mut t = Tensor::zeros(name, shape);
            let is_weight = t.shape.len() == 2;
            let last_dense_w = idx == DENSE0 + 2 * (n_dense - 1);
            if idx == EMB {
                let d = t.shape[1];
                t.data[d..].iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            } else if is_weight && idx != COND_W && !last_dense_w {
                let bound = 1.0 / (t.shape[1] as f64).sqrt();
                t.data
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            }
            tensors.push(t);
        }
        Ok(ScoreNet {
            config,
            tokens,
            params: ParamSet { tensors },
        })
    }

    pub fn from_parts(config: NetConfig, tokens: Vec<String>, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut sorted = tokens.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != tokens {
            return Err(Error::Checkpoint("token list must be sorted and unique".into()));
        }
        let layout = config.tensor_layout(tokens.len());
        if layout.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor `{}` does not match layout", t.name)));
            }
        }
        Ok(ScoreNet {
            config,
            tokens,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Maps a prompt to token ids; `None` is the null token.
    pub fn encode(&self, condition: Option<&str>) -> Result<CondTokens> {
        let Some(label) = condition else {
            return Ok(CondTokens::null());
        };
        let ids = label
            .split_whitespace()
            .map(|w| {
                self.tokens
                    .binary_search_by(|t| t.as_str().cmp(w))
                    .map(|i| i + 1)
                    .map_err(|_| Error::UnknownConcept(label.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::UnknownConcept(label.to_string()));
        }
        Ok(CondTokens(ids))
    }

    fn time_features(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        let half = self.config.time_features / 2;
        let tf = t as f64;
        let freqs = (0..half).map(move |k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        freqs
            .clone()
            .map(move |f| (tf * f).sin())
            .chain(freqs.map(move |f| (tf * f).cos()))
    }

    fn pool_into(&self, cond: &CondTokens, out: &mut [f64]) {
        let emb = self.params.tensors[EMB].view2();
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = 1.0 / cond.0.len() as f64;
        for &id in &cond.0 {
            for (o, e) in out.iter_mut().zip(emb.row(id)) {
                *o += k * e;
            }
        }
    }

    /// Combined time + condition embedding `h` for one (t, condition) pair.
    fn embedding(&self, t: usize, cond: &CondTokens) -> Vec<f64> {
        let d = self.config.embed_dim;
        let tf: Vec<f64> = self.time_features(t).collect();
        let mut pooled = vec![0.0; d];
        self.pool_into(cond, &mut pooled);
        let p = &self.params.tensors;
        let tw = p[TIME_W].view2();
        let cw = p[COND_W].view2();
        (0..d)
            .map(|j| {
                let te: f64 = tw.row(j).iter().zip(&tf).map(|(a, b)| a * b).sum::<f64>()
                    + p[TIME_B].data[j];
                let ce: f64 = cw.row(j).iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
                    + p[COND_B].data[j];
                te + ce
            })
            .collect()
    }

    /// ε̂ for a batch sharing one step and one condition.
    pub fn predict_eps_batch(&self, xs: &[Vec2], t: usize, condition: Option<&str>) -> Result<Vec<Vec2>> {
        let cond = self.encode(condition)?;
        Ok(self.predict_eps_encoded(xs, t, &cond))
    }

    pub fn predict_eps(&self, x: Vec2, t: usize, condition: Option<&str>) -> Result<Vec2> {
        Ok(self.predict_eps_batch(&[x], t, condition)?[0])
    }

    fn predict_eps_encoded(&self, xs: &[Vec2], t: usize, cond: &CondTokens) -> Vec<Vec2> {
        if xs.is_empty() {
            return Vec::new();
        }
        let h = self.embedding(t, cond);
        let n_dense = self.config.hidden.len() + 1;
        let b = xs.len();
        // First layer: the embedding part of the input is shared by all rows.
        let w0 = self.params.dense_w(0).view2();
        let b0 = &self.params.dense_b(0).data;
        let width0 = w0.nrows();
        let shared: Vec<f64> = (0..width0)
            .map(|j| {
                w0.row(j).slice(s![2..]).iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b0[j]
            })
            .collect();
        let mut act = Array2::<f64>::zeros((b, width0));
        for (i, x) in xs.iter().enumerate() {
            let mut row = act.row_mut(i);
            for j in 0..width0 {
                row[j] = w0[[j, 0]] * x.x + w0[[j, 1]] * x.y + shared[j];
            }
        }
        if n_dense > 1 {
            act.mapv_inplace(silu);
        }
        for l in 1..n_dense {
            let w = self.params.dense_w(l).view2();
            let bias = &self.params.dense_b(l).data;
            let mut next = Array2::<f64>::zeros((b, w.nrows()));
            next.axis_iter_mut(Axis(0)).for_each(|mut r| {
                r.iter_mut().zip(bias).for_each(|(v, bb)| *v = *bb);
            });
            general_mat_mul(1.0, &act, &w.t(), 1.0, &mut next);
            if l + 1 < n_dense {
                next.mapv_inplace(silu);
            }
            act = next;
        }
        act.rows().into_iter().map(|r| Vec2::new(r[0], r[1])).collect()
    }

    fn forward_train(&self, batch: &[TrainSample], schedule: &NoiseSchedule) -> ForwardCache {
        let b = batch.len();
        let d = self.config.embed_dim;
        let f = self.config.time_features;
        let p = &self.params.tensors;

        let mut time_feats = Array2::<f64>::zeros((b, f));
        let mut pooled = Array2::<f64>::zeros((b, d));
        let mut z0 = Array2::<f64>::zeros((b, 2 + d));
        for (i, smp) in batch.iter().enumerate() {
            for (dst, v) in time_feats.row_mut(i).iter_mut().zip(self.time_features(smp.t)) {
                *dst = v;
            }
            self.pool_into(&smp.cond, pooled.row_mut(i).as_slice_mut().expect("standard layout"));
            let ab = schedule.alpha_bars()[smp.t];
            let xt = crate::diffusion::forward_noise_at(smp.x0, ab, smp.eps);
            z0[[i, 0]] = xt.x;
            z0[[i, 1]] = xt.y;
        }
        {
            // h = time_feats·Wtᵀ + bt + pooled·Wcᵀ + bc, written into z0[:, 2..]
            let mut h = z0.slice_mut(s![.., 2..]);
            for mut row in h.axis_iter_mut(Axis(0)) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = p[TIME_B].data[j] + p[COND_B].data[j];
                }
            }
            general_mat_mul(1.0, &time_feats, &p[TIME_W].view2().t(), 1.0, &mut h);
            general_mat_mul(1.0, &pooled, &p[COND_W].view2().t(), 1.0, &mut h);
        }

        let n_dense = self.config.hidden.len() + 1;
        let mut inputs = Vec::with_capacity(n_dense);
        let mut pre = Vec::with_capacity(n_dense);
        let mut cur = z0;
        for l in 0..n_dense {
            let w = self.params.dense_w(l).view2();
            let bias = &self.params.dense_b(l).data;
            let mut a = Array2::<f64>::zeros((b, w.nrows()));
            for mut r in a.axis_iter_mut(Axis(0)) {
                r.iter_mut().zip(bias).for_each(|(v, bb)| *v = *bb);
            }
            general_mat_mul(1.0, &cur, &w.t(), 1.0, &mut a);
            let next = if l + 1 < n_dense { a.mapv(silu) } else { a.clone() };
            inputs.push(cur);
            pre.push(a);
            cur = next;
        }
        ForwardCache {
            time_feats,
            pooled,
            inputs,
            pre,
        }
    }

    /// Mean squared ε-prediction error over the batch.
    pub fn loss(&self, batch: &[TrainSample], schedule: &NoiseSchedule) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyRequest("loss over an empty batch"));
        }
        let cache = self.forward_train(batch, schedule);
        Ok(batch_loss(cache.pre.last().expect("at least one layer"), batch))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[TrainSample],
        schedule: &NoiseSchedule,
    ) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(Error::EmptyRequest("loss over an empty batch"));
        }
        let b = batch.len();
        let cache = self.forward_train(batch, schedule);
        let out = cache.pre.last().expect("at least one layer");
        let loss = batch_loss(out, batch);

        let mut grads = self.params.zeros_like();
        let mut delta = Array2::<f64>::zeros((b, 2));
        let k = 2.0 / b as f64;
        for (i, smp) in batch.iter().enumerate() {
            delta[[i, 0]] = k * (out[[i, 0]] - smp.eps.x);
            delta[[i, 1]] = k * (out[[i, 1]] - smp.eps.y);
        }

        let n_dense = self.config.hidden.len() + 1;
        for l in (0..n_dense).rev() {
            if l + 1 < n_dense {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .for_each(|dv, &a| *dv *= silu_grad(a));
            }
            let input = &cache.inputs[l];
            {
                let gw = &mut grads.tensors[DENSE0 + 2 * l];
                general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw.view2_mut());
            }
            {
                let gb = &mut grads.tensors[DENSE0 + 2 * l + 1];
                for (g, col) in gb.data.iter_mut().zip(delta.columns()) {
                    *g = col.sum();
                }
            }
            let w = self.params.dense_w(l).view2();
            let mut d_in = Array2::<f64>::zeros((b, w.ncols()));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut d_in);
            delta = d_in;
        }

        // delta is now ∂L/∂[x, h]; only the h part carries parameters.
        let dh = delta.slice(s![.., 2..]);
        general_mat_mul(1.0, &dh.t(), &cache.time_feats, 0.0, &mut grads.tensors[TIME_W].view2_mut());
        general_mat_mul(1.0, &dh.t(), &cache.pooled, 0.0, &mut grads.tensors[COND_W].view2_mut());
        for (j, col) in dh.columns().into_iter().enumerate() {
            let s = col.sum();
            grads.tensors[TIME_B].data[j] = s;
            grads.tensors[COND_B].data[j] = s;
        }
        let mut dpooled = Array2::<f64>::zeros((b, self.config.embed_dim));
        general_mat_mul(1.0, &dh, &self.params.tensors[COND_W].view2(), 0.0, &mut dpooled);
        let mut gemb = grads.tensors[EMB].view2_mut();
        for (i, smp) in batch.iter().enumerate() {
            let k = 1.0 / smp.cond.0.len() as f64;
            for &id in &smp.cond.0 {
                let mut row = gemb.row_mut(id);
                row.iter_mut()
                    .zip(dpooled.row(i))
                    .for_each(|(g, d)| *g += k * d);
            }
        }
        Ok((loss, grads))
    }
}

fn batch_loss(out: &Array2<f64>, batch: &[TrainSample]) -> f64 {
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dx = out[[i, 0]] - s.eps.x;
            let dy = out[[i, 1]] - s.eps.y;
            dx * dx + dy * dy
        })
        .sum();
    total / batch.len() as f64
}

/// A trained network viewed as a score field: `s = −ε̂ / √(1 − ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct NetField<'a> {
    pub net: &'a ScoreNet,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> NetField<'a> {
    pub fn new(net: &'a ScoreNet, schedule: &'a NoiseSchedule) -> Self {
        NetField { net, schedule }
    }
}

impl ScoreField for NetField<'_> {
    fn score_batch(&self, xs: &[Vec2], t: usize, condition: Option<&str>) -> Result<Vec<Vec2>> {
        self.schedule.check(t)?;
        let k = -1.0 / (1.0 - self.schedule.alpha_bars()[t]).sqrt();
        Ok(self
            .net
            .predict_eps_batch(xs, t, condition)?
            .into_iter()
            .map(|e| k * e)
            .collect())
    }

    fn supports(&self, condition: &str) -> bool {
        self.net.encode(Some(condition)).is_ok()
    }

    fn describe(&self) -> String {
        "checkpoint".into()
    }
}
