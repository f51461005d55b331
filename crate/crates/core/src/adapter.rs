//! Control adapter: per-level matching of query-condition patches against
//! support-condition patches, aggregating support-image patches, followed by
//! zero-initialized 1x1 projections added into the backbone taps.

use fsc_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{timestep_embedding, UNet};
use crate::encoders::{encode_condition, encode_image, from_tokens, to_tokens};
use crate::error::{CoreError, Result};
use crate::params::{Binder, Init, ParamKind, ParamSpec, ParamStore, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub heads: usize,
    /// Taps that receive control; `None` means all `L + 1`.
    pub levels: Option<Vec<usize>>,
    /// Upper bound on support pairs encoded at once.
    pub max_support: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { heads: 8, levels: None, max_support: 64 }
    }
}

/// How control features are formed from the query condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Attention over support patches.
    Matching,
    /// Condition-encoder features of the query, projected directly.
    Direct,
}

/// Support pairs encoded once: per active level, keys `g_τ(y)` and values
/// `f(x)` as `[1, N*M, d]` with aligned rows.
#[derive(Clone, Debug)]
pub struct SupportEncoding {
    pub keys: Vec<Option<Var>>,
    pub values: Vec<Option<Var>>,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    cfg: AdapterConfig,
    mode: ControlMode,
    unet: UNet,
    levels: Vec<usize>,
}

impl Adapter {
    pub fn new(cfg: AdapterConfig, mode: ControlMode, unet: UNet) -> Result<Self> {
        let taps = unet.config().levels() + 1;
        let mut levels = cfg.levels.clone().unwrap_or_else(|| (0..taps).collect());
        levels.sort_unstable();
        levels.dedup();
        if let Some(&l) = levels.iter().find(|&&l| l >= taps) {
            return Err(CoreError::config("adapter.levels", format!("level {l} exceeds the {taps} taps")));
        }
        if levels.is_empty() {
            return Err(CoreError::config("adapter.levels", "at least one level is required"));
        }
        if cfg.max_support == 0 {
            return Err(CoreError::config("adapter.max_support", "must be positive"));
        }
        if mode == ControlMode::Matching {
            if cfg.heads == 0 {
                return Err(CoreError::config("adapter.heads", "must be positive"));
            }
            if let Some(&l) = levels.iter().find(|&&l| !unet.config().channels(l).is_multiple_of(cfg.heads)) {
                return Err(CoreError::config(
                    "adapter.heads",
                    format!("{} heads do not divide width {} of level {l}", cfg.heads, unet.config().channels(l)),
                ));
            }
        }
        Ok(Adapter { cfg, mode, unet, levels })
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let dt = self.unet.config().time_embed_dim;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init| {
            specs.push(ParamSpec { name, shape, kind: ParamKind::Weight, init })
        };
        for &l in &self.levels {
            let d = self.unet.config().channels(l);
            if self.mode == ControlMode::Matching {
                let std = (1.0 / d as f64).sqrt();
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("matching.{l}.{w}"), vec![d, d], Init::Normal(std));
                }
                push(format!("matching.{l}.mod.w"), vec![dt, 3 * d], Init::Zeros);
                push(format!("matching.{l}.mod.b"), vec![3 * d], Init::Zeros);
            }
            push(format!("proj.{l}.w"), vec![d, d, 1, 1], Init::Zeros);
            push(format!("proj.{l}.b"), vec![d], Init::Zeros);
        }
        specs
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for spec in self.param_specs() {
            store.insert(spec.name.clone(), spec.materialize(rng))?;
        }
        Ok(())
    }

    /// Encodes support images with `f` and support conditions with `g_τ`.
    pub fn encode_support<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        task_id: &str,
        images: Var,
        conditions: Var,
    ) -> Result<SupportEncoding> {
        let n = g.shape(images).first().copied().unwrap_or(0);
        if n == 0 {
            return Err(CoreError::EmptySupport);
        }
        if g.shape(conditions) != g.shape(images) {
            return Err(CoreError::Shape(format!(
                "support conditions {:?} do not match images {:?}",
                g.shape(conditions),
                g.shape(images)
            )));
        }
        if n > self.cfg.max_support {
            return Err(CoreError::Shape(format!("{n} support pairs exceed the limit of {}", self.cfg.max_support)));
        }
        let taps = self.unet.config().levels() + 1;
        let mut enc = SupportEncoding { keys: vec![None; taps], values: vec![None; taps], pairs: n };
        if self.mode == ControlMode::Direct {
            return Ok(enc);
        }
        let fx = encode_image(g, b, &self.unet, images)?;
        let gy = encode_condition(g, b, &self.unet, conditions, task_id)?;
        for &l in &self.levels {
            enc.keys[l] = Some(flatten_support(g, gy[l])?);
            enc.values[l] = Some(flatten_support(g, fx[l])?);
        }
        Ok(enc)
    }

    /// Matching at one level. `q: [B, M, d]`, `k, v: [1, N*M, d]`, `temb: [B, d_t]`.
    pub fn matching<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        level: usize,
        q: Var,
        k: Var,
        v: Var,
        temb: Var,
    ) -> Result<Var> {
        let (ks, vs) = (g.shape(k).to_vec(), g.shape(v).to_vec());
        if ks.len() != 3 || vs.len() != 3 || ks[1] != vs[1] {
            return Err(CoreError::Shape(format!("keys {ks:?} and values {vs:?} are not row-aligned")));
        }
        let d = self.unet.config().channels(level);
        for s in [g.shape(q).to_vec(), ks, vs] {
            if s.last() != Some(&d) {
                return Err(CoreError::Shape(format!("level {level} expects width {d}, got {s:?}")));
            }
        }
        let scope = Scope::new(format!("matching.{level}."));
        let (wq, wk, wv, wo) = (
            b.weight(g, &scope, "wq")?,
            b.weight(g, &scope, "wk")?,
            b.weight(g, &scope, "wv")?,
            b.weight(g, &scope, "wo")?,
        );
        let (alpha, beta, gamma) = self.modulation(g, b, level, temb)?;
        let qn = g.layer_norm(q)?;
        let kn = g.layer_norm(k)?;
        let vn = g.layer_norm(v)?;
        let scale = g.add_scalar(alpha, T::one());
        let vm = g.mul_rows(vn, scale)?;
        let vm = g.add_rows(vm, beta)?;
        let qh = g.linear(qn, wq, None)?;
        let kh = g.linear(kn, wk, None)?;
        let vh = g.linear(vm, wv, None)?;
        let o = g.attention(qh, kh, vh, self.cfg.heads)?;
        self.residual(g, o, wo, gamma)
    }

    fn modulation<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        level: usize,
        temb: Var,
    ) -> Result<(Var, Var, Var)> {
        let d = self.unet.config().channels(level);
        let scope = Scope::new(format!("matching.{level}."));
        let mw = b.weight(g, &scope, "mod.w")?;
        let mb = b.weight(g, &scope, "mod.b")?;
        let m = g.linear(temb, mw, Some(mb))?;
        Ok((g.narrow(m, 1, 0, d)?, g.narrow(m, 1, d, d)?, g.narrow(m, 1, 2 * d, d)?))
    }

    fn residual<T: Scalar>(&self, g: &mut Graph<T>, o: Var, wo: Var, gamma: Var) -> Result<Var> {
        let r = g.linear(o, wo, None)?;
        let r = g.gelu(r);
        let r = g.mul_rows(r, gamma)?;
        Ok(g.add(o, r)?)
    }

    /// Raw sinusoidal embeddings `[B, d_t]` driving the modulation.
    pub fn time_embedding<T: Scalar>(&self, g: &mut Graph<T>, t: &[usize]) -> Result<Var> {
        let dt = self.unet.config().time_embed_dim;
        let mut data = Vec::with_capacity(t.len() * dt);
        for &ti in t {
            data.extend(timestep_embedding::<T>(ti, dt)?);
        }
        Ok(g.constant(Tensor::new(&[t.len(), dt], data)?))
    }

    /// Matched features `I^l` as tokens `[B, M, d]` for every active level.
    pub fn control_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        task_id: &str,
        query: Var,
        support: &SupportEncoding,
        t: &[usize],
    ) -> Result<Vec<Option<Var>>> {
        let gq = encode_condition(g, b, &self.unet, query, task_id)?;
        let mut out = vec![None; gq.len()];
        let temb = match self.mode {
            ControlMode::Matching => Some(self.time_embedding(g, t)?),
            ControlMode::Direct => None,
        };
        if g.shape(query)[0] != t.len() {
            return Err(CoreError::Shape(format!("{} queries for {} timesteps", g.shape(query)[0], t.len())));
        }
        for &l in &self.levels {
            let q = to_tokens(g, gq[l])?;
            out[l] = Some(match (self.mode, temb) {
                (ControlMode::Matching, Some(temb)) => {
                    let k = support.keys[l].ok_or(CoreError::EmptySupport)?;
                    let v = support.values[l].ok_or(CoreError::EmptySupport)?;
                    self.matching(g, b, l, q, k, v, temb)?
                }
                _ => q,
            });
        }
        Ok(out)
    }

    /// `Z^l(I^l)` reshaped to the tap grid, ready for [`UNet::forward`].
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        features: &[Option<Var>],
    ) -> Result<Vec<Option<Var>>> {
        let shapes = self.unet.config().tap_shapes();
        let mut out = vec![None; shapes.len()];
        for (l, f) in features.iter().enumerate() {
            if let Some(f) = *f {
                let [_, h, w] = shapes[l];
                let map = from_tokens(g, f, h, w)?;
                out[l] = Some(project_map(g, b, l, map)?);
            }
        }
        Ok(out)
    }

    /// Full control path: per-tap residuals `Z^l(I^l)`.
    pub fn build_control<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        task_id: &str,
        query: Var,
        support: &SupportEncoding,
        t: &[usize],
    ) -> Result<Vec<Option<Var>>> {
        let feats = self.control_features(g, b, task_id, query, support, t)?;
        self.project(g, b, &feats)
    }

    /// Attention-side quantities that do not depend on the timestep, for
    /// reuse across sampling steps: per level and head, `P_h · LN(V)`.
    pub fn precompute<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        task_id: &str,
        query: Var,
        support: &SupportEncoding,
    ) -> Result<MatchingCache<T>> {
        let gq = encode_condition(g, b, &self.unet, query, task_id)?;
        let mut levels = vec![None; gq.len()];
        for &l in &self.levels {
            let q = to_tokens(g, gq[l])?;
            levels[l] = Some(match self.mode {
                ControlMode::Direct => CachedLevel::Direct(g.value(q).clone()),
                ControlMode::Matching => {
                    let scope = Scope::new(format!("matching.{l}."));
                    let k = support.keys[l].ok_or(CoreError::EmptySupport)?;
                    let v = support.values[l].ok_or(CoreError::EmptySupport)?;
                    let (wq, wk) = (b.weight(g, &scope, "wq")?, b.weight(g, &scope, "wk")?);
                    let qn = g.layer_norm(q)?;
                    let kn = g.layer_norm(k)?;
                    let vn = g.layer_norm(v)?;
                    let qh = g.linear(qn, wq, None)?;
                    let kh = g.linear(kn, wk, None)?;
                    let heads = self.cfg.heads;
                    let probs = fsc_tensor::attention_weights(g.value(qh), g.value(kh), heads)?;
                    CachedLevel::Matching(head_mixes(&probs, g.value(vn))?)
                }
            });
        }
        Ok(MatchingCache { levels })
    }

    /// Residuals from a [`MatchingCache`]; equal to [`Adapter::build_control`] up to rounding.
    pub fn control_from_cache<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        cache: &MatchingCache<T>,
        t: &[usize],
    ) -> Result<Vec<Option<Var>>> {
        let mut feats = vec![None; cache.levels.len()];
        for (l, entry) in cache.levels.iter().enumerate() {
            let Some(entry) = entry else { continue };
            feats[l] = Some(match entry {
                CachedLevel::Direct(q) => g.constant(q.clone()),
                CachedLevel::Matching(mixes) => {
                    let scope = Scope::new(format!("matching.{l}."));
                    let temb = self.time_embedding(g, t)?;
                    let (alpha, beta, gamma) = self.modulation(g, b, l, temb)?;
                    let wv = b.weight(g, &scope, "wv")?;
                    let wo = b.weight(g, &scope, "wo")?;
                    let scale = g.add_scalar(alpha, T::one());
                    let heads = mixes.len();
                    let dh = g.shape(wv)[1] / heads;
                    let mut outs = Vec::with_capacity(heads);
                    for (h, mix) in mixes.iter().enumerate() {
                        let a = g.constant(mix.clone());
                        let a = g.mul_rows(a, scale)?;
                        let a = g.add_rows(a, beta)?;
                        let wvh = g.narrow(wv, 1, h * dh, dh)?;
                        outs.push(g.linear(a, wvh, None)?);
                    }
                    let o = g.concat(&outs, 2)?;
                    self.residual(g, o, wo, gamma)?
                }
            });
        }
        self.project(g, b, &feats)
    }
}

/// Timestep-independent part of the control path for one batch of queries.
#[derive(Clone, Debug)]
pub struct MatchingCache<T> {
    levels: Vec<Option<CachedLevel<T>>>,
}

#[derive(Clone, Debug)]
enum CachedLevel<T> {
    Direct(Tensor<T>),
    /// One `[B, M, d]` tensor per head.
    Matching(Vec<Tensor<T>>),
}

/// `probs: [B, H, Mq, Mk]`, `vn: [1 or B, Mk, d]` to per-head `P_h · vn`.
fn head_mixes<T: Scalar>(probs: &Tensor<T>, vn: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let [bq, heads, mq, mk] = probs.shape() else {
        return Err(CoreError::Shape(format!("attention weights {:?}", probs.shape())));
    };
    let (bq, heads, mq, mk) = (*bq, *heads, *mq, *mk);
    let d = vn.shape()[2];
    let vb = vn.shape()[0];
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut data = vec![T::zero(); bq * mq * d];
        for bi in 0..bq {
            let p_off = (bi * heads + h) * mq * mk;
            let v_off = if vb == 1 { 0 } else { bi * mk * d };
            fsc_tensor::linalg::gemm(
                T::one(),
                fsc_tensor::linalg::MatRef::rm(probs.data(), p_off, mq, mk),
                fsc_tensor::linalg::MatRef::rm(vn.data(), v_off, mk, d),
                T::zero(),
                fsc_tensor::linalg::MatMut::rm(&mut data, bi * mq * d, mq, d),
            );
        }
        out.push(Tensor::new(&[bq, mq, d], data)?);
    }
    Ok(out)
}

fn flatten_support<T: Scalar>(g: &mut Graph<T>, tap: Var) -> Result<Var> {
    let tokens = to_tokens(g, tap)?;
    let s = g.shape(tokens).to_vec();
    Ok(g.reshape(tokens, &[1, s[0] * s[1], s[2]])?)
}

/// `e + Z(I)` on a single tap; `map: [B, d, h, w]`.
pub fn inject<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, level: usize, tap: Var, map: Var) -> Result<Var> {
    let r = project_map(g, b, level, map)?;
    if g.shape(r) != g.shape(tap) {
        return Err(CoreError::Shape(format!("control level {level}: {:?} vs tap {:?}", g.shape(r), g.shape(tap))));
    }
    Ok(g.add(tap, r)?)
}

fn project_map<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, level: usize, map: Var) -> Result<Var> {
    let scope = Scope::new(format!("proj.{level}."));
    let w = b.weight(g, &scope, "w")?;
    let bias = b.weight(g, &scope, "b")?;
    Ok(g.conv2d(map, w, Some(bias), 1, 0)?)
}
