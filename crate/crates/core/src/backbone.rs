//! Small UNet noise predictor with skip taps the adapter can add into.

use fsc_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{Binder, Init, ParamKind, ParamSpec, ParamStore, Scope};

/// Number of shape classes a scene descriptor can mention.
pub const SHAPE_CLASSES: usize = 3;
/// Descriptor ids are multi-hot bitmasks over shape classes; 0 is the null descriptor.
pub const NUM_DESCRIPTORS: usize = 1 << SHAPE_CLASSES;
pub const NULL_DESCRIPTOR: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub image_size: usize,
    pub norm_groups: usize,
    pub attn_heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 64,
            cond_embed_dim: 32,
            image_size: 32,
            norm_groups: 8,
            attn_heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(CoreError::config(format!("backbone.{field}"), msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.cond_embed_dim == 0 {
            return bad("base_channels", "channel and embedding sizes must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers", "must be a nonempty list of positive integers".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim", format!("must be positive and even, got {}", self.time_embed_dim));
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad("image_size", format!("{} is not divisible by {div}", self.image_size));
        }
        if self.norm_groups == 0 || (0..self.levels()).any(|l| !self.channels(l).is_multiple_of(self.norm_groups)) {
            return bad("norm_groups", format!("{} must divide every level width", self.norm_groups));
        }
        if self.attn_heads == 0 || !self.channels(self.levels()).is_multiple_of(self.attn_heads) {
            return bad("attn_heads", format!("{} must divide the mid-block width", self.attn_heads));
        }
        Ok(())
    }

    /// Number of encoder levels `L`.
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Width of tap `l` for `l` in `0..=L`; the mid tap reuses the last level width.
    pub fn channels(&self, l: usize) -> usize {
        let l = l.min(self.levels() - 1);
        self.base_channels * self.channel_multipliers[l]
    }

    pub fn resolution(&self, l: usize) -> usize {
        self.image_size >> l.min(self.levels() - 1)
    }

    /// `[channels, height, width]` for each of the `L + 1` taps.
    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        (0..=self.levels()).map(|l| [self.channels(l), self.resolution(l), self.resolution(l)]).collect()
    }
}

/// Sinusoidal embedding `[sin(t f_0..), cos(t f_0..)]` with geometric frequencies `10000^(-i/half)`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(CoreError::InvalidRange(format!("timestep embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::from_f64c(arg.sin());
        out[half + i] = T::from_f64c(arg.cos());
    }
    Ok(out)
}

/// Descriptor id for a set of shape classes present in a scene.
pub fn descriptor_id(classes: &[usize]) -> usize {
    classes.iter().fold(0, |acc, &c| acc | (1 << c))
}

struct SpecBuilder<'a> {
    specs: Vec<ParamSpec>,
    cfg: &'a BackboneConfig,
}

impl SpecBuilder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, init: Init) {
        self.specs.push(ParamSpec { name, shape, kind, init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        let init = if zero { Init::Zeros } else { Init::Normal(std) };
        self.push(format!("{name}.w"), vec![cout, cin, k, k], ParamKind::Weight, init);
        self.push(format!("{name}.b"), vec![cout], ParamKind::BiasSite, Init::Zeros);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, bias: Option<ParamKind>) {
        let std = (1.0 / din as f64).sqrt();
        self.push(format!("{name}.w"), vec![din, dout], ParamKind::Weight, Init::Normal(std));
        if let Some(kind) = bias {
            self.push(format!("{name}.b"), vec![dout], kind, Init::Zeros);
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], ParamKind::Weight, Init::Ones);
        self.push(format!("{name}.b"), vec![c], ParamKind::BiasSite, Init::Zeros);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize) {
        let dt = self.cfg.time_embed_dim;
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{name}.temb"), dt, cout, Some(ParamKind::Weight));
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, false);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, false);
        }
    }

    fn attn(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), c, c, Some(ParamKind::BiasSite));
        }
    }
}

/// Architecture description; parameters live in a [`ParamStore`] under a caller-chosen prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    cfg: BackboneConfig,
}

impl UNet {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(UNet { cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Every parameter with local names; encoder entries start with `enc.`.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let mut s = SpecBuilder { specs: Vec::new(), cfg: c };
        let dt = c.time_embed_dim;
        let top = c.levels() - 1;
        s.linear("enc.time.l1", dt, dt, Some(ParamKind::Weight));
        s.linear("enc.time.l2", dt, dt, Some(ParamKind::Weight));
        s.push("enc.cond.table".into(), vec![NUM_DESCRIPTORS, c.cond_embed_dim], ParamKind::Weight, Init::Normal(1.0));
        s.linear("enc.cond.proj", c.cond_embed_dim, dt, None);
        s.conv("enc.conv_in", c.in_channels, c.base_channels, 3, false);
        let mut cin = c.base_channels;
        for l in 0..c.levels() {
            s.resblock(&format!("enc.down.{l}.res"), cin, c.channels(l));
            cin = c.channels(l);
            if l < top {
                s.conv(&format!("enc.down.{l}.ds"), cin, cin, 3, false);
            }
        }
        s.resblock("enc.mid.res", cin, cin);
        s.attn("enc.mid.attn", cin);
        for l in (0..c.levels()).rev() {
            let ch = c.channels(l);
            s.resblock(&format!("dec.up.{l}.res"), 2 * ch, ch);
            if l > 0 {
                s.conv(&format!("dec.up.{l}.up"), ch, c.channels(l - 1), 3, false);
            }
        }
        s.norm("dec.out.norm", c.base_channels);
        s.conv("dec.out.conv", c.base_channels, c.in_channels, 3, true);
        s.specs
    }

    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        self.param_specs().into_iter().filter(|s| s.name.starts_with("enc.")).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Materializes fresh parameters under `prefix`.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<()> {
        for spec in self.param_specs() {
            store.insert(format!("{prefix}{}", spec.name), spec.materialize(rng))?;
        }
        Ok(())
    }

    /// Timestep plus descriptor embedding, `[B, time_embed_dim]`, before the block activation.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        scope: &Scope,
        t: &[usize],
        descriptors: &[usize],
    ) -> Result<Var> {
        if t.len() != descriptors.len() || t.is_empty() {
            return Err(CoreError::Shape(format!("{} timesteps for {} descriptors", t.len(), descriptors.len())));
        }
        if let Some(&d) = descriptors.iter().find(|&&d| d >= NUM_DESCRIPTORS) {
            return Err(CoreError::InvalidRange(format!("descriptor id {d} >= {NUM_DESCRIPTORS}")));
        }
        let dt = self.cfg.time_embed_dim;
        let mut sin = Vec::with_capacity(t.len() * dt);
        for &ti in t {
            sin.extend(timestep_embedding::<T>(ti, dt)?);
        }
        let sin = g.constant(Tensor::new(&[t.len(), dt], sin)?);
        let mut n = Net { g, b, scope, groups: self.cfg.norm_groups };
        let h = n.linear("enc.time.l1", sin, Bias::Weight)?;
        let h = n.g.silu(h);
        let temb = n.linear("enc.time.l2", h, Bias::Weight)?;
        let table = n.b.weight(n.g, scope, "enc.cond.table")?;
        let c = n.g.gather_rows(table, descriptors)?;
        let c = n.linear("enc.cond.proj", c, Bias::None)?;
        Ok(n.g.add(temb, c)?)
    }

    /// Runs the encoder and mid block on `x: [B, C, H, W]`, returning the `L + 1` taps.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        scope: &Scope,
        x: Var,
        emb: Var,
    ) -> Result<Vec<Var>> {
        let c = &self.cfg;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != c.in_channels || xs[2] != c.image_size || xs[3] != c.image_size {
            return Err(CoreError::Shape(format!(
                "encoder input must be [B, {}, {s}, {s}], got {xs:?}",
                c.in_channels,
                s = c.image_size
            )));
        }
        let emb_act = g.silu(emb);
        let mut n = Net { g, b, scope, groups: c.norm_groups };
        let mut h = n.conv("enc.conv_in", x, 1, 1)?;
        let mut taps = Vec::with_capacity(c.levels() + 1);
        for l in 0..c.levels() {
            h = n.resblock(&format!("enc.down.{l}.res"), h, emb_act)?;
            taps.push(h);
            if l + 1 < c.levels() {
                h = n.conv(&format!("enc.down.{l}.ds"), h, 2, 1)?;
            }
        }
        h = n.resblock("enc.mid.res", h, emb_act)?;
        h = n.attn("enc.mid.attn", h, c.attn_heads)?;
        taps.push(h);
        Ok(taps)
    }

    /// Decoder over (possibly injected) taps.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        scope: &Scope,
        taps: &[Var],
        emb: Var,
    ) -> Result<Var> {
        let c = &self.cfg;
        if taps.len() != c.levels() + 1 {
            return Err(CoreError::Shape(format!("expected {} taps, got {}", c.levels() + 1, taps.len())));
        }
        let emb_act = g.silu(emb);
        let mut n = Net { g, b, scope, groups: c.norm_groups };
        let mut h = taps[c.levels()];
        for l in (0..c.levels()).rev() {
            let cat = n.g.concat(&[h, taps[l]], 1)?;
            h = n.resblock(&format!("dec.up.{l}.res"), cat, emb_act)?;
            if l > 0 {
                let up = n.g.upsample2x(h)?;
                h = n.conv(&format!("dec.up.{l}.up"), up, 1, 1)?;
            }
        }
        let h = n.norm("dec.out.norm", h)?;
        let h = n.g.silu(h);
        n.conv("dec.out.conv", h, 1, 1)
    }

    /// Predicts noise for `z: [B, C, H, W]`. `controls`, when given, holds one
    /// optional additive residual per tap, each shaped like that tap.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        scope: &Scope,
        z: Var,
        t: &[usize],
        descriptors: &[usize],
        controls: Option<&[Option<Var>]>,
    ) -> Result<Var> {
        if g.shape(z).first() != Some(&t.len()) {
            return Err(CoreError::Shape(format!("batch of {:?} does not match {} timesteps", g.shape(z), t.len())));
        }
        let emb = self.embed(g, b, scope, t, descriptors)?;
        let mut taps = self.encode(g, b, scope, z, emb)?;
        if let Some(ctrl) = controls {
            inject_residuals(g, &mut taps, ctrl)?;
        }
        self.decode(g, b, scope, &taps, emb)
    }
}

/// Adds per-level residuals into the taps, naming the level on shape mismatch.
pub fn inject_residuals<T: Scalar>(g: &mut Graph<T>, taps: &mut [Var], controls: &[Option<Var>]) -> Result<()> {
    if controls.len() != taps.len() {
        return Err(CoreError::Shape(format!("expected {} control levels, got {}", taps.len(), controls.len())));
    }
    for (l, (tap, ctrl)) in taps.iter_mut().zip(controls).enumerate() {
        if let Some(r) = *ctrl {
            if g.shape(r) != g.shape(*tap) {
                return Err(CoreError::Shape(format!(
                    "control level {l}: expected {:?}, got {:?}",
                    g.shape(*tap),
                    g.shape(r)
                )));
            }
            *tap = g.add(*tap, r)?;
        }
    }
    Ok(())
}

enum Bias {
    None,
    Weight,
    Site,
}

struct Net<'x, 's, T> {
    g: &'x mut Graph<T>,
    b: &'x mut Binder<'s, T>,
    scope: &'x Scope,
    groups: usize,
}

impl<T: Scalar> Net<'_, '_, T> {
    fn bias(&mut self, local: String, kind: Bias) -> Result<Option<Var>> {
        Ok(match kind {
            Bias::None => None,
            Bias::Weight => Some(self.b.weight(self.g, self.scope, &local)?),
            Bias::Site => Some(self.b.bias(self.g, self.scope, &local)?),
        })
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.b.weight(self.g, self.scope, &format!("{name}.w"))?;
        let bias = self.bias(format!("{name}.b"), Bias::Site)?;
        Ok(self.g.conv2d(x, w, bias, stride, pad)?)
    }

    fn linear(&mut self, name: &str, x: Var, kind: Bias) -> Result<Var> {
        let w = self.b.weight(self.g, self.scope, &format!("{name}.w"))?;
        let bias = self.bias(format!("{name}.b"), kind)?;
        Ok(self.g.linear(x, w, bias)?)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.b.weight(self.g, self.scope, &format!("{name}.g"))?;
        let beta = self.b.bias(self.g, self.scope, &format!("{name}.b"))?;
        Ok(self.g.group_norm(x, gamma, beta, self.groups)?)
    }

    fn resblock(&mut self, name: &str, x: Var, emb_act: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv1"), h, 1, 1)?;
        let shift = self.linear(&format!("{name}.temb"), emb_act, Bias::Weight)?;
        let h = self.g.add_channel(h, shift)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1, 1)?;
        let skip_name = self.scope.weight(&format!("{name}.skip.w"));
        let skip = if self.b.store().contains(&skip_name) { self.conv(&format!("{name}.skip"), x, 1, 0)? } else { x };
        Ok(self.g.add(h, skip)?)
    }

    fn attn(&mut self, name: &str, x: Var, heads: usize) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm(&format!("{name}.norm"), x)?;
        let h = self.g.reshape(h, &[bsz, c, hw])?;
        let tokens = self.g.transpose_last2(h)?;
        let q = self.linear(&format!("{name}.q"), tokens, Bias::Site)?;
        let k = self.linear(&format!("{name}.k"), tokens, Bias::Site)?;
        let v = self.linear(&format!("{name}.v"), tokens, Bias::Site)?;
        let a = self.g.attention(q, k, v, heads)?;
        let o = self.linear(&format!("{name}.o"), a, Bias::Site)?;
        let o = self.g.transpose_last2(o)?;
        let o = self.g.reshape(o, &s)?;
        Ok(self.g.add(x, o)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 8,
            cond_embed_dim: 4,
            image_size: 4,
            norm_groups: 2,
            attn_heads: 2,
        }
    }

    #[test]
    fn timestep_embedding_basics() {
        let e = timestep_embedding::<f64>(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(timestep_embedding::<f64>(3, 7).is_err());
        assert_eq!(timestep_embedding::<f32>(17, 64).unwrap(), timestep_embedding::<f32>(17, 64).unwrap());
        let all: Vec<Vec<f64>> = (1..=200).map(|t| timestep_embedding(t, 64).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d > 1e-6, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        let mut c = BackboneConfig { image_size: 30, ..Default::default() };
        assert!(c.validate().is_err());
        c.image_size = 32;
        c.validate().unwrap();
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let unet = UNet::new(tiny()).unwrap();
        let mut store = ParamStore::<f64>::new();
        unet.init_params(&mut store, "backbone.", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let all = |_: &str| false;
        let mut g = Graph::new();
        let mut b = Binder::new(&store, &all);
        let z = g.constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = unet.forward(&mut g, &mut b, &Scope::new("backbone."), z, &[5], &[0], None).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }
}
