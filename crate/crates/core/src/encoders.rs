//! Frozen image encoder `f` and bias-tuned condition encoder `g`, both copies
//! of the backbone encoder run at `t = 0` with the null descriptor.

use fsc_tensor::{Graph, Scalar, Tensor, Var};

use crate::backbone::{UNet, NULL_DESCRIPTOR};
use crate::error::{CoreError, Result};
use crate::params::{task_prefix, Binder, ParamKind, ParamSpec, ParamStore, Partition, Scope};

pub const BACKBONE: &str = "backbone.";
pub const IMAGE_ENCODER: &str = "image_encoder.";
pub const COND_ENCODER: &str = "cond.";

pub fn image_scope() -> Scope {
    Scope::new(IMAGE_ENCODER)
}

pub fn cond_scope(task_id: &str) -> Scope {
    Scope::with_task_biases(COND_ENCODER, task_id)
}

/// Encoder parameters of `g` that become per-task.
pub fn bias_sites(unet: &UNet) -> Vec<ParamSpec> {
    unet.encoder_specs().into_iter().filter(|s| s.kind == ParamKind::BiasSite).collect()
}

/// Copies the backbone encoder into `f` (everything) and `g` (weights only;
/// bias sites come from per-task sets). Returns a provenance warning when the
/// backbone was not pretrained.
pub fn clone_encoders<T: Scalar>(store: &mut ParamStore<T>, unet: &UNet, pretrained: bool) -> Result<Option<String>> {
    for spec in unet.encoder_specs() {
        let src = store.get(&format!("{BACKBONE}{}", spec.name))?.clone();
        if spec.kind == ParamKind::Weight {
            store.insert(format!("{COND_ENCODER}{}", spec.name), src.clone())?;
        }
        store.insert(format!("{IMAGE_ENCODER}{}", spec.name), src)?;
    }
    Ok((!pretrained).then(|| "encoders were cloned from a backbone that was not pretrained".to_string()))
}

pub fn is_registered<T: Scalar>(store: &ParamStore<T>, task_id: &str) -> bool {
    store.with_prefix(&task_prefix(task_id)).next().is_some()
}

/// Creates the bias set for `task_id`: the mean of every registered task, or
/// the backbone template biases when none exist.
pub fn register_task<T: Scalar>(store: &mut ParamStore<T>, unet: &UNet, task_id: &str) -> Result<()> {
    if task_id.is_empty() || task_id.contains('.') {
        return Err(CoreError::UnknownTask(task_id.to_string()));
    }
    if is_registered(store, task_id) {
        return Err(CoreError::DuplicateTask(task_id.to_string()));
    }
    let existing = store.task_ids();
    for spec in bias_sites(unet) {
        let init = if existing.is_empty() {
            store.get(&format!("{BACKBONE}{}", spec.name))?.clone()
        } else {
            let mut acc = Tensor::zeros(&spec.shape);
            for id in &existing {
                acc.axpy(T::one(), store.get(&format!("{}{}", task_prefix(id), spec.name))?)?;
            }
            let n = T::from_usize(existing.len()).unwrap();
            acc.map(|v| v / n)
        };
        store.insert(format!("{}{}", task_prefix(task_id), spec.name), init)?;
    }
    Ok(())
}

/// `|θ_τ| / |θ|`: one task's bias count over the shared condition-encoder size.
pub fn task_bias_ratio<T: Scalar>(store: &ParamStore<T>, task_id: &str) -> f64 {
    store.count_prefix(&task_prefix(task_id)) as f64 / store.count(Partition::CondSharedTheta).max(1) as f64
}

fn null_embedding<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    unet: &UNet,
    scope: &Scope,
    batch: usize,
) -> Result<Var> {
    unet.embed(g, b, scope, &vec![0; batch], &vec![NULL_DESCRIPTOR; batch])
}

/// `f(x)` taps for images `x: [B, 3, H, W]`.
pub fn encode_image<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, unet: &UNet, x: Var) -> Result<Vec<Var>> {
    let scope = image_scope();
    let batch = g.shape(x)[0];
    let emb = null_embedding(g, b, unet, &scope, batch)?;
    unet.encode(g, b, &scope, x, emb)
}

/// `g_τ(y)` taps for conditions `y: [B, 3, H, W]`.
pub fn encode_condition<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    unet: &UNet,
    y: Var,
    task_id: &str,
) -> Result<Vec<Var>> {
    if !is_registered(b.store(), task_id) {
        return Err(CoreError::UnregisteredTask(task_id.to_string()));
    }
    let scope = cond_scope(task_id);
    let batch = g.shape(y).first().copied().unwrap_or(0);
    let emb = null_embedding(g, b, unet, &scope, batch)?;
    unet.encode(g, b, &scope, y, emb)
}

/// `[B, C, H, W]` feature map to row-major patch tokens `[B, H*W, C]`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("expected [B, C, H, W], got {s:?}")));
    }
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.transpose_last2(r)?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(CoreError::Shape(format!("tokens {s:?} do not tile a {h}x{w} grid")));
    }
    let t = g.transpose_last2(tokens)?;
    Ok(g.reshape(t, &[s[0], s[2], h, w])?)
}
