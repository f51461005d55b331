//! Named parameter registry partitioned by role, and graph binding.

use std::collections::BTreeMap;

use fsc_tensor::{AdamW, Gradients, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Disjoint parameter groups. The name prefix of every tensor determines its partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    BackbonePhi,
    ImageEncoder,
    CondSharedTheta,
    TaskBiases,
    MatchingSigma,
    ProjectionsZ,
}

impl Partition {
    pub const ALL: [Partition; 6] = [
        Partition::BackbonePhi,
        Partition::ImageEncoder,
        Partition::CondSharedTheta,
        Partition::TaskBiases,
        Partition::MatchingSigma,
        Partition::ProjectionsZ,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Partition::BackbonePhi => "backbone.",
            Partition::ImageEncoder => "image_encoder.",
            Partition::CondSharedTheta => "cond.",
            Partition::TaskBiases => "task.",
            Partition::MatchingSigma => "matching.",
            Partition::ProjectionsZ => "proj.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::BackbonePhi => "backbone_phi",
            Partition::ImageEncoder => "image_encoder",
            Partition::CondSharedTheta => "cond_shared_theta",
            Partition::TaskBiases => "task_biases",
            Partition::MatchingSigma => "matching_sigma",
            Partition::ProjectionsZ => "projections_z",
        }
    }

    pub fn of(name: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| name.starts_with(p.prefix()))
    }
}

/// Task-bias tensors live under `task.<task_id>.`.
pub fn task_prefix(task_id: &str) -> String {
    format!("task.{task_id}.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Additive bias that becomes task-specific in the condition encoder.
    BiasSite,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Normal(std) => Tensor::randn(&self.shape, std, rng),
        }
    }
}

/// Flat store of every model tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if Partition::of(&name).is_none() {
            return Err(CoreError::Data(format!("parameter `{name}` has no partition prefix")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| CoreError::Data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| CoreError::Data(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor<T>)> + 'a {
        self.tensors.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = (&String, &Tensor<T>)> + '_ {
        self.with_prefix(p.prefix())
    }

    /// Number of scalar parameters in a partition.
    pub fn count(&self, p: Partition) -> usize {
        self.partition(p).map(|(_, t)| t.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.numel()).sum()
    }

    pub fn total(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn snapshot(&self, p: Partition) -> BTreeMap<String, Tensor<T>> {
        self.partition(p).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Registered task ids, from `task.<id>.` names.
    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .partition(Partition::TaskBiases)
            .filter_map(|(k, _)| k["task.".len()..].split('.').next().map(str::to_string))
            .collect();
        ids.dedup();
        ids
    }

    /// Partitions whose tensors differ (bitwise) from `before`.
    pub fn changed_partitions(&self, before: &ParamStore<T>) -> Vec<Partition> {
        Partition::ALL
            .into_iter()
            .filter(|&p| {
                let a: Vec<_> = self.partition(p).collect();
                let b: Vec<_> = before.partition(p).collect();
                a.len() != b.len()
                    || a.iter().zip(&b).any(|((ka, ta), (kb, tb))| {
                        ka != kb || ta.shape() != tb.shape() || !bit_equal(ta.data(), tb.data())
                    })
            })
            .collect()
    }

    /// Names of tensors that differ (bitwise) from `before`.
    pub fn changed_names(&self, before: &ParamStore<T>) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.tensors {
            match before.tensors.get(k) {
                Some(b) if b.shape() == v.shape() && bit_equal(b.data(), v.data()) => {}
                _ => out.push(k.clone()),
            }
        }
        for k in before.tensors.keys() {
            if !self.tensors.contains_key(k) {
                out.push(k.clone());
            }
        }
        out
    }
}

fn bit_equal<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (mut bx, mut by) = (Vec::new(), Vec::new());
            x.write_le(&mut bx);
            y.write_le(&mut by);
            bx == by
        })
}

/// Name resolution for one module instance: weights under `prefix`, bias
/// sites optionally redirected to a task-bias prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scope {
    pub prefix: String,
    pub bias_prefix: Option<String>,
}

impl Scope {
    pub fn new(prefix: impl Into<String>) -> Self {
        Scope { prefix: prefix.into(), bias_prefix: None }
    }

    pub fn with_task_biases(prefix: impl Into<String>, task_id: &str) -> Self {
        Scope { prefix: prefix.into(), bias_prefix: Some(task_prefix(task_id)) }
    }

    pub fn weight(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    pub fn bias(&self, local: &str) -> String {
        match &self.bias_prefix {
            Some(p) => format!("{p}{local}"),
            None => self.weight(local),
        }
    }
}

/// Predicate selecting which store entries become trainable graph leaves.
pub type TrainableFn<'a> = dyn Fn(&str) -> bool + 'a;

/// Lazily binds store tensors into a [`Graph`], once per name.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    trainable: &'s TrainableFn<'s>,
    bound: BTreeMap<String, Var>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, trainable: &'s TrainableFn<'s>) -> Self {
        Binder { store, trainable, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) { g.leaf(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn weight(&mut self, g: &mut Graph<T>, scope: &Scope, local: &str) -> Result<Var> {
        self.param(g, &scope.weight(local))
    }

    pub fn bias(&mut self, g: &mut Graph<T>, scope: &Scope, local: &str) -> Result<Var> {
        self.param(g, &scope.bias(local))
    }

    /// Bound names that were created as trainable leaves.
    pub fn into_trainable(self) -> Vec<(String, Var)> {
        let trainable = self.trainable;
        self.bound.into_iter().filter(|(k, _)| trainable(k)).collect()
    }
}

/// Applies one AdamW step to every trainable binding; refuses names outside `allowed`.
pub fn apply_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    grads: &Gradients<T>,
    bindings: &[(String, Var)],
    allowed: &TrainableFn<'_>,
) -> Result<()> {
    if let Some((name, _)) = bindings.iter().find(|(n, _)| !allowed(n)) {
        return Err(CoreError::FrozenMutation(name.clone()));
    }
    opt.begin_step();
    for (name, var) in bindings {
        if let Some(g) = grads.get(*var) {
            if !g.all_finite() {
                return Err(CoreError::Numeric(format!("non-finite gradient for `{name}`")));
            }
            opt.update(name, store.get_mut(name)?, g)?;
        }
    }
    Ok(())
}
