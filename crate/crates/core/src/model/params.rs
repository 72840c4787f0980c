use crate::error::{bail, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, Var};
use std::collections::HashMap;
use std::io::{Read, Write};

/// Freeze unit. Every parameter belongs to exactly one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Semantic encoder and its projection into the backbone.
    Vit,
    /// Latent encoder and decoder.
    Vae,
    /// Understanding expert, text embedding and language head.
    Understanding,
    /// Generation expert, latent projection, time embedding and velocity head.
    Generation,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Vit, ParamGroup::Vae, ParamGroup::Understanding, ParamGroup::Generation];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Bitwise equality of the values of one group.
    pub fn group_bit_eq(&self, other: &ParamStore, group: ParamGroup) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.group == group)
            .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, self.params.iter().map(|p| (p.name.as_str(), &p.value)))
    }

    /// Loads values from a checkpoint; every parameter must be present with
    /// its current shape.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let records = read_checkpoint(r)?;
        if records.len() != self.params.len() {
            bail!(
                Format,
                "checkpoint holds {} parameters, model has {}",
                records.len(),
                self.params.len()
            );
        }
        for (name, value) in records {
            let Some(&i) = self.by_name.get(&name) else {
                bail!(Format, "checkpoint parameter {name} is unknown to this model");
            };
            if value.shape() != self.params[i].value.shape() {
                bail!(
                    Shape,
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.params[i].value.shape()
                );
            }
            self.params[i].value = value;
        }
        Ok(())
    }
}

/// Lazily binds parameters into a graph.
///
/// A parameter is added to the graph on first use; trainable parameters
/// become differentiable leaves and frozen ones constants. The set of bound
/// parameters afterwards records exactly which parameters a forward pass read.
#[derive(Debug)]
pub struct Binder {
    vars: Vec<Option<Var>>,
    mode: BindMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BindMode {
    Training,
    Inference,
    Fixed,
}

impl Binder {
    /// Trainable parameters receive gradients.
    pub fn training(store: &ParamStore) -> Self {
        Self { vars: vec![None; store.len()], mode: BindMode::Training }
    }

    /// Every parameter is a constant.
    pub fn inference(store: &ParamStore) -> Self {
        Self { vars: vec![None; store.len()], mode: BindMode::Inference }
    }

    /// Uses pre-built leaves, one per parameter, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars: vars.into_iter().map(Some).collect(), mode: BindMode::Fixed }
    }

    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        assert!(self.mode != BindMode::Fixed, "parameter {} missing from fixed binder", id.0);
        let trainable = self.mode == BindMode::Training && store.is_trainable(id);
        let v = g.leaf(store.value(id).clone(), trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    /// Gradients of the bound trainable parameters after `g.backward`.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Tensor)> {
        self.bound()
            .filter_map(|(id, v)| g.grad(v).map(|t| (id, t.clone())))
            .collect()
    }
}
