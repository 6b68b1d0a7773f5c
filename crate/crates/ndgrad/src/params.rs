use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::grid::Grid4;
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Which optimization group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pore-map regressor weights.
    Pore,
    /// Domain-classifier weights.
    Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub value: Grid4<T>,
    pub group: ParamGroup,
}

/// Named learnable parameters, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Grid4<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NdError::Invalid(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, Param { value, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on `tape` as a gradient-requiring leaf.
    pub fn attach(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles of an attached [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            vars: iter.into_iter().collect(),
        }
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NdError::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collect gradients after a backward pass; parameters the loss did not
    /// reach get zeros.
    pub fn gradients<T: Real>(&self, tape: &Tape<T>) -> BTreeMap<String, Grid4<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Grid4::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
