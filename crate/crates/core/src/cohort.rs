//! Cohorts: ordered collections of label maps with per-member provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMap;

/// How one cohort member came to be. Serialized verbatim into manifests so a
/// member can be regenerated from its record alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Generation method, e.g. "phantom", "sample", "perturb-edit", "local-edit".
    pub method: String,
    /// Identifier of the seed anatomy for edit methods, if any.
    pub seed_id: Option<String>,
    /// Method parameters (psi, mask tissues, steps, ...), free-form JSON.
    pub params: serde_json::Value,
    pub master_seed: u64,
    pub stream_index: u64,
}

impl Provenance {
    pub fn new(method: &str, master_seed: u64, stream_index: u64) -> Self {
        Provenance {
            method: method.to_string(),
            seed_id: None,
            params: serde_json::Value::Null,
            master_seed,
            stream_index,
        }
    }

    pub fn with_seed_id(mut self, id: impl Into<String>) -> Self {
        self.seed_id = Some(id.into());
        self
    }

    pub fn with_params(mut self, params: serde_json::Value) -> Self {
        self.params = params;
        self
    }
}

/// An ordered set of label maps sharing dims and voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    members: Vec<LabelMap>,
    provenance: Vec<Provenance>,
}

impl Cohort {
    pub fn new() -> Self {
        Cohort { members: Vec::new(), provenance: Vec::new() }
    }

    /// Append a member. The first member fixes dims and voxel size; later
    /// members must match.
    pub fn push(&mut self, map: LabelMap, prov: Provenance) -> Result<()> {
        if let Some(first) = self.members.first() {
            if first.dims() != map.dims() || first.voxel_size() != map.voxel_size() {
                return Err(Error::ShapeMismatch(format!(
                    "cohort members must share geometry: {:?}@{} vs {:?}@{}",
                    first.dims(),
                    first.voxel_size(),
                    map.dims(),
                    map.voxel_size()
                )));
            }
        }
        self.members.push(map);
        self.provenance.push(prov);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[LabelMap] {
        &self.members
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn get(&self, i: usize) -> Option<&LabelMap> {
        self.members.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelMap> {
        self.members.iter()
    }
}

impl Default for Cohort {
    fn default() -> Self {
        Cohort::new()
    }
}
