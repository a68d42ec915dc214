use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::ToolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Tool,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub entry_id: String,
    pub kind: EntryKind,
    pub capabilities: BTreeSet<String>,
    pub price_per_call: f64,
    pub context_window: u64,
    #[serde(default)]
    pub descriptor_ref: Option<String>,
}

impl RegistryEntry {
    pub fn tool<I: IntoIterator<Item = S>, S: Into<String>>(entry_id: &str, capabilities: I, price: f64, window: u64) -> Self {
        Self {
            entry_id: entry_id.to_string(),
            kind: EntryKind::Tool,
            capabilities: capabilities.into_iter().map(Into::into).collect(),
            price_per_call: price,
            context_window: window,
            descriptor_ref: None,
        }
    }

    pub fn with_descriptor(mut self, descriptor_id: &str) -> Self {
        self.descriptor_ref = Some(descriptor_id.to_string());
        self
    }

    fn validate(&self) -> Result<(), ToolError> {
        let bad = |reason: &str| ToolError::MalformedEntry {
            entry_id: self.entry_id.clone(),
            reason: reason.to_string(),
        };
        if self.entry_id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.capabilities.is_empty() {
            return Err(bad("capabilities must be non-empty"));
        }
        if !(self.price_per_call >= 0.0 && self.price_per_call.is_finite()) {
            return Err(bad("price must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscoverConstraints {
    #[serde(default)]
    pub max_price: Option<f64>,
    #[serde(default)]
    pub min_window: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MinPrice,
    MaxWindow,
}

/// In-process catalogue of tools and agents, persisted as a JSON list.
#[derive(Debug, Default)]
pub struct Registry {
    entries: RwLock<BTreeMap<String, RegistryEntry>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_entry(&self, entry: RegistryEntry) -> Result<String, ToolError> {
        entry.validate()?;
        let mut entries = self.entries.write().expect("registry poisoned");
        if entries.contains_key(&entry.entry_id) {
            return Err(ToolError::DuplicateId(entry.entry_id));
        }
        let id = entry.entry_id.clone();
        entries.insert(id.clone(), entry);
        Ok(id)
    }

    pub fn get(&self, entry_id: &str) -> Option<RegistryEntry> {
        self.entries.read().expect("registry poisoned").get(entry_id).cloned()
    }

    /// All entries ordered by id.
    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.entries.read().expect("registry poisoned").values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries holding every required capability and meeting the
    /// constraints, best first under `objective`, ties by id.
    pub fn discover(
        &self,
        required: &BTreeSet<String>,
        constraints: &DiscoverConstraints,
        objective: Objective,
    ) -> Result<Vec<RegistryEntry>, ToolError> {
        if required.is_empty() {
            return Err(ToolError::EmptyRequirement);
        }
        let mut hits: Vec<RegistryEntry> = self
            .entries
            .read()
            .expect("registry poisoned")
            .values()
            .filter(|e| required.is_subset(&e.capabilities))
            .filter(|e| constraints.max_price.is_none_or(|p| e.price_per_call <= p))
            .filter(|e| constraints.min_window.is_none_or(|w| e.context_window >= w))
            .cloned()
            .collect();
        if hits.is_empty() {
            return Err(ToolError::NoCandidate);
        }
        hits.sort_by(|a, b| {
            let primary = match objective {
                Objective::MinPrice => a.price_per_call.total_cmp(&b.price_per_call),
                Objective::MaxWindow => b.context_window.cmp(&a.context_window),
            };
            primary.then_with(|| a.entry_id.cmp(&b.entry_id))
        });
        Ok(hits)
    }

    pub fn from_entries(entries: Vec<RegistryEntry>) -> Result<Self, ToolError> {
        let registry = Self::new();
        for e in entries {
            registry.register_entry(e)?;
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let source =
            std::fs::read_to_string(path).map_err(|e| ToolError::RegistryFile(format!("{}: {e}", path.display())))?;
        let entries: Vec<RegistryEntry> =
            serde_json::from_str(&source).map_err(|e| ToolError::RegistryFile(format!("{}: {e}", path.display())))?;
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), ToolError> {
        let json = serde_json::to_string_pretty(&self.entries()).expect("entries serialize");
        std::fs::write(path, json).map_err(|e| ToolError::RegistryFile(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        Registry::from_entries(vec![
            RegistryEntry::tool("T1", ["search"], 5.0, 4000),
            RegistryEntry::tool("T2", ["search"], 2.0, 8000),
        ])
        .unwrap()
    }

    fn caps(c: &[&str]) -> BTreeSet<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn discover_orders_and_filters() {
        let r = reg();
        let ids = |v: Vec<RegistryEntry>| v.into_iter().map(|e| e.entry_id).collect::<Vec<_>>();
        let none = DiscoverConstraints::default();
        assert_eq!(ids(r.discover(&caps(&["search"]), &none, Objective::MinPrice).unwrap()), ["T2", "T1"]);
        assert_eq!(
            r.discover(&caps(&["search", "math"]), &none, Objective::MinPrice),
            Err(ToolError::NoCandidate)
        );
        let cheap = DiscoverConstraints {
            max_price: Some(3.0),
            min_window: None,
        };
        assert_eq!(ids(r.discover(&caps(&["search"]), &cheap, Objective::MaxWindow).unwrap()), ["T2"]);
    }

    #[test]
    fn register_errors_and_persistence() {
        let r = reg();
        assert_eq!(
            r.register_entry(RegistryEntry::tool("T1", ["x"], 1.0, 1)),
            Err(ToolError::DuplicateId("T1".into()))
        );
        assert!(matches!(
            r.register_entry(RegistryEntry::tool("T3", Vec::<String>::new(), 1.0, 1)),
            Err(ToolError::MalformedEntry { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        r.save(&path).unwrap();
        assert_eq!(Registry::load(&path).unwrap().entries(), r.entries());
    }
}
