//! Import of predictions produced outside this crate (for example a
//! transformer fine-tuned elsewhere) so they go through the same evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::corpus::TopicDataset;
use crate::error::{Error, Result};
use crate::evaluation::parse_predictions;
use crate::label::StanceLabel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExternalPredictionSet {
    pub model: String,
    pub topic: String,
    pub labels: BTreeMap<String, StanceLabel>,
    pub provenance: String,
}

impl ExternalPredictionSet {
    /// Labels in the order of the topic's test posts.
    pub fn aligned(&self, dataset: &TopicDataset) -> Result<Vec<StanceLabel>> {
        dataset
            .test
            .iter()
            .map(|p| {
                self.labels
                    .get(&p.id)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("no external prediction for post `{}`", p.id)))
            })
            .collect()
    }
}

fn list(ids: &[&str]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

/// Parses `post_id<TAB>label` content and checks it covers the test ids exactly.
pub fn parse_external(content: &str, origin: &str, dataset: &TopicDataset, model: &str) -> Result<ExternalPredictionSet> {
    let rows = parse_predictions(content, origin)?;
    let expected: BTreeSet<&str> = dataset.test.iter().map(|p| p.id.as_str()).collect();
    let mut labels = BTreeMap::new();
    for (id, label) in rows {
        if !expected.contains(id.as_str()) {
            return Err(Error::Validation(format!(
                "{origin}: post `{id}` is not in the {} test set",
                dataset.topic
            )));
        }
        if labels.insert(id.clone(), label).is_some() {
            return Err(Error::Validation(format!("{origin}: post `{id}` appears more than once")));
        }
    }
    let missing: Vec<&str> = expected.iter().filter(|id| !labels.contains_key(**id)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{origin}: {} test posts have no prediction: {}",
            missing.len(),
            list(&missing)
        )));
    }
    Ok(ExternalPredictionSet {
        model: model.to_string(),
        topic: dataset.topic.clone(),
        labels,
        provenance: origin.to_string(),
    })
}

pub fn import_predictions(path: &Path, dataset: &TopicDataset, model: &str) -> Result<ExternalPredictionSet> {
    let content = crate::error::read_to_string(path)?;
    parse_external(&content, &path.display().to_string(), dataset, model)
}
