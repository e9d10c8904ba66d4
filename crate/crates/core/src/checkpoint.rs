//! JSON checkpoints: configuration, vocabulary, categories, key lookup table
//! and every named parameter array.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::docmodel::Vocabulary;
use crate::error::{Error, Result};
use crate::heads::TagScheme;
use crate::inference::LookupTable;
use crate::model::{Model, ModelConfig};
use crate::params::{NamedArray, ParamStore};

pub const FORMAT: &str = "kvmatch-checkpoint-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    epoch: usize,
    config: ModelConfig,
    vocabulary: Vec<String>,
    categories: Vec<String>,
    lookup: LookupTable,
    params: BTreeMap<String, NamedArray>,
}

pub fn to_json(model: &Model, epoch: usize) -> Result<String> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        epoch,
        config: model.config.clone(),
        vocabulary: model.vocab.tokens().to_vec(),
        categories: model.scheme.categories().to_vec(),
        lookup: model.lookup.clone(),
        params: model.params.to_named(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Returns the model and the epoch it was written after.
pub fn from_json(text: &str) -> Result<(Model, usize)> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", file.format)));
    }
    let vocab = Vocabulary::from_tokens(file.vocabulary).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let scheme = TagScheme::new(file.categories);
    let params = ParamStore::from_named(file.params)?;
    let table = params
        .get("backbone/token_table")
        .ok_or_else(|| Error::Checkpoint("missing backbone/token_table".into()))?;
    if table.nrows() != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "token table has {} rows for {} vocabulary entries",
            table.nrows(),
            vocab.len()
        )));
    }
    let transitions = params
        .get("heads/crf/transitions")
        .ok_or_else(|| Error::Checkpoint("missing heads/crf/transitions".into()))?;
    if transitions.nrows() != scheme.num_tags() {
        return Err(Error::Checkpoint(format!(
            "{} tags in the CRF for {} categories",
            transitions.nrows(),
            scheme.categories().len()
        )));
    }
    let model = Model {
        config: file.config,
        vocab,
        scheme,
        lookup: file.lookup,
        params,
    };
    Ok((model, file.epoch))
}

/// Writes through a temporary file and renames, so an interrupted write
/// leaves the previous checkpoint intact.
pub fn save(model: &Model, epoch: usize, path: &Path) -> Result<()> {
    let text = to_json(model, epoch)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{generate_synthetic_corpus, GenConfig};
    use crate::model::tests::{tiny_config, tiny_model};

    #[test]
    fn round_trip_preserves_predictions() {
        let docs = generate_synthetic_corpus(&GenConfig { num_docs: 2, ..GenConfig::default() }, 8).unwrap();
        let model = tiny_model(&docs, tiny_config());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&model, 3, &path).unwrap();
        let (back, epoch) = load(&path).unwrap();
        assert_eq!(epoch, 3);
        assert_eq!(back.params, model.params);
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.lookup, model.lookup);
        let p = model.predict(&model.prepare(&docs[0]).unwrap()).unwrap();
        let q = back.predict(&back.prepare(&docs[0]).unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(from_json("{}").is_err());
        assert!(load(Path::new("/nonexistent/model.json")).is_err());
        let docs = generate_synthetic_corpus(&GenConfig { num_docs: 1, ..GenConfig::default() }, 8).unwrap();
        let model = tiny_model(&docs, tiny_config());
        let text = to_json(&model, 0).unwrap().replace(FORMAT, "other-format");
        assert!(from_json(&text).unwrap_err().to_string().contains("unsupported"));
    }
}
