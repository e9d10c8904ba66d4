//! FUNSD-schema annotation files.
//!
//! ```json
//! {"form": [{"id": 0, "text": "Date:", "box": [x0, y0, x1, y1], "label": "question",
//!            "words": [{"text": "Date:", "box": [..]}], "linking": [[0, 1]]}]}
//! ```
//!
//! `linking` pairs `[a, b]` are read as the directed link `a → b`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{BBox, Document, Link, TextSegment, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FunsdWord {
    pub text: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunsdEntry {
    pub id: i64,
    pub text: String,
    pub bbox: [f64; 4],
    pub label: String,
    pub words: Vec<FunsdWord>,
    pub linking: Vec<[i64; 2]>,
}

/// One annotation file, field for field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunsdForm {
    pub entries: Vec<FunsdEntry>,
}

fn parse_err(path: &str, message: String) -> Error {
    Error::Parse {
        path: path.to_string(),
        message,
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, at: &str, path: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| parse_err(path, format!("{at}: missing field `{name}`")))
}

fn as_str(v: &Value, at: &str, path: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| parse_err(path, format!("{at}: expected a string")))
}

fn as_box(v: &Value, at: &str, path: &str) -> Result<[f64; 4]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| parse_err(path, format!("{at}: expected an array of 4 numbers")))?;
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = item
            .as_f64()
            .ok_or_else(|| parse_err(path, format!("{at}: expected an array of 4 numbers")))?;
    }
    Ok(out)
}

/// Integral coordinates are written as JSON integers, as in the original
/// dataset files.
fn coord(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

fn box_value(b: &[f64; 4]) -> Value {
    Value::Array(b.iter().map(|&v| coord(v)).collect())
}

impl FunsdForm {
    pub fn from_value(root: &Value, path: &str) -> Result<Self> {
        let form = root
            .as_object()
            .and_then(|o| o.get("form"))
            .ok_or_else(|| parse_err(path, "missing top-level field `form`".into()))?
            .as_array()
            .ok_or_else(|| parse_err(path, "`form`: expected an array".into()))?;
        let mut entries = Vec::with_capacity(form.len());
        for (idx, item) in form.iter().enumerate() {
            let at = format!("form[{idx}]");
            let obj = item
                .as_object()
                .ok_or_else(|| parse_err(path, format!("{at}: expected an object")))?;
            let id = field(obj, "id", &at, path)?
                .as_i64()
                .ok_or_else(|| parse_err(path, format!("{at}.id: expected an integer")))?;
            let text = as_str(field(obj, "text", &at, path)?, &format!("{at}.text"), path)?;
            let bbox = as_box(field(obj, "box", &at, path)?, &format!("{at}.box"), path)?;
            let label = as_str(field(obj, "label", &at, path)?, &format!("{at}.label"), path)?;
            let words_v = field(obj, "words", &at, path)?
                .as_array()
                .ok_or_else(|| parse_err(path, format!("{at}.words: expected an array")))?;
            let mut words = Vec::with_capacity(words_v.len());
            for (w_idx, w) in words_v.iter().enumerate() {
                let w_at = format!("{at}.words[{w_idx}]");
                let w_obj = w
                    .as_object()
                    .ok_or_else(|| parse_err(path, format!("{w_at}: expected an object")))?;
                words.push(FunsdWord {
                    text: as_str(field(w_obj, "text", &w_at, path)?, &format!("{w_at}.text"), path)?,
                    bbox: as_box(field(w_obj, "box", &w_at, path)?, &format!("{w_at}.box"), path)?,
                });
            }
            let link_v = field(obj, "linking", &at, path)?
                .as_array()
                .ok_or_else(|| parse_err(path, format!("{at}.linking: expected an array")))?;
            let mut linking = Vec::with_capacity(link_v.len());
            for (l_idx, l) in link_v.iter().enumerate() {
                let pair = l
                    .as_array()
                    .filter(|p| p.len() == 2)
                    .and_then(|p| Some([p[0].as_i64()?, p[1].as_i64()?]))
                    .ok_or_else(|| {
                        parse_err(
                            path,
                            format!("{at}.linking[{l_idx}]: expected a pair of integers"),
                        )
                    })?;
                linking.push(pair);
            }
            entries.push(FunsdEntry {
                id,
                text,
                bbox,
                label,
                words,
                linking,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_value(&self) -> Value {
        let form: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                json!({
                    "id": e.id,
                    "text": e.text,
                    "box": box_value(&e.bbox),
                    "label": e.label,
                    "words": e.words.iter().map(|w| json!({
                        "text": w.text,
                        "box": box_value(&w.bbox),
                    })).collect::<Vec<_>>(),
                    "linking": e.linking.iter().map(|p| json!([p[0], p[1]])).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({ "form": form })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("json values always serialize")
    }

    /// Converts to a [`Document`]. Entry ids are remapped to positions
    /// `0..N`; links are attached to both endpoints. Without `page_size`,
    /// the page is the tightest origin-anchored box holding every box.
    pub fn to_document(&self, id: &str, page_size: Option<(f64, f64)>) -> Result<Document> {
        let mut index_of: HashMap<i64, usize> = HashMap::new();
        for (pos, e) in self.entries.iter().enumerate() {
            if index_of.insert(e.id, pos).is_some() {
                return Err(Error::InvalidSegment {
                    segment_id: e.id,
                    reason: "duplicate id".into(),
                });
            }
        }
        let mut segments = Vec::with_capacity(self.entries.len());
        let mut links: BTreeSet<Link> = BTreeSet::new();
        for (pos, e) in self.entries.iter().enumerate() {
            let invalid = |reason: String| Error::InvalidSegment {
                segment_id: e.id,
                reason,
            };
            let seg_box = BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]);
            if !seg_box.is_valid() {
                return Err(invalid(format!("invalid box {:?}", e.bbox)));
            }
            let mut tokens = Vec::with_capacity(e.words.len());
            for w in &e.words {
                let b = BBox::new(w.bbox[0], w.bbox[1], w.bbox[2], w.bbox[3]);
                if !b.is_valid() {
                    return Err(invalid(format!("invalid word box {:?}", w.bbox)));
                }
                let text = w.text.trim();
                if !text.is_empty() {
                    tokens.push(Token {
                        text: text.to_string(),
                        bbox: b,
                    });
                }
            }
            if tokens.is_empty() && !e.text.trim().is_empty() {
                tokens = split_evenly(e.text.trim(), seg_box);
            }
            let bbox = tokens.iter().fold(seg_box, |acc, t| acc.union(&t.bbox));
            for pair in &e.linking {
                let key = *index_of
                    .get(&pair[0])
                    .ok_or_else(|| invalid(format!("link endpoint {} does not exist", pair[0])))?;
                let value = *index_of
                    .get(&pair[1])
                    .ok_or_else(|| invalid(format!("link endpoint {} does not exist", pair[1])))?;
                if key == value {
                    return Err(invalid("self-link".into()));
                }
                links.insert(Link { key, value });
            }
            segments.push(TextSegment {
                id: pos,
                text: e.text.clone(),
                tokens,
                bbox,
                label: e.label.clone(),
                links: Vec::new(),
            });
        }
        let page_size = page_size.unwrap_or_else(|| {
            segments.iter().fold((1.0_f64, 1.0_f64), |(w, h), s| {
                (w.max(s.bbox.x1.ceil()), h.max(s.bbox.y1.ceil()))
            })
        });
        let mut doc = Document {
            id: id.to_string(),
            segments,
            page_size,
            image: None,
        };
        let links: Vec<Link> = links.into_iter().collect();
        doc.set_links(&links);
        doc.validate()?;
        Ok(doc)
    }

    pub fn from_document(doc: &Document) -> Self {
        let entries = doc
            .segments
            .iter()
            .map(|s| FunsdEntry {
                id: s.id as i64,
                text: s.text.clone(),
                bbox: s.bbox.as_array(),
                label: s.label.clone(),
                words: s
                    .tokens
                    .iter()
                    .map(|t| FunsdWord {
                        text: t.text.clone(),
                        bbox: t.bbox.as_array(),
                    })
                    .collect(),
                linking: s
                    .links
                    .iter()
                    .map(|l| [l.key as i64, l.value as i64])
                    .collect(),
            })
            .collect();
        Self { entries }
    }
}

/// Whitespace tokens laid out proportionally to character count.
fn split_evenly(text: &str, b: BBox) -> Vec<Token> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let total_chars: usize = words.iter().map(|w| w.chars().count()).sum::<usize>()
        + words.len().saturating_sub(1);
    let per_char = b.width() / total_chars.max(1) as f64;
    let mut x = b.x0;
    words
        .iter()
        .map(|w| {
            let width = w.chars().count() as f64 * per_char;
            let tok = Token {
                text: (*w).to_string(),
                bbox: BBox::new(x, b.y0, (x + width).min(b.x1), b.y1),
            };
            x += width + per_char;
            tok
        })
        .collect()
}

pub fn parse_funsd_str(s: &str, path: &str) -> Result<FunsdForm> {
    let value: Value =
        serde_json::from_str(s).map_err(|e| parse_err(path, format!("invalid JSON: {e}")))?;
    FunsdForm::from_value(&value, path)
}

/// Reads one annotation file; the document id is the file stem.
pub fn load_funsd_document(path: &Path) -> Result<Document> {
    load_with_page(path, None)
}

fn load_with_page(path: &Path, page_size: Option<(f64, f64)>) -> Result<Document> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let form = parse_funsd_str(&text, &name)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    form.to_document(&id, page_size)
}

pub fn save_funsd_document(doc: &Document, path: &Path) -> Result<()> {
    let mut text = FunsdForm::from_document(doc).to_json_string();
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every `*.json` annotation in `dir` (non-recursive, sorted by
/// name, `manifest.json` skipped).
pub fn load_corpus_dir(dir: &Path, page_size: Option<(f64, f64)>) -> Result<Vec<Document>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != "manifest.json")
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| load_with_page(p, page_size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_SEGMENTS: &str = r#"{"form": [
        {"id": 3, "text": "Date:", "box": [10, 10, 60, 30], "label": "question",
         "words": [{"text": "Date:", "box": [10, 10, 60, 30]}], "linking": [[3, 7]]},
        {"id": 7, "text": "01/02/2003", "box": [70, 10, 170, 30], "label": "answer",
         "words": [{"text": "01/02/2003", "box": [70, 10, 170, 30]}], "linking": [[3, 7]]}
    ]}"#;

    #[test]
    fn linking_becomes_directed_link_on_both_segments() {
        let form = parse_funsd_str(TWO_SEGMENTS, "inline").unwrap();
        let doc = form.to_document("d", None).unwrap();
        let link = Link { key: 0, value: 1 };
        assert_eq!(doc.segments[0].links, vec![link]);
        assert_eq!(doc.segments[1].links, vec![link]);
        assert_eq!(doc.segments[0].label, "question");
        assert_eq!(doc.page_size, (170.0, 30.0));

        // serialize, parse again: same form and same document
        let again = parse_funsd_str(&FunsdForm::from_document(&doc).to_json_string(), "x").unwrap();
        let doc2 = again.to_document("d", None).unwrap();
        assert_eq!(doc, doc2);
        assert_eq!(again.entries[0].linking, vec![[0, 1]]);
    }

    #[test]
    fn empty_linking_and_other_label() {
        let s = r#"{"form": [{"id": 0, "text": "hello", "box": [0, 0, 5, 5], "label": "other",
                    "words": [{"text": "hello", "box": [0, 0, 5, 5]}], "linking": []}]}"#;
        let doc = parse_funsd_str(s, "inline")
            .unwrap()
            .to_document("d", None)
            .unwrap();
        assert!(doc.segments[0].links.is_empty());
        assert_eq!(doc.segments[0].label, "other");
    }

    #[test]
    fn parse_error_names_field() {
        let s = r#"{"form": [{"id": 0, "text": "x", "box": [0, 0, 5], "label": "other",
                    "words": [], "linking": []}]}"#;
        let err = parse_funsd_str(s, "bad.json").unwrap_err().to_string();
        assert!(err.contains("form[0].box"), "{err}");

        let s = r#"{"form": [{"id": 0, "text": "x", "box": [0, 0, 5, 5], "words": [], "linking": []}]}"#;
        let err = parse_funsd_str(s, "bad.json").unwrap_err().to_string();
        assert!(err.contains("`label`"), "{err}");

        let err = parse_funsd_str("{not json", "bad.json").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn inverted_box_is_a_validation_error_with_segment_id() {
        let s = r#"{"form": [{"id": 4, "text": "x", "box": [9, 0, 5, 5], "label": "other",
                    "words": [], "linking": []}]}"#;
        let err = parse_funsd_str(s, "inline")
            .unwrap()
            .to_document("d", None)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidSegment { segment_id: 4, .. }), "{err}");
    }

    #[test]
    fn integral_coordinates_are_written_as_integers() {
        let form = parse_funsd_str(TWO_SEGMENTS, "inline").unwrap();
        let text = form.to_json_string();
        assert!(text.contains("10,"), "{text}");
        assert!(!text.contains("10.0"), "{text}");
    }

    #[test]
    fn words_missing_fall_back_to_text_split() {
        let s = r#"{"form": [{"id": 0, "text": "ab cd", "box": [0, 0, 50, 10], "label": "other",
                    "words": [], "linking": []}]}"#;
        let doc = parse_funsd_str(s, "inline")
            .unwrap()
            .to_document("d", None)
            .unwrap();
        let toks: Vec<_> = doc.segments[0].tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(toks, vec!["ab", "cd"]);
    }
}
