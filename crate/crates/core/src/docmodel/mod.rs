//! Documents, text segments and their annotations.
//!
//! A [`Document`] is a page of [`TextSegment`]s, each a line of [`Token`]s
//! with pixel boxes, a category label and directed key→value links.

mod funsd;
mod order;
mod render;
pub mod synth;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use funsd::{
    load_corpus_dir, load_funsd_document, parse_funsd_str, save_funsd_document, FunsdEntry,
    FunsdForm, FunsdWord,
};
pub use order::reading_order_sort;
pub use render::render_glyph_image;
pub use synth::{generate_split, generate_synthetic_corpus, CategorySpec, GenConfig};
pub use vocab::{normalize_token, Vocabulary, PAD_ID, UNK_ID};

/// Label carried by key segments in generated corpora.
pub const KEY_LABEL: &str = "key";
/// Label for segments that are not entities.
pub const OTHER_LABEL: &str = "other";

/// Axis-aligned box in page pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
}

/// Directed key→value link between two segment ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub key: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSegment {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<Token>,
    pub bbox: BBox,
    pub label: String,
    /// Links this segment participates in, as key or as value.
    pub links: Vec<Link>,
}

impl TextSegment {
    /// Builds a segment whose box is the union of its token boxes.
    pub fn from_tokens(id: usize, tokens: Vec<Token>, label: impl Into<String>) -> Self {
        let bbox = tokens
            .iter()
            .map(|t| t.bbox)
            .reduce(|a, b| a.union(&b))
            .unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        let text = tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            id,
            text,
            tokens,
            bbox,
            label: label.into(),
            links: Vec::new(),
        }
    }
}

/// Rasterized page, row-major `[channel][y][x]`, values in `[0, 1]`.
///
/// `scale` maps page pixels to image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scale: f64,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub segments: Vec<TextSegment>,
    pub page_size: (f64, f64),
    pub image: Option<PageImage>,
}

impl Document {
    pub fn num_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    /// Token index range of each segment in the flattened token order.
    pub fn token_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let span = (start, start + s.tokens.len());
                start = span.1;
                span
            })
            .collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.segments.iter().flat_map(|s| s.tokens.iter())
    }

    /// Every distinct link in the document, sorted.
    pub fn links(&self) -> Vec<Link> {
        let set: BTreeSet<Link> = self
            .segments
            .iter()
            .flat_map(|s| s.links.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    /// Re-derives each segment's link list from a document-level link set.
    pub fn set_links(&mut self, links: &[Link]) {
        for seg in &mut self.segments {
            seg.links.clear();
        }
        let mut sorted = links.to_vec();
        sorted.sort();
        sorted.dedup();
        for link in sorted {
            self.segments[link.key].links.push(link);
            if link.value != link.key {
                self.segments[link.value].links.push(link);
            }
        }
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        let (pw, ph) = self.page_size;
        if !(pw.is_finite() && ph.is_finite() && pw > 0.0 && ph > 0.0) {
            return Err(Error::InvalidInput(format!(
                "document {}: invalid page size {pw}x{ph}",
                self.id
            )));
        }
        let page = BBox::new(0.0, 0.0, pw, ph);
        let n = self.segments.len();
        for (idx, seg) in self.segments.iter().enumerate() {
            let bad = |reason: String| Error::InvalidSegment {
                segment_id: seg.id as i64,
                reason,
            };
            if seg.id != idx {
                return Err(bad(format!("id must equal position {idx}")));
            }
            if !seg.bbox.is_valid() {
                return Err(bad(format!("invalid box {:?}", seg.bbox)));
            }
            if !page.contains(&seg.bbox) {
                return Err(bad(format!("box {:?} outside page {pw}x{ph}", seg.bbox)));
            }
            for tok in &seg.tokens {
                if tok.text.is_empty() {
                    return Err(bad("empty token text".into()));
                }
                if !tok.bbox.is_valid() {
                    return Err(bad(format!("invalid token box {:?}", tok.bbox)));
                }
                if !seg.bbox.contains(&tok.bbox) {
                    return Err(bad(format!(
                        "token box {:?} outside segment box",
                        tok.bbox
                    )));
                }
            }
            for link in &seg.links {
                if link.key == link.value {
                    return Err(bad("self-link".into()));
                }
                if link.key >= n || link.value >= n {
                    return Err(bad(format!("link {link:?} points outside the document")));
                }
                if link.key != idx && link.value != idx {
                    return Err(bad(format!("link {link:?} does not involve this segment")));
                }
            }
        }
        Ok(())
    }
}

/// Realized statistics of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_train: usize,
    pub num_test: usize,
    pub num_categories: usize,
    /// Fraction of entity segments that are the value of a key→value link.
    pub kv_ratio: f64,
}

/// Number of entity segments (neither `other` nor `key`) and how many of
/// them are linked values.
pub fn entity_link_counts(docs: &[Document]) -> (usize, usize) {
    let mut entities = 0;
    let mut linked = 0;
    for doc in docs {
        for seg in &doc.segments {
            if seg.label == OTHER_LABEL || seg.label == KEY_LABEL {
                continue;
            }
            entities += 1;
            if seg.links.iter().any(|l| l.value == seg.id) {
                linked += 1;
            }
        }
    }
    (entities, linked)
}

pub fn corpus_stats(train: &[Document], test: &[Document]) -> CorpusStats {
    let all: Vec<Document> = train.iter().chain(test).cloned().collect();
    let (entities, linked) = entity_link_counts(&all);
    let categories: BTreeSet<&str> = all
        .iter()
        .flat_map(|d| d.segments.iter().map(|s| s.label.as_str()))
        .filter(|l| *l != OTHER_LABEL && *l != KEY_LABEL)
        .collect();
    CorpusStats {
        num_train: train.len(),
        num_test: test.len(),
        num_categories: categories.len(),
        kv_ratio: if entities == 0 {
            0.0
        } else {
            linked as f64 / entities as f64
        },
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn set_links_attaches_to_both_endpoints() {
        let mut doc = doc_from_boxes(&[("a", [0., 0., 10., 10.]), ("b", [20., 0., 30., 10.])]);
        doc.set_links(&[Link { key: 0, value: 1 }]);
        assert_eq!(doc.segments[0].links, vec![Link { key: 0, value: 1 }]);
        assert_eq!(doc.segments[1].links, vec![Link { key: 0, value: 1 }]);
        assert!(doc.validate().is_ok());
    }

    #[test]
    fn validate_rejects_box_outside_page() {
        let doc = doc_from_boxes(&[("a", [990., 0., 1010., 10.])]);
        assert!(matches!(
            doc.validate(),
            Err(Error::InvalidSegment { segment_id: 0, .. })
        ));
    }

    #[test]
    fn token_spans_partition() {
        let mut doc = doc_from_boxes(&[("a", [0., 0., 10., 10.]), ("b", [20., 0., 30., 10.])]);
        doc.segments[1]
            .tokens
            .push(token("c", 22., 1., 28., 9.));
        assert_eq!(doc.token_spans(), vec![(0, 1), (1, 3)]);
        assert_eq!(doc.num_tokens(), 3);
    }
}
