use crate::error::{Error, Result};

pub const OUTSIDE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Begin,
    Inside,
    End,
    Single,
}

const KINDS: [TagKind; 4] = [TagKind::Begin, TagKind::Inside, TagKind::End, TagKind::Single];

/// A labelled token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub category: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    pub tags: Vec<usize>,
    pub spans: Vec<Span>,
}

/// BIOES tags over a fixed category list: id 0 is `O`, category `k` owns
/// ids `1 + 4k ..= 4 + 4k` in the order B, I, E, S.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagScheme {
    categories: Vec<String>,
}

impl TagScheme {
    pub fn new(categories: Vec<String>) -> Self {
        Self { categories }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn num_tags(&self) -> usize {
        4 * self.categories.len() + 1
    }

    pub fn tag(&self, category: usize, kind: TagKind) -> usize {
        1 + 4 * category + KINDS.iter().position(|&k| k == kind).expect("known kind")
    }

    /// `None` for `O`.
    pub fn split(&self, tag: usize) -> Option<(usize, TagKind)> {
        if tag == OUTSIDE || tag >= self.num_tags() {
            return None;
        }
        Some(((tag - 1) / 4, KINDS[(tag - 1) % 4]))
    }

    pub fn tag_name(&self, tag: usize) -> String {
        match self.split(tag) {
            None => "O".into(),
            Some((c, kind)) => {
                let prefix = match kind {
                    TagKind::Begin => "B",
                    TagKind::Inside => "I",
                    TagKind::End => "E",
                    TagKind::Single => "S",
                };
                format!("{prefix}-{}", self.categories[c])
            }
        }
    }

    /// Tags for a sequence of `len` tokens carrying non-overlapping spans.
    pub fn encode(&self, len: usize, spans: &[Span]) -> Result<Vec<usize>> {
        let mut tags = vec![OUTSIDE; len];
        for s in spans {
            if s.start >= s.end || s.end > len || s.category >= self.categories.len() {
                return Err(Error::InvalidInput(format!("span {s:?} invalid for length {len}")));
            }
            if tags[s.start..s.end].iter().any(|&t| t != OUTSIDE) {
                return Err(Error::InvalidInput(format!("span {s:?} overlaps another span")));
            }
            if s.end - s.start == 1 {
                tags[s.start] = self.tag(s.category, TagKind::Single);
            } else {
                tags[s.start] = self.tag(s.category, TagKind::Begin);
                for t in &mut tags[s.start + 1..s.end - 1] {
                    *t = self.tag(s.category, TagKind::Inside);
                }
                tags[s.end - 1] = self.tag(s.category, TagKind::End);
            }
        }
        Ok(tags)
    }

    /// Spans of a tag sequence. Well-formed `S` and `B I* E` groups decode
    /// exactly; any other stretch of same-category tags becomes one span
    /// that runs until the category changes, a new `B`/`S` starts, or an
    /// `E` closes it.
    pub fn decode(&self, tags: &[usize]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut t = 0;
        while t < tags.len() {
            let Some((cat, kind)) = self.split(tags[t]) else {
                t += 1;
                continue;
            };
            if kind == TagKind::Single {
                spans.push(Span { category: cat, start: t, end: t + 1 });
                t += 1;
                continue;
            }
            let mut end = t + 1;
            while end < tags.len() {
                match self.split(tags[end]) {
                    Some((c, TagKind::Inside)) if c == cat => end += 1,
                    Some((c, TagKind::End)) if c == cat => {
                        end += 1;
                        break;
                    }
                    _ => break,
                }
            }
            if kind == TagKind::End {
                end = t + 1;
            }
            spans.push(Span { category: cat, start: t, end });
            t = end;
        }
        spans
    }

    pub fn sequence(&self, tags: Vec<usize>) -> TagSequence {
        let spans = self.decode(&tags);
        TagSequence { tags, spans }
    }
}
