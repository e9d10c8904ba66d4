//! Synthetic key-value forms with FUNSD-style annotations.
//!
//! Each page carries keyed values (a key segment linked to a value
//! segment), standalone values whose category is evident from their own
//! text, and `other` segments: a title, a footer and an item table whose
//! numbers share their surface form with keyed amounts and ids. Values of
//! several categories look alike (amounts, dates, ids), so only the key
//! tells them apart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reading_order_sort, BBox, Document, Link, TextSegment, Token, KEY_LABEL, OTHER_LABEL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Amount,
    Date,
    Company,
    Email,
    Ident,
    Phone,
    Address,
    PersonName,
}

/// A value category: its key phrases and the shape of its values.
#[derive(Debug, Clone, Copy)]
pub struct CategorySpec {
    pub name: &'static str,
    pub keys: &'static [&'static str],
    pub kind: ValueKind,
    /// Values are recognizable without a key.
    pub self_identifying: bool,
}

/// Configured categories are a prefix of this list.
pub const CATEGORY_POOL: &[CategorySpec] = &[
    CategorySpec {
        name: "total",
        keys: &["Total", "Total Amount", "Total (RM)", "Total Sales", "Grand Total"],
        kind: ValueKind::Amount,
        self_identifying: false,
    },
    CategorySpec {
        name: "company",
        keys: &["Company", "Vendor", "Supplier"],
        kind: ValueKind::Company,
        self_identifying: true,
    },
    CategorySpec {
        name: "date",
        keys: &["Date", "Invoice Date", "Date Issued"],
        kind: ValueKind::Date,
        self_identifying: false,
    },
    CategorySpec {
        name: "tax",
        keys: &["Tax", "GST", "SST 6%", "Service Tax", "Tax Amount"],
        kind: ValueKind::Amount,
        self_identifying: false,
    },
    CategorySpec {
        name: "email",
        keys: &["Email", "E-mail"],
        kind: ValueKind::Email,
        self_identifying: true,
    },
    CategorySpec {
        name: "invoice_no",
        keys: &["Invoice No", "Invoice #", "Receipt No", "Bill No"],
        kind: ValueKind::Ident,
        self_identifying: false,
    },
    CategorySpec {
        name: "due_date",
        keys: &["Due Date", "Payment Due", "Pay By"],
        kind: ValueKind::Date,
        self_identifying: false,
    },
    CategorySpec {
        name: "phone",
        keys: &["Tel", "Phone", "Contact No"],
        kind: ValueKind::Phone,
        self_identifying: true,
    },
    CategorySpec {
        name: "subtotal",
        keys: &["Subtotal", "Sub Total", "Net Amount"],
        kind: ValueKind::Amount,
        self_identifying: false,
    },
    CategorySpec {
        name: "account_no",
        keys: &["Account No", "Customer ID", "Member No"],
        kind: ValueKind::Ident,
        self_identifying: false,
    },
    CategorySpec {
        name: "address",
        keys: &["Address", "Ship To"],
        kind: ValueKind::Address,
        self_identifying: true,
    },
    CategorySpec {
        name: "cashier",
        keys: &["Cashier", "Served By", "Attendant"],
        kind: ValueKind::PersonName,
        self_identifying: true,
    },
];

const TITLES: &[&str] = &["INVOICE", "TAX INVOICE", "RECEIPT", "CASH BILL", "STATEMENT"];
const FOOTERS: &[&str] = &[
    "Thank you",
    "Please come again",
    "Goods sold are not returnable",
    "Thank you for your business",
];
const ITEMS: &[&str] = &[
    "Paper A4", "Ink Cartridge", "Stapler", "Coffee", "Bread Loaf", "Cable 2m", "Notebook",
    "Marker Pen", "Rice 5kg", "Sugar", "Envelope", "Battery AA",
];
const NAME_A: &[&str] = &[
    "Golden", "Sunrise", "Pacific", "Mega", "Prime", "Eastern", "United", "Royal", "Green",
    "Silver",
];
const NAME_B: &[&str] = &[
    "Trading", "Hardware", "Bakery", "Stationery", "Enterprise", "Holdings", "Mart", "Motors",
];
const COMPANY_SUFFIX: &[&str] = &["Sdn Bhd", "Ltd", "Inc", "Bhd"];
const FIRST: &[&str] = &["Ahmad", "Mei", "John", "Siti", "Raj", "Wei", "Anna", "Kumar"];
const LAST: &[&str] = &["Tan", "Lim", "Smith", "Abdullah", "Wong", "Lee", "Singh", "Ng"];
const MAIL_USER: &[&str] = &["sales", "info", "admin", "billing", "accounts", "hello"];
const MAIL_DOMAIN: &[&str] = &["gmail", "yahoo", "shop", "mail"];
const STREETS: &[&str] = &["Bukit", "Ampang", "Merdeka", "Raja", "Sultan", "Pudu"];
const CITIES: &[&str] = &["Kuala Lumpur", "Penang", "Ipoh", "Johor Bahru", "Melaka"];
const MONTHS: &[&str] = &[
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    /// Training documents.
    pub num_docs: usize,
    /// Held-out documents, generated after the training ones.
    pub num_test_docs: usize,
    pub num_categories: usize,
    /// Target fraction of entity segments that are keyed values.
    pub kv_ratio: f64,
    pub page_width: f64,
    pub page_height: f64,
    /// Numeric `other` segments (item codes and prices) per page.
    pub distractors_per_doc: usize,
    pub min_entities: usize,
    pub max_entities: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_docs: 300,
            num_test_docs: 100,
            num_categories: 8,
            kv_ratio: 0.75,
            page_width: 1000.0,
            page_height: 1300.0,
            distractors_per_doc: 4,
            min_entities: 5,
            max_entities: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kv_ratio) || !self.kv_ratio.is_finite() {
            return Err(Error::config(
                "generator.kv_ratio",
                format!("must lie in [0, 1], got {}", self.kv_ratio),
            ));
        }
        if self.num_categories == 0 || self.num_categories > CATEGORY_POOL.len() {
            return Err(Error::config(
                "generator.num_categories",
                format!("must lie in 1..={}", CATEGORY_POOL.len()),
            ));
        }
        if self.kv_ratio < 1.0 && !self.categories().iter().any(|c| c.self_identifying) {
            return Err(Error::config(
                "generator.num_categories",
                "standalone values need at least one self-identifying category",
            ));
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return Err(Error::config(
                "generator.min_entities",
                "need 1 <= min_entities <= max_entities",
            ));
        }
        if self.page_width < 400.0 || self.page_height < 600.0 {
            return Err(Error::config("generator.page_width", "page must be at least 400x600"));
        }
        Ok(())
    }

    pub fn categories(&self) -> &'static [CategorySpec] {
        &CATEGORY_POOL[..self.num_categories.min(CATEGORY_POOL.len())]
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories().iter().map(|c| c.name.to_string()).collect()
    }
}

/// Generates `config.num_docs` documents. Document `i` depends only on
/// `(config, seed, i)`.
pub fn generate_synthetic_corpus(config: &GenConfig, seed: u64) -> Result<Vec<Document>> {
    config.validate()?;
    (0..config.num_docs)
        .map(|i| generate_document(config, seed, i))
        .collect()
}

/// Training and held-out documents from `config.seed`; held-out documents
/// continue the index sequence after the training ones.
pub fn generate_split(config: &GenConfig) -> Result<(Vec<Document>, Vec<Document>)> {
    config.validate()?;
    let train = (0..config.num_docs)
        .map(|i| generate_document(config, config.seed, i))
        .collect::<Result<Vec<_>>>()?;
    let test = (config.num_docs..config.num_docs + config.num_test_docs)
        .map(|i| generate_document(config, config.seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

pub fn generate_document(config: &GenConfig, seed: u64, index: usize) -> Result<Document> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let plan = plan_content(config, &mut rng);
    let doc = layout(config, &plan, &mut rng, format!("synth_{seed}_{index:05}"));
    let doc = reading_order_sort(&doc);
    doc.validate()?;
    Ok(doc)
}

/// Semantic content of one page before layout.
enum Unit {
    Title(String),
    Footer(String),
    Pair {
        key: String,
        value: String,
        category: &'static str,
        stacked: bool,
    },
    Standalone {
        value: String,
        category: &'static str,
    },
    Table {
        rows: Vec<Vec<String>>,
    },
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn amount<R: Rng>(rng: &mut R) -> String {
    let cents = rng.gen_range(0..100);
    if rng.gen_bool(0.2) {
        let thousands = rng.gen_range(1..10);
        format!("{thousands},{:03}.{cents:02}", rng.gen_range(0..1000))
    } else {
        format!("{}.{cents:02}", rng.gen_range(1..1000))
    }
}

fn value_text<R: Rng>(rng: &mut R, kind: ValueKind) -> String {
    match kind {
        ValueKind::Amount => {
            let a = amount(rng);
            if rng.gen_bool(0.3) {
                format!("RM {a}")
            } else {
                a
            }
        }
        ValueKind::Date => {
            let (d, m, y) = (rng.gen_range(1..29), rng.gen_range(1..13), rng.gen_range(2015..2025));
            match rng.gen_range(0..4) {
                0 => format!("{d:02}/{m:02}/{y}"),
                1 => format!("{d:02}-{m:02}-{y}"),
                2 => format!("{y}-{m:02}-{d:02}"),
                _ => format!("{d} {} {y}", MONTHS[m - 1]),
            }
        }
        ValueKind::Company => format!(
            "{} {} {}",
            pick(rng, NAME_A),
            pick(rng, NAME_B),
            pick(rng, COMPANY_SUFFIX)
        ),
        ValueKind::Email => format!("{}@{}.com", pick(rng, MAIL_USER), pick(rng, MAIL_DOMAIN)),
        ValueKind::Ident => {
            let len = rng.gen_range(6..9);
            (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
        }
        ValueKind::Phone => format!(
            "0{}-{:03} {:04}",
            rng.gen_range(1..10),
            rng.gen_range(0..1000),
            rng.gen_range(0..10000)
        ),
        ValueKind::Address => format!(
            "{} Jalan {}, {}",
            rng.gen_range(1..200),
            pick(rng, STREETS),
            pick(rng, CITIES)
        ),
        ValueKind::PersonName => format!("{} {}", pick(rng, FIRST), pick(rng, LAST)),
    }
}

fn plan_content<R: Rng>(config: &GenConfig, rng: &mut R) -> Vec<Unit> {
    let categories = config.categories();
    let entities = rng.gen_range(config.min_entities..=config.max_entities);
    let exact = entities as f64 * config.kv_ratio;
    let mut keyed = exact.floor() as usize;
    if rng.gen_bool(exact - exact.floor()) {
        keyed += 1;
    }
    let keyed = keyed.min(categories.len()).min(entities);

    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.shuffle(rng);
    let mut units = Vec::new();
    for &c in &order[..keyed] {
        let spec = &categories[c];
        let mut key = pick(rng, spec.keys).to_string();
        if rng.gen_bool(0.5) {
            key.push(':');
        }
        units.push(Unit::Pair {
            key,
            value: value_text(rng, spec.kind),
            category: spec.name,
            stacked: rng.gen_bool(0.35),
        });
    }
    let standalone_pool: Vec<&CategorySpec> =
        categories.iter().filter(|c| c.self_identifying).collect();
    for _ in keyed..entities {
        let spec = standalone_pool[rng.gen_range(0..standalone_pool.len())];
        units.push(Unit::Standalone {
            value: value_text(rng, spec.kind),
            category: spec.name,
        });
    }

    let mut rows = Vec::new();
    let mut remaining = config.distractors_per_doc;
    while remaining > 0 {
        let mut row = vec![pick(rng, ITEMS).to_string()];
        if remaining >= 2 {
            row.push(value_text(rng, ValueKind::Ident));
            remaining -= 1;
        }
        row.push(format!("{}", rng.gen_range(1..20)));
        row.push(amount(rng));
        remaining -= 1;
        rows.push(row);
    }
    if !rows.is_empty() {
        let pos = rng.gen_range(0..=units.len());
        units.insert(pos, Unit::Table { rows });
    }
    units.shuffle(rng);
    units.insert(0, Unit::Title(pick(rng, TITLES).to_string()));
    units.push(Unit::Footer(pick(rng, FOOTERS).to_string()));
    units
}

/// Placed segment before id assignment.
struct Placed {
    text: String,
    x: f64,
    y: f64,
    label: String,
}

/// Relative geometry of a unit: its segments (offsets from the unit
/// origin), optional link between segment indices, and extent.
struct Shape {
    parts: Vec<Placed>,
    link: Option<(usize, usize)>,
    width: f64,
    height: f64,
    full_width: bool,
}

struct Metrics {
    line_h: f64,
    char_w: f64,
}

impl Metrics {
    fn text_width(&self, text: &str) -> f64 {
        text.chars().count() as f64 * self.char_w
    }
}

fn shape_unit<R: Rng>(unit: &Unit, m: &Metrics, page_w: f64, rng: &mut R) -> Shape {
    let part = |text: &str, x: f64, y: f64, label: &str| Placed {
        text: text.to_string(),
        x,
        y,
        label: label.to_string(),
    };
    match unit {
        Unit::Title(t) | Unit::Footer(t) => Shape {
            parts: vec![part(t, 0.0, 0.0, OTHER_LABEL)],
            link: None,
            width: m.text_width(t),
            height: m.line_h,
            full_width: true,
        },
        Unit::Standalone { value, category } => Shape {
            parts: vec![part(value, 0.0, 0.0, category)],
            link: None,
            width: m.text_width(value),
            height: m.line_h,
            full_width: false,
        },
        Unit::Pair {
            key,
            value,
            category,
            stacked,
        } => {
            let kw = m.text_width(key);
            let vw = m.text_width(value);
            if *stacked {
                let dx = rng.gen_range(0.0..2.0) * m.char_w;
                let dy = m.line_h * rng.gen_range(1.3..1.7);
                Shape {
                    parts: vec![part(key, 0.0, 0.0, KEY_LABEL), part(value, dx, dy, category)],
                    link: Some((0, 1)),
                    width: kw.max(dx + vw),
                    height: dy + m.line_h,
                    full_width: false,
                }
            } else {
                let gap = rng.gen_range(1.0..4.0) * m.char_w;
                Shape {
                    parts: vec![
                        part(key, 0.0, 0.0, KEY_LABEL),
                        part(value, kw + gap, rng.gen_range(-1.5..1.5), category),
                    ],
                    link: Some((0, 1)),
                    width: kw + gap + vw,
                    height: m.line_h,
                    full_width: false,
                }
            }
        }
        Unit::Table { rows } => {
            let usable = page_w * 0.75;
            let mut parts = vec![
                part("Description", 0.0, 0.0, OTHER_LABEL),
                part("Qty", usable * 0.6, 0.0, OTHER_LABEL),
                part("Amount", usable * 0.85, 0.0, OTHER_LABEL),
            ];
            let row_h = m.line_h * 1.5;
            for (r, row) in rows.iter().enumerate() {
                let y = row_h * (r + 1) as f64;
                let n = row.len();
                parts.push(part(&row[0], 0.0, y, OTHER_LABEL));
                if n == 4 {
                    parts.push(part(&row[1], usable * 0.35, y, OTHER_LABEL));
                }
                parts.push(part(&row[n - 2], usable * 0.6, y, OTHER_LABEL));
                parts.push(part(&row[n - 1], usable * 0.85, y, OTHER_LABEL));
            }
            Shape {
                parts,
                link: None,
                width: usable,
                height: row_h * rows.len() as f64 + m.line_h,
                full_width: true,
            }
        }
    }
}

fn layout<R: Rng>(config: &GenConfig, units: &[Unit], rng: &mut R, id: String) -> Document {
    let (pw, ph) = (config.page_width, config.page_height);
    let mut line_h = rng.gen_range(14.0..22.0);
    loop {
        let m = Metrics {
            line_h,
            char_w: line_h * 0.55,
        };
        if let Some(doc) = try_layout(units, &m, pw, ph, rng, &id) {
            return doc;
        }
        line_h *= 0.85;
    }
}

fn try_layout<R: Rng>(
    units: &[Unit],
    m: &Metrics,
    pw: f64,
    ph: f64,
    rng: &mut R,
    id: &str,
) -> Option<Document> {
    let margin = 0.05 * pw;
    let right_col = pw * 0.5 + rng.gen_range(0.0..0.04) * pw;
    let mut y = rng.gen_range(0.03..0.06) * ph;
    let mut placed: Vec<Placed> = Vec::new();
    let mut links: Vec<(usize, usize)> = Vec::new();

    let mut place = |shape: Shape, ox: f64, oy: f64, placed: &mut Vec<Placed>| {
        let base = placed.len();
        if let Some((k, v)) = shape.link {
            links.push((base + k, base + v));
        }
        for p in shape.parts {
            placed.push(Placed {
                x: ox + p.x,
                y: oy + p.y,
                ..p
            });
        }
    };

    let shapes: Vec<Shape> = units.iter().map(|u| shape_unit(u, m, pw, rng)).collect();
    let mut iter = shapes.into_iter().peekable();
    while let Some(shape) = iter.next() {
        let left_x = margin + rng.gen_range(0.0..0.03) * pw;
        if shape.full_width {
            let x = if shape.width < pw * 0.4 {
                rng.gen_range(margin..(pw - margin - shape.width).max(margin + 1.0))
            } else {
                left_x
            };
            let h = shape.height;
            place(shape, x, y, &mut placed);
            y += h + m.line_h * rng.gen_range(0.8..1.4);
            continue;
        }
        let mut row_h = shape.height;
        let fits_left = left_x + shape.width < right_col - m.char_w;
        place(shape, left_x, y, &mut placed);
        let pair_up = fits_left
            && rng.gen_bool(0.5)
            && iter
                .peek()
                .is_some_and(|next| !next.full_width && right_col + next.width < pw - margin);
        if pair_up {
            let next = iter.next().expect("peeked");
            row_h = row_h.max(next.height);
            place(next, right_col, y, &mut placed);
        }
        y += row_h + m.line_h * rng.gen_range(0.8..1.4);
    }
    if y > ph - 0.03 * ph {
        return None;
    }

    let segments: Vec<TextSegment> = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut x = p.x;
            let tokens = p
                .text
                .split_whitespace()
                .map(|w| {
                    let width = m.text_width(w);
                    let b = BBox::new(
                        x.round(),
                        p.y.round(),
                        (x + width).round().max(x.round() + 1.0),
                        (p.y + m.line_h).round(),
                    );
                    x += width + m.char_w;
                    Token {
                        text: w.to_string(),
                        bbox: b,
                    }
                })
                .collect();
            TextSegment::from_tokens(i, tokens, p.label.clone())
        })
        .collect();
    if segments.iter().any(|s| s.bbox.x1 > pw || s.bbox.y1 > ph || s.bbox.x0 < 0.0) {
        return None;
    }
    let mut doc = Document {
        id: id.to_string(),
        segments,
        page_size: (pw, ph),
        image: None,
    };
    let links: Vec<Link> = links
        .into_iter()
        .map(|(key, value)| Link { key, value })
        .collect();
    doc.set_links(&links);
    Some(doc)
}
