use super::{Document, Link};

/// Reorders segments top-to-bottom, left-to-right and renumbers them.
///
/// Segments are grouped into row bands: sorted by vertical centre, a
/// segment joins the current band when its centre lies within half the
/// median segment height of the band's first member. Bands are emitted top
/// to bottom, each sorted by `x0`. Links are remapped to the new ids.
pub fn reading_order_sort(doc: &Document) -> Document {
    let n = doc.segments.len();
    if n == 0 {
        return doc.clone();
    }
    let mut heights: Vec<f64> = doc.segments.iter().map(|s| s.bbox.height()).collect();
    heights.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        heights[n / 2]
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) / 2.0
    };
    let tolerance = 0.5 * median;

    let cy = |i: usize| doc.segments[i].bbox.center().1;
    let x0 = |i: usize| doc.segments[i].bbox.x0;
    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| {
        cy(a)
            .total_cmp(&cy(b))
            .then(x0(a).total_cmp(&x0(b)))
            .then(a.cmp(&b))
    });

    let mut order = Vec::with_capacity(n);
    let mut band: Vec<usize> = Vec::new();
    let mut anchor = f64::NEG_INFINITY;
    let flush = |band: &mut Vec<usize>, order: &mut Vec<usize>| {
        band.sort_by(|&a, &b| {
            x0(a)
                .total_cmp(&x0(b))
                .then(cy(a).total_cmp(&cy(b)))
                .then(a.cmp(&b))
        });
        order.append(band);
    };
    for idx in by_y {
        if band.is_empty() || cy(idx) - anchor > tolerance {
            flush(&mut band, &mut order);
            anchor = cy(idx);
        }
        band.push(idx);
    }
    flush(&mut band, &mut order);

    let mut new_id = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        new_id[old] = new;
    }
    let mut segments: Vec<_> = order
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let mut seg = doc.segments[old].clone();
            seg.id = new;
            seg
        })
        .collect();
    for seg in &mut segments {
        for link in &mut seg.links {
            *link = Link {
                key: new_id[link.key],
                value: new_id[link.value],
            };
        }
        seg.links.sort();
    }
    Document {
        id: doc.id.clone(),
        segments,
        page_size: doc.page_size,
        image: doc.image.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::doc_from_boxes;
    use super::*;
    use proptest::prelude::*;

    fn texts(doc: &Document) -> Vec<String> {
        doc.segments.iter().map(|s| s.text.clone()).collect()
    }

    #[test]
    fn stacked_segments_top_first() {
        let doc = doc_from_boxes(&[("low", [10., 100., 50., 120.]), ("top", [10., 10., 50., 30.])]);
        assert_eq!(texts(&reading_order_sort(&doc)), vec!["top", "low"]);
    }

    #[test]
    fn same_row_left_first() {
        let doc = doc_from_boxes(&[("right", [200., 10., 250., 30.]), ("left", [10., 12., 50., 32.])]);
        assert_eq!(texts(&reading_order_sort(&doc)), vec!["left", "right"]);
    }

    #[test]
    fn grid_is_row_major() {
        // shuffled 3x3 grid with small vertical jitter inside each row
        let mut cells = Vec::new();
        for (r, c) in [(2, 1), (0, 2), (1, 0), (0, 0), (2, 2), (1, 2), (0, 1), (2, 0), (1, 1)] {
            let x = 10.0 + 100.0 * c as f64;
            let y = 10.0 + 50.0 * r as f64 + c as f64 * 2.0;
            cells.push((format!("r{r}c{c}"), [x, y, x + 60.0, y + 20.0]));
        }
        let boxes: Vec<(&str, [f64; 4])> = cells.iter().map(|(t, b)| (t.as_str(), *b)).collect();
        let doc = doc_from_boxes(&boxes);
        let expected: Vec<String> = (0..3)
            .flat_map(|r| (0..3).map(move |c| format!("r{r}c{c}")))
            .collect();
        assert_eq!(texts(&reading_order_sort(&doc)), expected);
    }

    #[test]
    fn links_follow_segments() {
        let mut doc = doc_from_boxes(&[("value", [200., 10., 250., 30.]), ("key", [10., 10., 50., 30.])]);
        doc.set_links(&[Link { key: 1, value: 0 }]);
        let sorted = reading_order_sort(&doc);
        assert_eq!(sorted.links(), vec![Link { key: 0, value: 1 }]);
        assert_eq!(sorted.segments[0].text, "key");
        sorted.validate().unwrap();
    }

    #[test]
    fn empty_document_passes_through() {
        let doc = doc_from_boxes(&[]);
        assert!(reading_order_sort(&doc).segments.is_empty());
    }

    proptest! {
        #[test]
        fn idempotent_permutation(
            raw in proptest::collection::vec((0.0f64..800.0, 0.0f64..800.0, 5.0f64..120.0, 8.0f64..30.0), 1..12),
            link_seed in 0usize..1000,
        ) {
            let named: Vec<(String, [f64; 4])> = raw
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| (format!("s{i}"), [x, y, x + w, y + h]))
                .collect();
            let boxes: Vec<(&str, [f64; 4])> = named.iter().map(|(t, b)| (t.as_str(), *b)).collect();
            let mut doc = doc_from_boxes(&boxes);
            let n = doc.segments.len();
            if n > 1 {
                let key = link_seed % n;
                let value = (key + 1 + link_seed / n % (n - 1)) % n;
                doc.set_links(&[Link { key, value }]);
            }
            let once = reading_order_sort(&doc);
            let twice = reading_order_sort(&once);
            prop_assert_eq!(&once, &twice);

            let mut before = texts(&doc);
            let mut after = texts(&once);
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);

            // link structure isomorphic: same pairs of texts
            let named_links = |d: &Document| {
                let mut v: Vec<(String, String)> = d
                    .links()
                    .iter()
                    .map(|l| (d.segments[l.key].text.clone(), d.segments[l.value].text.clone()))
                    .collect();
                v.sort();
                v
            };
            prop_assert_eq!(named_links(&doc), named_links(&once));
        }
    }
}
