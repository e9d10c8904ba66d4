use super::{BBox, Document, PageImage};

/// Rasterizes a white page with one dark rectangle per character cell.
///
/// Each token box is split into equal character cells; the glyph occupies
/// the central 80% × 70% of its cell. Pixel intensity is `1 - coverage`.
/// `scale` converts page pixels to image pixels.
pub fn render_glyph_image(doc: &Document, scale: f64) -> PageImage {
    let (pw, ph) = doc.page_size;
    let width = ((pw * scale).ceil() as usize).max(1);
    let height = ((ph * scale).ceil() as usize).max(1);
    let mut coverage = vec![0.0; width * height];
    for tok in doc.tokens() {
        let chars = tok.text.chars().count().max(1);
        let cell_w = tok.bbox.width() / chars as f64;
        for c in 0..chars {
            let cx0 = tok.bbox.x0 + cell_w * c as f64;
            let glyph = BBox::new(
                cx0 + 0.1 * cell_w,
                tok.bbox.y0 + 0.15 * tok.bbox.height(),
                cx0 + 0.9 * cell_w,
                tok.bbox.y1 - 0.15 * tok.bbox.height(),
            );
            paint(&mut coverage, width, height, &glyph, scale);
        }
    }
    PageImage {
        channels: 1,
        height,
        width,
        scale,
        data: coverage.into_iter().map(|c| 1.0 - c.min(1.0)).collect(),
    }
}

fn paint(coverage: &mut [f64], width: usize, height: usize, b: &BBox, scale: f64) {
    let (x0, y0, x1, y1) = (b.x0 * scale, b.y0 * scale, b.x1 * scale, b.y1 * scale);
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = (x1.ceil() as usize).min(width);
    let py1 = (y1.ceil() as usize).min(height);
    for py in py0..py1 {
        let oy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
        for px in px0..px1 {
            let ox = (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
            coverage[py * width + px] += ox * oy;
        }
    }
}
