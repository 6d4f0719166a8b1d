//! Entity glyphs: disjoint-support binary patterns inside a position cell.
//!
//! Disjoint support is what makes composition exact: stamping two different
//! entities can never touch the same pixel, so rendering a multi-entity scene
//! equals the pixel-wise max of the single-entity renders.

/// Smallest glyph intensity; background noise must stay strictly below it so
/// presence is decidable from pixel values alone.
pub const MIN_INTENSITY: f64 = 0.55;

/// Per-entity stamp intensity, spread over [MIN_INTENSITY, 1].
pub fn intensity(e: usize, num_entities: usize) -> f32 {
    assert!(e < num_entities);
    if num_entities == 1 {
        return 1.0;
    }
    let t = e as f64 / (num_entities - 1) as f64;
    (MIN_INTENSITY + (1.0 - MIN_INTENSITY) * t) as f32
}

/// Cell-relative (row, col) pixels of entity `e`'s glyph. Each entity owns a
/// contiguous block of `cell_pixels / num_entities` pixels in row-major cell
/// order; blocks never overlap.
pub fn pattern(
    e: usize,
    num_entities: usize,
    cell_h: usize,
    cell_w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    assert!(e < num_entities);
    let per = (cell_h * cell_w) / num_entities;
    assert!(per >= 1, "cell too small for disjoint glyphs");
    (e * per..(e + 1) * per).map(move |i| (i / cell_w, i % cell_w))
}

/// Reads back the entity set of an image produced by the renderer: entity `e`
/// is present at position `p` iff every pixel of its glyph in that cell is at
/// least MIN_INTENSITY (noise is validated to stay below it). Returned pairs
/// are sorted by (position, entity).
pub fn detect(
    image: &[f32],
    image_w: usize,
    channels: usize,
    pos_grid_h: usize,
    pos_grid_w: usize,
    cell_h: usize,
    cell_w: usize,
    num_entities: usize,
) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for p in 0..pos_grid_h * pos_grid_w {
        let (pr, pc) = (p / pos_grid_w, p % pos_grid_w);
        for e in 0..num_entities {
            let lit = pattern(e, num_entities, cell_h, cell_w).all(|(r, c)| {
                let row = pr * cell_h + r;
                let col = pc * cell_w + c;
                image[(row * image_w + col) * channels] >= MIN_INTENSITY as f32
            });
            if lit {
                found.push((e, p));
            }
        }
    }
    found
}
