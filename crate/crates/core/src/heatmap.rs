// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-score heatmaps as plain-text graymaps (PGM `P2`).

/// Grid `(rows, cols)` for `n` patches: square when `n` is a perfect
/// square, a single row otherwise.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let r = (n as f64).sqrt().round() as usize;
    if r * r == n {
        (r, r)
    } else {
        (1, n)
    }
}

/// Gray levels `0..=255`, scaled so the largest score is white. Negative
/// scores map to 0; if no score is positive every pixel is 0.
pub fn gray_levels(scores: &[f64]) -> Vec<u8> {
    let max = scores.iter().copied().fold(0.0, f64::max);
    scores
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (255.0 * v.max(0.0) / max).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Render patch scores (row-major over the grid) as a `P2` graymap.
pub fn to_pgm(scores: &[f64]) -> String {
    let (rows, cols) = grid_dims(scores.len());
    let levels = gray_levels(scores);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in levels.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
