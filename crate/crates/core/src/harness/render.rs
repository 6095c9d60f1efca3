//! Colour renderings of predicted and ground-truth masks as binary PPM files.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::model::{hard_assignment, ModelOutput};
use crate::synthscene::Sample;

/// Pixels per patch side in rendered images.
pub const CELL: usize = 8;

/// Colour of label `i`. Label 0 of ground truth is the background.
pub fn palette(i: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 12] = [
        [40, 40, 40],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
    ];
    if i < BASE.len() {
        return BASE[i];
    }
    // Beyond the table: a fixed hash, still deterministic.
    let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [
        (h >> 16) as u8 | 0x40,
        (h >> 32) as u8 | 0x40,
        (h >> 48) as u8 | 0x40,
    ]
}

/// Encodes a `side × side` label image as P6, each patch a `CELL` square.
pub fn ppm(side: usize, labels: &[usize], comments: &[String]) -> Vec<u8> {
    let px = side * CELL;
    let mut out = b"P6\n".to_vec();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{px} {px}\n255\n").as_bytes());
    for y in 0..px {
        for x in 0..px {
            out.extend_from_slice(&palette(labels[(y / CELL) * side + x / CELL]));
        }
    }
    out
}

/// Predicted label per patch (slot index) and ground truth per patch
/// (0 = background, object `j` = `j + 1`).
pub fn label_images(out: &ModelOutput, sample: &Sample) -> (Vec<usize>, Vec<usize>) {
    let pred = hard_assignment(&out.masks);
    let gt = sample
        .scene
        .labels()
        .iter()
        .map(|l| l.map_or(0, |j| j + 1))
        .collect();
    (pred, gt)
}

/// Writes `scene_{i:04}_pred.ppm` and `scene_{i:04}_gt.ppm`. Conditioned
/// slots are listed in comment lines of the prediction with the category of
/// their query.
pub fn render_scene(
    dir: &Path,
    index: usize,
    out: &ModelOutput,
    sample: &Sample,
) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let side = sample.scene.side;
    let (pred, gt) = label_images(out, sample);
    let mut notes = Vec::new();
    for (slot, q) in sample
        .queries
        .queries
        .iter()
        .take(out.slots.conditioned_count)
        .enumerate()
    {
        let cat = sample.scene.objects[q.object].category;
        notes.push(format!(
            "slot {slot} query category {cat} object {}",
            q.object
        ));
    }
    let gt_notes: Vec<String> = sample
        .scene
        .objects
        .iter()
        .enumerate()
        .map(|(j, o)| format!("label {} object {j} category {}", j + 1, o.category))
        .collect();
    let p = dir.join(format!("scene_{index:04}_pred.ppm"));
    let g = dir.join(format!("scene_{index:04}_gt.ppm"));
    std::fs::write(&p, ppm(side, &pred, &notes))?;
    std::fs::write(&g, ppm(side, &gt, &gt_notes))?;
    Ok([p, g])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let img = ppm(2, &[0, 1, 2, 3], &["slot 0 query category 4".into()]);
        let header = b"P6\n# slot 0 query category 4\n16 16\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 16 * 16 * 3);
        // top-left pixel label 0, top-right label 1
        assert_eq!(&img[header.len()..header.len() + 3], &palette(0));
        let row_right = header.len() + (CELL) * 3;
        assert_eq!(&img[row_right..row_right + 3], &palette(1));
    }

    #[test]
    fn palette_is_distinct_for_small_labels() {
        let colours: std::collections::HashSet<_> = (0..12).map(palette).collect();
        assert_eq!(colours.len(), 12);
        assert_eq!(palette(40), palette(40));
    }
}
