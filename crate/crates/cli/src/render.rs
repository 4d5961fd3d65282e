//! Visualizations of label maps over RGB images.

use spformer::netpbm::RgbImage;

pub const HIGHLIGHT: [u8; 3] = [255, 0, 0];

/// Nearest-neighbor upsampling of a `h×w` label map to `height×width`.
pub fn upsample_labels(labels: &[u32], h: usize, w: usize, height: usize, width: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = y * h / height;
        for x in 0..width {
            out.push(labels[sy * w + x * w / width]);
        }
    }
    out
}

/// Marks every pixel whose label differs from its right or lower neighbor.
pub fn boundary_overlay(image: &RgbImage, labels: &[u32]) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let right = x + 1 < w && labels[y * w + x + 1] != l;
            let below = y + 1 < h && labels[(y + 1) * w + x] != l;
            if right || below {
                out.set_pixel(x, y, HIGHLIGHT);
            }
        }
    }
    out
}

/// Replaces every pixel by the mean color of its segment.
pub fn region_mean(image: &RgbImage, labels: &[u32]) -> RgbImage {
    let segments = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut sums = vec![[0u64; 3]; segments];
    let mut counts = vec![0u64; segments];
    for (i, &l) in labels.iter().enumerate() {
        let p = image.pixel(i % image.width, i / image.width);
        for c in 0..3 {
            sums[l as usize][c] += p[c] as u64;
        }
        counts[l as usize] += 1;
    }
    let mut out = image.clone();
    for (i, &l) in labels.iter().enumerate() {
        let (s, n) = (sums[l as usize], counts[l as usize]);
        // round half up in integer arithmetic
        let mean = s.map(|v| ((2 * v + n) / (2 * n)) as u8);
        out.set_pixel(i % image.width, i / image.width, mean);
    }
    out
}
