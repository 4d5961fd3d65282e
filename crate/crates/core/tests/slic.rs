use std::collections::{BTreeMap, BTreeSet};

use spformer::slic::{image_to_lab, slic_segment, srgb_to_lab, SlicParams};
use spformer::tensor::Tensor;
use spformer::training::synth_generate;

fn rgb_image(h: usize, w: usize, color: impl Fn(usize, usize) -> [f32; 3]) -> Tensor<f32> {
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = color(y, x);
            for k in 0..3 {
                data[k * h * w + y * w + x] = c[k];
            }
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

fn params(segments: usize, compactness: f64) -> SlicParams {
    SlicParams {
        segments,
        compactness,
        iterations: 10,
    }
}

/// Flood fill from scratch: every label must form one 4-connected region.
fn is_four_connected(labels: &[u32], h: usize, w: usize) -> bool {
    let mut seen = vec![false; h * w];
    let mut regions: BTreeMap<u32, usize> = BTreeMap::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        *regions.entry(labels[start]).or_default() += 1;
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(i) = queue.pop() {
            let (y, x) = (i / w, i % w);
            let mut next = Vec::new();
            if y > 0 {
                next.push(i - w);
            }
            if y + 1 < h {
                next.push(i + w);
            }
            if x > 0 {
                next.push(i - 1);
            }
            if x + 1 < w {
                next.push(i + 1);
            }
            for j in next {
                if !seen[j] && labels[j] == labels[start] {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
    }
    regions.values().all(|&n| n == 1)
}

#[test]
fn lab_conversion_matches_reference_values() {
    let close = |a: [f64; 3], b: [f64; 3]| (0..3).all(|k| (a[k] - b[k]).abs() < 0.05);
    assert!(close(srgb_to_lab([1.0, 1.0, 1.0]), [100.0, 0.0, 0.0]));
    assert!(close(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]));
    assert!(close(srgb_to_lab([1.0, 0.0, 0.0]), [53.24, 80.09, 67.20]));
    assert!(close(srgb_to_lab([0.0, 0.0, 1.0]), [32.30, 79.19, -107.86]));
}

/// Minimum of the joint color+position 2-means cost over every bipartition
/// of a 4×4 image, returned as a label per pixel (pixel 0 in group 0).
fn exhaustive_two_means(lab: &Tensor<f32>, spatial: f64) -> Vec<u32> {
    let n = 16;
    let feature = |i: usize| -> [f64; 5] {
        let v = |k: usize| lab.data()[k * n + i] as f64;
        let s = spatial.sqrt();
        [v(0), v(1), v(2), s * (i / 4) as f64, s * (i % 4) as f64]
    };
    let feats: Vec<[f64; 5]> = (0..n).map(feature).collect();
    let mut best = (f64::INFINITY, 0u32);
    for mask in 0u32..(1 << (n - 1)) {
        let group = |i: usize| i > 0 && (mask >> (i - 1)) & 1 == 1;
        let mut cost = 0.0;
        for side in [false, true] {
            let members: Vec<&[f64; 5]> = (0..n).filter(|&i| group(i) == side).map(|i| &feats[i]).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let mean: Vec<f64> = (0..5).map(|k| members.iter().map(|f| f[k]).sum::<f64>() / m).collect();
            cost += members
                .iter()
                .map(|f| (0..5).map(|k| (f[k] - mean[k]).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        if cost < best.0 {
            best = (cost, mask);
        }
    }
    (0..n).map(|i| (i > 0 && (best.1 >> (i - 1)) & 1 == 1) as u32).collect()
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let pairs: BTreeSet<(u32, u32)> = a.iter().copied().zip(b.iter().copied()).collect();
    let left: BTreeSet<u32> = pairs.iter().map(|p| p.0).collect();
    let right: BTreeSet<u32> = pairs.iter().map(|p| p.1).collect();
    pairs.len() == left.len() && pairs.len() == right.len()
}

#[test]
fn two_color_image_splits_at_the_color_boundary() {
    let img = rgb_image(4, 4, |_, x| if x < 2 { [0.9, 0.2, 0.1] } else { [0.1, 0.3, 0.8] });
    let lab = image_to_lab(&img).unwrap();
    let p = params(2, 0.1);
    let out = slic_segment(&lab, &p).unwrap();
    let step2 = 16.0 / 2.0;
    let oracle = exhaustive_two_means(&lab, p.compactness * p.compactness / step2);
    assert!(same_partition(&out.labels, &oracle), "{:?} vs {oracle:?}", out.labels);

    // K=2 seeds sit side by side, so the boundary runs between them
    let big = rgb_image(24, 24, |_, x| if x < 10 { [0.2, 0.7, 0.2] } else { [0.8, 0.8, 0.1] });
    let out = slic_segment(&image_to_lab(&big).unwrap(), &params(2, 0.1)).unwrap();
    let truth: Vec<u32> = (0..576).map(|i| (i % 24 >= 10) as u32).collect();
    assert_eq!(out.segments, 2);
    assert!(same_partition(&out.labels, &truth));
}

#[test]
fn constant_image_keeps_the_initial_grid() {
    let img = rgb_image(16, 16, |_, _| [0.4, 0.4, 0.4]);
    let out = slic_segment(&image_to_lab(&img).unwrap(), &params(4, 10.0)).unwrap();
    let quadrants: Vec<u32> = (0..256)
        .map(|i| ((i / 16 >= 8) as u32) * 2 + (i % 16 >= 8) as u32)
        .collect();
    assert_eq!(out.segments, 4);
    assert!(same_partition(&out.labels, &quadrants));
}

#[test]
fn large_image_segments_are_connected_and_bounded() {
    let sample = &synth_generate(1, 224, 224, 4, 3).unwrap()[0];
    let lab = image_to_lab(&sample.tensor()).unwrap();
    let out = slic_segment(&lab, &params(196, 10.0)).unwrap();
    assert!(out.segments <= 196 && out.segments > 0);
    assert_eq!(out.labels.len(), 224 * 224);
    assert!(out.labels.iter().all(|&l| (l as usize) < out.segments));
    let used: BTreeSet<u32> = out.labels.iter().copied().collect();
    assert_eq!(used.len(), out.segments);
    assert!(is_four_connected(&out.labels, 224, 224));
}

#[test]
fn cost_never_increases_and_runs_are_repeatable() {
    for (k, sample) in synth_generate(6, 48, 40, 4, 9).unwrap().iter().enumerate() {
        let lab = image_to_lab(&sample.tensor()).unwrap();
        for (segments, m) in [(20, 10.0), (60, 1.0), (7, 40.0)] {
            let out = slic_segment(&lab, &params(segments, m)).unwrap();
            assert_eq!(out.costs.len(), 11);
            for pair in out.costs.windows(2) {
                assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "image {k} K={segments}: {pair:?}");
            }
            assert!(is_four_connected(&out.labels, 48, 40));
            assert_eq!(out, slic_segment(&lab, &params(segments, m)).unwrap());
        }
    }
}

#[test]
fn rejects_bad_parameters() {
    let lab = image_to_lab(&rgb_image(4, 4, |_, _| [0.5; 3])).unwrap();
    assert!(slic_segment(&lab, &params(17, 10.0)).is_err());
    assert!(slic_segment(&lab, &params(0, 10.0)).is_err());
    assert!(slic_segment(
        &lab,
        &SlicParams {
            iterations: 0,
            ..params(2, 1.0)
        }
    )
    .is_err());
    assert!(slic_segment(&lab, &params(2, f64::NAN)).is_err());
}

#[test]
fn label_maps_export_as_sixteen_bit_pgm() {
    let img = rgb_image(8, 8, |y, x| [(y * 8 + x) as f32 / 64.0, 0.5, 0.2]);
    let out = slic_segment(&image_to_lab(&img).unwrap(), &params(4, 10.0)).unwrap();
    let pgm = out.to_pgm().unwrap();
    assert_eq!(pgm.maxval, 65535);
    assert_eq!(pgm.data.iter().map(|&v| v as u32).collect::<Vec<_>>(), out.labels);
}
