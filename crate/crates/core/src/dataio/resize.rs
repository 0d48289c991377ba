/// Bilinear resize of an interleaved `h × w × channels` image.
///
/// Output pixel centers are mapped back with half-pixel offsets
/// (`src = (dst + 0.5) · in / out − 0.5`, align-corners off) and source
/// coordinates are clamped to the image edge.
pub fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    out_width: usize,
    out_height: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), width * height * channels, "source buffer size");
    if width == out_width && height == out_height {
        return src.to_vec();
    }
    let xs = axis_taps(width, out_width);
    let ys = axis_taps(height, out_height);
    let mut out = Vec::with_capacity(out_width * out_height * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * width + x) * channels + c];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// Source neighbours and interpolation weight for every output coordinate.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f32 / output as f32;
    let last = (input - 1) as f32;
    (0..output)
        .map(|o| {
            let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f32> = (0..30).map(|i| i as f32 * 1.7).collect();
        assert_eq!(resize_bilinear(&src, 5, 2, 3, 5, 2), src);
    }

    #[test]
    fn constant_stays_constant() {
        let src = vec![0.3f32; 7 * 5 * 3];
        for (w, h) in [(1, 1), (3, 9), (14, 10), (64, 64)] {
            let out = resize_bilinear(&src, 7, 5, 3, w, h);
            assert_eq!(out.len(), w * h * 3);
            assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn downsample_averages_pairs() {
        // 4 -> 2 samples exactly between source pixels.
        let src = [0.0f32, 10.0, 20.0, 30.0];
        assert_eq!(resize_bilinear(&src, 4, 1, 1, 2, 1), [5.0, 25.0]);
    }
}
