use crate::data::ppm::Rgb8;

/// Per-channel histogram equalization of an 8-bit image.
///
/// Level `v` maps to `round(255 (cdf(v) - cdf_min) / (N - cdf_min))`; a
/// channel holding a single level is left unchanged.
pub fn hist_equalize(image: &Rgb8) -> Rgb8 {
    let mut out = image.clone();
    let n = image.width * image.height;
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for px in image.data.chunks_exact(3) {
            hist[px[c] as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (level, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[level] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        let map: Vec<u8> = cdf
            .iter()
            .map(|&v| (255.0 * v.saturating_sub(cdf_min) as f64 / denom).round() as u8)
            .collect();
        for px in out.data.chunks_exact_mut(3) {
            px[c] = map[px[c] as usize];
        }
    }
    out
}
