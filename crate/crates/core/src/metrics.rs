//! Closed-form image measures and the evaluation statistics built on score
//! vectors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Phantom,
    Imported,
}

/// One grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pub origin: Origin,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, origin: Origin) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("frame dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(invalid(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            origin,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32, origin: Origin) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], origin)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(frame: &Frame) -> Self {
        Self {
            x: 0,
            y: 0,
            width: frame.width,
            height: frame.height,
        }
    }
}

/// RMS contrast: the population standard deviation of the intensities in the
/// region (divides by `M * N`).
pub fn rms_contrast(frame: &Frame, roi: Option<Roi>) -> Result<f64> {
    let roi = roi.unwrap_or_else(|| Roi::full(frame));
    if roi.width == 0 || roi.height == 0 {
        return Err(invalid("empty region of interest"));
    }
    if roi.x + roi.width > frame.width || roi.y + roi.height > frame.height {
        return Err(invalid(format!(
            "region {roi:?} exceeds frame {}x{}",
            frame.width, frame.height
        )));
    }
    let rows = roi.y..roi.y + roi.height;
    let values = || {
        rows.clone().flat_map(move |y| {
            frame.pixels[y * frame.width + roi.x..y * frame.width + roi.x + roi.width]
                .iter()
                .map(|&p| p as f64)
        })
    };
    let n = (roi.width * roi.height) as f64;
    let mean = values().sum::<f64>() / n;
    let ss = values().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((ss / n).sqrt())
}

/// Per-band mean and sample variance from near field (top) to far field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthGainProfile {
    pub band_means: Vec<f64>,
    pub band_variances: Vec<f64>,
}

impl DepthGainProfile {
    pub fn band_count(&self) -> usize {
        self.band_means.len()
    }
}

pub const DEFAULT_BANDS: usize = 4;

/// Row range of band `b` when `height` rows are split into `bands`.
pub fn band_rows(height: usize, bands: usize, b: usize) -> std::ops::Range<usize> {
    b * height / bands..(b + 1) * height / bands
}

/// Variance with the `n - 1` denominator.
pub fn sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(invalid("sample variance needs at least 2 values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Splits the frame into horizontal bands and reports mean and variance
/// (`n - 1` denominator) per band.
pub fn depth_gain_profile(frame: &Frame, band_count: usize) -> Result<DepthGainProfile> {
    if band_count == 0 || band_count > frame.height {
        return Err(invalid(format!(
            "band count {band_count} must be in 1..={}",
            frame.height
        )));
    }
    let mut band_means = Vec::with_capacity(band_count);
    let mut band_variances = Vec::with_capacity(band_count);
    for b in 0..band_count {
        let rows = band_rows(frame.height, band_count, b);
        let values = &frame.pixels[rows.start * frame.width..rows.end * frame.width];
        if values.len() < 2 {
            return Err(invalid(format!(
                "band {b} has {} pixel(s); variance needs at least 2",
                values.len()
            )));
        }
        let values: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        band_means.push(values.iter().sum::<f64>() / values.len() as f64);
        band_variances.push(sample_variance(&values)?);
    }
    Ok(DepthGainProfile {
        band_means,
        band_variances,
    })
}

/// Ground-truth and predicted normalized score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub ground_truth: f64,
    pub predicted: f64,
}

impl ScorePair {
    pub fn new(ground_truth: f64, predicted: f64) -> Result<Self> {
        for v in [ground_truth, predicted] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("score {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            ground_truth,
            predicted,
        })
    }

    pub fn error(&self) -> f64 {
        self.predicted - self.ground_truth
    }
}

/// Mean absolute difference between ground truth and prediction.
pub fn class_error(pairs: &[ScorePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("class error of an empty list"));
    }
    Ok(pairs
        .iter()
        .map(|p| (p.ground_truth - p.predicted).abs())
        .sum::<f64>()
        / pairs.len() as f64)
}

/// Accuracy in percent, `(1 - class_error) * 100`.
pub fn model_accuracy(pairs: &[ScorePair]) -> Result<f64> {
    Ok(accuracy_from_error(class_error(pairs)?))
}

pub fn accuracy_from_error(mae: f64) -> f64 {
    (1.0 - mae) * 100.0
}

/// Mean and standard deviation of two observers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disparity {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and sample standard deviation of `|a_i - b_i|`.
pub fn interobserver_disparity(a: &[f64], b: &[f64]) -> Result<Disparity> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "observer lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(invalid("disparity needs at least two paired scores"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    Ok(Disparity {
        mean,
        std: var.sqrt(),
        count: diffs.len(),
    })
}

/// Ranks starting at 1 with ties given their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("spearman needs two equal-length lists of at least 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("spearman is undefined for a constant list"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Box-plot statistics; whiskers extend to the furthest data point within
/// 1.5 IQR of the quartiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_summary(values: &[f64]) -> Result<BoxSummary> {
    if values.is_empty() {
        return Err(invalid("box summary of an empty list"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let whisker_low = s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(s[0]);
    let whisker_high = s
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= hi_fence)
        .unwrap_or(s[s.len() - 1]);
    Ok(BoxSummary {
        min: s[0],
        q1,
        median,
        q3,
        max: s[s.len() - 1],
        whisker_low,
        whisker_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, px: Vec<f32>) -> Frame {
        Frame::new(w, h, px, Origin::Phantom).unwrap()
    }

    #[test]
    fn contrast_of_constant_and_two_level_frames() {
        assert_eq!(rms_contrast(&frame(4, 4, vec![0.3; 16]), None).unwrap(), 0.0);
        let half: Vec<f32> = (0..16).map(|i| if i < 8 { 0.0 } else { 1.0 }).collect();
        assert_eq!(rms_contrast(&frame(4, 4, half), None).unwrap(), 0.5);
    }

    #[test]
    fn contrast_rejects_bad_regions() {
        let f = frame(4, 4, vec![0.3; 16]);
        let empty = Roi { x: 0, y: 0, width: 0, height: 2 };
        assert!(rms_contrast(&f, Some(empty)).is_err());
        let outside = Roi { x: 3, y: 0, width: 2, height: 2 };
        assert!(rms_contrast(&f, Some(outside)).is_err());
    }

    #[test]
    fn band_variance_uses_sample_denominator() {
        assert_eq!(sample_variance(&[0.0, 2.0]).unwrap(), 2.0);
        let f = frame(2, 1, vec![0.0, 1.0]);
        let p = depth_gain_profile(&f, 1).unwrap();
        assert_eq!(p.band_variances, vec![0.5]);
        assert!(depth_gain_profile(&frame(1, 2, vec![0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn uniform_frame_profile() {
        let p = depth_gain_profile(&frame(8, 8, vec![0.25; 64]), DEFAULT_BANDS).unwrap();
        assert_eq!(p.band_count(), 4);
        assert!(p.band_variances.iter().all(|&v| v == 0.0));
        assert!(p.band_means.iter().all(|&m| m == 0.25));
    }

    #[test]
    fn error_and_accuracy() {
        let same = [ScorePair::new(0.4, 0.4).unwrap(); 3];
        assert_eq!(class_error(&same).unwrap(), 0.0);
        assert_eq!(model_accuracy(&same).unwrap(), 100.0);
        let one = [ScorePair::new(0.9, 0.88).unwrap()];
        assert!((class_error(&one).unwrap() - 0.02).abs() < 1e-15);
        assert!((accuracy_from_error(0.0232) - 97.68).abs() < 1e-12);
        assert!(class_error(&[]).is_err());
        assert!(ScorePair::new(1.2, 0.0).is_err());
    }

    #[test]
    fn disparity_cases() {
        let d = interobserver_disparity(&[0.5, 0.9], &[0.3, 0.9]).unwrap();
        assert!((d.mean - 0.1).abs() < 1e-15);
        let z = interobserver_disparity(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!((z.mean, z.std), (0.0, 0.0));
        assert!(interobserver_disparity(&[0.1, 0.2], &[0.1]).is_err());
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn box_summary_of_known_list() {
        let b = box_summary(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.whisker_high, 4.0);
        assert_eq!(b.max, 100.0);
        assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3);
    }
}
