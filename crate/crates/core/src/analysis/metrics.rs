use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::diffusion::ImageTensor;
use crate::error::{invalid, Error, Result};
use crate::numerics::{matmul, Matrix};

/// Histogram bins per colour channel for the style colour term.
pub const COLOR_BINS: usize = 8;

/// Per-pixel Sobel gradient magnitude, L2 over channels, with edge
/// replication at the borders. Row-major `h·w`.
pub fn sobel_magnitude(img: &ImageTensor) -> Vec<f64> {
    let (ch, h, w) = img.shape();
    let at = |c: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img.get(c, y, x)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sq = 0.0;
            for c in 0..ch {
                let right = at(c, y - 1, x + 1) + 2.0 * at(c, y, x + 1) + at(c, y + 1, x + 1);
                let left = at(c, y - 1, x - 1) + 2.0 * at(c, y, x - 1) + at(c, y + 1, x - 1);
                let below = at(c, y + 1, x - 1) + 2.0 * at(c, y + 1, x) + at(c, y + 1, x + 1);
                let above = at(c, y - 1, x - 1) + 2.0 * at(c, y - 1, x) + at(c, y - 1, x + 1);
                let (gx, gy) = (right - left, below - above);
                sq += gx * gx + gy * gy;
            }
            out[y as usize * w + x as usize] = sq.sqrt();
        }
    }
    out
}

/// Pearson correlation; errors when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid!("pearson needs equal nonempty inputs"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(invalid!("correlation of a constant signal is undefined"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of the two images' edge maps, in `[-1, 1]`.
pub fn content_preservation_score(output: &ImageTensor, content: &ImageTensor) -> Result<f64> {
    output.check_same_shape(content)?;
    pearson(&sobel_magnitude(output), &sobel_magnitude(content))
        .map_err(|_| invalid!("content preservation needs non-constant images"))
}

/// Per-channel histograms over `[-1, 1]`, each normalised to sum 1.
pub fn color_histograms(img: &ImageTensor, bins: usize) -> Vec<Vec<f64>> {
    (0..img.channels())
        .map(|c| {
            let plane = img.plane(c);
            let mut hist = vec![0.0; bins];
            for &v in plane {
                let b = (((v + 1.0) / 2.0) * bins as f64).floor();
                hist[(b.max(0.0) as usize).min(bins - 1)] += 1.0;
            }
            hist.iter_mut().for_each(|h| *h /= plane.len() as f64);
            hist
        })
        .collect()
}

/// `½ Σ (p−q)²/(p+q)` averaged over channels; 0 for identical histograms
/// and 1 for disjoint ones.
pub fn chi_square_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (ha, hb) = (
        color_histograms(a, COLOR_BINS),
        color_histograms(b, COLOR_BINS),
    );
    let per_channel = ha.iter().zip(&hb).map(|(p, q)| {
        0.5 * p
            .iter()
            .zip(q)
            .filter(|(x, y)| *x + *y > 0.0)
            .map(|(x, y)| (x - y).powi(2) / (x + y))
            .sum::<f64>()
    });
    Ok(per_channel.sum::<f64>() / ha.len() as f64)
}

/// `FᵀF / N` for features `F` of `N` rows.
pub fn gram(features: &Matrix) -> Matrix {
    matmul(&features.transpose(), features)
        .expect("inner dimensions agree")
        .scale(1.0 / features.rows() as f64)
}

/// `‖G_a − G_b‖ / (‖G_a‖ + ‖G_b‖)`, in `[0, 1]`.
pub fn gram_distance(ga: &Matrix, gb: &Matrix) -> Result<f64> {
    let fro = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = fro(ga) + fro(gb);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(fro(&ga.sub(gb)?) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleAffinity {
    /// `½(1 − χ²) + ½(1 − gram distance)`, in `[0, 1]`.
    pub score: f64,
    pub color_term: f64,
    pub gram_term: f64,
}

/// Colour-histogram and Gram-feature agreement between `output` and
/// `style`; Gram features come from `model`'s first convolution.
pub fn style_affinity_score(
    model: &DenoiserModel,
    output: &ImageTensor,
    style: &ImageTensor,
) -> Result<StyleAffinity> {
    let color_term = 1.0 - chi_square_distance(output, style)?;
    let (fo, fs) = (
        model.encoder_features(output)?,
        model.encoder_features(style)?,
    );
    let gram_term = 1.0 - gram_distance(&gram(&fo), &gram(&fs))?;
    let score = 0.5 * color_term + 0.5 * gram_term;
    if !score.is_finite() {
        return Err(Error::NonFinite("style affinity".into()));
    }
    Ok(StyleAffinity {
        score,
        color_term,
        gram_term,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub content_preservation: f64,
    pub style_affinity: f64,
    pub color_term: f64,
    pub gram_term: f64,
    /// Mean style mass per injected layer over the run.
    pub style_mass: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn compute(
        model: &DenoiserModel,
        output: &ImageTensor,
        content: &ImageTensor,
        style: &ImageTensor,
        style_mass: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        let sa = style_affinity_score(model, output, style)?;
        Ok(Self {
            content_preservation: content_preservation_score(output, content)?,
            style_affinity: sa.score,
            color_term: sa.color_term,
            gram_term: sa.gram_term,
            style_mass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, Family};
    use crate::denoiser::Architecture;
    use crate::numerics::SeededRng;

    fn model() -> DenoiserModel {
        DenoiserModel::new(
            Architecture {
                base_channels: 8,
                groups: 4,
            },
            1,
        )
        .unwrap()
    }

    fn sample(family: Family, i: usize) -> ImageTensor {
        DatasetSpec {
            count: 20,
            seed: 3,
            resolution: 32,
        }
        .image(family, i)
    }

    /// Naive convolution oracle for a single-channel vertical step edge.
    #[test]
    fn sobel_of_a_step_edge() {
        let mut img = ImageTensor::zeros(1, 5, 6);
        for y in 0..5 {
            for x in 3..6 {
                img.set(0, y, x, 1.0);
            }
        }
        let m = sobel_magnitude(&img);
        for y in 0..5 {
            assert_eq!(m[y * 6 + 2], 4.0);
            assert_eq!(m[y * 6 + 3], 4.0);
            assert_eq!(m[y * 6], 0.0);
            assert_eq!(m[y * 6 + 5], 0.0);
        }
    }

    #[test]
    fn content_score_of_itself_is_one() {
        let c = sample(Family::Content, 0);
        assert!((content_preservation_score(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let flat = ImageTensor::filled(3, 32, 32, 0.2);
        assert!(content_preservation_score(&flat, &c).is_err());
    }

    #[test]
    fn shuffled_content_scores_near_zero() {
        let c = sample(Family::Content, 1);
        let mut pixels: Vec<usize> = (0..32 * 32).collect();
        for seed in 0..20 {
            SeededRng::new(seed).shuffle(&mut pixels);
            let mut s = ImageTensor::zeros(3, 32, 32);
            for (dst, &src) in pixels.iter().enumerate() {
                for ch in 0..3 {
                    s.set(ch, dst / 32, dst % 32, c.get(ch, src / 32, src % 32));
                }
            }
            let score = content_preservation_score(&s, &c).unwrap();
            assert!(score.abs() < 0.2, "seed {seed}: {score}");
        }
    }

    #[test]
    fn style_score_of_itself_is_one() {
        let m = model();
        let s = sample(Family::Style, 2);
        let a = style_affinity_score(&m, &s, &s).unwrap();
        assert_eq!(a.score, 1.0);
        let c = sample(Family::Content, 2);
        let b = style_affinity_score(&m, &c, &s).unwrap();
        assert!(b.score < 1.0 && b.score >= 0.0);
    }

    #[test]
    fn permuted_channels_lower_the_colour_term() {
        let m = model();
        let s = sample(Family::Style, 0);
        let mut p = s.clone();
        for y in 0..32 {
            for x in 0..32 {
                let (r, g, b) = (s.get(0, y, x), s.get(1, y, x), s.get(2, y, x));
                p.set(0, y, x, g);
                p.set(1, y, x, b);
                p.set(2, y, x, r);
            }
        }
        let own = style_affinity_score(&m, &s, &s).unwrap();
        let perm = style_affinity_score(&m, &p, &s).unwrap();
        assert!(perm.color_term < own.color_term);
    }

    #[test]
    fn chi_square_is_bounded() {
        let black = ImageTensor::filled(3, 4, 4, -1.0);
        let white = ImageTensor::filled(3, 4, 4, 1.0);
        assert_eq!(chi_square_distance(&black, &white).unwrap(), 1.0);
        assert_eq!(chi_square_distance(&black, &black).unwrap(), 0.0);
    }

    #[test]
    fn gram_distance_bounds() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let ga = gram(&a);
        assert_eq!(gram_distance(&ga, &ga).unwrap(), 0.0);
        assert!((gram_distance(&ga, &ga.scale(-1.0)).unwrap() - 1.0).abs() < 1e-15);
    }
}
