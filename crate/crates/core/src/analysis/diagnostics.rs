use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{cosine_similarity_rows, matmul, softmax_rows, Matrix};

/// Per-token cosine similarity between two attention outputs, on the
/// token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `height x width`, entries in `[-1, 1]`.
    pub values: Matrix,
}

impl Heatmap {
    pub fn min(&self) -> f64 {
        self.values
            .data()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.data().len() as f64
    }

    /// Blue (−1) through white (0) to red (+1), one pixel per token scaled
    /// up by `zoom`.
    pub fn render(&self, zoom: u32) -> RgbImage {
        let zoom = zoom.max(1);
        let (h, w) = self.values.shape();
        RgbImage::from_fn(w as u32 * zoom, h as u32 * zoom, |x, y| {
            let v = self.values.get((y / zoom) as usize, (x / zoom) as usize);
            colormap(v)
        })
    }

    pub fn write_png(&self, path: &Path, zoom: u32) -> Result<()> {
        self.render(zoom).save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

/// Cosine similarity of each token's cross- and self-attention output.
/// Low values mark tokens whose content information was lost.
pub fn similarity_heatmap(cross_out: &FeatureMap, self_out: &FeatureMap) -> Result<Heatmap> {
    if cross_out.spatial() != self_out.spatial() {
        return Err(shape_err!(
            "heatmap grids {:?} and {:?}",
            cross_out.spatial(),
            self_out.spatial()
        ));
    }
    let sims = cosine_similarity_rows(cross_out.values(), self_out.values())?;
    let (h, w) = cross_out.spatial();
    Ok(Heatmap {
        values: Matrix::new(h, w, sims)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    /// Counts of entries whose logit is negative.
    pub negative: Vec<usize>,
    /// Counts of entries whose logit is zero or positive.
    pub nonnegative: Vec<usize>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            edges: (0..=bins)
                .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
                .collect(),
            negative: vec![0; bins],
            nonnegative: vec![0; bins],
        }
    }

    fn bin(&self, v: f64) -> usize {
        let bins = self.negative.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    fn add(&mut self, v: f64, negative: bool) {
        let b = self.bin(v);
        if negative {
            self.negative[b] += 1;
        } else {
            self.nonnegative[b] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.negative.iter().chain(&self.nonnegative).sum()
    }
}

/// Distribution of naive style-cross logits `Q_c K_sᵀ·s` and of the
/// softmax weights they turn into, split by the sign of the logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitHistogram {
    /// Symmetric around 0, so an even bin count puts 0 on an edge.
    pub logits: Histogram,
    /// Weights on `[0, 1]`.
    pub weights: Histogram,
    /// Sum of each query's weights.
    pub weight_row_sums: Vec<f64>,
}

impl LogitHistogram {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidArgument(format!("{other:?}")),
        })?;
        w.write_record(["histogram", "bin_lo", "bin_hi", "negative", "nonnegative"])?;
        for (name, h) in [("logit", &self.logits), ("weight", &self.weights)] {
            for b in 0..h.negative.len() {
                w.write_record([
                    name.to_string(),
                    h.edges[b].to_string(),
                    h.edges[b + 1].to_string(),
                    h.negative[b].to_string(),
                    h.nonnegative[b].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn logit_histogram(
    q_c: &FeatureMap,
    k_s: &FeatureMap,
    dim_scale: f64,
    bins: usize,
) -> Result<LogitHistogram> {
    if bins < 2 {
        return Err(invalid!("need at least 2 bins, got {bins}"));
    }
    let z = matmul(q_c.values(), &k_s.values().transpose())?.scale(dim_scale);
    let p = softmax_rows(&z)?;
    let m = z.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    let mut logits = Histogram::new(-m, m, bins);
    let mut weights = Histogram::new(0.0, 1.0, bins);
    for (&zv, &pv) in z.data().iter().zip(p.data()) {
        logits.add(zv, zv < 0.0);
        weights.add(pv, zv < 0.0);
    }
    let weight_row_sums = (0..p.rows()).map(|i| p.row(i).iter().sum()).collect();
    Ok(LogitHistogram {
        logits,
        weights,
        weight_row_sums,
    })
}

/// Writes a `rows x cols` matrix as CSV.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut text = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn fm(m: Matrix, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(m, h, w).unwrap()
    }

    #[test]
    fn identical_outputs_give_a_flat_one_map() {
        let mut rng = SeededRng::new(1);
        let a = fm(rng.normal_matrix(16, 5), 4, 4);
        let h = similarity_heatmap(&a, &a).unwrap();
        assert!(h.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let neg = fm(a.values().scale(-1.0), 4, 4);
        let h = similarity_heatmap(&neg, &a).unwrap();
        assert!(h.values.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        let img = h.render(3);
        assert_eq!(img.dimensions(), (12, 12));
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 255]));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let mut rng = SeededRng::new(2);
        let a = fm(rng.normal_matrix(16, 3), 4, 4);
        let b = fm(rng.normal_matrix(16, 3), 2, 8);
        assert!(similarity_heatmap(&a, &b).is_err());
    }

    #[test]
    fn equal_logits_spread_weight_evenly() {
        let q = fm(Matrix::filled(3, 2, 0.0), 1, 3);
        let k = fm(Matrix::filled(5, 2, 1.0), 1, 5);
        let h = logit_histogram(&q, &k, 1.0, 4).unwrap();
        assert_eq!(h.logits.total(), 15);
        // every weight is 1/5, all in the first quarter of [0, 1]
        assert_eq!(h.weights.nonnegative, vec![15, 0, 0, 0]);
        assert!(h.weight_row_sums.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_bins_split_at_zero() {
        let mut rng = SeededRng::new(3);
        let q = fm(rng.normal_matrix(6, 4), 2, 3);
        let k = fm(rng.normal_matrix(8, 4), 2, 4);
        let h = logit_histogram(&q, &k, 0.5, 2).unwrap();
        assert_eq!(h.logits.edges[1], 0.0);
        assert_eq!(h.logits.nonnegative[0], 0);
        assert_eq!(h.logits.negative[1], 0);
        assert_eq!(h.logits.total(), 48);
        assert_eq!(h.weights.total(), 48);
    }

    /// A row of mostly very negative logits hands its least-negative entry
    /// more weight than a flat row gives its positive maximum.
    #[test]
    fn negative_logit_can_take_the_largest_weight() {
        let keys = fm(Matrix::identity(4), 1, 4);
        let q = fm(
            Matrix::from_rows(&[vec![-1.0, -6.0, -6.0, -6.0], vec![0.5, 0.45, 0.4, 0.45]]).unwrap(),
            1,
            2,
        );
        let z = matmul(q.values(), &keys.values().transpose()).unwrap();
        let p = softmax_rows(&z).unwrap();
        assert!(p.get(0, 0) > p.get(1, 0));
        assert!(z.get(0, 0) < 0.0 && z.get(1, 0) > 0.0);
        let h = logit_histogram(&q, &keys, 1.0, 2).unwrap();
        // the top weight bin holds only a negative-logit entry
        assert_eq!(h.weights.negative[1], 1);
        assert_eq!(h.weights.nonnegative[1], 0);
    }

    #[test]
    fn histogram_csv_has_a_row_per_bin() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(4);
        let q = fm(rng.normal_matrix(4, 2), 2, 2);
        let h = logit_histogram(&q, &q, 1.0, 3).unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 7);
    }
}
