//! Diagnostics (similarity heatmaps, logit histograms) and the content and
//! style metrics used to compare transfer variants.

mod diagnostics;
mod metrics;

pub use diagnostics::{
    logit_histogram, similarity_heatmap, write_matrix_csv, Heatmap, Histogram, LogitHistogram,
};
pub use metrics::{
    chi_square_distance, color_histograms, content_preservation_score, gram, gram_distance,
    pearson, sobel_magnitude, style_affinity_score, MetricReport, StyleAffinity, COLOR_BINS,
};
