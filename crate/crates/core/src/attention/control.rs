use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, NEG_LARGE};

/// Which query-grid coordinate a linear gradient runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientAxis {
    /// Left to right across query columns.
    Horizontal,
    /// Top to bottom across query rows.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlMode {
    /// Logits outside the region become `NEG_LARGE`.
    Hard,
    /// Inside the region, logits are offset by a ramp running from `floor`
    /// at normalized position `span.0` up to 0 at `span.1` along `axis`.
    /// Outside the region they are masked as in `Hard`.
    LinearGradient {
        axis: GradientAxis,
        span: (f64, f64),
        floor: f64,
    },
}

impl ControlMode {
    /// Linear ramp over the whole axis, from `NEG_LARGE` to 0.
    pub fn full_gradient(axis: GradientAxis) -> Self {
        ControlMode::LinearGradient {
            axis,
            span: (0.0, 1.0),
            floor: NEG_LARGE,
        }
    }
}

/// Region `Ω` over (query token, style key) pairs plus the mapping applied
/// to style logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionControl {
    query_shape: (usize, usize),
    keys: usize,
    inside: Vec<bool>,
    mode: ControlMode,
}

impl RegionControl {
    /// `inside` is row-major over `(query, key)` pairs.
    pub fn new(
        query_shape: (usize, usize),
        keys: usize,
        inside: Vec<bool>,
        mode: ControlMode,
    ) -> Result<Self> {
        let queries = query_shape.0 * query_shape.1;
        if inside.len() != queries * keys {
            return Err(shape_err!(
                "region mask of {} entries for {queries} queries x {keys} keys",
                inside.len()
            ));
        }
        Ok(Self {
            query_shape,
            keys,
            inside,
            mode,
        })
    }

    /// Region selected per query token, for every style key.
    pub fn from_query_mask(
        query_shape: (usize, usize),
        query_inside: &[bool],
        keys: usize,
        mode: ControlMode,
    ) -> Result<Self> {
        if query_inside.len() != query_shape.0 * query_shape.1 {
            return Err(shape_err!(
                "query mask of {} entries for a {:?} grid",
                query_inside.len(),
                query_shape
            ));
        }
        let inside = query_inside
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, keys))
            .collect();
        Self::new(query_shape, keys, inside, mode)
    }

    pub fn full(query_shape: (usize, usize), keys: usize, mode: ControlMode) -> Self {
        let n = query_shape.0 * query_shape.1 * keys;
        Self {
            query_shape,
            keys,
            inside: vec![true; n],
            mode,
        }
    }

    pub fn empty(query_shape: (usize, usize), keys: usize) -> Self {
        let n = query_shape.0 * query_shape.1 * keys;
        Self {
            query_shape,
            keys,
            inside: vec![false; n],
            mode: ControlMode::Hard,
        }
    }

    /// `Ω = {(i, j) | j > width/2}` with `j` the 1-based query column.
    pub fn right_half(query_shape: (usize, usize), keys: usize) -> Self {
        let (h, w) = query_shape;
        let mask: Vec<bool> = (0..h * w).map(|t| 2 * (t % w + 1) > w).collect();
        Self::from_query_mask(query_shape, &mask, keys, ControlMode::Hard)
            .expect("mask built for this grid")
    }

    pub fn query_shape(&self) -> (usize, usize) {
        self.query_shape
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn is_inside(&self, query: usize, key: usize) -> bool {
        self.inside[query * self.keys + key]
    }

    pub fn is_full(&self) -> bool {
        self.inside.iter().all(|&b| b)
    }

    /// Offset added to logits of `query` inside the region.
    fn offset(&self, query: usize) -> f64 {
        match self.mode {
            ControlMode::Hard => 0.0,
            ControlMode::LinearGradient { axis, span, floor } => {
                let (h, w) = self.query_shape;
                let (pos, len) = match axis {
                    GradientAxis::Horizontal => (query % w, w),
                    GradientAxis::Vertical => (query / w, h),
                };
                let u = if len > 1 {
                    pos as f64 / (len - 1) as f64
                } else {
                    1.0
                };
                let f = if span.1 > span.0 {
                    ((u - span.0) / (span.1 - span.0)).clamp(0.0, 1.0)
                } else if u >= span.1 {
                    1.0
                } else {
                    0.0
                };
                floor * (1.0 - f)
            }
        }
    }
}

/// The region mapping `φ` applied to a style logit block.
pub fn apply_region_control(style_logits: &Matrix, control: &RegionControl) -> Result<Matrix> {
    let queries = control.query_shape.0 * control.query_shape.1;
    if style_logits.shape() != (queries, control.keys) {
        return Err(shape_err!(
            "region control for {}x{} applied to {:?} logits",
            queries,
            control.keys,
            style_logits.shape()
        ));
    }
    let mut out = style_logits.clone();
    for i in 0..queries {
        let offset = control.offset(i);
        for (j, x) in out.row_mut(i).iter_mut().enumerate() {
            *x = if control.is_inside(i, j) {
                (*x + offset).max(NEG_LARGE)
            } else {
                NEG_LARGE
            };
        }
    }
    Ok(out)
}
