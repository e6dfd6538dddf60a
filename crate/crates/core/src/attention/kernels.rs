use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{apply_region_control, FeatureMap, RegionControl};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{log_sum_exp, matmul, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLabel {
    Content,
    Style(usize),
}

impl BlockLabel {
    pub fn is_style(self) -> bool {
        matches!(self, BlockLabel::Style(_))
    }
}

/// One labeled key/value source.
#[derive(Debug, Clone)]
pub struct KvBlock {
    pub keys: FeatureMap,
    pub values: FeatureMap,
    pub label: BlockLabel,
}

impl KvBlock {
    pub fn content(keys: FeatureMap, values: FeatureMap) -> Self {
        Self {
            keys,
            values,
            label: BlockLabel::Content,
        }
    }

    pub fn style(index: usize, keys: FeatureMap, values: FeatureMap) -> Self {
        Self {
            keys,
            values,
            label: BlockLabel::Style(index),
        }
    }
}

/// Content queries plus every key/value block they may attend to.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub query: FeatureMap,
    pub blocks: Vec<KvBlock>,
    pub dim_scale: f64,
}

impl AttentionInputs {
    pub fn new(query: FeatureMap, blocks: Vec<KvBlock>, dim_scale: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid!("attention over zero key/value blocks"));
        }
        let d = query.channels();
        let dv = blocks[0].values.channels();
        for b in &blocks {
            if b.keys.channels() != d {
                return Err(shape_err!(
                    "{:?} keys have width {}, queries {d}",
                    b.label,
                    b.keys.channels()
                ));
            }
            if b.values.tokens() != b.keys.tokens() {
                return Err(shape_err!(
                    "{:?} has {} keys but {} values",
                    b.label,
                    b.keys.tokens(),
                    b.values.tokens()
                ));
            }
            if b.values.channels() != dv {
                return Err(shape_err!("value widths differ across blocks"));
            }
        }
        Ok(Self {
            query,
            blocks,
            dim_scale,
        })
    }

    /// One style block and one content block, scaled by `1/sqrt(d)`.
    pub fn pair(
        query: FeatureMap,
        style_keys: FeatureMap,
        style_values: FeatureMap,
        content_keys: FeatureMap,
        content_values: FeatureMap,
    ) -> Result<Self> {
        let scale = 1.0 / (query.channels() as f64).sqrt();
        Self::new(
            query,
            vec![
                KvBlock::style(0, style_keys, style_values),
                KvBlock::content(content_keys, content_values),
            ],
            scale,
        )
    }

    pub fn content(&self) -> Result<&KvBlock> {
        let mut it = self
            .blocks
            .iter()
            .filter(|b| b.label == BlockLabel::Content);
        match (it.next(), it.next()) {
            (Some(b), None) => Ok(b),
            (None, _) => Err(invalid!("no content key/value block")),
            _ => Err(invalid!("more than one content key/value block")),
        }
    }

    pub fn styles(&self) -> impl Iterator<Item = &KvBlock> {
        self.blocks.iter().filter(|b| b.label.is_style())
    }

    fn single_style(&self) -> Result<&KvBlock> {
        let mut it = self.styles();
        match (it.next(), it.next()) {
            (Some(b), None) => Ok(b),
            _ => Err(invalid!("expected exactly one style key/value block")),
        }
    }

    /// `Q K^T * dim_scale` for every block, styles in input order.
    pub fn scaled_logits(&self) -> Result<ScaledLogits> {
        let logits = |b: &KvBlock| -> Result<Matrix> {
            Ok(matmul(self.query.values(), &b.keys.values().transpose())?.scale(self.dim_scale))
        };
        let content = self.content()?;
        Ok(ScaledLogits {
            style: self.styles().map(logits).collect::<Result<_>>()?,
            content: logits(content)?,
            style_values: self.styles().map(|b| b.values.values().clone()).collect(),
            content_values: content.values.values().clone(),
        })
    }
}

/// Scaled logit blocks and their values, ready to be fused.
#[derive(Debug, Clone)]
pub struct ScaledLogits {
    pub style: Vec<Matrix>,
    pub content: Matrix,
    pub style_values: Vec<Matrix>,
    pub content_values: Matrix,
}

impl ScaledLogits {
    fn values_in_order(&self) -> Vec<&Matrix> {
        self.style_values
            .iter()
            .chain(std::iter::once(&self.content_values))
            .collect()
    }

    fn blocks_in_order(&self) -> Vec<WeightBlock> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.style.len() + 1);
        for (i, z) in self.style.iter().enumerate() {
            out.push(WeightBlock {
                label: BlockLabel::Style(i),
                columns: start..start + z.cols(),
            });
            start += z.cols();
        }
        out.push(WeightBlock {
            label: BlockLabel::Content,
            columns: start..start + self.content.cols(),
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBlock {
    pub label: BlockLabel,
    pub columns: Range<usize>,
}

/// Row-stochastic weights over the concatenated key blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub matrix: Matrix,
    pub blocks: Vec<WeightBlock>,
}

impl AttentionWeights {
    pub fn style_columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks
            .iter()
            .filter(|b| b.label.is_style())
            .flat_map(|b| b.columns.clone())
    }
}

/// `A · [V_1; ...; V_n]`.
pub fn apply_weights(weights: &AttentionWeights, values: &[&Matrix]) -> Result<Matrix> {
    matmul(&weights.matrix, &Matrix::vcat(values)?)
}

fn check_qkv(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<()> {
    if q.channels() != k.channels() || k.tokens() != v.tokens() {
        return Err(shape_err!(
            "attention with q {}x{}, k {}x{}, v {}x{}",
            q.tokens(),
            q.channels(),
            k.tokens(),
            k.channels(),
            v.tokens(),
            v.channels()
        ));
    }
    Ok(())
}

/// `Softmax(q k^T * dim_scale) v` and its weight matrix.
pub fn self_attention_weights(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    dim_scale: f64,
) -> Result<(FeatureMap, AttentionWeights)> {
    check_qkv(q, k, v)?;
    let weights = softmax_rows(&matmul(q.values(), &k.values().transpose())?.scale(dim_scale))?;
    let out = matmul(&weights, v.values())?;
    Ok((
        q.with_values(out)?,
        AttentionWeights {
            blocks: vec![WeightBlock {
                label: BlockLabel::Content,
                columns: 0..k.tokens(),
            }],
            matrix: weights,
        },
    ))
}

pub fn self_attention(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    dim_scale: f64,
) -> Result<FeatureMap> {
    self_attention_weights(q, k, v, dim_scale).map(|(out, _)| out)
}

/// Content queries attending only to style keys/values.
pub fn naive_style_cross(
    q_c: &FeatureMap,
    k_s: &FeatureMap,
    v_s: &FeatureMap,
    dim_scale: f64,
) -> Result<FeatureMap> {
    self_attention(q_c, k_s, v_s, dim_scale)
}

fn check_mix(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid!("mixing weight {lambda} outside [0, 1]"));
    }
    Ok(())
}

/// `λ·Attn(Q_c, K_s, V_s) + (1-λ)·Attn(Q_c, K_c, V_c)`.
pub fn simple_addition(inputs: &AttentionInputs, lambda: f64) -> Result<FeatureMap> {
    check_mix(lambda)?;
    let s = inputs.single_style()?;
    let c = inputs.content()?;
    let q = &inputs.query;
    let cross = naive_style_cross(q, &s.keys, &s.values, inputs.dim_scale)?;
    let own = self_attention(q, &c.keys, &c.values, inputs.dim_scale)?;
    let mixed = cross
        .values()
        .scale(lambda)
        .add(&own.values().scale(1.0 - lambda))?;
    q.with_values(mixed)
}

/// The block matrix `[λ·σ(Z_s), (1-λ)·σ(Z_c)]` implied by simple addition.
pub fn mixing_weights_from_logits(logits: &ScaledLogits, lambda: f64) -> Result<AttentionWeights> {
    check_mix(lambda)?;
    if logits.style.len() != 1 {
        return Err(invalid!("simple addition needs exactly one style block"));
    }
    let s = softmax_rows(&logits.style[0])?.scale(lambda);
    let c = softmax_rows(&logits.content)?.scale(1.0 - lambda);
    Ok(AttentionWeights {
        matrix: Matrix::hcat(&[&s, &c])?,
        blocks: logits.blocks_in_order(),
    })
}

pub fn simple_addition_weights(inputs: &AttentionInputs, lambda: f64) -> Result<AttentionWeights> {
    mixing_weights_from_logits(&inputs.scaled_logits()?, lambda)
}

/// Single softmax over `[φ(λ·Z_s1), ..., φ(λ·Z_sN), Z_c]`.
pub fn rearranged_from_logits(
    logits: &ScaledLogits,
    lambda: f64,
    control: Option<&RegionControl>,
) -> Result<AttentionWeights> {
    rearranged_with_offset(logits, lambda, control, 0.0)
}

fn rearranged_with_offset(
    logits: &ScaledLogits,
    lambda: f64,
    control: Option<&RegionControl>,
    style_offset: f64,
) -> Result<AttentionWeights> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid!("style scale {lambda} must be a finite value >= 0"));
    }
    if logits.style.is_empty() && control.is_some() {
        return Err(invalid!("region control without any style block"));
    }
    let style = logits
        .style
        .iter()
        .map(|z| {
            let z = z.scale(lambda);
            let z = match control {
                Some(c) => apply_region_control(&z, c)?,
                None => z,
            };
            Ok(if style_offset == 0.0 {
                z
            } else {
                z.map(|v| v + style_offset)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&Matrix> = style.iter().collect();
    all.push(&logits.content);
    Ok(AttentionWeights {
        matrix: softmax_rows(&Matrix::hcat(&all)?)?,
        blocks: logits.blocks_in_order(),
    })
}

/// Rearranged attention: style and content compete inside one softmax.
/// With no style blocks this is plain self-attention.
pub fn rearranged_attention(
    inputs: &AttentionInputs,
    lambda: f64,
    control: Option<&RegionControl>,
) -> Result<(FeatureMap, AttentionWeights)> {
    let logits = inputs.scaled_logits()?;
    let weights = rearranged_from_logits(&logits, lambda, control)?;
    let out = apply_weights(&weights, &logits.values_in_order())?;
    Ok((inputs.query.with_values(out)?, weights))
}

/// Rearranged attention with every style block entering at prior weight
/// `1/N`: after `λ` and `φ`, each style logit is shifted by `−ln N`. `N`
/// copies of one style then produce exactly the single-style weights on
/// the content block and the same combined style value. `N = 1` is
/// [`rearranged_attention`].
pub fn rearranged_attention_balanced(
    inputs: &AttentionInputs,
    lambda: f64,
    control: Option<&RegionControl>,
) -> Result<(FeatureMap, AttentionWeights)> {
    let logits = inputs.scaled_logits()?;
    let offset = -(logits.style.len().max(1) as f64).ln();
    let weights = rearranged_with_offset(&logits, lambda, control, offset)?;
    let out = apply_weights(&weights, &logits.values_in_order())?;
    Ok((inputs.query.with_values(out)?, weights))
}

/// Per query row, `ln(Σ_j exp(Z_c[i,j]) / Σ_j exp(Z_s[i,j]))`.
pub fn correction_term(
    q_c: &FeatureMap,
    k_s: &FeatureMap,
    k_c: &FeatureMap,
    dim_scale: f64,
) -> Result<Vec<f64>> {
    if q_c.channels() != k_s.channels() || q_c.channels() != k_c.channels() {
        return Err(shape_err!("query and key widths differ"));
    }
    let zs = matmul(q_c.values(), &k_s.values().transpose())?.scale(dim_scale);
    let zc = matmul(q_c.values(), &k_c.values().transpose())?.scale(dim_scale);
    correction_from_logits(&zs, &zc)
}

fn correction_from_logits(zs: &Matrix, zc: &Matrix) -> Result<Vec<f64>> {
    (0..zs.rows())
        .map(|i| {
            let c = log_sum_exp(zc.row(i)).ok_or_else(|| invalid!("content row {i} masked"))?;
            let s = log_sum_exp(zs.row(i)).ok_or_else(|| invalid!("style row {i} masked"))?;
            Ok(c - s)
        })
        .collect()
}

/// Simple addition with weight `λ ∈ (0, 1)` written as one softmax: the
/// style block is shifted by `C + ln(λ/(1-λ))` per row.
pub fn mixing_as_rearranged_from_logits(
    logits: &ScaledLogits,
    lambda: f64,
) -> Result<AttentionWeights> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid!("mixing weight {lambda} outside (0, 1)"));
    }
    if logits.style.len() != 1 {
        return Err(invalid!("expected exactly one style block"));
    }
    let zs = &logits.style[0];
    let c = correction_from_logits(zs, &logits.content)?;
    let odds = (lambda / (1.0 - lambda)).ln();
    let mut shifted = zs.clone();
    for (i, ci) in c.iter().enumerate() {
        for x in shifted.row_mut(i) {
            *x += ci + odds;
        }
    }
    Ok(AttentionWeights {
        matrix: softmax_rows(&Matrix::hcat(&[&shifted, &logits.content])?)?,
        blocks: logits.blocks_in_order(),
    })
}

/// `σ([Z_s + C, Z_c]) · [V_s; V_c]`, which equals `simple_addition(0.5)`.
pub fn addition_as_rearranged(inputs: &AttentionInputs) -> Result<(FeatureMap, AttentionWeights)> {
    let logits = inputs.scaled_logits()?;
    let weights = mixing_as_rearranged_from_logits(&logits, 0.5)?;
    let out = apply_weights(&weights, &logits.values_in_order())?;
    Ok((inputs.query.with_values(out)?, weights))
}

/// Fraction of each row's weight on style columns.
pub fn style_mass(weights: &AttentionWeights) -> Vec<f64> {
    let cols: Vec<usize> = weights.style_columns().collect();
    (0..weights.matrix.rows())
        .map(|i| {
            let row = weights.matrix.row(i);
            cols.iter().map(|&j| row[j]).sum()
        })
        .collect()
}
