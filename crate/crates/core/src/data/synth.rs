//! Procedural content (shapes) and style (textures) families.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Content,
    Style,
}

impl Family {
    pub fn dir_name(self) -> &'static str {
        match self {
            Family::Content => "content",
            Family::Style => "style",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Family::Content => 1,
            Family::Style => 2,
        }
    }
}

/// One filled region of a content image, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Square {
        cx: f64,
        cy: f64,
        half: f64,
    },
    Triangle {
        points: [[f64; 2]; 3],
    },
    Stripes {
        vertical: bool,
        period: u32,
        width: u32,
        offset: u32,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { points: [a, b, c] } => {
                let side = |p: [f64; 2], q: [f64; 2]| {
                    (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])
                };
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Stripes {
                vertical,
                period,
                width,
                offset,
            } => {
                let coord = if vertical { x } else { y } as u32;
                (coord + offset) % period < width
            }
        }
    }
}

/// Plain background with high-contrast shapes painted in order. One of
/// background and primary shape is dark and the other light; hues are
/// random and saturation moderate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentParams {
    pub background: [u8; 3],
    pub layers: Vec<(Shape, [u8; 3])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Checkerboard { cell: u32 },
    Hatch { period: u32, width: u32, anti: bool },
    Grain { amplitude: f64, seed: u64 },
    Wash { angle: f64 },
}

/// A two-colour texture. `accent` differs from `base` by a small step
/// except for washes, which blend smoothly between two palette colours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub pattern: Pattern,
    pub base: [u8; 3],
    pub accent: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ImageParams {
    Content(ContentParams),
    Style(StyleParams),
}

/// Per-image generator stream: `seed ⊕ index`, split by family.
pub fn image_rng(seed: u64, family: Family, index: usize) -> SeededRng {
    SeededRng::new(seed ^ index as u64).split(family.stream())
}

fn muted(rng: &mut SeededRng, value: f64) -> [u8; 3] {
    let hue = rng.uniform_in(0.0, 360.0);
    hsv(hue, rng.uniform_in(0.0, 0.7), value)
}

fn contrast_pair(rng: &mut SeededRng) -> ([u8; 3], [u8; 3]) {
    let dark = rng.uniform_in(0.08, 0.32);
    let light = rng.uniform_in(0.67, 0.95);
    let (a, b) = (muted(rng, dark), muted(rng, light));
    if rng.uniform() < 0.5 {
        (a, b)
    } else {
        (b, a)
    }
}

fn random_shape(kind: usize, size: u32, rng: &mut SeededRng) -> Shape {
    let s = size as f64;
    let mut at = |lo: f64, hi: f64| rng.uniform_in(lo * s, hi * s);
    match kind {
        0 => Shape::Circle {
            cx: at(0.3, 0.7),
            cy: at(0.3, 0.7),
            r: at(0.15, 0.3),
        },
        1 => Shape::Square {
            cx: at(0.3, 0.7),
            cy: at(0.3, 0.7),
            half: at(0.12, 0.25),
        },
        2 => Shape::Triangle {
            points: [
                [at(0.1, 0.5), at(0.1, 0.4)],
                [at(0.5, 0.9), at(0.2, 0.6)],
                [at(0.2, 0.8), at(0.65, 0.95)],
            ],
        },
        _ => {
            let period = 6 + rng.below(6) as u32;
            Shape::Stripes {
                vertical: rng.uniform() < 0.5,
                period,
                width: period / 2,
                offset: rng.below(period as usize) as u32,
            }
        }
    }
}

/// Content image `index`: its primary shape kind cycles through circle,
/// square, triangle and stripes; a smaller second shape is added on top.
pub fn sample_content(seed: u64, index: usize, size: u32) -> ContentParams {
    let mut rng = image_rng(seed, Family::Content, index);
    let (bg, fg) = contrast_pair(&mut rng);
    let mut layers = vec![(random_shape(index % 4, size, &mut rng), fg)];
    let second = match rng.below(3) {
        0 => random_shape(0, size, &mut rng),
        1 => random_shape(1, size, &mut rng),
        _ => random_shape(2, size, &mut rng),
    };
    let shade = if rng.uniform() < 0.5 {
        bg
    } else {
        muted(&mut rng, 0.5)
    };
    layers.push((shrink(second, 0.55), shade));
    ContentParams {
        background: bg,
        layers,
    }
}

fn shrink(shape: Shape, k: f64) -> Shape {
    match shape {
        Shape::Circle { cx, cy, r } => Shape::Circle { cx, cy, r: r * k },
        Shape::Square { cx, cy, half } => Shape::Square {
            cx,
            cy,
            half: half * k,
        },
        Shape::Triangle { points } => {
            let c = [
                (points[0][0] + points[1][0] + points[2][0]) / 3.0,
                (points[0][1] + points[1][1] + points[2][1]) / 3.0,
            ];
            Shape::Triangle {
                points: points.map(|p| [c[0] + k * (p[0] - c[0]), c[1] + k * (p[1] - c[1])]),
            }
        }
        s @ Shape::Stripes { .. } => s,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn nudge(c: [u8; 3], delta: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + delta).clamp(0, 255) as u8)
}

/// Style image `index`: the pattern cycles through checkerboard, hatch,
/// grain and wash over a saturated random palette.
pub fn sample_style(seed: u64, index: usize) -> StyleParams {
    let mut rng = image_rng(seed, Family::Style, index);
    let hue = rng.uniform_in(0.0, 360.0);
    let base = hsv(hue, rng.uniform_in(0.6, 1.0), rng.uniform_in(0.55, 0.85));
    let delta = (14 + rng.below(10) as i32) * if rng.uniform() < 0.5 { -1 } else { 1 };
    let (pattern, accent) = match index % 4 {
        0 => (
            Pattern::Checkerboard {
                cell: 4 + rng.below(5) as u32,
            },
            nudge(base, delta),
        ),
        1 => {
            let period = 5 + rng.below(4) as u32;
            (
                Pattern::Hatch {
                    period,
                    width: 2,
                    anti: rng.uniform() < 0.5,
                },
                nudge(base, delta),
            )
        }
        2 => (
            Pattern::Grain {
                amplitude: rng.uniform_in(6.0, 12.0),
                seed: rng.below(1 << 30) as u64,
            },
            base,
        ),
        _ => (
            Pattern::Wash {
                angle: rng.uniform_in(0.0, std::f64::consts::TAU),
            },
            hsv(
                hue + rng.uniform_in(60.0, 180.0),
                rng.uniform_in(0.6, 1.0),
                rng.uniform_in(0.55, 0.85),
            ),
        ),
    };
    StyleParams {
        pattern,
        base,
        accent,
    }
}

pub fn render_content(p: &ContentParams, size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let v = p
            .layers
            .iter()
            .rev()
            .find(|(s, _)| s.contains(fx, fy))
            .map_or(p.background, |&(_, v)| v);
        Rgb(v)
    })
}

pub fn render_style(p: &StyleParams, size: u32) -> RgbImage {
    let mut grain = match p.pattern {
        Pattern::Grain { seed, .. } => Some(SeededRng::new(seed)),
        _ => None,
    };
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let px = match p.pattern {
                Pattern::Checkerboard { cell } => {
                    if (x / cell + y / cell) % 2 == 0 {
                        p.base
                    } else {
                        p.accent
                    }
                }
                Pattern::Hatch {
                    period,
                    width,
                    anti,
                } => {
                    let d = if anti { x + size - y } else { x + y };
                    if d % period < width {
                        p.accent
                    } else {
                        p.base
                    }
                }
                Pattern::Grain { amplitude, .. } => {
                    let rng = grain.as_mut().expect("grain rng");
                    let n = (rng.normal() * amplitude).round() as i32;
                    nudge(p.base, n)
                }
                Pattern::Wash { angle } => {
                    let s = size as f64;
                    let (u, v) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
                    let t = ((u * angle.cos() + v * angle.sin()) / std::f64::consts::SQRT_2 + 0.5)
                        .clamp(0.0, 1.0);
                    std::array::from_fn(|c| {
                        (p.base[c] as f64 * (1.0 - t) + p.accent[c] as f64 * t).round() as u8
                    })
                }
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

pub fn render(params: &ImageParams, size: u32) -> RgbImage {
    match params {
        ImageParams::Content(p) => render_content(p, size),
        ImageParams::Style(p) => render_style(p, size),
    }
}
