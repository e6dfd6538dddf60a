use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{FusionMode, InjectionConfig};
use super::pipeline::TransferSession;
use crate::analysis::MetricReport;
use crate::data::save_image;
use crate::denoiser::DenoiserModel;
use crate::diffusion::ImageTensor;
use crate::error::{invalid, Error, Result};

/// One swept config field and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda(Vec<f64>),
    Mix(Vec<f64>),
    Start(Vec<usize>),
    End(Vec<usize>),
    Window(Vec<(usize, usize)>),
    Layers(Vec<Vec<usize>>),
    Mode(Vec<FusionMode>),
}

impl AblationAxis {
    /// Parses `name=v1,v2,...`. Layer sets join indices with `+`
    /// (`layers=4+5,3+4+5`) and windows use `a:b`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, values) = text
            .split_once('=')
            .ok_or_else(|| invalid!("grid axis {text:?} is not name=values"))?;
        let items: Vec<&str> = values.split(',').map(str::trim).collect();
        if items.iter().any(|s| s.is_empty()) {
            return Err(invalid!("grid axis {name:?} has an empty value"));
        }
        fn each<T>(items: &[&str], f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
            items.iter().map(|s| f(s)).collect()
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| invalid!("{s:?} is not a number"))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| invalid!("{s:?} is not a step index"))
        };
        Ok(match name.trim() {
            "lambda" | "lambda_style" => Self::Lambda(each(&items, num)?),
            "mix" => Self::Mix(each(&items, num)?),
            "start" => Self::Start(each(&items, int)?),
            "end" => Self::End(each(&items, int)?),
            "window" => Self::Window(each(&items, parse_window)?),
            "layers" => Self::Layers(each(&items, |s| s.split('+').map(int).collect())?),
            "mode" => Self::Mode(each(&items, FusionMode::parse)?),
            other => return Err(invalid!("unknown grid axis {other:?}")),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Lambda(v) | Self::Mix(v) => v.len(),
            Self::Start(v) | Self::End(v) => v.len(),
            Self::Window(v) => v.len(),
            Self::Layers(v) => v.len(),
            Self::Mode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, i: usize, c: &mut InjectionConfig) {
        match self {
            Self::Lambda(v) => c.lambda_style = v[i],
            Self::Mix(v) => c.mix = v[i],
            Self::Start(v) => c.window.0 = v[i],
            Self::End(v) => c.window.1 = v[i],
            Self::Window(v) => c.window = v[i],
            Self::Layers(v) => c.layers = v[i].clone(),
            Self::Mode(v) => c.mode = v[i],
        }
    }
}

/// Parses `a:b` as a half-open step window.
pub fn parse_window(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| invalid!("window {s:?} is not start:end"))?;
    let p = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| invalid!("window bound {x:?} is not a step index"))
    };
    Ok((p(a)?, p(b)?))
}

/// Every combination of the axes applied to `base`, first axis slowest.
pub fn expand_grid(base: &InjectionConfig, axes: &[AblationAxis]) -> Result<Vec<InjectionConfig>> {
    if axes.is_empty() || axes.iter().any(AblationAxis::is_empty) {
        return Err(invalid!("ablation grid is empty"));
    }
    let mut cells = vec![base.clone()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (0..axis.len()).map(move |i| {
                    let mut c = c.clone();
                    axis.apply(i, &mut c);
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub config: InjectionConfig,
    pub metrics: Option<MetricReport>,
    pub image: Option<PathBuf>,
    pub error: Option<String>,
    /// Style mass averaged over injected layers and steps.
    pub mean_style_mass: Option<f64>,
}

fn mean_mass(metrics: &MetricReport) -> Option<f64> {
    let m = &metrics.style_mass;
    (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV: &str = "ablation.csv";

const CSV_HEADER: [&str; 14] = [
    "cell",
    "mode",
    "lambda_style",
    "mix",
    "window_start",
    "window_end",
    "layers",
    "content_preservation",
    "style_affinity",
    "color_term",
    "gram_term",
    "mean_style_mass",
    "image",
    "error",
];

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_io(path, e))?;
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let c = &r.config;
            let m = r.metrics.as_ref();
            let layers: Vec<String> = c.layers.iter().map(usize::to_string).collect();
            w.write_record([
                r.cell.to_string(),
                c.mode.name().to_string(),
                c.lambda_style.to_string(),
                c.mix.to_string(),
                c.window.0.to_string(),
                c.window.1.to_string(),
                layers.join("+"),
                opt(m.map(|m| m.content_preservation)),
                opt(m.map(|m| m.style_affinity)),
                opt(m.map(|m| m.color_term)),
                opt(m.map(|m| m.gram_term)),
                opt(r.mean_style_mass),
                r.image
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads back a table written by [`AblationTable::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_to_io(path, e))?;
        let headers = r.headers()?.clone();
        if headers.iter().ne(CSV_HEADER) {
            return Err(invalid!("{} is not an ablation table", path.display()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<Option<f64>> {
                let s = field(i);
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| invalid!("bad number {s:?} in {}", path.display()))
            };
            let int = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|_| invalid!("bad integer {:?} in {}", field(i), path.display()))
            };
            let layers = if field(6).is_empty() {
                Vec::new()
            } else {
                field(6)
                    .split('+')
                    .map(|s| s.parse().map_err(|_| invalid!("bad layer {s:?}")))
                    .collect::<Result<_>>()?
            };
            let config = InjectionConfig {
                mode: FusionMode::parse(field(1))?,
                lambda_style: num(2)?.unwrap_or_default(),
                mix: num(3)?.unwrap_or_default(),
                window: (int(4)?, int(5)?),
                layers,
                ..InjectionConfig::default()
            };
            let metrics = match (num(7)?, num(8)?, num(9)?, num(10)?) {
                (Some(cp), Some(sa), Some(ct), Some(gt)) => Some(MetricReport {
                    content_preservation: cp,
                    style_affinity: sa,
                    color_term: ct,
                    gram_term: gt,
                    style_mass: Default::default(),
                }),
                _ => None,
            };
            rows.push(AblationRow {
                cell: int(0)?,
                config,
                metrics,
                image: (!field(12).is_empty()).then(|| PathBuf::from(field(12))),
                error: (!field(13).is_empty()).then(|| field(13).to_string()),
                mean_style_mass: num(11)?,
            });
        }
        Ok(Self { rows })
    }
}

fn csv_to_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

/// Runs every cell on one (content, style) pair. Failing cells are kept
/// as rows with an error message. With `out`, writes `cell_NNN.png` per
/// successful cell and `ablation.csv`.
pub fn ablation_sweep(
    model: &DenoiserModel,
    content: &ImageTensor,
    style: &ImageTensor,
    base: &InjectionConfig,
    axes: &[AblationAxis],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let cells = expand_grid(base, axes)?;
    let registry = model.registry().len();
    let layers: BTreeSet<usize> = cells
        .iter()
        .flat_map(|c| c.layers.iter().copied())
        .filter(|&l| l < registry)
        .collect();
    let layers: Vec<usize> = layers.into_iter().collect();
    let session = TransferSession::new(
        model,
        content,
        std::slice::from_ref(style),
        base.steps,
        &layers,
    )?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut table = AblationTable::default();
    for (cell, config) in cells.into_iter().enumerate() {
        let outcome = session.run(&config).and_then(|res| {
            let metrics = MetricReport::compute(
                model,
                &res.image,
                content,
                style,
                res.mean_style_mass_by_layer(),
            )?;
            let image = match out {
                Some(dir) => {
                    let p = dir.join(format!("cell_{cell:03}.png"));
                    save_image(&res.image, &p)?;
                    Some(p)
                }
                None => None,
            };
            Ok((metrics, image))
        });
        let row = match outcome {
            Ok((metrics, image)) => AblationRow {
                cell,
                config,
                mean_style_mass: mean_mass(&metrics),
                metrics: Some(metrics),
                image,
                error: None,
            },
            Err(e) => {
                log::warn!("ablation cell {cell} failed: {e}");
                AblationRow {
                    cell,
                    config,
                    metrics: None,
                    image: None,
                    error: Some(e.to_string()),
                    mean_style_mass: None,
                }
            }
        };
        table.rows.push(row);
    }
    if let Some(dir) = out {
        table.write_csv(&dir.join(ABLATION_CSV))?;
    }
    Ok(table)
}
