//! Case 1/2/3 dataset builders and the in-memory dataset.

use std::collections::HashSet;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::incident::{distinct_circle_pixels, incident_field, Source, SourceKind};
use super::phantom::{permute_exemplar, rasterize_n, sample_ellipses, EllipseParams, PhantomConfig, Regime};
use super::solver::{scattering_source, HelmholtzOperator, HelmholtzSolver};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::quadtree::{build_geometry, TreeGeometry};
use crate::rng::{self, derive_seed, streams};

pub const FORMAT_VERSION: u32 = 1;
pub const PLANES: [&str; 7] = ["ui.re", "ui.im", "n", "f.re", "f.im", "us.re", "us.im"];
pub const META: [&str; 8] = [
    "kind",
    "src_x",
    "src_y",
    "angle",
    "class_id",
    "residual",
    "sample_index",
    "reserved",
];
pub const TARGET_PLANES: [usize; 2] = [5, 6];
/// Number of scatterer classes in Case 2 (exemplars with 2..=10 ellipses).
pub const EXEMPLARS: usize = 9;

/// Model input planes per case: `u_i`, `n`, or `f`.
pub fn input_planes(case: u8) -> Result<Vec<usize>> {
    match case {
        1 => Ok(vec![0, 1]),
        2 => Ok(vec![2]),
        3 => Ok(vec![3, 4]),
        other => Err(Error::Config(format!("case must be 1, 2 or 3, got {other}"))),
    }
}

fn default_ellipses() -> usize {
    4
}
fn default_side() -> f64 {
    3.0
}
fn default_radius() -> f64 {
    1.35
}
fn default_shrink() -> f64 {
    0.9
}
fn default_permute() -> f64 {
    0.1
}

/// Dataset generation settings, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub case: u8,
    pub regime: Regime,
    pub source_kind: SourceKind,
    pub k0: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    #[serde(rename = "resolution_L")]
    pub resolution_l: usize,
    /// Output directory; `train.nfmm` and `val.nfmm` are written inside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    /// Ellipses per phantom in Cases 1 and 3.
    #[serde(default = "default_ellipses")]
    pub ellipse_count: usize,
    #[serde(default = "default_side")]
    pub domain_side: f64,
    #[serde(default = "default_radius")]
    pub source_radius: f64,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_permute")]
    pub permute_width: f64,
}

impl GenerateConfig {
    pub const KEYS: [&'static str; 14] = [
        "case",
        "regime",
        "source_kind",
        "k0",
        "train_count",
        "val_count",
        "seed",
        "resolution_L",
        "output",
        "ellipse_count",
        "domain_side",
        "source_radius",
        "shrink",
        "permute_width",
    ];

    pub fn new(case: u8, regime: Regime, source_kind: SourceKind, k0: f64, train: usize, val: usize, seed: u64, level: usize) -> Self {
        GenerateConfig {
            case,
            regime,
            source_kind,
            k0,
            train_count: train,
            val_count: val,
            seed,
            resolution_l: level,
            output: None,
            ellipse_count: default_ellipses(),
            domain_side: default_side(),
            source_radius: default_radius(),
            shrink: default_shrink(),
            permute_width: default_permute(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: GenerateConfig = toml::from_str(text).map_err(|e| {
            Error::Config(format!("{}; valid keys: {}", e.message(), Self::KEYS.join(", ")))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, output path excluded.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output = None;
        Sha256::digest(c.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        input_planes(self.case)?;
        if !(self.k0 > 0.0) {
            return Err(Error::Config("k0 must be positive".into()));
        }
        if self.resolution_l < 2 || self.resolution_l > 9 {
            return Err(Error::Config(format!("resolution_L must lie in [2, 9], got {}", self.resolution_l)));
        }
        if self.train_count + self.val_count == 0 {
            return Err(Error::Config("at least one sample is required".into()));
        }
        if !(self.domain_side > 0.0) {
            return Err(Error::Config("domain_side must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<TreeGeometry> {
        let half = 0.5 * self.domain_side;
        Ok(build_geometry(self.resolution_l, self.domain_side)?.with_origin([-half, -half]))
    }

    fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            shrink: self.shrink,
            permute_width: self.permute_width,
        }
    }
}

/// Everything a dataset file header records.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub case: u8,
    pub regime: Regime,
    pub source_kind: SourceKind,
    /// 0 train, 1 validation.
    pub split: u8,
    pub k0: f64,
    pub resolution: u32,
    pub domain_side: f64,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub planes: Vec<String>,
    pub input_planes: Vec<usize>,
    pub target_planes: Vec<usize>,
    pub meta_count: usize,
}

impl DatasetHeader {
    pub fn grid_spacing(&self) -> f64 {
        self.domain_side / self.resolution as f64
    }
}

/// One sample as stored: every plane in 32-bit reals plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub planes: Vec<Vec<f32>>,
    pub meta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.header.resolution as usize
    }

    pub fn plane_index(&self, name: &str) -> Option<usize> {
        self.header.planes.iter().position(|p| p == name)
    }

    fn stack(&self, i: usize, planes: &[usize]) -> GridField {
        let res = self.resolution();
        let rec = &self.records[i];
        let p: Vec<Vec<f64>> = planes
            .iter()
            .map(|&k| rec.planes[k].iter().map(|&v| v as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
        GridField::from_planes(res, &refs).expect("planes have grid size")
    }

    pub fn input(&self, i: usize) -> GridField {
        self.stack(i, &self.header.input_planes)
    }

    pub fn target(&self, i: usize) -> GridField {
        self.stack(i, &self.header.target_planes)
    }

    /// Named planes of record `i` as one field.
    pub fn field(&self, i: usize, names: &[&str]) -> Result<GridField> {
        let idx = names
            .iter()
            .map(|n| self.plane_index(n).ok_or_else(|| Error::Format(format!("no plane named {n}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.stack(i, &idx))
    }

    pub fn meta(&self, i: usize, name: &str) -> Option<f32> {
        META.iter().position(|m| *m == name).map(|k| self.records[i].meta[k])
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn quantized(f: &GridField) -> GridField {
    GridField::new(f.resolution(), f.channels(), f.data().iter().map(|&v| quantize(v)).collect()).expect("shape")
}

/// Sample description before solving.
#[derive(Clone, Debug)]
struct Candidate {
    n: GridField,
    source: Source,
    class_id: i32,
}

/// Solves one candidate and packs it into a record. Inputs are rounded to
/// 32 bits first so the stored planes satisfy the PDE that was solved.
fn realise(
    c: &Candidate,
    cfg: &GenerateConfig,
    g: &TreeGeometry,
    solver: Option<&HelmholtzSolver>,
    index: usize,
) -> Result<Record> {
    let res = g.resolution();
    let k0 = cfg.k0;
    let ui = quantized(&incident_field(&c.source, k0, g)?);
    let n = quantized(&c.n);
    let f = scattering_source(&n, &ui, k0);
    let owned;
    let solver = match solver {
        Some(s) => s,
        None => {
            owned = HelmholtzSolver::new(HelmholtzOperator::new(n.data(), res, g.grid_spacing(), k0)?)?;
            &owned
        }
    };
    let sol = solver.solve(&f)?;
    let lambda = TAU / k0;
    if g.grid_spacing() > lambda / 10.0 {
        log::warn!("grid spacing {:.4} exceeds a tenth of the wavelength {lambda:.4}", g.grid_spacing());
    }
    let npix = res * res;
    let mut planes = vec![Vec::with_capacity(npix); PLANES.len()];
    for p in 0..npix {
        planes[0].push(ui.data()[2 * p] as f32);
        planes[1].push(ui.data()[2 * p + 1] as f32);
        planes[2].push(n.data()[p] as f32);
        planes[3].push(f[p].re as f32);
        planes[4].push(f[p].im as f32);
        planes[5].push(sol.u[p].re as f32);
        planes[6].push(sol.u[p].im as f32);
    }
    let (kind, sx, sy, angle) = match c.source {
        Source::Point { position } => (0.0, position[0], position[1], position[1].atan2(position[0])),
        Source::Plane { angle } => (1.0, 0.0, 0.0, angle),
    };
    let meta = vec![
        kind,
        sx as f32,
        sy as f32,
        angle as f32,
        c.class_id as f32,
        sol.residual as f32,
        index as f32,
        0.0,
    ];
    Ok(Record { planes, meta })
}

fn source_from_pixel(kind: SourceKind, g: &TreeGeometry, px: (usize, usize)) -> Source {
    let p = g.pixel_center(px.0, px.1);
    match kind {
        SourceKind::Point => Source::Point { position: p },
        SourceKind::Plane => Source::Plane {
            angle: p[1].atan2(p[0]).rem_euclid(TAU),
        },
    }
}

/// The nine Case 2 exemplars, with 2..=10 ellipses.
pub fn case2_exemplars(cfg: &GenerateConfig) -> Result<Vec<Vec<EllipseParams>>> {
    (0..EXEMPLARS)
        .map(|k| sample_ellipses(k + 2, cfg.regime, &cfg.phantom(), derive_seed(cfg.seed, 1000 + k as u64)))
        .collect()
}

/// The Case 1 phantom.
pub fn case1_phantom(cfg: &GenerateConfig) -> Result<Vec<EllipseParams>> {
    sample_ellipses(cfg.ellipse_count, cfg.regime, &cfg.phantom(), derive_seed(cfg.seed, 999))
}

fn input_key(r: &Record, planes: &[usize]) -> Vec<u32> {
    planes.iter().flat_map(|&p| r.planes[p].iter().map(|v| v.to_bits())).collect()
}

/// Generates the train and validation splits. A pure function of the
/// configuration: no two records, in either split, share identical input
/// planes.
pub fn build_dataset(cfg: &GenerateConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let total = cfg.train_count + cfg.val_count;
    let inputs = input_planes(cfg.case)?;
    let pixels = distinct_circle_pixels(&g, cfg.source_radius);
    if pixels.is_empty() {
        return Err(Error::Config(format!(
            "source circle of radius {} misses the grid",
            cfg.source_radius
        )));
    }

    let mut records: Vec<Record> = Vec::with_capacity(total);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut accept = |rec: Record, records: &mut Vec<Record>| {
        if seen.insert(input_key(&rec, &inputs)) && records.len() < total {
            records.push(rec);
        }
    };

    match cfg.case {
        1 => {
            if total > pixels.len() {
                return Err(Error::Capacity {
                    requested: total,
                    available: pixels.len(),
                });
            }
            let mut order: Vec<usize> = (0..pixels.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, streams::SOURCES));
            let n = rasterize_n(&case1_phantom(cfg)?, &g);
            let solver = HelmholtzSolver::new(HelmholtzOperator::new(
                quantized(&n).data(),
                g.resolution(),
                g.grid_spacing(),
                cfg.k0,
            )?)?;
            let mut next = 0;
            while records.len() < total {
                let want = total - records.len();
                if next + want > order.len() {
                    return Err(Error::Capacity {
                        requested: total,
                        available: records.len() + order.len() - next,
                    });
                }
                let batch: Vec<Record> = order[next..next + want]
                    .par_iter()
                    .enumerate()
                    .map(|(j, &k)| {
                        let c = Candidate {
                            n: n.clone(),
                            source: source_from_pixel(cfg.source_kind, &g, pixels[k]),
                            class_id: -1,
                        };
                        realise(&c, cfg, &g, Some(&solver), next + j)
                    })
                    .collect::<Result<_>>()?;
                next += want;
                for r in batch {
                    accept(r, &mut records);
                }
            }
        }
        2 | 3 => {
            let exemplars = if cfg.case == 2 { case2_exemplars(cfg)? } else { Vec::new() };
            // Case 2 keeps one source: the circle pixel at angle zero.
            let fixed = source_from_pixel(cfg.source_kind, &g, pixels[0]);
            let max_attempts = 10 * total + 10;
            let mut attempt = 0;
            while records.len() < total {
                if attempt >= max_attempts {
                    return Err(Error::Capacity {
                        requested: total,
                        available: records.len(),
                    });
                }
                let want = (total - records.len()).min(max_attempts - attempt);
                let batch: Vec<Record> = (attempt..attempt + want)
                    .into_par_iter()
                    .map(|a| {
                        let s = derive_seed(cfg.seed, a as u64);
                        let c = if cfg.case == 2 {
                            let class = a % EXEMPLARS;
                            Candidate {
                                n: rasterize_n(&permute_exemplar(&exemplars[class], cfg.permute_width, s), &g),
                                source: fixed,
                                class_id: class as i32,
                            }
                        } else {
                            let mut r = rng::stream(s, streams::SOURCES);
                            let source = match cfg.source_kind {
                                SourceKind::Point => source_from_pixel(
                                    SourceKind::Point,
                                    &g,
                                    pixels[r.gen_range(0..pixels.len())],
                                ),
                                SourceKind::Plane => Source::Plane {
                                    angle: r.gen_range(0.0..TAU),
                                },
                            };
                            Candidate {
                                n: rasterize_n(&sample_ellipses(cfg.ellipse_count, cfg.regime, &cfg.phantom(), s)?, &g),
                                source,
                                class_id: -1,
                            }
                        };
                        realise(&c, cfg, &g, None, a)
                    })
                    .collect::<Result<_>>()?;
                attempt += want;
                for r in batch {
                    accept(r, &mut records);
                }
            }
        }
        _ => unreachable!("validated"),
    }

    let header = |split: u8| DatasetHeader {
        version: FORMAT_VERSION,
        case: cfg.case,
        regime: cfg.regime,
        source_kind: cfg.source_kind,
        split,
        k0: cfg.k0,
        resolution: g.resolution() as u32,
        domain_side: cfg.domain_side,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        planes: PLANES.iter().map(|s| s.to_string()).collect(),
        input_planes: inputs.clone(),
        target_planes: TARGET_PLANES.to_vec(),
        meta_count: META.len(),
    };
    let val = records.split_off(cfg.train_count);
    Ok((
        Dataset {
            header: header(0),
            records,
        },
        Dataset {
            header: header(1),
            records: val,
        },
    ))
}
