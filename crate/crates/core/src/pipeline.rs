//! End-to-end segmentation: atlas selection, majority-vote initialization,
//! optional forest fusion and optional propagation refinement.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusion::{
    binarize, candidate_voxels, fuse_rf, majority_vote, FusionConfig, FusionStats, ProbMap,
};
use crate::metrics::{evaluate, rank_atlases, EvalReport};
use crate::propagation::{refine, BalanceReport, PropagationConfig};
use crate::volume::{
    bounding_box_from_labels, read_image, read_labels, Atlas, AtlasSet, BoundingBox, Image,
    LabelVolume, VoxelIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Majority voting.
    Mv,
    /// Majority voting refined by label propagation.
    MvSslp,
    /// Local random-forest regression fusion.
    LllRf,
    /// Forest fusion refined by label propagation.
    RfSslp,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mv, Mode::MvSslp, Mode::LllRf, Mode::RfSslp];

    pub fn uses_forest(self) -> bool {
        matches!(self, Mode::LllRf | Mode::RfSslp)
    }

    pub fn uses_propagation(self) -> bool {
        matches!(self, Mode::MvSslp | Mode::RfSslp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Mv => "mv",
            Mode::MvSslp => "mv-sslp",
            Mode::LllRf => "lll-rf",
            Mode::RfSslp => "rf-sslp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_atlases_selected: usize,
    /// Voxels added around the atlas foreground to form the region of interest.
    pub margin: usize,
    pub fusion: FusionConfig,
    pub propagation: PropagationConfig,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_atlases_selected: 20,
            margin: 10,
            fusion: FusionConfig::default(),
            propagation: PropagationConfig::default(),
            seed: 0,
            mode: Mode::RfSslp,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_atlases_selected == 0 {
            return Err(Error::Config(
                "n_atlases_selected must be at least 1".into(),
            ));
        }
        self.fusion.validate()?;
        self.propagation.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationMeta {
    pub iterations: usize,
    pub converged: bool,
    pub balance: BalanceReport,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub selection_ms: f64,
    pub majority_vote_ms: f64,
    pub fusion_ms: f64,
    pub propagation_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMeta {
    pub mode: Mode,
    /// Indices into the input atlas list, most similar first.
    pub selected_atlases: Vec<usize>,
    pub bbox: BoundingBox,
    pub n_candidates: usize,
    pub fusion: Option<FusionStats>,
    pub propagation: Option<PropagationMeta>,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Binary mask on the full target grid.
    pub mask: LabelVolume,
    pub prob: ProbMap,
    pub meta: EvalMeta,
}

impl Segmentation {
    /// The probabilistic map pasted into the full grid; voxels outside the
    /// box read +1 when every selected atlas marks them foreground, else -1.
    pub fn prob_volume(&self) -> Result<Image> {
        let dims = self.mask.dims();
        let bbox = self.prob.bbox;
        let mut vol = self.prob.to_volume(dims, -1.0)?.into_data();
        for (i, (p, &m)) in vol.iter_mut().zip(self.mask.data()).enumerate() {
            if !bbox.contains(VoxelIndex::from_linear(i, dims)) && m == 1 {
                *p = 1.0;
            }
        }
        Image::new(dims, self.mask.spacing(), vol)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs every requested mode, sharing the selection, vote and forest stages.
pub fn run_modes(
    target: &Image,
    atlases: &AtlasSet,
    cfg: &RunConfig,
    modes: &[Mode],
) -> Result<Vec<Segmentation>> {
    cfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::Config("at least one atlas is required".into()));
    }
    atlases.check_grid(target)?;

    let t0 = Instant::now();
    let search_box = bounding_box_from_labels(&atlases.labels(), cfg.margin)?;
    let n_sel = cfg.n_atlases_selected.min(atlases.len());
    let selected_idx = rank_atlases(target, atlases, &search_box, n_sel)?;
    let selected = atlases.select(&selected_idx);
    let bbox = bounding_box_from_labels(&selected.labels(), cfg.margin)?;
    let mut timings = Timings {
        selection_ms: ms(t0),
        ..Default::default()
    };

    let t0 = Instant::now();
    let labels = selected.labels();
    let mv = majority_vote(&labels, &bbox)?;
    let candidates = candidate_voxels(&mv);
    timings.majority_vote_ms = ms(t0);

    let rf = if modes.iter().any(|m| m.uses_forest()) {
        let t0 = Instant::now();
        let mut fusion = cfg.fusion;
        fusion.forest.seed = cfg.seed;
        let out = fuse_rf(target, &selected, &candidates, &mv, &fusion)?;
        timings.fusion_ms = ms(t0);
        Some(out)
    } else {
        None
    };

    let dims = target.dims();
    // outside the box only unanimous foreground survives
    let outside: Vec<u8> = (0..target.len())
        .map(|i| labels.iter().all(|l| l.data()[i] == 1) as u8)
        .collect();

    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut timings = timings.clone();
        let (base, fusion_stats) = match (mode.uses_forest(), &rf) {
            (true, Some((p, stats))) => (p, Some(*stats)),
            _ => (&mv, None),
        };
        if !mode.uses_forest() {
            timings.fusion_ms = 0.0;
        }
        let (prob, propagation) = if mode.uses_propagation() {
            let t0 = Instant::now();
            let r = refine(base, target, &cfg.propagation)?;
            timings.propagation_ms = ms(t0);
            (
                r.map,
                Some(PropagationMeta {
                    iterations: r.iterations,
                    converged: r.converged,
                    balance: r.balance,
                }),
            )
        } else {
            (base.clone(), None)
        };

        let inside = binarize(&prob, 0.0);
        let mut data = outside.clone();
        for (local, &l) in inside.data().iter().enumerate() {
            data[bbox.voxel_at(local).linear(dims)] = l;
        }
        let mask = LabelVolume::new(dims, target.spacing(), data)?;
        results.push(Segmentation {
            mask,
            prob,
            meta: EvalMeta {
                mode,
                selected_atlases: selected_idx.clone(),
                bbox,
                n_candidates: candidates.len(),
                fusion: fusion_stats,
                propagation,
                timings,
            },
        });
    }
    Ok(results)
}

/// Segments `target` with `cfg.mode`.
pub fn segment(target: &Image, atlases: &AtlasSet, cfg: &RunConfig) -> Result<Segmentation> {
    Ok(run_modes(target, atlases, cfg, &[cfg.mode])?.remove(0))
}

/// Loads every `<name>_img` / `<name>_lbl` pair in `dir`, sorted by name.
pub fn load_atlas_dir(dir: &Path) -> Result<(AtlasSet, Vec<String>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = file.strip_suffix("_img.json") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no *_img.json atlases found in {}",
            dir.display()
        )));
    }
    let atlases = names
        .iter()
        .map(|n| {
            Ok(Atlas {
                image: read_image(&dir.join(format!("{n}_img")))?,
                labels: read_labels(&dir.join(format!("{n}_lbl")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((AtlasSet::new(atlases), names))
}

/// A parameter sweep: a base config, axes addressed by dotted field paths,
/// and the modes to evaluate for every grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub base: Value,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
    #[serde(default = "all_modes")]
    pub modes: Vec<Mode>,
}

fn all_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the run config, e.g. `propagation.sigma`.
    pub path: String,
    pub values: Vec<Value>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut at = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !at.is_object() {
            *at = Value::Object(Default::default());
        }
        let obj = at.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        at = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty sweep path {path:?}")))
}

impl SweepGrid {
    /// Every grid point as `(axis values, config)`, first axis varying slowest.
    pub fn configs(&self) -> Result<Vec<(Vec<Value>, RunConfig)>> {
        let base = if self.base.is_null() {
            Value::Object(Default::default())
        } else {
            self.base.clone()
        };
        let mut points: Vec<Vec<Value>> = vec![Vec::new()];
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!(
                    "sweep axis {} has no values",
                    axis.path
                )));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|values| {
                let mut doc = base.clone();
                for (axis, v) in self.axes.iter().zip(&values) {
                    set_path(&mut doc, &axis.path, v.clone())?;
                }
                let cfg: RunConfig =
                    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
                cfg.validate()?;
                Ok((values, cfg))
            })
            .collect()
    }
}

/// A phantom (or registered case) with known ground truth.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub target: Image,
    pub truth: LabelVolume,
    pub atlases: AtlasSet,
}

/// Loads `dir` itself if it holds `target.json`, else every subdirectory that does.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let load = |d: &Path| -> Result<Case> {
        Ok(Case {
            name: d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            target: read_image(&d.join("target"))?,
            truth: read_labels(&d.join("truth"))?,
            atlases: load_atlas_dir(d)?.0,
        })
    };
    if dir.join("target.json").exists() {
        return Ok(vec![load(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("target.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!(
            "no phantom cases found in {}",
            dir.display()
        )));
    }
    subdirs.iter().map(|d| load(d)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub config: usize,
    pub mode: Mode,
    pub params: Vec<Value>,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub md_mean: f64,
    pub md_std: f64,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates every grid point and mode over `cases`.
pub fn sweep(grid: &SweepGrid, cases: &[Case]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (config, (params, cfg)) in grid.configs()?.into_iter().enumerate() {
        let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); grid.modes.len()];
        for case in cases {
            let segs = run_modes(&case.target, &case.atlases, &cfg, &grid.modes)?;
            for (slot, seg) in reports.iter_mut().zip(&segs) {
                slot.push(evaluate(&seg.mask, &case.truth)?);
            }
        }
        for (mode, reps) in grid.modes.iter().zip(reports) {
            let dice: Vec<f64> = reps.iter().map(|r| r.dice).collect();
            let md: Vec<f64> = reps.iter().map(|r| r.mean_distance_mm).collect();
            let (dice_mean, dice_std) = mean_std(&dice);
            let (md_mean, md_std) = mean_std(&md);
            rows.push(SweepRow {
                config,
                mode: *mode,
                params: params.clone(),
                n: reps.len(),
                dice_mean,
                dice_std,
                md_mean,
                md_std,
            });
        }
    }
    Ok(rows)
}

/// Renders sweep rows as CSV with one column per sweep axis.
pub fn sweep_csv(grid: &SweepGrid, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config".to_string(), "mode".to_string()];
    header.extend(grid.axes.iter().map(|a| a.path.clone()));
    header.extend(["n", "dice_mean", "dice_std", "md_mean", "md_std"].map(String::from));
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.config.to_string(), r.mode.name().to_string()];
        rec.extend(r.params.iter().map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        rec.extend([
            r.n.to_string(),
            format!("{:.6}", r.dice_mean),
            format!("{:.6}", r.dice_std),
            format!("{:.6}", r.md_mean),
            format!("{:.6}", r.md_std),
        ]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
