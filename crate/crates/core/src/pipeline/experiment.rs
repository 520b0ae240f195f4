use super::{reconstruct_observed, PipelineError, ReconConfig, ReconStep};
use crate::evaluation::{evaluate_structures, simpson_biplane, SIMPSON_DISKS};
use crate::model::Checkpoint;
use crate::phantom::case_seed;
use crate::views::{acquire_bundle, ViewName, DEFAULT_SIGMA_MM, IMAGE_SIZE};
use crate::volume::{Class, LabelVolume};
use log::info;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

/// Experiment label of the Simpson's-rule rows emitted by the biplane
/// experiment.
pub const SIMPSON_EXPERIMENT: &str = "simpson-biplane";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    /// Latent code and non-anchored poses from perturbed acquisitions.
    JointPerturbed,
    /// Latent code only, perturbed acquisitions.
    LatentOnlyPerturbed,
    /// Latent code only, unperturbed acquisitions at their true poses.
    IdealPose,
    /// Joint optimization on A2C and A4C only, plus Simpson's rule on the
    /// same masks.
    Biplane,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::JointPerturbed,
        ExperimentName::LatentOnlyPerturbed,
        ExperimentName::IdealPose,
        ExperimentName::Biplane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::JointPerturbed => "joint-perturbed",
            ExperimentName::LatentOnlyPerturbed => "latent-only-perturbed",
            ExperimentName::IdealPose => "ideal-pose",
            ExperimentName::Biplane => "biplane",
        }
    }

    pub fn perturbed(self) -> bool {
        self != ExperimentName::IdealPose
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentName {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("unknown experiment {s:?}")))
    }
}

/// Shared settings of the experiment protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Step counts, rates and subsampling; the pose and view settings are
    /// overridden per experiment.
    pub recon: ReconConfig,
    /// Landmark noise for perturbed acquisitions (mm).
    pub sigma_mm: f64,
    pub image_size: usize,
    pub simpson_disks: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            recon: ReconConfig::default(),
            sigma_mm: DEFAULT_SIGMA_MM,
            image_size: IMAGE_SIZE,
            simpson_disks: SIMPSON_DISKS,
            seed: 0,
        }
    }
}

/// The reconstruction settings an experiment runs with.
pub fn experiment_recon_config(name: ExperimentName, base: &ReconConfig) -> ReconConfig {
    let (optimize_pose, active_views) = match name {
        ExperimentName::JointPerturbed => (true, ViewName::ALL.to_vec()),
        ExperimentName::LatentOnlyPerturbed | ExperimentName::IdealPose => (false, ViewName::ALL.to_vec()),
        ExperimentName::Biplane => (true, vec![ViewName::A2C, ViewName::A4C]),
    };
    ReconConfig {
        optimize_pose,
        active_views,
        anchored_view: ViewName::A4C,
        ..base.clone()
    }
}

/// A held-out case: identifier, phantom seed, and reference volume.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentCase<'a> {
    pub id: &'a str,
    pub seed: u64,
    pub volume: &'a LabelVolume,
}

/// One line of the results table. Metrics that do not apply (surface
/// metrics for Simpson's rule, ASSD of a missing structure) are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub case_id: String,
    pub experiment: String,
    pub structure: String,
    pub dice: Option<f64>,
    pub assd_mm: Option<f64>,
    pub mae_ml: Option<f64>,
    pub mae_pct: Option<f64>,
}

/// Seed of a case's slice acquisition. Every experiment on the same case
/// sees the same perturbations.
pub fn acquisition_seed(config_seed: u64, case_seed_value: u64) -> u64 {
    case_seed(config_seed ^ case_seed_value, 0)
}

/// Run one experiment over held-out cases. Rows are ordered by case id,
/// then experiment label, then structure.
pub fn run_experiment(
    name: ExperimentName,
    cases: &[ExperimentCase<'_>],
    ckpt: &Checkpoint,
    config: &ExperimentConfig,
) -> Result<Vec<ResultRow>, PipelineError> {
    run_experiment_observed(name, cases, ckpt, config, |_, _| {})
}

/// [`run_experiment`], calling `observe` with the case id after every
/// reconstruction step.
pub fn run_experiment_observed(
    name: ExperimentName,
    cases: &[ExperimentCase<'_>],
    ckpt: &Checkpoint,
    config: &ExperimentConfig,
    mut observe: impl FnMut(&str, &ReconStep<'_>),
) -> Result<Vec<ResultRow>, PipelineError> {
    if let Some(c) = cases.iter().find(|c| ckpt.codebook.get(c.id).is_some()) {
        return Err(PipelineError::CohortOverlap(c.id.to_string()));
    }
    let recon_config = experiment_recon_config(name, &config.recon);
    recon_config.validate()?;
    let sigma = if name.perturbed() { config.sigma_mm } else { 0.0 };
    let mut sorted: Vec<&ExperimentCase<'_>> = cases.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(b.id));

    let mut rows = Vec::new();
    for (i, case) in sorted.iter().enumerate() {
        let bundle = acquire_bundle(
            case.volume,
            case.id,
            sigma,
            acquisition_seed(config.seed, case.seed),
            config.image_size,
        )?;
        let result = reconstruct_observed(&bundle, ckpt, &recon_config, |s| observe(case.id, s))?;
        for (class, m) in evaluate_structures(&result.volume, case.volume)? {
            rows.push(ResultRow {
                case_id: case.id.to_string(),
                experiment: name.name().to_string(),
                structure: class.name().to_string(),
                dice: Some(m.dice),
                assd_mm: m.assd_mm,
                mae_ml: Some(m.mae_ml),
                mae_pct: Some(m.mae_pct),
            });
        }
        if name == ExperimentName::Biplane {
            let a2c = &bundle.view(ViewName::A2C).ok_or(PipelineError::MissingView(ViewName::A2C))?.mask;
            let a4c = &bundle.view(ViewName::A4C).ok_or(PipelineError::MissingView(ViewName::A4C))?.mask;
            for class in [Class::LeftVentricle, Class::LeftAtrium] {
                let reference = case.volume.volume_ml(class);
                let (mae_ml, mae_pct) = match simpson_biplane(a2c, a4c, class, config.simpson_disks) {
                    Ok(v) => {
                        let mae = (v - reference).abs();
                        (Some(mae), (reference > 0.0).then(|| 100.0 * mae / reference))
                    }
                    Err(e) => {
                        log::warn!("{}: Simpson's rule failed for {class}: {e}", case.id);
                        (None, None)
                    }
                };
                rows.push(ResultRow {
                    case_id: case.id.to_string(),
                    experiment: SIMPSON_EXPERIMENT.to_string(),
                    structure: class.name().to_string(),
                    dice: None,
                    assd_mm: None,
                    mae_ml,
                    mae_pct,
                });
            }
        }
        info!(
            "{name}: case {} ({}/{}) final loss {:.4}",
            case.id,
            i + 1,
            sorted.len(),
            result.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    rows.sort_by(|a, b| {
        (a.case_id.as_str(), a.experiment.as_str(), structure_rank(&a.structure)).cmp(&(
            b.case_id.as_str(),
            b.experiment.as_str(),
            structure_rank(&b.structure),
        ))
    });
    Ok(rows)
}

fn structure_rank(name: &str) -> u8 {
    Class::from_name(name).map(Class::id).unwrap_or(u8::MAX)
}

/// Results table as CSV with a header row.
pub fn write_results_csv(rows: &[ResultRow], w: impl Write) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| PipelineError::Output(e.to_string()))?;
    }
    out.flush().map_err(|e| PipelineError::Output(e.to_string()))
}

/// Mean and sample standard deviation of one metric over cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CellStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub structure: String,
    pub dice: Option<CellStats>,
    pub assd_mm: Option<CellStats>,
    pub mae_ml: Option<CellStats>,
    pub mae_pct: Option<CellStats>,
}

/// Mean ± std per experiment and structure: one block of rows per
/// experiment, structures as rows, metrics as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiments: BTreeMap<String, Vec<StructureSummary>>,
}

impl Aggregate {
    pub fn get(&self, experiment: &str, structure: &str) -> Option<&StructureSummary> {
        self.experiments.get(experiment)?.iter().find(|s| s.structure == structure)
    }

    /// Mean over structures of the per-structure mean Dice.
    pub fn mean_dice(&self, experiment: &str) -> Option<f64> {
        let means: Vec<f64> = self
            .experiments
            .get(experiment)?
            .iter()
            .filter_map(|s| s.dice.map(|d| d.mean))
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

pub fn aggregate(rows: &[ResultRow]) -> Aggregate {
    let mut groups: BTreeMap<String, BTreeMap<(u8, String), Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry(r.experiment.clone())
            .or_default()
            .entry((structure_rank(&r.structure), r.structure.clone()))
            .or_default()
            .push(r);
    }
    let experiments = groups
        .into_iter()
        .map(|(exp, by_structure)| {
            let summaries = by_structure
                .into_iter()
                .map(|((_, structure), rows)| {
                    let col = |f: fn(&ResultRow) -> Option<f64>| {
                        CellStats::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                    };
                    StructureSummary {
                        structure,
                        dice: col(|r| r.dice),
                        assd_mm: col(|r| r.assd_mm),
                        mae_ml: col(|r| r.mae_ml),
                        mae_pct: col(|r| r.mae_pct),
                    }
                })
                .collect();
            (exp, summaries)
        })
        .collect();
    Aggregate { experiments }
}
