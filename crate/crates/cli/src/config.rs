//! The single config file every subcommand reads. Each subcommand owns one
//! section; absent sections take their defaults, and command-line flags win.

use std::path::{Path, PathBuf};

use paconv::autograd::LossKind;
use paconv::equivalence::EquivalenceConfig;
use paconv::geometry::RelationMode;
use paconv::paconv::{AggMode, ExecPath, NormMode};
use paconv::regularize::CorrStudyConfig;
use paconv::scorefield::Plane;
use paconv::trainer::TrainConfig;
use paconv::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub equivalence: EquivalenceConfig,
    pub flops: FlopsSection,
    pub scorefield: ScorefieldSection,
    pub gradcheck: GradcheckSection,
    pub train: TrainConfig,
    pub robustness: RobustnessSection,
    pub corr_study: CorrStudySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: Vec<usize>,
    pub relation: RelationMode,
    /// Extra bank sizes to tabulate.
    pub m_sweep: Vec<usize>,
    /// Run an instrumented forward and require exact agreement.
    pub verify: bool,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            n: 4096,
            k: 32,
            m: 16,
            c_in: 64,
            c_out: 64,
            hidden: vec![16, 16, 16],
            relation: RelationMode::Full7,
            m_sweep: vec![1, 2, 4, 8, 16, 32],
            verify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorefieldSection {
    pub params: Option<PathBuf>,
    /// Which PAConv layer of a model file to read.
    pub layer: usize,
    pub planes: Vec<Plane>,
    pub resolution: usize,
    pub extent: f64,
    pub center: [f64; 3],
}

impl Default for ScorefieldSection {
    fn default() -> Self {
        Self {
            params: None,
            layer: 0,
            planes: Plane::ALL.to_vec(),
            resolution: 64,
            extent: 1.0,
            center: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub n: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub m: usize,
    pub hidden: Vec<usize>,
    pub relation: RelationMode,
    pub aggs: Vec<AggMode>,
    pub norms: Vec<NormMode>,
    pub paths: Vec<ExecPath>,
    pub loss: LossKind,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            n: 12,
            k: 4,
            c_in: 5,
            c_out: 6,
            m: 8,
            hidden: vec![16, 16, 16],
            relation: RelationMode::Full7,
            aggs: AggMode::ALL.to_vec(),
            norms: NormMode::ALL.to_vec(),
            paths: ExecPath::ALL.to_vec(),
            loss: LossKind::SumOfSquares,
            eps: paconv::autograd::DEFAULT_EPS,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Trained model to load; without one the `train` section is run first.
    pub model: Option<PathBuf>,
    /// Transform specs such as `rotate_z:90`; empty means the full suite.
    pub transforms: Vec<String>,
    pub seed: u64,
    /// Largest accuracy drop tolerated for jitter.
    pub jitter_tolerance: f64,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            model: None,
            transforms: Vec::new(),
            seed: 0,
            jitter_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrStudySection {
    #[serde(flatten)]
    pub study: CorrStudyConfig,
    /// The run fails unless final mean |R| ends below this.
    pub require_mean_abs_r: f64,
}

impl Default for CorrStudySection {
    fn default() -> Self {
        Self {
            study: CorrStudyConfig::default(),
            require_mean_abs_r: 0.05,
        }
    }
}

/// Convert a line/column pair reported by a text parser into a byte offset.
fn toml_offset(err: &toml::de::Error) -> usize {
    err.span().map_or(0, |s| s.start)
}

pub fn load(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Core(paconv::Error::from_json(e, &text)))
    } else {
        toml::from_str(&text).map_err(|e| {
            CliError::Core(paconv::Error::Parse {
                offset: toml_offset(&e),
                message: e.message().to_string(),
            })
        })
    }
}
