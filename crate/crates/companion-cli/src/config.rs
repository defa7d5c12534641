//! Run configuration: JSON schema, strict validation, and resolution into
//! the core trainer config.
//!
//! Unknown keys are rejected everywhere. A `ce` run must not mention
//! companion knobs at all; `dcp` fixes its distance to MSE and has no
//! companion learning rate.

use companion_core::data::SyntheticSpec;
use companion_core::dcl::{AlphaMode, DclConfig, LrSchedule};
use companion_core::model::MlpSpec;
use companion_core::objectives::{DistanceKind, DEFAULT_INFONCE_TAU};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ce,
    Dcl,
    Dcp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Dcl => "dcl",
            Method::Dcp => "dcp",
        }
    }
}

/// Partial trainer settings as they appear in the config file. Every
/// field is optional; omissions fall back to the documented defaults
/// during resolution.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_mode: Option<AlphaMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<LrSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<DistanceKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infonce_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub companion_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl TrainSection {
    /// Layer an override section on top of this one.
    pub fn merged_with(&self, over: &TrainSection) -> TrainSection {
        TrainSection {
            alpha: over.alpha.or(self.alpha),
            alpha_mode: over.alpha_mode.or(self.alpha_mode),
            lambda: over.lambda.or(self.lambda),
            eta_theta: over.eta_theta.or(self.eta_theta),
            eta_omega: over.eta_omega.or(self.eta_omega),
            lr_schedule: over.lr_schedule.or(self.lr_schedule),
            momentum: over.momentum.or(self.momentum),
            weight_decay: over.weight_decay.or(self.weight_decay),
            distance: over.distance.or(self.distance),
            infonce_tau: over.infonce_tau.or(self.infonce_tau),
            companion_fraction: over.companion_fraction.or(self.companion_fraction),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
        }
    }

    /// Reject companion knobs for methods that have no companion side.
    pub fn check_allowed(&self, method: Method) -> Result<(), String> {
        let forbid = |present: bool, key: &str| -> Result<(), String> {
            if present {
                Err(format!(
                    "config key `{key}` is not allowed for method `{}`",
                    method.name()
                ))
            } else {
                Ok(())
            }
        };
        match method {
            Method::Ce => {
                forbid(self.alpha.is_some(), "alpha")?;
                forbid(self.alpha_mode.is_some(), "alpha_mode")?;
                forbid(self.lambda.is_some(), "lambda")?;
                forbid(self.distance.is_some(), "distance")?;
                forbid(self.infonce_tau.is_some(), "infonce_tau")?;
                forbid(self.eta_omega.is_some(), "eta_omega")?;
                forbid(self.companion_fraction.is_some(), "companion_fraction")?;
            }
            Method::Dcp => {
                forbid(self.distance.is_some(), "distance")?;
                forbid(self.infonce_tau.is_some(), "infonce_tau")?;
                forbid(self.alpha_mode.is_some(), "alpha_mode")?;
                forbid(self.eta_omega.is_some(), "eta_omega")?;
            }
            Method::Dcl => {}
        }
        Ok(())
    }

    /// Resolve into a full trainer config. `epochs` must be present.
    /// `eta_omega` defaults to `eta_theta` (the shared-rate convention)
    /// and the InfoNCE temperature is attached to the distance kind.
    pub fn resolve(&self, seed: u64) -> Result<DclConfig, String> {
        let defaults = DclConfig::default();
        let epochs = self.epochs.ok_or("config key `epochs` is required")?;
        let eta_theta = self.eta_theta.unwrap_or(defaults.eta_theta);
        let mut distance = self.distance.unwrap_or(defaults.distance);
        if let DistanceKind::InfoNce { .. } = distance {
            distance = DistanceKind::InfoNce {
                tau: self.infonce_tau.unwrap_or(DEFAULT_INFONCE_TAU),
            };
        } else if self.infonce_tau.is_some() {
            return Err("config key `infonce_tau` requires distance `infonce`".into());
        }
        let config = DclConfig {
            alpha: self.alpha.unwrap_or(defaults.alpha),
            alpha_mode: self.alpha_mode.unwrap_or(defaults.alpha_mode),
            lambda: self.lambda.unwrap_or(defaults.lambda),
            eta_theta,
            eta_omega: self.eta_omega.unwrap_or(eta_theta),
            lr_schedule: self.lr_schedule.unwrap_or(defaults.lr_schedule),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            weight_decay: self.weight_decay.unwrap_or(defaults.weight_decay),
            distance,
            companion_fraction: self
                .companion_fraction
                .unwrap_or(defaults.companion_fraction),
            epochs,
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            seed,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
    Idx(IdxSource),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_normalize")]
    pub normalize: bool,
}

fn default_normalize() -> bool {
    true
}

/// One entry of a compare config: either a bare method name or a method
/// with a label and setting overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Name(Method),
    Detailed {
        method: Method,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        #[serde(default)]
        train: Box<TrainSection>,
    },
}

/// The whole config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required by `train`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Required by `compare`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<VariantSpec>>,
    pub model: MlpSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub companion_model: Option<MlpSpec>,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainSection,
    /// Compare-mode sweep over alpha values (dcl/dcp variants only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<Vec<f64>>,
    /// Compare-mode sweep over distance kinds (dcl variants only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_grid: Option<Vec<DistanceKind>>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// A fully resolved unit of training work in a comparison.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
        config.validate_common()?;
        Ok(config)
    }

    fn validate_common(&self) -> Result<(), String> {
        self.model
            .validate()
            .map_err(|e| format!("model: {e}"))?;
        if let Some(companion) = &self.companion_model {
            companion
                .validate()
                .map_err(|e| format!("companion_model: {e}"))?;
            if companion.input_dim != self.model.input_dim
                || companion.num_classes != self.model.num_classes
            {
                return Err(
                    "companion_model must share input_dim and num_classes with model".into(),
                );
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| format!("data.synthetic: {e}"))?;
            if spec.input_dim != self.model.input_dim
                || spec.num_classes != self.model.num_classes
            {
                return Err("data.synthetic must match the model's input_dim and num_classes".into());
            }
        }
        if self.seeds.is_empty() {
            return Err("config key `seeds` must list at least one seed".into());
        }
        Ok(())
    }

    /// Validation for the `train` subcommand.
    pub fn validate_for_run(&self) -> Result<Method, String> {
        let method = self
            .method
            .ok_or("config key `method` is required for `train`")?;
        if self.methods.is_some() {
            return Err("config key `methods` belongs to `compare`, not `train`".into());
        }
        if self.alpha_grid.is_some() || self.distance_grid.is_some() {
            return Err("grid keys belong to `compare`, not `train`".into());
        }
        self.train.check_allowed(method)?;
        if method != Method::Dcl && self.companion_model.is_some() {
            return Err(format!(
                "config key `companion_model` is not allowed for method `{}`",
                method.name()
            ));
        }
        // surface resolution errors (missing epochs, bad ranges) now
        self.train.resolve(self.seeds[0])?;
        Ok(method)
    }

    /// Validation + expansion for the `compare` subcommand: one variant
    /// per (method entry x grid point), at least two in total.
    pub fn expand_variants(&self) -> Result<Vec<Variant>, String> {
        let entries = self
            .methods
            .as_ref()
            .ok_or("config key `methods` is required for `compare`")?;
        if self.method.is_some() {
            return Err("config key `method` belongs to `train`, not `compare`".into());
        }
        if entries.is_empty() {
            return Err("config key `methods` must not be empty".into());
        }
        if self.alpha_grid.is_some() && self.distance_grid.is_some() {
            return Err("use either alpha_grid or distance_grid, not both".into());
        }

        let mut variants = Vec::new();
        for entry in entries {
            let (method, label, over) = match entry {
                VariantSpec::Name(m) => (*m, None, TrainSection::default()),
                VariantSpec::Detailed {
                    method,
                    label,
                    train,
                } => (*method, label.clone(), (**train).clone()),
            };
            // explicit overrides obey the per-method restrictions; the
            // shared base section may carry knobs other variants need
            over.check_allowed(method)?;
            let merged = self.train.merged_with(&over);
            let base_label = label.unwrap_or_else(|| method.name().to_string());

            if let Some(grid) = &self.alpha_grid {
                if method == Method::Ce {
                    return Err("alpha_grid cannot apply to a `ce` variant".into());
                }
                for &alpha in grid {
                    let mut section = merged.clone();
                    section.alpha = Some(alpha);
                    variants.push(Variant {
                        label: format!("{base_label}-alpha-{alpha}"),
                        method,
                        train: section,
                    });
                }
            } else if let Some(grid) = &self.distance_grid {
                if method != Method::Dcl {
                    return Err("distance_grid applies to `dcl` variants only".into());
                }
                for &kind in grid {
                    let mut section = merged.clone();
                    section.distance = Some(kind);
                    if !matches!(kind, DistanceKind::InfoNce { .. }) {
                        section.infonce_tau = None;
                    }
                    variants.push(Variant {
                        label: format!("{base_label}-{}", kind.name()),
                        method,
                        train: section,
                    });
                }
            } else {
                variants.push(Variant {
                    label: base_label,
                    method,
                    train: merged,
                });
            }
        }

        if variants.len() < 2 {
            return Err("compare needs at least two variants (methods and/or grid points)".into());
        }
        let mut labels: Vec<&str> = variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != variants.len() {
            return Err("variant labels must be unique; set `label` on duplicates".into());
        }
        for v in &variants {
            v.train
                .resolve(self.seeds[0])
                .map_err(|e| format!("variant `{}`: {e}", v.label))?;
        }
        Ok(variants)
    }
}
