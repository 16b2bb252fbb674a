//! Run configuration: a flat `section.key=value` text format.
//!
//! Parsing starts from the built-in defaults and applies one line at a time;
//! unknown keys are rejected by name. [`resolved`] renders every key back
//! out, and re-parsing that echo reproduces the config exactly, so any run
//! can be replayed from its emitted `config.resolved.txt`.

use crate::adapt::LaConfig;
use crate::labelgen::PgeConfig;
use crate::split::SplitMode;
use crate::ssod::SsodConfig;
use crate::synthworld::{NoiseModel, WorldConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub noise: NoiseModel,
    pub pge: PgeConfig,
    pub la: LaConfig,
    pub split_mode: SplitMode,
    pub p: f64,
    pub ssod: SsodConfig,
    /// Iteration count of the outer refinement loop; 0 runs localization
    /// adaptation only.
    pub iterations: usize,
    /// Seed of the training-side RNG streams (the world has its own).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            noise: NoiseModel::default(),
            pge: PgeConfig::default(),
            la: LaConfig::default(),
            split_mode: SplitMode::TwoTasks,
            p: 0.6,
            ssod: SsodConfig::default(),
            iterations: 2,
            seed: 7,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

/// Range checks on the threshold-like fields. World feasibility is checked
/// separately by the generator.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let unit_open = [
        ("pge.t_nms", cfg.pge.t_nms),
        ("pge.t_score", cfg.pge.t_score),
        ("pge.t_fusion", cfg.pge.t_fusion),
        ("la.tau_score", cfg.la.tau_score),
        ("la.tau_assign", cfg.la.tau_assign),
        ("ssod.tau_assign", cfg.ssod.tau_assign),
        ("ssod.pseudo_score_threshold", cfg.ssod.pseudo_score_threshold),
        ("ssod.jitter_variance_threshold", cfg.ssod.jitter_variance_threshold),
    ];
    for (key, v) in unit_open {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidValue {
                key: key.to_string(),
                msg: format!("{v} outside (0, 1)"),
            });
        }
    }
    if !(cfg.p > 0.0 && cfg.p <= 1.0) {
        return Err(Error::InvalidValue {
            key: "split.p".to_string(),
            msg: format!("{} outside (0, 1]", cfg.p),
        });
    }
    for (key, v) in [
        ("la.beta", cfg.la.beta),
        ("ssod.teacher_momentum", cfg.ssod.teacher_momentum),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidValue {
                key: key.to_string(),
                msg: format!("{v} outside [0, 1]"),
            });
        }
    }
    for (key, v) in [
        ("la.alpha", cfg.la.alpha),
        ("la.lambda_re", cfg.la.lambda_re),
        ("ssod.lambda_u", cfg.ssod.lambda_u),
        ("noise.box_jitter", cfg.noise.box_jitter),
        ("noise.fp_per_image", cfg.noise.fp_per_image),
    ] {
        if v < 0.0 {
            return Err(Error::InvalidValue {
                key: key.to_string(),
                msg: format!("{v} must be non-negative"),
            });
        }
    }
    for (key, v) in [
        ("noise.part_rate", cfg.noise.part_rate),
        ("noise.mislabel_rate", cfg.noise.mislabel_rate),
        ("noise.drop_rate", cfg.noise.drop_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidValue {
                key: key.to_string(),
                msg: format!("{v} outside [0, 1]"),
            });
        }
    }
    if cfg.noise.part_rate + cfg.noise.mislabel_rate + cfg.noise.drop_rate > 1.0 {
        return Err(Error::InvalidValue {
            key: "noise.part_rate".to_string(),
            msg: "part, mislabel and drop rates must sum to at most 1".to_string(),
        });
    }
    Ok(())
}

/// Apply one `key=value` override.
pub fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "world.num_images" => cfg.world.num_images = parse_value(key, value)?,
        "world.classes" => cfg.world.classes = parse_value(key, value)?,
        "world.objects_min" => cfg.world.objects_min = parse_value(key, value)?,
        "world.objects_max" => cfg.world.objects_max = parse_value(key, value)?,
        "world.canvas_w" => cfg.world.canvas_w = parse_value(key, value)?,
        "world.canvas_h" => cfg.world.canvas_h = parse_value(key, value)?,
        "world.object_min_size" => cfg.world.object_min_size = parse_value(key, value)?,
        "world.object_max_size" => cfg.world.object_max_size = parse_value(key, value)?,
        "world.part_fraction" => cfg.world.part_fraction = parse_value(key, value)?,
        "world.part_classes" => {
            cfg.world.part_classes = if value.is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|v| parse_value(key, v))
                    .collect::<Result<Vec<usize>>>()?
            };
        }
        "world.proposals_per_image" => cfg.world.proposals_per_image = parse_value(key, value)?,
        "world.feature_dim" => cfg.world.feature_dim = parse_value(key, value)?,
        "world.mix_gt" => cfg.world.mix_gt = parse_value(key, value)?,
        "world.mix_part" => cfg.world.mix_part = parse_value(key, value)?,
        "world.mix_uniform" => cfg.world.mix_uniform = parse_value(key, value)?,
        "world.gain_body" => cfg.world.gain_body = parse_value(key, value)?,
        "world.gain_part" => cfg.world.gain_part = parse_value(key, value)?,
        "world.feature_noise" => cfg.world.feature_noise = parse_value(key, value)?,
        "world.seed" => cfg.world.seed = parse_value(key, value)?,
        "noise.part_rate" => cfg.noise.part_rate = parse_value(key, value)?,
        "noise.mislabel_rate" => cfg.noise.mislabel_rate = parse_value(key, value)?,
        "noise.drop_rate" => cfg.noise.drop_rate = parse_value(key, value)?,
        "noise.fp_per_image" => cfg.noise.fp_per_image = parse_value(key, value)?,
        "noise.box_jitter" => cfg.noise.box_jitter = parse_value(key, value)?,
        "pge.t_nms" => cfg.pge.t_nms = parse_value(key, value)?,
        "pge.t_score" => cfg.pge.t_score = parse_value(key, value)?,
        "pge.t_fusion" => cfg.pge.t_fusion = parse_value(key, value)?,
        "la.tau_score" => cfg.la.tau_score = parse_value(key, value)?,
        "la.tau_assign" => cfg.la.tau_assign = parse_value(key, value)?,
        "la.lambda_re" => cfg.la.lambda_re = parse_value(key, value)?,
        "la.alpha" => cfg.la.alpha = parse_value(key, value)?,
        "la.beta" => cfg.la.beta = parse_value(key, value)?,
        "la.steps" => cfg.la.steps = parse_value(key, value)?,
        "la.lr" => cfg.la.lr = parse_value(key, value)?,
        "la.curve_interval" => cfg.la.curve_interval = parse_value(key, value)?,
        "split.mode" => {
            cfg.split_mode = SplitMode::parse(value).ok_or_else(|| Error::InvalidValue {
                key: key.to_string(),
                msg: format!("unknown split mode `{value}`"),
            })?;
        }
        "split.p" => cfg.p = parse_value(key, value)?,
        "ssod.lambda_u" => cfg.ssod.lambda_u = parse_value(key, value)?,
        "ssod.teacher_momentum" => cfg.ssod.teacher_momentum = parse_value(key, value)?,
        "ssod.pseudo_score_threshold" => {
            cfg.ssod.pseudo_score_threshold = parse_value(key, value)?
        }
        "ssod.jitter_samples" => cfg.ssod.jitter_samples = parse_value(key, value)?,
        "ssod.jitter_variance_threshold" => {
            cfg.ssod.jitter_variance_threshold = parse_value(key, value)?
        }
        "ssod.tau_assign" => cfg.ssod.tau_assign = parse_value(key, value)?,
        "ssod.steps" => cfg.ssod.steps = parse_value(key, value)?,
        "ssod.lr" => cfg.ssod.lr = parse_value(key, value)?,
        "ssod.batch" => cfg.ssod.batch = parse_value(key, value)?,
        "ssod.feature_noise" => cfg.ssod.feature_noise = parse_value(key, value)?,
        "run.iterations" => cfg.iterations = parse_value(key, value)?,
        "run.seed" => cfg.seed = parse_value(key, value)?,
        other => return Err(Error::UnknownKey(other.to_string())),
    }
    Ok(())
}

/// Parse a config file body on top of `base`. Lines are `key=value`; blank
/// lines and `#` comments are ignored.
pub fn parse_onto(mut base: RunConfig, text: &str) -> Result<RunConfig> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        apply(&mut base, key.trim(), value.trim())?;
    }
    Ok(base)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    parse_onto(RunConfig::default(), text)
}

fn fl(v: f64) -> String {
    format!("{v:?}")
}

/// Render the fully resolved config, every key explicit.
pub fn resolved(cfg: &RunConfig) -> String {
    let parts: Vec<String> = cfg.world.part_classes.iter().map(usize::to_string).collect();
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    push("world.num_images", cfg.world.num_images.to_string());
    push("world.classes", cfg.world.classes.to_string());
    push("world.objects_min", cfg.world.objects_min.to_string());
    push("world.objects_max", cfg.world.objects_max.to_string());
    push("world.canvas_w", fl(cfg.world.canvas_w));
    push("world.canvas_h", fl(cfg.world.canvas_h));
    push("world.object_min_size", fl(cfg.world.object_min_size));
    push("world.object_max_size", fl(cfg.world.object_max_size));
    push("world.part_fraction", fl(cfg.world.part_fraction));
    push("world.part_classes", parts.join(","));
    push("world.proposals_per_image", cfg.world.proposals_per_image.to_string());
    push("world.feature_dim", cfg.world.feature_dim.to_string());
    push("world.mix_gt", fl(cfg.world.mix_gt));
    push("world.mix_part", fl(cfg.world.mix_part));
    push("world.mix_uniform", fl(cfg.world.mix_uniform));
    push("world.gain_body", fl(cfg.world.gain_body));
    push("world.gain_part", fl(cfg.world.gain_part));
    push("world.feature_noise", fl(cfg.world.feature_noise));
    push("world.seed", cfg.world.seed.to_string());
    push("noise.part_rate", fl(cfg.noise.part_rate));
    push("noise.mislabel_rate", fl(cfg.noise.mislabel_rate));
    push("noise.drop_rate", fl(cfg.noise.drop_rate));
    push("noise.fp_per_image", fl(cfg.noise.fp_per_image));
    push("noise.box_jitter", fl(cfg.noise.box_jitter));
    push("pge.t_nms", fl(cfg.pge.t_nms));
    push("pge.t_score", fl(cfg.pge.t_score));
    push("pge.t_fusion", fl(cfg.pge.t_fusion));
    push("la.tau_score", fl(cfg.la.tau_score));
    push("la.tau_assign", fl(cfg.la.tau_assign));
    push("la.lambda_re", fl(cfg.la.lambda_re));
    push("la.alpha", fl(cfg.la.alpha));
    push("la.beta", fl(cfg.la.beta));
    push("la.steps", cfg.la.steps.to_string());
    push("la.lr", fl(cfg.la.lr));
    push("la.curve_interval", cfg.la.curve_interval.to_string());
    push("split.mode", cfg.split_mode.as_str().to_string());
    push("split.p", fl(cfg.p));
    push("ssod.lambda_u", fl(cfg.ssod.lambda_u));
    push("ssod.teacher_momentum", fl(cfg.ssod.teacher_momentum));
    push("ssod.pseudo_score_threshold", fl(cfg.ssod.pseudo_score_threshold));
    push("ssod.jitter_samples", cfg.ssod.jitter_samples.to_string());
    push("ssod.jitter_variance_threshold", fl(cfg.ssod.jitter_variance_threshold));
    push("ssod.tau_assign", fl(cfg.ssod.tau_assign));
    push("ssod.steps", cfg.ssod.steps.to_string());
    push("ssod.lr", fl(cfg.ssod.lr));
    push("ssod.batch", cfg.ssod.batch.to_string());
    push("ssod.feature_noise", fl(cfg.ssod.feature_noise));
    push("run.iterations", cfg.iterations.to_string());
    push("run.seed", cfg.seed.to_string());
    out
}
