use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::SyntheticSpec;
use crate::detequiv::{Closure, FixedPointOptions};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::schemes::Scheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Mnist(MnistConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    /// IDX image file used for training and for the moment set.
    pub train_images: PathBuf,
    /// IDX image file for the empirical risk; when absent the last
    /// `mc.test_size` training images are held out.
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Use only the first `max_train` training images.
    #[serde(default)]
    pub max_train: Option<usize>,
    /// Schemes to sweep; each gets its own CSV.
    #[serde(default = "default_mnist_schemes")]
    pub schemes: Vec<Scheme>,
}

fn default_patch() -> usize {
    5
}

pub fn default_mnist_schemes() -> Vec<Scheme> {
    use crate::schemes::Replacement;
    vec![
        Scheme::AdditiveNoise { sigma_aug: 0.25 },
        Scheme::Masking { keep_prob: 0.85 },
        Scheme::SaltPepper {
            keep_prob: 0.85,
            replacement: Replacement::Isotropic { scale: 0.25 },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Training-set sizes. Mutually exclusive with `aspect_ratios`.
    #[serde(default)]
    pub n_values: Vec<usize>,
    /// p/n values, converted to n = round(p / ratio).
    #[serde(default)]
    pub aspect_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// Augmentation draws per data point, for fits and moments alike.
    #[serde(default = "default_n_mc_aug")]
    pub n_mc_aug: usize,
    /// Data points averaged into the moment set; 0 means the whole pool.
    #[serde(default = "default_n_mc_data")]
    pub n_mc_data: usize,
    /// Held-out test size; 0 selects the population formula when possible.
    #[serde(default)]
    pub test_size: usize,
}

fn default_n_mc_aug() -> usize {
    32
}

fn default_n_mc_data() -> usize {
    20_000
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_mc_aug: default_n_mc_aug(),
            n_mc_data: default_n_mc_data(),
            test_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_fp_max_iter")]
    pub fp_max_iter: usize,
    #[serde(default = "default_fp_damping")]
    pub fp_damping: f64,
    #[serde(default)]
    pub closure: Closure,
    /// Finite-difference step of the ξ-derivative check.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_fp_tol() -> f64 {
    1e-10
}

fn default_fp_max_iter() -> usize {
    500
}

fn default_fp_damping() -> f64 {
    0.5
}

fn default_fd_step() -> f64 {
    1e-4
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            fp_tol: default_fp_tol(),
            fp_max_iter: default_fp_max_iter(),
            fp_damping: default_fp_damping(),
            closure: Closure::default(),
            fd_step: default_fd_step(),
        }
    }
}

impl Tolerances {
    pub fn fixed_point(&self) -> FixedPointOptions {
        FixedPointOptions {
            tol: self.fp_tol,
            max_iter: self.fp_max_iter,
            damping: self.fp_damping,
            zeta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Predictor feature map φ.
    pub features: FeatureSpec,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub grid: GridConfig,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_scheme() -> Scheme {
    Scheme::Identity {}
}

fn default_replicates() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let bad = |m: String| Err(Error::Config(m));
        if g.lambdas.is_empty() || g.alphas.is_empty() {
            return bad("lambda and alpha grids must be nonempty".into());
        }
        if let Some(l) = g.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return bad(format!("lambda values must be > 0, got {l}"));
        }
        if let Some(a) = g.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha values must lie in [0, 1], got {a}"));
        }
        if !g.n_values.is_empty() && !g.aspect_ratios.is_empty() {
            return bad("give either n_values or aspect_ratios, not both".into());
        }
        if g.n_values.contains(&0) {
            return bad("n values must be >= 1".into());
        }
        if let Some(r) = g
            .aspect_ratios
            .iter()
            .find(|r| !(**r > 0.0) || !r.is_finite())
        {
            return bad(format!("aspect ratios must be > 0, got {r}"));
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.mc.n_mc_aug < 2 {
            return bad("mc.n_mc_aug must be >= 2".into());
        }
        let t = &self.tolerances;
        if !(t.fp_tol > 0.0)
            || t.fp_max_iter == 0
            || !(t.fp_damping > 0.0 && t.fp_damping <= 1.0)
            || !(t.fd_step > 0.0)
        {
            return bad("tolerances out of range".into());
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                if g.n_values.is_empty() && g.aspect_ratios.is_empty() && s.n == 0 {
                    return bad("synthetic n must be >= 1".into());
                }
            }
            DataConfig::Mnist(m) => {
                if m.schemes.is_empty() {
                    return bad("mnist.schemes must be nonempty".into());
                }
                if m.test_images.is_none() && self.mc.test_size == 0 {
                    return bad("mnist needs test_images or mc.test_size > 0".into());
                }
            }
        }
        Ok(())
    }

    /// Training-set sizes of the sweep for predictor dimension `p`.
    pub fn n_values(&self, p: usize) -> Vec<usize> {
        let g = &self.grid;
        if !g.n_values.is_empty() {
            return g.n_values.clone();
        }
        if !g.aspect_ratios.is_empty() {
            return g
                .aspect_ratios
                .iter()
                .map(|r| ((p as f64 / r).round() as usize).max(1))
                .collect();
        }
        match &self.data {
            DataConfig::Synthetic(s) => vec![s.n],
            DataConfig::Mnist(_) => vec![p],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{
        "data": {"synthetic": {"d": 10, "n": 20, "rotation_seed": 1,
                 "truth_map": {"kind": "identity"}, "theta_star": {"kind": "ones"}, "noise_sigma2": 0.5}},
        "features": {"kind": "identity"},
        "grid": {"lambdas": [0.1], "alphas": [0.5]}
    }"#;

    #[test]
    fn minimal_config_and_defaults() {
        let c = ExperimentConfig::from_json(MIN).unwrap();
        assert_eq!(c.replicates, 200);
        assert_eq!(c.mc, McConfig::default());
        assert_eq!(c.scheme, Scheme::Identity {});
        assert_eq!(c.n_values(10), vec![20]);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grids() {
        let extra = MIN.replacen("\"grid\"", "\"bogus\": 1, \"grid\"", 1);
        assert!(matches!(
            ExperimentConfig::from_json(&extra),
            Err(Error::Config(_))
        ));
        let nested = MIN.replacen("\"alphas\": [0.5]", "\"alphas\": [0.5], \"betas\": []", 1);
        assert!(ExperimentConfig::from_json(&nested).is_err());
        for (from, to) in [("[0.1]", "[]"), ("[0.1]", "[0.0]"), ("[0.5]", "[1.5]")] {
            assert!(ExperimentConfig::from_json(&MIN.replacen(from, to, 1)).is_err());
        }
        let zero_r = MIN.replacen("\"grid\"", "\"replicates\": 0, \"grid\"", 1);
        assert!(ExperimentConfig::from_json(&zero_r).is_err());
    }

    #[test]
    fn aspect_ratios_map_to_n() {
        let c = MIN.replacen(
            "\"alphas\": [0.5]",
            "\"alphas\": [0.5], \"aspect_ratios\": [0.5, 2.0]",
            1,
        );
        assert_eq!(
            ExperimentConfig::from_json(&c).unwrap().n_values(759),
            vec![1518, 380]
        );
    }
}
