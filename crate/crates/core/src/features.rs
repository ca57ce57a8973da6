//! Feature maps: the identity and frozen random multilayer perceptrons.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Mat};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Identity,
    RandomMlp {
        hidden_sizes: Vec<usize>,
        activation: Activation,
        seed: u64,
    },
    /// Explicit weights supplied by the caller.
    Fixed {
        hidden_sizes: Vec<usize>,
        activation: Activation,
    },
}

/// Serializable description of a feature map; the input dimension comes from
/// the data it is attached to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureSpec {
    Identity {},
    RandomMlp {
        #[serde(default)]
        hidden_sizes: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        seed: u64,
        output_dim: usize,
    },
}

impl FeatureSpec {
    pub fn build(&self, d: usize) -> Result<FeatureMap> {
        match self {
            FeatureSpec::Identity {} => FeatureMap::identity(d),
            FeatureSpec::RandomMlp {
                hidden_sizes,
                activation,
                seed,
                output_dim,
            } => FeatureMap::random_mlp(d, hidden_sizes, *output_dim, *activation, *seed),
        }
    }
}

/// A deterministic map ℝᵈ → ℝᵖ. Immutable after construction.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    input_dim: usize,
    output_dim: usize,
    kind: FeatureKind,
    /// Layer weights, `layers[l]` has shape fan_out × fan_in.
    layers: Vec<Mat>,
    lipschitz_bound: f64,
}

impl FeatureMap {
    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::dim("identity map needs d >= 1"));
        }
        Ok(FeatureMap {
            input_dim: d,
            output_dim: d,
            kind: FeatureKind::Identity,
            layers: Vec::new(),
            lipschitz_bound: 1.0,
        })
    }

    /// Random MLP with N(0, 1/fan_in) weights, zero biases, `activation`
    /// after every hidden layer and a linear readout.
    pub fn random_mlp(
        d: usize,
        hidden_sizes: &[usize],
        p_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || p_out == 0 || hidden_sizes.contains(&0) {
            return Err(Error::dim(format!(
                "random MLP sizes must be positive (d={d}, hidden={hidden_sizes:?}, p={p_out})"
            )));
        }
        let mut sizes = Vec::with_capacity(hidden_sizes.len() + 2);
        sizes.push(d);
        sizes.extend_from_slice(hidden_sizes);
        sizes.push(p_out);

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut r = rng::substream(seed, rng::domain::FEATURES, l as u64);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let m = Mat::from_fn(fan_out, fan_in, |_, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                z * scale
            });
            layers.push(m);
        }
        let lipschitz_bound = layers.iter().map(spectral_norm).product();
        Ok(FeatureMap {
            input_dim: d,
            output_dim: p_out,
            kind: FeatureKind::RandomMlp {
                hidden_sizes: hidden_sizes.to_vec(),
                activation,
                seed,
            },
            layers,
            lipschitz_bound,
        })
    }

    /// MLP with given layer weights (each fan_out × fan_in, chained).
    pub fn from_weights(layers: Vec<Mat>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::dim("from_weights needs at least one layer"))?;
        let input_dim = first.ncols();
        if input_dim == 0 || layers.iter().any(|w| w.nrows() == 0) {
            return Err(Error::dim("layer sizes must be positive"));
        }
        for w in layers.windows(2) {
            if w[1].ncols() != w[0].nrows() {
                return Err(Error::dim("consecutive layer shapes do not chain"));
            }
        }
        let hidden_sizes = layers[..layers.len() - 1].iter().map(Mat::nrows).collect();
        let output_dim = layers.last().map(Mat::nrows).unwrap_or(input_dim);
        let lipschitz_bound = layers.iter().map(spectral_norm).product();
        Ok(FeatureMap {
            input_dim,
            output_dim,
            kind: FeatureKind::Fixed {
                hidden_sizes,
                activation,
            },
            layers,
            lipschitz_bound,
        })
    }

    /// Copy of this map with every weight set to zero (debugging aid).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for w in &mut out.layers {
            w.fill(0.0);
        }
        if !out.is_identity() {
            out.lipschitz_bound = 0.0;
        }
        out
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, FeatureKind::Identity)
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    /// Product of per-layer spectral norms; exactly 1 for the identity.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    fn activation(&self) -> Activation {
        match self.kind {
            FeatureKind::RandomMlp { activation, .. } | FeatureKind::Fixed { activation, .. } => {
                activation
            }
            FeatureKind::Identity => Activation::Tanh,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dim(format!(
                "feature map expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let m = Mat::from_column_slice(x.len(), 1, x);
        Ok(self.forward(m).column(0).into_owned())
    }

    /// Applies the map to every column of `m` (d×n → p×n).
    pub fn apply_matrix(&self, m: &Mat) -> Result<Mat> {
        if m.nrows() != self.input_dim {
            return Err(Error::dim(format!(
                "feature map expects {} rows, got {}",
                self.input_dim,
                m.nrows()
            )));
        }
        Ok(self.forward(m.clone()))
    }

    fn forward(&self, mut h: Mat) -> Mat {
        let act = self.activation();
        let last = self.layers.len().saturating_sub(1);
        for (l, w) in self.layers.iter().enumerate() {
            h = w * h;
            if l < last {
                h.apply(|v| *v = act.apply(*v));
            }
        }
        h
    }

    /// Largest ratio ‖φ(x)−φ(x′)‖/‖x−x′‖ over `trials` random Gaussian
    /// probe pairs, capped by the analytic bound.
    pub fn estimate_lipschitz(&self, trials: usize, seed: u64) -> Result<f64> {
        if trials == 0 {
            return Err(Error::param("estimate_lipschitz needs trials >= 1"));
        }
        if self.is_identity() {
            return Ok(1.0);
        }
        let d = self.input_dim;
        let mut r = rng::substream(seed, rng::domain::LIPSCHITZ, 0);
        let mut a = Mat::zeros(d, trials);
        let mut b = Mat::zeros(d, trials);
        for j in 0..trials {
            // Mix nearby and distant pairs so both local slopes and chords are probed.
            let spread = if j % 2 == 0 { 1e-3 } else { 1.0 };
            for i in 0..d {
                let x: f64 = StandardNormal.sample(&mut r);
                let e: f64 = StandardNormal.sample(&mut r);
                a[(i, j)] = x;
                b[(i, j)] = x + spread * e;
            }
        }
        let fa = self.forward(a.clone());
        let fb = self.forward(b.clone());
        let mut best = 0.0f64;
        for j in 0..trials {
            let num = (fa.column(j) - fb.column(j)).norm();
            let den = (a.column(j) - b.column(j)).norm();
            if den > 0.0 {
                best = best.max(num / den);
            }
        }
        Ok(best.min(self.lipschitz_bound))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_returns_input() {
        let f = FeatureMap::identity(3).unwrap();
        assert_eq!(
            f.apply(&[1.0, 2.0, 3.0]).unwrap().as_slice(),
            &[1.0, 2.0, 3.0]
        );
        let g = FeatureMap::identity(1).unwrap();
        assert_eq!(g.apply(&[-4.5]).unwrap()[0], -4.5);
        assert_eq!(FeatureMap::identity(759).unwrap().output_dim(), 759);
        assert_eq!(f.lipschitz_bound(), 1.0);
        assert_eq!(f.estimate_lipschitz(5, 0).unwrap(), 1.0);
    }

    #[test]
    fn identity_rejects_zero_dim() {
        assert!(matches!(
            FeatureMap::identity(0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(FeatureMap::random_mlp(3, &[0], 2, Activation::Tanh, 1).is_err());
    }

    #[test]
    fn mlp_is_deterministic_in_seed() {
        let f = FeatureMap::random_mlp(5, &[7, 4], 3, Activation::Tanh, 11).unwrap();
        let g = FeatureMap::random_mlp(5, &[7, 4], 3, Activation::Tanh, 11).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0, 0.5];
        assert_eq!(f.apply(&x).unwrap(), g.apply(&x).unwrap());
        let h = FeatureMap::random_mlp(5, &[7, 4], 3, Activation::Tanh, 12).unwrap();
        assert_ne!(f.apply(&x).unwrap(), h.apply(&x).unwrap());
    }

    #[test]
    fn zeroed_map_outputs_zero() {
        let f = FeatureMap::random_mlp(4, &[6], 3, Activation::Relu, 2)
            .unwrap()
            .zeroed();
        assert!(f
            .apply(&[1.0, -2.0, 3.0, 4.0])
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn batched_matches_pointwise_on_duplicate_columns() {
        let f = FeatureMap::random_mlp(4, &[5], 3, Activation::Tanh, 9).unwrap();
        let col = [0.2, -0.7, 1.1, 0.4];
        let m = Mat::from_fn(4, 2, |i, _| col[i]);
        let out = f.apply_matrix(&m).unwrap();
        let point = f.apply(&col).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                assert!((out[(i, j)] - point[i]).abs() < 1e-14);
            }
        }
        assert!(f.apply_matrix(&Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn linear_layer_bound_is_spectral_norm() {
        let f = FeatureMap::random_mlp(6, &[], 4, Activation::Tanh, 5).unwrap();
        let w = &f.layers()[0];
        // power iteration on WᵀW
        let wtw = w.transpose() * w;
        let mut v = DVector::from_element(6, 1.0);
        for _ in 0..500 {
            v = &wtw * &v;
            v /= v.norm();
        }
        let sigma = (&wtw * &v).norm().sqrt();
        assert!((f.lipschitz_bound() - sigma).abs() < 1e-9 * sigma);
        let probe = f.estimate_lipschitz(2000, 3).unwrap();
        assert!(probe <= f.lipschitz_bound());
        assert!(probe > 0.5 * sigma);
    }

    #[test]
    fn spec_round_trip() {
        let s: FeatureSpec = serde_json::from_str(
            r#"{"kind":"random-mlp","hidden_sizes":[8],"activation":"relu","seed":3,"output_dim":4}"#,
        )
        .unwrap();
        let f = s.build(5).unwrap();
        assert_eq!((f.input_dim(), f.output_dim()), (5, 4));
        let id: FeatureSpec = serde_json::from_str(r#"{"kind":"identity"}"#).unwrap();
        assert!(id.build(7).unwrap().is_identity());
        assert!(serde_json::from_str::<FeatureSpec>(r#"{"kind":"identity","bogus":1}"#).is_err());
    }
}
