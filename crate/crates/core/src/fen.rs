//! Feature extraction network: a two-layer MLP from the standardised
//! feature vector to the processing intensity `f_d` in `(0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{he_normal, Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::preanalysis::FeatureVector;

pub const FEATURE_DIM: usize = 7;
pub const DEFAULT_HIDDEN: usize = 16;
pub const FEN_PREFIX: &str = "fen.";
pub const NORMALIZER_STD_FLOOR: f64 = 1e-6;
pub const NORMALIZER_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FenModel {
    pub hidden: usize,
}

impl Default for FenModel {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN }
    }
}

impl FenModel {
    /// Adds `fen.w1 [7, H]`, `fen.b1 [1, H]`, `fen.w2 [H, 1]`, `fen.b2 [1, 1]`.
    /// The output layer starts at zero so every clip begins at `f_d = 0.5`
    /// and any ordering between clips is learned rather than drawn.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("FEN hidden width must be positive".into()));
        }
        // he_normal reads fan-in from axis 1, so draw transposed shapes.
        let w1 = transpose(&he_normal::<T>(&[self.hidden, FEATURE_DIM], rng));
        store.insert("fen.w1", w1)?;
        store.insert("fen.b1", Tensor::zeros(vec![1, self.hidden]))?;
        store.insert("fen.w2", Tensor::zeros(vec![self.hidden, 1]))?;
        store.insert("fen.b2", Tensor::zeros(vec![1, 1]))?;
        Ok(())
    }

    /// `x: [N, 7]` standardised features to `f_d: [N, 1]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.get("fen.w1")?)?;
        let h = g.add(h, p.get("fen.b1")?)?;
        let h = g.relu(h);
        let o = g.matmul(h, p.get("fen.w2")?)?;
        let o = g.add(o, p.get("fen.b2")?)?;
        Ok(g.sigmoid(o))
    }

    /// Non-differentiable `f_d` for one feature vector.
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        normalizer: &FeatureNormalizer,
        features: &FeatureVector,
    ) -> Result<f64> {
        let g = Graph::<T>::new();
        let p = store.bind_constants(&g);
        let x = g.constant(normalizer.batch_tensor(std::slice::from_ref(features))?);
        let fd = self.forward(&g, &p, x)?;
        Ok(g.item(fd)?.to_f64().unwrap_or(f64::NAN))
    }
}

fn transpose<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| t.data()[(i % r) * c + i / r])
}

/// Per-component affine standardisation fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub schema_version: u32,
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl FeatureNormalizer {
    pub fn identity() -> Self {
        Self {
            schema_version: NORMALIZER_SCHEMA_VERSION,
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }

    /// Population mean/std per component; std is floored at
    /// [`NORMALIZER_STD_FLOOR`].
    pub fn fit(samples: &[FeatureVector]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "normalizer needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature vector {bad:?}")));
        }
        let n = samples.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.to_array()) {
                *m += v / n;
            }
        }
        for s in samples {
            for (k, v) in s.to_array().into_iter().enumerate() {
                std[k] += (v - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(NORMALIZER_STD_FLOOR);
        }
        Ok(Self {
            schema_version: NORMALIZER_SCHEMA_VERSION,
            mean,
            std,
        })
    }

    pub fn normalize(&self, f: &FeatureVector) -> [f64; FEATURE_DIM] {
        let mut out = f.to_array();
        for (k, v) in out.iter_mut().enumerate() {
            *v = (*v - self.mean[k]) / self.std[k];
        }
        out
    }

    pub fn denormalize(&self, z: [f64; FEATURE_DIM]) -> FeatureVector {
        let mut out = z;
        for (k, v) in out.iter_mut().enumerate() {
            *v = *v * self.std[k] + self.mean[k];
        }
        FeatureVector::from_array(out)
    }

    /// Standardised `[N, 7]` batch; non-finite features are rejected.
    pub fn batch_tensor<T: Real>(&self, features: &[FeatureVector]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(features.len() * FEATURE_DIM);
        for f in features {
            if !f.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite feature vector {f:?}")));
            }
            data.extend(self.normalize(f).iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(vec![features.len(), FEATURE_DIM], data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let n: Self = serde_json::from_slice(bytes)?;
        if n.schema_version != NORMALIZER_SCHEMA_VERSION {
            return Err(Error::Serde(format!("unsupported normalizer schema {}", n.schema_version)));
        }
        if n.mean.iter().any(|v| !v.is_finite()) || n.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Serde("normalizer has non-finite mean or non-positive std".into()));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, DEFAULT_FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Initialised FEN with a random output layer, so outputs vary.
    fn random_store(fen: &FenModel, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        fen.init(&mut store, &mut rng).unwrap();
        *store.get_mut("fen.w2").unwrap() = transpose(&he_normal::<f64>(&[1, fen.hidden], &mut rng));
        store
    }

    fn features(seed: u64) -> FeatureVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVector::from_array(std::array::from_fn(|_| rng.random_range(0.0..2.0)))
    }

    #[test]
    fn output_is_strictly_inside_unit_interval() {
        let fen = FenModel::default();
        let store = random_store(&fen, 1);
        for s in 0..50 {
            let mut f = features(s);
            f.qp = s as f64;
            let fd = fen.infer(&store, &FeatureNormalizer::identity(), &f).unwrap();
            assert!(fd > 0.0 && fd < 1.0, "{fd}");
        }
    }

    #[test]
    fn zero_parameters_give_half() {
        let mut store = ParamStore::<f32>::new();
        let fen = FenModel { hidden: 4 };
        fen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let fd = fen.infer(&store, &FeatureNormalizer::identity(), &features(3)).unwrap();
        assert_eq!(fd, 0.5);
    }

    #[test]
    fn fresh_model_is_neutral() {
        let mut store = ParamStore::<f64>::new();
        let fen = FenModel::default();
        fen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for s in 0..5 {
            assert_eq!(fen.infer(&store, &FeatureNormalizer::identity(), &features(s)).unwrap(), 0.5);
        }
    }

    #[test]
    fn non_finite_feature_rejected() {
        let mut store = ParamStore::<f32>::new();
        let fen = FenModel::default();
        fen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut f = features(0);
        f.si_avg = f64::NAN;
        assert!(matches!(
            fen.infer(&store, &FeatureNormalizer::identity(), &f),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fen = FenModel { hidden: 5 };
        let store = random_store(&fen, 9);
        let x = FeatureNormalizer::identity()
            .batch_tensor::<f64>(&[features(1), features(2)])
            .unwrap();
        let names = ["fen.w1", "fen.b1", "fen.w2", "fen.b2"];
        let params: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| store.get(n).unwrap().clone())
            .collect();
        let report = check_gradients(&params, DEFAULT_FD_STEP, |g, v| {
            let bound: Bound = names.iter().copied().zip(v.iter().copied()).collect();
            let fd = fen.forward(g, &bound, g.constant(x.clone()))?;
            Ok(g.sum(fd))
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-3, "{report:?}");
    }

    #[test]
    fn constant_component_is_floored() {
        let mut samples: Vec<FeatureVector> = (0..10).map(features).collect();
        for s in &mut samples {
            s.qp = 30.0;
        }
        let n = FeatureNormalizer::fit(&samples).unwrap();
        assert_eq!(n.std[6], NORMALIZER_STD_FLOOR);
        assert_eq!(n.normalize(&samples[0])[6], 0.0);
    }

    #[test]
    fn standard_normal_fit_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<FeatureVector> = (0..20_000)
            .map(|_| FeatureVector::from_array(std::array::from_fn(|_| StandardNormal.sample(&mut rng))))
            .collect();
        let n = FeatureNormalizer::fit(&samples).unwrap();
        for k in 0..FEATURE_DIM {
            assert!(n.mean[k].abs() < 0.1 && (n.std[k] - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn fit_needs_two_samples() {
        assert!(FeatureNormalizer::fit(&[]).is_err());
        assert!(FeatureNormalizer::fit(&[features(0)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let n = FeatureNormalizer::fit(&(0..5).map(features).collect::<Vec<_>>()).unwrap();
        let back = FeatureNormalizer::from_json(n.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, n);
        assert!(FeatureNormalizer::from_json(b"{\"schema_version\":1,\"mean\":[0,0,0,0,0,0,0],\"std\":[1,1,1,1,1,1,0]}").is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_round_trip(vals in proptest::array::uniform7(-1e3f64..1e3)) {
            let n = FeatureNormalizer::fit(&(0..6).map(features).collect::<Vec<_>>()).unwrap();
            let f = FeatureVector::from_array(vals);
            let back = n.denormalize(n.normalize(&f)).to_array();
            for (a, b) in back.iter().zip(vals) {
                proptest::prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }
}
