//! Learned segmentation: boundary predictors routed by script tag,
//! Gumbel-sigmoid sampling with straight-through hardening, the binomial
//! compression prior, and segment pooling.

mod prior;
mod segments;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Real, Tensor, Var};
use crate::corpus::{ScriptId, Vocab};

pub use prior::{binomial_regularizer, fit_predictor_to_prior, PriorFitConfig};
pub use segments::{segment_pool, upsample_index, SegmentIndex};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before sampling.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("no boundary predictor for {0}")]
    UnknownScript(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTau(f64),
    #[error("binomial prior out of domain: k={k}, n={n}, beta={beta}")]
    Domain { k: f64, n: usize, beta: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

/// One boundary predictor: the scripts it serves and its prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub beta: f64,
    pub scripts: Vec<ScriptId>,
}

/// Resolved routing decision for one row.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Route {
    pub predictor: usize,
    pub beta: f64,
}

/// Maps script tags to predictor indices.
#[derive(Clone, Debug)]
pub struct Router {
    vocab: Vocab,
    routes: Vec<Option<Route>>,
}

impl Router {
    pub fn new(specs: &[PredictorSpec], vocab: Vocab) -> Result<Self, TokenizerError> {
        let mut routes = vec![None; vocab.n_scripts];
        for (i, spec) in specs.iter().enumerate() {
            if !(spec.beta > 0.0 && spec.beta <= 1.0) {
                return Err(TokenizerError::InvalidArgument(format!("beta {} outside (0, 1]", spec.beta)));
            }
            for s in &spec.scripts {
                let slot = routes
                    .get_mut(s.index())
                    .ok_or_else(|| TokenizerError::UnknownScript(s.to_string()))?;
                if slot.is_some() {
                    return Err(TokenizerError::InvalidArgument(format!("{s} routed twice")));
                }
                *slot = Some(Route { predictor: i, beta: spec.beta });
            }
        }
        Ok(Router { vocab, routes })
    }

    pub fn route(&self, tag_id: u32) -> Result<Route, TokenizerError> {
        self.vocab
            .script_of_tag(tag_id)
            .and_then(|s| self.routes[s.index()])
            .ok_or_else(|| TokenizerError::UnknownScript(format!("tag id {tag_id}")))
    }

    pub fn route_script(&self, script: ScriptId) -> Result<Route, TokenizerError> {
        self.route(self.vocab.tag_id(script))
    }
}

/// Parameter handles of a `width -> width -> 1` boundary MLP.
#[derive(Copy, Clone, Debug)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Owned parameters of a boundary MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMlp<T: Real> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> BoundaryMlp<T> {
    pub fn zeros(width: usize) -> Self {
        BoundaryMlp {
            w1: Tensor::zeros(width, width),
            b1: Tensor::zeros(1, width),
            w2: Tensor::zeros(width, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    /// Registers the four tensors as graph parameters `base..base + 4`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, base: usize) -> PredictorVars {
        PredictorVars {
            w1: g.param(base, &self.w1),
            b1: g.param(base + 1, &self.b1),
            w2: g.param(base + 2, &self.w2),
            b2: g.param(base + 3, &self.b2),
        }
    }
}

/// Boundary logits `MLP(h_t)` as an `n x 1` column.
pub fn predictor_logits<T: Real>(g: &mut Graph<'_, T>, hidden: Var, p: &PredictorVars) -> Result<Var, ComputeError> {
    let h = g.matmul(hidden, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.gelu(h)?;
    let z = g.matmul(h, p.w2)?;
    g.add_row(z, p.b2)
}

/// Clamped boundary probabilities `sigmoid(MLP(h_t))` as an `n x 1` column.
pub fn predictor_probs<T: Real>(g: &mut Graph<'_, T>, hidden: Var, p: &PredictorVars) -> Result<Var, ComputeError> {
    let z = predictor_logits(g, hidden, p)?;
    let probs = g.sigmoid(z)?;
    g.clamp(probs, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))
}

/// Evaluates the routed predictor on `hidden` (`n x width`).
pub fn predict_boundary_probs<T: Real>(
    hidden: &Tensor<T>,
    script: ScriptId,
    router: &Router,
    predictors: &[BoundaryMlp<T>],
) -> Result<Vec<f64>, TokenizerError> {
    let route = router.route_script(script)?;
    let mlp = predictors
        .get(route.predictor)
        .ok_or_else(|| TokenizerError::UnknownScript(script.to_string()))?;
    let mut g = Graph::new();
    let vars = mlp.bind(&mut g, 0);
    let h = g.constant(hidden.clone());
    let z = predictor_logits(&mut g, h, &vars)?;
    let p = g.sigmoid(z)?;
    Ok(g.value(p).data().iter().map(|x| x.as_f64()).collect())
}

fn check_gumbel_args(probs_len: usize, u: &[f64], tau: f64) -> Result<(), TokenizerError> {
    if !(tau > 0.0) {
        return Err(TokenizerError::InvalidTau(tau));
    }
    if u.len() != probs_len {
        return Err(TokenizerError::InvalidArgument(format!("{} noise draws for {probs_len} positions", u.len())));
    }
    if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(TokenizerError::InvalidArgument(format!("noise draw {bad} outside (0, 1)")));
    }
    Ok(())
}

/// Relaxed Bernoulli sample `sigmoid(log(p u / ((1-p)(1-u))) / tau)` and its
/// hard threshold (`>= 0.5` is a boundary).
pub fn gumbel_sigmoid(probs: &[f64], u: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<bool>), TokenizerError> {
    check_gumbel_args(probs.len(), u, tau)?;
    let relaxed: Vec<f64> = probs
        .iter()
        .zip(u)
        .map(|(&p, &u)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let z = (p.ln() - (1.0 - p).ln() + u.ln() - (1.0 - u).ln()) / tau;
            crate::compute::sigmoid(z)
        })
        .collect();
    let hard = relaxed.iter().map(|&r| r >= 0.5).collect();
    Ok((relaxed, hard))
}

/// Graph form of [`gumbel_sigmoid`]: returns the relaxed column, the
/// straight-through hard column and the hard decisions.
pub fn gumbel_sigmoid_graph<T: Real>(
    g: &mut Graph<'_, T>,
    probs: Var,
    u: &[f64],
    tau: f64,
) -> Result<(Var, Var, Vec<bool>), TokenizerError> {
    check_gumbel_args(g.value(probs).len(), u, tau)?;
    let noise: Vec<T> = u.iter().map(|&x| T::lit(x.ln() - (1.0 - x).ln())).collect();
    let noise = g.constant(Tensor::column(noise));
    let lp = g.log(probs)?;
    let one_minus = g.affine(probs, -T::one(), T::one())?;
    let lq = g.log(one_minus)?;
    let neg_lq = g.scale(lq, -T::one())?;
    let logit = g.add(lp, neg_lq)?;
    let z = g.add(logit, noise)?;
    let z = g.scale(z, T::lit(1.0 / tau))?;
    let relaxed = g.sigmoid(z)?;
    let (st, hard) = g.straight_through(relaxed)?;
    Ok((relaxed, st, hard))
}

/// Per-position boundary state of one sequence (tag position excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMask {
    pub probs: Vec<f64>,
    pub relaxed: Vec<f64>,
    pub hard: Vec<bool>,
    pub u: Vec<f64>,
    pub k: usize,
}

impl BoundaryMask {
    pub fn new(probs: Vec<f64>, relaxed: Vec<f64>, hard: Vec<bool>, u: Vec<f64>) -> Self {
        let k = hard.iter().filter(|&&b| b).count();
        BoundaryMask { probs, relaxed, hard, u, k }
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn rate(&self) -> f64 {
        if self.hard.is_empty() {
            0.0
        } else {
            self.k as f64 / self.hard.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PriorPreset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn magnet_router() -> Router {
        let specs: Vec<PredictorSpec> = PriorPreset::Magnet5x10x20x
            .script_configs()
            .iter()
            .map(|c| PredictorSpec { beta: c.beta, scripts: vec![c.script] })
            .collect();
        Router::new(&specs, Vocab::new(3)).unwrap()
    }

    #[test]
    fn routing_by_tag() {
        let r = magnet_router();
        let v = Vocab::new(3);
        assert_eq!(r.route(v.tag_id(ScriptId::LATIN)).unwrap(), Route { predictor: 0, beta: 0.2 });
        assert_eq!(r.route(v.tag_id(ScriptId::INDIC)).unwrap(), Route { predictor: 2, beta: 0.05 });
        assert!(matches!(r.route(259), Err(TokenizerError::UnknownScript(_))));
        assert!(matches!(r.route(65), Err(TokenizerError::UnknownScript(_))));
    }

    #[test]
    fn unrouted_script_is_unknown() {
        let specs = vec![PredictorSpec { beta: 0.2, scripts: vec![ScriptId::LATIN] }];
        let r = Router::new(&specs, Vocab::new(3)).unwrap();
        assert!(matches!(r.route_script(ScriptId::CYRILLIC), Err(TokenizerError::UnknownScript(_))));
    }

    #[test]
    fn zero_logit_gives_half() {
        let r = magnet_router();
        let mlps = vec![BoundaryMlp::<f64>::zeros(4); 3];
        let h = Tensor::full(5, 4, 0.3);
        let p = predict_boundary_probs(&h, ScriptId::LATIN, &r, &mlps).unwrap();
        assert_eq!(p, vec![0.5; 5]);
    }

    #[test]
    fn output_bias_only() {
        let r = magnet_router();
        let mut mlps = vec![BoundaryMlp::<f64>::zeros(4); 3];
        mlps[1].b2 = Tensor::scalar(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(3, 4, 1.0, &mut rng);
        let p = predict_boundary_probs(&h, ScriptId::CYRILLIC, &r, &mlps).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!(p.iter().all(|&x| (x - expect).abs() < 1e-15));
        assert!((expect - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn mlp_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = BoundaryMlp::<f64> {
            w1: Tensor::randn(4, 4, 1.0, &mut rng),
            b1: Tensor::randn(1, 4, 1.0, &mut rng),
            w2: Tensor::randn(4, 1, 1.0, &mut rng),
            b2: Tensor::randn(1, 1, 1.0, &mut rng),
        };
        let h = Tensor::randn(2, 4, 1.0, &mut rng);
        let specs = vec![PredictorSpec { beta: 0.5, scripts: vec![ScriptId::LATIN] }];
        let r = Router::new(&specs, Vocab::new(1)).unwrap();
        let p = predict_boundary_probs(&h, ScriptId::LATIN, &r, std::slice::from_ref(&mlp)).unwrap();
        for (t, &got) in p.iter().enumerate() {
            let mut z = mlp.b2.item();
            for j in 0..4 {
                let mut a = mlp.b1.get(0, j);
                for i in 0..4 {
                    a += h.get(t, i) * mlp.w1.get(i, j);
                }
                let gelu = 0.5 * a * (1.0 + libm::erf(a / 2f64.sqrt()));
                z += gelu * mlp.w2.get(j, 0);
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
        }
    }

    #[test]
    fn gumbel_examples() {
        let (r, h) = gumbel_sigmoid(&[0.5], &[0.5], 0.3).unwrap();
        assert_eq!(r[0], 0.5);
        assert!(h[0]);
        let (r, h) = gumbel_sigmoid(&[0.9], &[0.5], 1.0).unwrap();
        assert!((r[0] - 0.9).abs() < 1e-12);
        assert!(h[0]);
        let (r, _) = gumbel_sigmoid(&[0.5], &[0.99], 0.5).unwrap();
        let expect = 1.0 / (1.0 + (-2.0 * 99f64.ln()).exp());
        assert!((r[0] - expect).abs() < 1e-12);
        assert!(r[0] > 0.9998);
    }

    #[test]
    fn gumbel_rejects_bad_tau_and_noise() {
        assert!(matches!(gumbel_sigmoid(&[0.5], &[0.5], 0.0), Err(TokenizerError::InvalidTau(_))));
        assert!(matches!(gumbel_sigmoid(&[0.5], &[0.5], -1.0), Err(TokenizerError::InvalidTau(_))));
        assert!(gumbel_sigmoid(&[0.5], &[1.0], 1.0).is_err());
        assert!(gumbel_sigmoid(&[0.5, 0.2], &[0.5], 1.0).is_err());
    }

    #[test]
    fn graph_gumbel_matches_plain() {
        let probs = [0.1, 0.4, 0.5, 0.93];
        let u = [0.2, 0.7, 0.5, 0.01];
        let (r, h) = gumbel_sigmoid(&probs, &u, 0.5).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::column(probs.to_vec()));
        let (rv, st, hv) = gumbel_sigmoid_graph(&mut g, p, &u, 0.5).unwrap();
        assert_eq!(h, hv);
        for (a, b) in r.iter().zip(g.value(rv).data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let expect: Vec<f64> = h.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(g.value(st).data(), expect.as_slice());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn relaxed_is_monotone_in_prob(p in 0.001f64..0.99, dp in 0.001f64..0.5, u in 0.001f64..0.999, tau in 0.1f64..3.0) {
                let q = (p + dp).min(0.999);
                prop_assume!(q > p);
                let (a, _) = gumbel_sigmoid(&[p], &[u], tau).unwrap();
                let (b, _) = gumbel_sigmoid(&[q], &[u], tau).unwrap();
                prop_assert!(b[0] >= a[0]);
                // strict unless both saturate to the same float
                prop_assert!(b[0] > a[0] || a[0] == 1.0 || b[0] == 0.0);
            }
        }
    }
}
