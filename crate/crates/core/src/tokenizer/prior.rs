use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use statrs::function::gamma::ln_gamma;

use crate::compute::{Graph, Tensor};
use crate::hourglass::{adam_step, AdamConfig, AdamState};

use super::{gumbel_sigmoid_graph, predictor_probs, BoundaryMlp, TokenizerError};

/// `-ln Binomial(beta; n, k)`, evaluated in log space.
///
/// `beta = 1` is accepted only together with `k = n` (loss 0).
pub fn binomial_regularizer(k: f64, n: usize, beta: f64) -> Result<f64, TokenizerError> {
    let nf = n as f64;
    let domain = TokenizerError::Domain { k, n, beta };
    if !(0.0..=nf).contains(&k) || !(beta > 0.0 && beta <= 1.0) {
        return Err(domain);
    }
    if beta == 1.0 {
        return if k == nf { Ok(0.0) } else { Err(domain) };
    }
    let log_pmf = ln_gamma(nf + 1.0) - ln_gamma(k + 1.0) - ln_gamma(nf - k + 1.0)
        + k * beta.ln()
        + (nf - k) * (1.0 - beta).ln();
    Ok(-log_pmf)
}

/// Setup for fitting a lone boundary predictor to its prior on random
/// hidden states (a frozen encoder stand-in).
#[derive(Clone, Debug)]
pub struct PriorFitConfig {
    pub beta: f64,
    pub width: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl PriorFitConfig {
    pub fn new(beta: f64, seed: u64) -> Self {
        PriorFitConfig {
            beta,
            width: 16,
            seq_len: 128,
            batch: 8,
            steps: 2000,
            tau: 0.5,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            seed,
        }
    }
}

/// Trains only a boundary MLP under the binomial prior and returns the
/// mean hard boundary rate of every step.
pub fn fit_predictor_to_prior(cfg: &PriorFitConfig) -> Result<Vec<f64>, TokenizerError> {
    if cfg.seq_len == 0 || cfg.batch == 0 || cfg.width == 0 {
        return Err(TokenizerError::InvalidArgument("empty prior-fit shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 1.0 / (cfg.width as f64).sqrt();
    let mut params = vec![
        Tensor::<f64>::randn(cfg.width, cfg.width, std, &mut rng),
        Tensor::zeros(1, cfg.width),
        Tensor::randn(cfg.width, 1, std, &mut rng),
        Tensor::zeros(1, 1),
    ];
    let mut state = AdamState::new(&params);
    let mut rates = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let hidden: Vec<Tensor<f64>> = (0..cfg.batch)
            .map(|_| Tensor::randn(cfg.seq_len, cfg.width, 1.0, &mut rng))
            .collect();
        let noise: Vec<Vec<f64>> = (0..cfg.batch)
            .map(|_| (0..cfg.seq_len).map(|_| rng.sample::<f64, _>(Open01)).collect())
            .collect();
        let mlp = BoundaryMlp {
            w1: params[0].clone(),
            b1: params[1].clone(),
            w2: params[2].clone(),
            b2: params[3].clone(),
        };
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, 0);
        let mut losses = Vec::with_capacity(cfg.batch);
        let mut hard_total = 0usize;
        for (h, u) in hidden.into_iter().zip(&noise) {
            let h = g.constant(h);
            let probs = predictor_probs(&mut g, h, &vars)?;
            let (_, st, hard) = gumbel_sigmoid_graph(&mut g, probs, u, cfg.tau)?;
            hard_total += hard.iter().filter(|&&b| b).count();
            let k = g.sum(st)?;
            losses.push(g.binomial_nll(k, cfg.seq_len, cfg.beta)?);
        }
        let all = g.concat_rows(&losses)?;
        let loss = g.mean(all)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Option<&Tensor<f64>>> = (0..4).map(|i| grads.param(i)).collect();
        let lr = cfg.adam.lr_at(step, cfg.steps);
        adam_step(&mut params, &gs, &mut state, &cfg.adam, lr)
            .map_err(|e| TokenizerError::InvalidArgument(e.to_string()))?;
        rates.push(hard_total as f64 / (cfg.batch * cfg.seq_len) as f64);
    }
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive};

    fn exact_pmf(n: u64, k: u64, beta: &BigRational) -> BigRational {
        let mut c = BigInt::one();
        for i in 0..k {
            c = c * BigInt::from(n - i) / BigInt::from(i + 1);
        }
        let one = BigRational::one();
        let q = &one - beta;
        let mut p = BigRational::from_integer(c);
        for _ in 0..k {
            p *= beta;
        }
        for _ in 0..(n - k) {
            p *= &q;
        }
        p
    }

    #[test]
    fn matches_exact_oracle() {
        for (num, den) in [(1, 20), (1, 10), (1, 5), (1, 2)] {
            let b = BigRational::new(BigInt::from(num), BigInt::from(den));
            let bf = num as f64 / den as f64;
            for n in 0..=30u64 {
                for k in 0..=n {
                    let expect = -exact_pmf(n, k, &b).to_f64().unwrap().ln();
                    let got = binomial_regularizer(k as f64, n as usize, bf).unwrap();
                    assert!((got - expect).abs() <= 1e-9, "n={n} k={k} beta={bf}: {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn examples() {
        assert_eq!(binomial_regularizer(1.0, 1, 1.0).unwrap(), 0.0);
        assert!(binomial_regularizer(1.0, 1, 1.0 - 1e-12).unwrap() < 1e-9);
        let v = binomial_regularizer(2.0, 10, 0.2).unwrap();
        assert!((v - -(0.301989888f64).ln()).abs() < 1e-12);
        assert!((v - 1.19736).abs() < 1e-5);
        assert!((binomial_regularizer(0.0, 4, 0.5).unwrap() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        for (k, n, b) in [(-1.0, 4, 0.5), (5.0, 4, 0.5), (1.0, 4, 0.0), (1.0, 4, 1.5), (3.0, 4, 1.0)] {
            assert!(matches!(binomial_regularizer(k, n, b), Err(TokenizerError::Domain { .. })), "{k} {n} {b}");
        }
    }

    #[test]
    fn graph_and_plain_agree() {
        let mut g = Graph::<f64>::new();
        let k = g.input(Tensor::scalar(3.0));
        let l = g.binomial_nll(k, 17, 0.1).unwrap();
        assert!((g.value(l).item() - binomial_regularizer(3.0, 17, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn short_fit_moves_rate_toward_prior() {
        let cfg = PriorFitConfig {
            steps: 300,
            ..PriorFitConfig::new(0.1, 3)
        };
        let rates = fit_predictor_to_prior(&cfg).unwrap();
        assert!(rates[0] > 0.3);
        let tail: f64 = rates[250..].iter().sum::<f64>() / 50.0;
        assert!((tail - 0.1).abs() < 0.03, "{tail}");
    }
}
