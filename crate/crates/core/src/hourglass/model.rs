use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;

use crate::compute::{causal_mask, Graph, Real, Tensor, Var};
use crate::corpus::Vocab;
use crate::tokenizer::{
    gumbel_sigmoid_graph, predictor_probs, upsample_index, BoundaryMask, PredictorVars, Route, Router, SegmentIndex,
};

use super::{BoundaryMode, ModelConfig, ModelError};

const LN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
    PredictorBias,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wqkv: usize,
    bq: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Names, shapes and roles of every parameter tensor, in storage order.
#[derive(Clone, Debug)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    inits: Vec<Init>,
    tok_emb: usize,
    pos_emb: usize,
    first: Vec<LayerIdx>,
    seg_pos: usize,
    middle: Vec<LayerIdx>,
    null_vec: usize,
    last: Vec<LayerIdx>,
    unemb_w: usize,
    unemb_b: usize,
    predictors: Vec<usize>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            tok_emb: 0,
            pos_emb: 0,
            first: Vec::new(),
            seg_pos: 0,
            middle: Vec::new(),
            null_vec: 0,
            last: Vec::new(),
            unemb_w: 0,
            unemb_b: 0,
            predictors: Vec::new(),
        };
        let (d, f, v, n) = (cfg.width, cfg.ffn_width, cfg.vocab_size, cfg.max_len + 1);
        l.tok_emb = l.add("embed.tokens", [v, d], Init::Normal);
        l.pos_emb = l.add("embed.positions", [n, d], Init::Normal);
        l.first = (0..cfg.layers_first).map(|i| l.add_layer(&format!("first.{i}"), d, f)).collect();
        for i in 0..cfg.predictors().len() {
            let base = l.add(&format!("predictor.{i}.w1"), [d, d], Init::Normal);
            l.add(&format!("predictor.{i}.b1"), [1, d], Init::Zeros);
            l.add(&format!("predictor.{i}.w2"), [d, 1], Init::Normal);
            l.add(&format!("predictor.{i}.b2"), [1, 1], Init::PredictorBias);
            l.predictors.push(base);
        }
        l.seg_pos = l.add("middle.positions", [n, d], Init::Normal);
        l.middle = (0..cfg.layers_middle).map(|i| l.add_layer(&format!("middle.{i}"), d, f)).collect();
        l.null_vec = l.add("upsample.null", [1, d], Init::Normal);
        l.last = (0..cfg.layers_last).map(|i| l.add_layer(&format!("last.{i}"), d, f)).collect();
        l.unemb_w = l.add("unembed.w", [d, v], Init::Normal);
        l.unemb_b = l.add("unembed.b", [1, v], Init::Zeros);
        l
    }

    fn add(&mut self, name: &str, shape: [usize; 2], init: Init) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn add_layer(&mut self, p: &str, d: usize, f: usize) -> LayerIdx {
        LayerIdx {
            wqkv: self.add(&format!("{p}.attn.wqkv"), [d, 3 * d], Init::Normal),
            // No key bias: it shifts every score of a row equally, so softmax ignores it.
            bq: self.add(&format!("{p}.attn.bq"), [1, d], Init::Zeros),
            bv: self.add(&format!("{p}.attn.bv"), [1, d], Init::Zeros),
            wo: self.add(&format!("{p}.attn.wo"), [d, d], Init::Normal),
            bo: self.add(&format!("{p}.attn.bo"), [1, d], Init::Zeros),
            ln1_g: self.add(&format!("{p}.ln1.gamma"), [1, d], Init::Ones),
            ln1_b: self.add(&format!("{p}.ln1.beta"), [1, d], Init::Zeros),
            w1: self.add(&format!("{p}.ffn.w1"), [d, f], Init::Normal),
            b1: self.add(&format!("{p}.ffn.b1"), [1, f], Init::Zeros),
            w2: self.add(&format!("{p}.ffn.w2"), [f, d], Init::Normal),
            b2: self.add(&format!("{p}.ffn.b2"), [1, d], Init::Zeros),
            ln2_g: self.add(&format!("{p}.ln2.gamma"), [1, d], Init::Ones),
            ln2_b: self.add(&format!("{p}.ln2.beta"), [1, d], Init::Zeros),
        }
    }
}

/// How boundary decisions are drawn in a forward pass.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum BoundaryNoise {
    /// Gumbel-sigmoid with noise seeded by `(seed, step, row)`.
    Sample { seed: u64, step: u64 },
    /// Deterministic `p >= 0.5`, used for analysis.
    Threshold,
    /// Every byte is a boundary regardless of the predictors.
    ForceAll,
}

/// Boundary and segment state of one row's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Content positions only; the tag is excluded.
    pub boundary: BoundaryMask,
    /// Segments over content positions.
    pub segments: SegmentIndex,
    /// Number of content segments (the tag adds one more pooled row).
    pub m: usize,
    pub route: Option<Route>,
}

/// Per-row loss components.
#[derive(Clone, Debug)]
pub struct RowLoss {
    pub ce: f64,
    pub reg: Option<f64>,
    pub trace: ForwardTrace,
}

/// Mean loss over a set of rows, with the graph node of the total.
pub struct BatchLoss {
    pub loss: Var,
    pub ce: f64,
    pub reg: f64,
    pub rows: Vec<RowLoss>,
}

struct RowOut {
    logits: Var,
    st: Option<Var>,
    trace: ForwardTrace,
}

/// Shape-level description of a model: config, parameter layout and routing.
#[derive(Clone, Debug)]
pub struct Arch {
    config: ModelConfig,
    layout: Layout,
    router: Option<Router>,
}

fn noise_seed(seed: u64, step: u64, row: u64) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [step, row] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

impl Arch {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let router = match &config.boundary {
            BoundaryMode::Learned { predictors } => Some(Router::new(predictors, config.vocab())?),
            BoundaryMode::AllBytes => None,
        };
        Ok(Arch {
            layout: Layout::new(&config),
            config,
            router,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param_shapes(&self) -> &[[usize; 2]] {
        &self.layout.shapes
    }

    /// Parameter indices of predictor `i` (`w1, b1, w2, b2`).
    pub fn predictor_params(&self, i: usize) -> std::ops::Range<usize> {
        let b = self.layout.predictors[i];
        b..b + 4
    }

    pub fn init_params<T: Real>(&self) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.layout
            .shapes
            .iter()
            .zip(&self.layout.inits)
            .map(|(&[r, c], init)| match init {
                Init::Normal => Tensor::randn(r, c, self.config.init_std, &mut rng),
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::full(r, c, T::one()),
                Init::PredictorBias => Tensor::full(r, c, T::lit(self.config.predictor_bias_init)),
            })
            .collect()
    }

    fn check_row(&self, row: &[u32]) -> Result<Option<Route>, ModelError> {
        let vocab = self.config.vocab();
        if row.len() < 2 || vocab.script_of_tag(row[0]).is_none() {
            return Err(ModelError::MalformedRow);
        }
        if row[1..].iter().any(|&b| b >= Vocab::BYTES) {
            return Err(ModelError::MalformedRow);
        }
        if row.len() - 1 > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: row.len() - 1,
                max_len: self.config.max_len,
            });
        }
        match &self.router {
            Some(r) => Ok(Some(r.route(row[0])?)),
            None => Ok(None),
        }
    }

    fn layer<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p [Tensor<T>],
        l: &LayerIdx,
        x: Var,
        mask: &Arc<Tensor<T>>,
    ) -> Result<Var, ModelError> {
        let d = self.config.width;
        let dh = d / self.config.heads;
        let mut p = |i: usize| g.param(i, &ps[i]);
        let (wqkv, bq, bv, wo, bo) = (p(l.wqkv), p(l.bq), p(l.bv), p(l.wo), p(l.bo));
        let (g1, b1, w1, fb1) = (p(l.ln1_g), p(l.ln1_b), p(l.w1), p(l.b1));
        let (w2, fb2, g2, b2) = (p(l.w2), p(l.b2), p(l.ln2_g), p(l.ln2_b));

        let no_key_bias = g.constant(Tensor::zeros(1, d));
        let bqkv = g.concat_cols(&[bq, no_key_bias, bv])?;
        let qkv = g.matmul(x, wqkv)?;
        let qkv = g.add_row(qkv, bqkv)?;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, d + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, Some(mask))?;
            heads.push(g.matmul(a, v)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let o = g.matmul(o, wo)?;
        let o = g.add_row(o, bo)?;
        let x = g.add(x, o)?;
        let x = g.layer_norm(x, g1, b1, LN_EPS)?;

        let f = g.matmul(x, w1)?;
        let f = g.add_row(f, fb1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, fb2)?;
        let x = g.add(x, f)?;
        Ok(g.layer_norm(x, g2, b2, LN_EPS)?)
    }

    fn block<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p [Tensor<T>],
        layers: &[LayerIdx],
        mut x: Var,
    ) -> Result<Var, ModelError> {
        if layers.is_empty() {
            return Ok(x);
        }
        let mask = causal_mask(g.value(x).rows());
        for l in layers {
            x = self.layer(g, ps, l, x, &mask)?;
        }
        Ok(x)
    }

    /// Byte encoder output for a full row (tag included).
    pub fn encode_graph<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p [Tensor<T>],
        row: &[u32],
    ) -> Result<Var, ModelError> {
        self.check_row(row)?;
        let ids: Vec<usize> = row.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..row.len()).collect();
        let tok = g.param(self.layout.tok_emb, &ps[self.layout.tok_emb]);
        let pos = g.param(self.layout.pos_emb, &ps[self.layout.pos_emb]);
        let x = g.gather_rows(tok, &ids)?;
        let pe = g.gather_rows(pos, &positions)?;
        let x = g.add(x, pe)?;
        self.block(g, ps, &self.layout.first, x)
    }

    fn row_forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p [Tensor<T>],
        row: &[u32],
        noise: BoundaryNoise,
        row_index: usize,
    ) -> Result<RowOut, ModelError> {
        let route = self.check_row(row)?;
        let n = row.len();
        let len = n - 1;
        let h = self.encode_graph(g, ps, row)?;

        let force = matches!(noise, BoundaryNoise::ForceAll) || route.is_none_or(|r| r.beta >= 1.0);
        let (boundary, st) = if force {
            let ones = vec![1.0; len];
            let mask = BoundaryMask::new(ones.clone(), ones, vec![true; len], Vec::new());
            (mask, None)
        } else {
            let route = route.expect("learned mode has a route");
            let base = self.layout.predictors[route.predictor];
            let mut p = |i: usize| g.param(i, &ps[i]);
            let vars = PredictorVars { w1: p(base), b1: p(base + 1), w2: p(base + 2), b2: p(base + 3) };
            let content: Vec<usize> = (1..n).collect();
            let hc = g.gather_rows(h, &content)?;
            let probs = predictor_probs(g, hc, &vars)?;
            let probs_f64: Vec<f64> = g.value(probs).data().iter().map(|x| x.as_f64()).collect();
            match noise {
                BoundaryNoise::Sample { seed, step } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, step, row_index as u64));
                    let u: Vec<f64> = (0..len).map(|_| rng.sample(Open01)).collect();
                    let (relaxed, st, hard) = gumbel_sigmoid_graph(g, probs, &u, self.config.tau)?;
                    let relaxed = g.value(relaxed).data().iter().map(|x| x.as_f64()).collect();
                    (BoundaryMask::new(probs_f64, relaxed, hard, u), Some(st))
                }
                BoundaryNoise::Threshold => {
                    let (st, hard) = g.straight_through(probs)?;
                    (BoundaryMask::new(probs_f64.clone(), probs_f64, hard, Vec::new()), Some(st))
                }
                BoundaryNoise::ForceAll => unreachable!(),
            }
        };

        // The tag closes its own segment; content segments follow it.
        let full_hard: Vec<bool> = std::iter::once(true).chain(boundary.hard.iter().copied()).collect();
        let full_seg = SegmentIndex::from_hard(&full_hard);
        let full_st = match st {
            Some(st) => {
                let one = g.constant(Tensor::scalar(T::one()));
                g.concat_rows(&[one, st])?
            }
            None => g.constant(Tensor::full(n, 1, T::one())),
        };
        // Pool weights 1 - j_t + sum_{s<t} b_s: exactly one in the forward
        // pass, but they carry the boundary gradient into the pooled states.
        let cs = g.cumsum_exclusive(full_st)?;
        let offs: Vec<T> = full_seg.ids.iter().map(|&j| T::one() - T::lit(j as f64)).collect();
        let offs = g.constant(Tensor::column(offs));
        let w = g.add(cs, offs)?;
        let pooled = g.segment_weighted_pool(h, w, &full_seg.ids, full_seg.m)?;

        let seg_pos = g.param(self.layout.seg_pos, &ps[self.layout.seg_pos]);
        let sp = g.gather_rows(seg_pos, &(0..full_seg.m).collect::<Vec<_>>())?;
        let z = g.add(pooled, sp)?;
        let mid = self.block(g, ps, &self.layout.middle, z)?;

        let null = g.param(self.layout.null_vec, &ps[self.layout.null_vec]);
        let table = g.concat_rows(&[null, mid])?;
        let idx: Vec<usize> = upsample_index(&full_seg).iter().map(|p| p.map_or(0, |j| j + 1)).collect();
        let up = g.gather_rows(table, &idx)?;
        let x = g.add(up, h)?;
        let x = self.block(g, ps, &self.layout.last, x)?;

        let uw = g.param(self.layout.unemb_w, &ps[self.layout.unemb_w]);
        let ub = g.param(self.layout.unemb_b, &ps[self.layout.unemb_b]);
        let logits = g.matmul(x, uw)?;
        let logits = g.add_row(logits, ub)?;

        let segments = SegmentIndex::from_hard(&boundary.hard);
        let trace = ForwardTrace {
            m: segments.m,
            segments,
            boundary,
            route: if force { route.filter(|r| r.beta >= 1.0) } else { route },
        };
        Ok(RowOut { logits, st, trace })
    }

    /// Mean over `rows` of next-byte cross-entropy plus `lambda` times the
    /// binomial prior of each row's routed predictor.
    pub fn batch_loss<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p [Tensor<T>],
        rows: &[&[u32]],
        noise: BoundaryNoise,
    ) -> Result<BatchLoss, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::MalformedRow);
        }
        let lambda = T::lit(self.config.lambda);
        let mut totals = Vec::with_capacity(rows.len());
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let r = self.row_forward(g, ps, row, noise, i)?;
            let targets: Vec<Option<usize>> = (0..row.len())
                .map(|t| row.get(t + 1).map(|&b| b as usize))
                .collect();
            let ce = g.cross_entropy(r.logits, &targets)?;
            let mut total = ce;
            let mut reg_value = None;
            if let (Some(st), Some(route)) = (r.st, r.trace.route) {
                if route.beta < 1.0 {
                    let k = g.sum(st)?;
                    let reg = g.binomial_nll(k, row.len() - 1, route.beta)?;
                    reg_value = Some(g.value(reg).item().as_f64());
                    let weighted = g.scale(reg, lambda)?;
                    total = g.add(ce, weighted)?;
                }
            }
            out.push(RowLoss {
                ce: g.value(ce).item().as_f64(),
                reg: reg_value,
                trace: r.trace,
            });
            totals.push(total);
        }
        let all = g.concat_rows(&totals)?;
        let loss = g.mean(all)?;
        let ce = out.iter().map(|r| r.ce).sum::<f64>() / out.len() as f64;
        let regs: Vec<f64> = out.iter().filter_map(|r| r.reg).collect();
        let reg = if regs.is_empty() { 0.0 } else { regs.iter().sum::<f64>() / regs.len() as f64 };
        Ok(BatchLoss { loss, ce, reg, rows: out })
    }
}

/// Model parameters together with their architecture.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    arch: Arch,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model (deterministic in `config.seed`).
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let arch = Arch::new(config)?;
        let params = arch.init_params();
        Ok(Model { arch, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        let arch = Arch::new(config)?;
        if params.len() != arch.layout.shapes.len()
            || params.iter().zip(&arch.layout.shapes).any(|(p, s)| p.shape() != *s)
        {
            return Err(ModelError::InvalidConfig("parameter shapes do not match the config".into()));
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        self.arch.param_names()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_names().iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    pub fn copy_shared_from(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        for (i, name) in self.arch.layout.names.iter().enumerate() {
            if let Some(src) = other.param(name) {
                if src.shape() == self.params[i].shape() {
                    self.params[i] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Encoder states `h^T` of a row (tag included).
    pub fn encode(&self, row: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let h = self.arch.encode_graph(&mut g, &self.params, row)?;
        Ok(g.value(h).clone())
    }

    /// Logits for every position of `row` and the boundary trace.
    pub fn forward(&self, row: &[u32], noise: BoundaryNoise) -> Result<(Tensor<T>, ForwardTrace), ModelError> {
        let mut g = Graph::new();
        let r = self.arch.row_forward(&mut g, &self.params, row, noise, 0)?;
        Ok((g.value(r.logits).clone(), r.trace))
    }

    /// Noise-free segmentation of a row.
    pub fn segment(&self, row: &[u32]) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new();
        Ok(self.arch.row_forward(&mut g, &self.params, row, BoundaryNoise::Threshold, 0)?.trace)
    }

    /// Loss values over `rows` (no gradients).
    pub fn loss(&self, rows: &[&[u32]], noise: BoundaryNoise) -> Result<(f64, Vec<RowLoss>), ModelError> {
        let mut g = Graph::new();
        let b = self.arch.batch_loss(&mut g, &self.params, rows, noise)?;
        Ok((g.value(b.loss).item().as_f64(), b.rows))
    }

    /// Loss over `rows` and the gradient of every parameter (`None` if unused).
    #[allow(clippy::type_complexity)]
    pub fn loss_and_grads(
        &self,
        rows: &[&[u32]],
        noise: BoundaryNoise,
    ) -> Result<(f64, f64, f64, Vec<RowLoss>, Vec<Option<Tensor<T>>>), ModelError> {
        let mut g = Graph::new();
        let b = self.arch.batch_loss(&mut g, &self.params, rows, noise)?;
        let total = g.value(b.loss).item().as_f64();
        let grads = g.backward(b.loss)?;
        let gs = (0..self.params.len()).map(|i| grads.param(i).cloned()).collect();
        Ok((total, b.ce, b.reg, b.rows, gs))
    }
}
