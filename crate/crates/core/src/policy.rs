//! Recurrent token policy.
//!
//! The policy is a single tanh recurrent cell that reads the scene features
//! at every step together with the embedding of the previously emitted token:
//!
//! ```text
//! h_t      = tanh(W_x x + W_h h_{t-1} + E[o_{t-1}] + b_h),   h_0 = 0, o_0 = EOS
//! logits_t = W_o h_t + b_o
//! ```
//!
//! The same parameter type serves as the trainable policy, the frozen
//! behaviour policy and the frozen reference policy. Gradients are returned
//! as a `PolicyParams` of identical shape.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_lang::{FormatGrammar, Token, VOCAB_SIZE};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CGPOLICY";
const CHECKPOINT_VERSION: u32 = 1;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out += self · v`
    fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), v);
        }
    }

    /// `out += selfᵀ · v`
    fn tmul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        for (r, &vr) in v.iter().enumerate() {
            if vr != 0.0 {
                axpy(vr, self.row(r), out);
            }
        }
    }

    /// `self += u vᵀ`
    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(ur, v, self.row_mut(r));
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            feature_dim: 8,
            hidden: 32,
            vocab: VOCAB_SIZE,
        }
    }
}

/// All learnable parameters of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    /// hidden × feature_dim
    pub w_x: Matrix,
    /// hidden × hidden
    pub w_h: Matrix,
    /// vocab × hidden; row `EOS` doubles as the start-of-sequence input.
    pub emb: Matrix,
    /// vocab × hidden
    pub w_o: Matrix,
    pub b_h: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let PolicyDims {
            feature_dim: d,
            hidden: h,
            vocab: v,
        } = dims;
        PolicyParams {
            w_x: Matrix::zeros(h, d),
            w_h: Matrix::zeros(h, h),
            emb: Matrix::zeros(v, h),
            w_o: Matrix::zeros(v, h),
            b_h: vec![0.0; h],
            b_o: vec![0.0; v],
        }
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn init_uniform(dims: PolicyDims, scale: f64, seed: u64) -> Self {
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in params.blocks_mut() {
            for w in block.iter_mut() {
                *w = rng.random_range(-scale..=scale);
            }
        }
        params
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            feature_dim: self.w_x.cols,
            hidden: self.w_x.rows,
            vocab: self.w_o.rows,
        }
    }

    /// Parameter blocks in checkpoint order: W_x, W_h, E, W_o, b_h, b_o.
    pub fn blocks(&self) -> [&[f64]; 6] {
        [
            self.w_x.as_slice(),
            self.w_h.as_slice(),
            self.emb.as_slice(),
            self.w_o.as_slice(),
            &self.b_h,
            &self.b_o,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w_x.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.emb.as_mut_slice(),
            self.w_o.as_mut_slice(),
            &mut self.b_h,
            &mut self.b_o,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Flattened copy in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn from_flat(dims: PolicyDims, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(dims);
        if flat.len() != params.num_params() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                params.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for block in params.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(params)
    }

    /// Deep copy used as a frozen behaviour or reference policy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.dims() == other.dims()
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &PolicyParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|w| *w *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|w| w.is_finite()))
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.w_x.cols {
            return Err(Error::Config(format!(
                "feature vector has length {}, policy expects {}",
                features.len(),
                self.w_x.cols
            )));
        }
        Ok(())
    }

    /// Writes the binary checkpoint: magic, version and dims as little-endian
    /// `u32`, then every block as little-endian `f64` in [`Self::blocks`] order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let dims = self.dims();
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            dims.feature_dim as u32,
            dims.hidden as u32,
            dims.vocab as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for block in self.blocks() {
            for x in block {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("invalid checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 4];
        for v in header.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
            *v = u32::from_le_bytes(buf);
        }
        if header[0] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header[0])));
        }
        let dims = PolicyDims {
            feature_dim: header[1] as usize,
            hidden: header[2] as usize,
            vocab: header[3] as usize,
        };
        if dims.vocab != VOCAB_SIZE {
            return Err(bad(&format!("vocab size {} != {}", dims.vocab, VOCAB_SIZE)));
        }
        let mut params = Self::zeros(dims);
        for block in params.blocks_mut() {
            for x in block.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(|_| bad("truncated body"))?;
                *x = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("unreadable trailer"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 8 * self.num_params());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

/// Cached activations of a teacher-forced pass over a token sequence.
///
/// Position `t` conditions on `tokens[..t]`, so `probs[t]` is the
/// distribution from which `tokens[t]` was (or would be) drawn.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Token>,
    hidden: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Incremental decoder state used for sampling and greedy decoding.
struct Stepper<'a> {
    params: &'a PolicyParams,
    input_proj: Vec<f64>,
    h: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a PolicyParams, features: &[f64]) -> Self {
        let mut input_proj = params.b_h.clone();
        params.w_x.mul_vec_add(features, &mut input_proj);
        Stepper {
            params,
            input_proj,
            h: vec![0.0; params.b_h.len()],
        }
    }

    /// Consumes the previous token and returns (new hidden state, next-token distribution).
    fn step(&mut self, prev: Token) -> (Vec<f64>, Vec<f64>) {
        let p = self.params;
        let mut a = self.input_proj.clone();
        p.w_h.mul_vec_add(&self.h, &mut a);
        axpy(1.0, p.emb.row(prev.id()), &mut a);
        let h: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
        let mut logits = p.b_o.clone();
        p.w_o.mul_vec_add(&h, &mut logits);
        self.h = h.clone();
        (h, softmax(&logits))
    }
}

/// Teacher-forced pass producing the distribution at every position of `tokens`.
pub fn trace(params: &PolicyParams, features: &[f64], tokens: &[Token]) -> Result<Trace> {
    params.check_features(features)?;
    let mut stepper = Stepper::new(params, features);
    let mut inputs = Vec::with_capacity(tokens.len());
    let mut hidden = Vec::with_capacity(tokens.len());
    let mut probs = Vec::with_capacity(tokens.len());
    let mut prev = Token::EOS;
    for (t, &tok) in tokens.iter().enumerate() {
        let (h, dist) = stepper.step(prev);
        if dist.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite distribution at position {t}")));
        }
        inputs.push(prev);
        hidden.push(h);
        probs.push(dist);
        prev = tok;
    }
    Ok(Trace { inputs, hidden, probs })
}

/// Next-token distribution after `prefix`.
pub fn forward_dist(params: &PolicyParams, features: &[f64], prefix: &[Token]) -> Result<Vec<f64>> {
    params.check_features(features)?;
    let mut stepper = Stepper::new(params, features);
    let mut prev = Token::EOS;
    for &tok in prefix {
        stepper.step(prev);
        prev = tok;
    }
    Ok(stepper.step(prev).1)
}

/// Backpropagates per-position logit gradients through the recurrence.
///
/// `dlogits[t]` is ∂J/∂logits_t; positions beyond `dlogits.len()` contribute nothing.
pub fn backward(params: &PolicyParams, features: &[f64], trace: &Trace, dlogits: &[Vec<f64>]) -> PolicyParams {
    let mut grad = PolicyParams::zeros(params.dims());
    let hidden = params.b_h.len();
    let zero = vec![0.0; hidden];
    // ∂J/∂a_{t+1}, carried backwards through W_h.
    let mut da_next = vec![0.0; hidden];
    for t in (0..dlogits.len().min(trace.len())).rev() {
        let h = &trace.hidden[t];
        let dz = &dlogits[t];
        grad.w_o.add_outer(dz, h);
        axpy(1.0, dz, &mut grad.b_o);

        let mut dh = vec![0.0; hidden];
        params.w_o.tmul_vec_add(dz, &mut dh);
        params.w_h.tmul_vec_add(&da_next, &mut dh);
        let da: Vec<f64> = dh.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();

        let h_prev = if t == 0 { &zero } else { &trace.hidden[t - 1] };
        grad.w_x.add_outer(&da, features);
        grad.w_h.add_outer(&da, h_prev);
        axpy(1.0, &da, grad.emb.row_mut(trace.inputs[t].id()));
        axpy(1.0, &da, &mut grad.b_h);
        da_next = da;
    }
    grad
}

/// Per-token log-probabilities of `tokens` and the gradient of their sum.
pub fn logprob_and_grad(params: &PolicyParams, features: &[f64], tokens: &[Token]) -> Result<(Vec<f64>, PolicyParams)> {
    let tr = trace(params, features, tokens)?;
    let mut logps = Vec::with_capacity(tokens.len());
    let mut dlogits = Vec::with_capacity(tokens.len());
    for (t, (&tok, dist)) in tokens.iter().zip(&tr.probs).enumerate() {
        let lp = dist[tok.id()].ln();
        if !lp.is_finite() {
            return Err(Error::Numerical(format!(
                "log-probability of token {tok} at position {t} is {lp}"
            )));
        }
        logps.push(lp);
        let mut dz: Vec<f64> = dist.iter().map(|p| -p).collect();
        dz[tok.id()] += 1.0;
        dlogits.push(dz);
    }
    let grad = backward(params, features, &tr, &dlogits);
    Ok((logps, grad))
}

/// One sampled output with the quantities the objective needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    /// log π_θ(o_t | q, o_<t) at sampling time.
    pub logp_cur: Vec<f64>,
    /// log π_old(o_t | q, o_<t); the behaviour policy that drew the sample.
    pub logp_old: Vec<f64>,
    pub dist_cur: Vec<Vec<f64>>,
    pub dist_ref: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn sample_categorical(dist: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Ancestral sampling at temperature 1 until EOS or `grammar.max_len` tokens.
///
/// `params` is the behaviour policy; `reference` supplies the per-position
/// reference distributions for the KL term.
pub fn sample_rollout(
    params: &PolicyParams,
    reference: &PolicyParams,
    features: &[f64],
    grammar: FormatGrammar,
    seed: u64,
) -> Result<Rollout> {
    params.check_features(features)?;
    reference.check_features(features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = Stepper::new(params, features);
    let mut refr = Stepper::new(reference, features);
    let mut rollout = Rollout {
        tokens: Vec::new(),
        logp_cur: Vec::new(),
        logp_old: Vec::new(),
        dist_cur: Vec::new(),
        dist_ref: Vec::new(),
    };
    let mut prev = Token::EOS;
    while rollout.tokens.len() < grammar.max_len {
        let (_, dist) = cur.step(prev);
        let (_, dist_ref) = refr.step(prev);
        let tok = Token::from_id(sample_categorical(&dist, &mut rng)).expect("vocab-sized distribution");
        let lp = dist[tok.id()].ln();
        rollout.tokens.push(tok);
        rollout.logp_cur.push(lp);
        rollout.logp_old.push(lp);
        rollout.dist_cur.push(dist);
        rollout.dist_ref.push(dist_ref);
        if tok == Token::EOS {
            break;
        }
        prev = tok;
    }
    Ok(rollout)
}

/// Greedy decoding; ties go to the lowest token id.
pub fn greedy_decode(params: &PolicyParams, features: &[f64], grammar: FormatGrammar) -> Result<Vec<Token>> {
    params.check_features(features)?;
    let mut stepper = Stepper::new(params, features);
    let mut out = Vec::new();
    let mut prev = Token::EOS;
    while out.len() < grammar.max_len {
        let (_, dist) = stepper.step(prev);
        let best = argmax_lowest(&dist);
        let tok = Token::from_id(best).expect("vocab-sized distribution");
        out.push(tok);
        if tok == Token::EOS {
            break;
        }
        prev = tok;
    }
    Ok(out)
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format_lang::encode_count;

    fn small_dims() -> PolicyDims {
        PolicyDims {
            feature_dim: 3,
            hidden: 4,
            vocab: VOCAB_SIZE,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
        (0..n)
            .map(|_| Token::from_id(rng.random_range(0..VOCAB_SIZE)).unwrap())
            .collect()
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(PolicyDims::default());
        let dist = forward_dist(&p, &[0.3; 8], &[Token::ANS_OPEN]).unwrap();
        for q in dist {
            assert!((q - 1.0 / 13.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distributions_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let p = PolicyParams::init_uniform(PolicyDims::default(), 1.0, i);
            let x = random_features(&mut rng, 8);
            let len = rng.random_range(0..7);
            let prefix = random_tokens(&mut rng, len);
            let dist = forward_dist(&p, &x, &prefix).unwrap();
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(dist.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn boosted_output_row_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..20 {
            let mut p = PolicyParams::init_uniform(small_dims(), 0.1, i);
            let target = (i as usize) % VOCAB_SIZE;
            // Output row in augmented form [W_o | b_o]: shift its bias column.
            p.b_o[target] += 10.0;
            let x = random_features(&mut rng, 3);
            let dist = forward_dist(&p, &x, &[]).unwrap();
            // direct oracle: recompute h_1 and softmax by hand
            let mut a = p.b_h.clone();
            for (r, ar) in a.iter_mut().enumerate() {
                *ar += dot(p.w_x.row(r), &x) + p.emb.row(Token::EOS.id())[r];
            }
            let h: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
            let logits: Vec<f64> = (0..VOCAB_SIZE).map(|v| dot(p.w_o.row(v), &h) + p.b_o[v]).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let oracle = logits[target].exp() / z;
            assert!((dist[target] - oracle).abs() < 1e-12);
            assert!(dist[target] > 0.99, "p = {}", dist[target]);
        }
    }

    #[test]
    fn feature_dimension_mismatch_is_config_error() {
        let p = PolicyParams::zeros(small_dims());
        assert!(matches!(forward_dist(&p, &[0.0; 5], &[]), Err(Error::Config(_))));
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10 {
            let p = PolicyParams::init_uniform(small_dims(), 0.8, 100 + i);
            let x = random_features(&mut rng, 3);
            let len = rng.random_range(1..7);
            let toks = random_tokens(&mut rng, len);
            let (_, grad) = logprob_and_grad(&p, &x, &toks).unwrap();
            let f = |q: &PolicyParams| -> f64 { logprob_and_grad(q, &x, &toks).unwrap().0.iter().sum() };
            let flat = p.to_flat();
            let h = 1e-5;
            let numeric: Vec<f64> = (0..flat.len())
                .map(|k| {
                    let mut plus = flat.clone();
                    plus[k] += h;
                    let mut minus = flat.clone();
                    minus[k] -= h;
                    let fp = f(&PolicyParams::from_flat(p.dims(), &plus).unwrap());
                    let fm = f(&PolicyParams::from_flat(p.dims(), &minus).unwrap());
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            // every block, not just W_o
            let analytic = grad.to_flat();
            let mut offset = 0;
            for block in grad.blocks() {
                let n = block.len();
                let err = rel_err(&analytic[offset..offset + n], &numeric[offset..offset + n]);
                assert!(err < 1e-4, "block at {offset}: rel err {err}");
                offset += n;
            }
        }
    }

    #[test]
    fn empty_sequence_has_zero_gradient() {
        let p = PolicyParams::init_uniform(small_dims(), 0.5, 9);
        let (lp, g) = logprob_and_grad(&p, &[0.1, 0.2, 0.3], &[]).unwrap();
        assert!(lp.is_empty());
        assert_eq!(g, PolicyParams::zeros(small_dims()));
    }

    #[test]
    fn positive_output_scaling_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..20 {
            let p = PolicyParams::init_uniform(PolicyDims::default(), 0.5, 200 + i);
            let mut doubled = p.clone();
            doubled.w_o.as_mut_slice().iter_mut().for_each(|w| *w *= 2.0);
            doubled.b_o.iter_mut().for_each(|w| *w *= 2.0);
            let x = random_features(&mut rng, 8);
            let toks = random_tokens(&mut rng, 6);
            let a = trace(&p, &x, &toks).unwrap();
            let b = trace(&doubled, &x, &toks).unwrap();
            for (pa, pb) in a.probs.iter().zip(&b.probs) {
                assert_eq!(argmax_lowest(pa), argmax_lowest(pb));
            }
        }
    }

    #[test]
    fn snapshot_is_independent() {
        let mut p = PolicyParams::init_uniform(small_dims(), 0.1, 5);
        let snap = p.snapshot();
        assert_eq!(snap, p);
        p.w_h.as_mut_slice()[0] += 1.0;
        assert_ne!(snap, p);
        assert_eq!(snap, PolicyParams::init_uniform(small_dims(), 0.1, 5));
    }

    #[test]
    fn sampling_is_deterministic_and_records_consistent_logps() {
        let p = PolicyParams::init_uniform(PolicyDims::default(), 0.3, 6);
        let r = PolicyParams::init_uniform(PolicyDims::default(), 0.3, 7);
        let x = vec![0.5; 8];
        let g = FormatGrammar::default();
        let a = sample_rollout(&p, &r, &x, g, 42).unwrap();
        let b = sample_rollout(&p, &r, &x, g, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= g.max_len);
        for t in 0..a.len() {
            assert_eq!(a.logp_cur[t], a.dist_cur[t][a.tokens[t].id()].ln());
            assert!((a.dist_cur[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((a.dist_ref[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let tr = trace(&p, &x, &a.tokens).unwrap();
        assert_eq!(tr.probs, a.dist_cur);
    }

    #[test]
    fn uniform_policy_samples_uniform_first_tokens() {
        let p = PolicyParams::zeros(PolicyDims::default());
        let x = vec![0.0; 8];
        let n = 10_000;
        let mut counts = [0usize; VOCAB_SIZE];
        for seed in 0..n {
            let r = sample_rollout(&p, &p, &x, FormatGrammar::default(), seed).unwrap();
            counts[r.tokens[0].id()] += 1;
        }
        let expected = n as f64 / VOCAB_SIZE as f64;
        let sigma = (n as f64 * (1.0 / 13.0) * (12.0 / 13.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0, "count {c}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 12 dof, p = 0.01
        assert!(chi2 < 26.217, "chi2 = {chi2}");
    }

    #[test]
    fn forced_eos_terminates_immediately() {
        let mut p = PolicyParams::zeros(PolicyDims::default());
        p.b_o[Token::EOS.id()] = 50.0;
        for seed in 0..200 {
            let r = sample_rollout(&p, &p, &[0.0; 8], FormatGrammar::default(), seed).unwrap();
            assert_eq!(r.tokens, vec![Token::EOS]);
        }
    }

    #[test]
    fn greedy_breaks_ties_towards_lowest_id() {
        let p = PolicyParams::zeros(PolicyDims::default());
        let out = greedy_decode(&p, &[0.0; 8], FormatGrammar::default()).unwrap();
        assert_eq!(out, vec![Token::digit(0); 8]);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_garbage() {
        let p = PolicyParams::init_uniform(PolicyDims::default(), 0.1, 8);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 8 * p.num_params());
        assert_eq!(PolicyParams::read_from(buf.as_slice()).unwrap(), p);
        assert!(PolicyParams::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(PolicyParams::read_from(bad.as_slice()).is_err());
        buf.push(0);
        assert!(PolicyParams::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn teacher_forcing_matches_incremental_forward() {
        let p = PolicyParams::init_uniform(PolicyDims::default(), 0.4, 10);
        let x = vec![0.2; 8];
        let toks = encode_count(1234);
        let tr = trace(&p, &x, &toks).unwrap();
        for t in 0..toks.len() {
            assert_eq!(tr.probs[t], forward_dist(&p, &x, &toks[..t]).unwrap());
        }
    }
}
