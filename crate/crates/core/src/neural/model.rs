//! Forward pass, written once over [`Exec`].

use std::sync::Arc;

use super::exec::{softmax, ConstMatrix, Eval, Exec, Tape};
use super::{Gradients, NeuralParameters, Param};
use crate::automaton::EOS;
use crate::error::{Error, Result};
use crate::model1::{Direction, TranslationTable};

/// Per-position annotations `[forward; backward]` plus what every decoder step reuses.
#[derive(Clone, Debug)]
pub struct EncoderOutput<V = Vec<f64>> {
    pub annotations: Vec<V>,
    /// Attention key projections `W_k h_j`.
    pub keys: Vec<V>,
    pub init: DecoderStepState<V>,
}

/// Decoder hidden and cell state after consuming `last`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepState<V = Vec<f64>> {
    pub h: V,
    pub c: V,
    /// Target-vocabulary id of the previous token.
    pub last: usize,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput<V = Vec<f64>> {
    /// `W_o η + b_o`.
    pub logits: V,
    /// Logits of every action: writes (bias included) followed by copies when enabled.
    pub actions: V,
    /// Attention energies.
    pub energies: V,
    pub alpha: V,
    /// Decoder state after this step; `last` still names the previous token.
    pub state: DecoderStepState<V>,
}

fn lstm<E: Exec>(ex: &mut E, w: Param, b: Param, input: &E::V, h: &E::V, c: &E::V) -> (E::V, E::V) {
    let n = ex.val(h).len();
    let xh = ex.concat(&[input.clone(), h.clone()]);
    let wx = ex.matvec(w, &xh);
    let bias = ex.param(b);
    let z = ex.add(&wx, &bias);
    let zi = ex.slice(&z, 0, n);
    let zf = ex.slice(&z, n, n);
    let zo = ex.slice(&z, 2 * n, n);
    let zg = ex.slice(&z, 3 * n, n);
    let i = ex.sigmoid(&zi);
    let f = ex.sigmoid(&zf);
    let o = ex.sigmoid(&zo);
    let g = ex.tanh(&zg);
    let fc = ex.mul(&f, c);
    let ig = ex.mul(&i, &g);
    let c_new = ex.add(&fc, &ig);
    let tc = ex.tanh(&c_new);
    let h_new = ex.mul(&o, &tc);
    (h_new, c_new)
}

fn affine<E: Exec>(ex: &mut E, w: Param, b: Param, x: &E::V) -> E::V {
    let wx = ex.matvec(w, x);
    let bias = ex.param(b);
    ex.add(&wx, &bias)
}

pub(crate) fn encode_with<E: Exec, S: AsRef<str>>(ex: &mut E, x: &[S]) -> EncoderOutput<E::V> {
    let hsize = ex.params().config.hidden;
    let ids: Vec<usize> = x.iter().map(|t| ex.params().source_vocab.id(t.as_ref())).collect();
    let embedded: Vec<E::V> = ids.iter().map(|&id| ex.row(Param::SourceEmbedding, id)).collect();
    let zero = ex.constant(vec![0.0; hsize]);

    let mut fwd = Vec::with_capacity(x.len());
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for e in &embedded {
        (h, c) = lstm(ex, Param::EncoderForwardW, Param::EncoderForwardB, e, &h, &c);
        fwd.push(h.clone());
    }
    let mut bwd = vec![zero.clone(); x.len()];
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for (j, e) in embedded.iter().enumerate().rev() {
        (h, c) = lstm(ex, Param::EncoderBackwardW, Param::EncoderBackwardB, e, &h, &c);
        bwd[j] = h.clone();
    }

    let annotations: Vec<E::V> = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| ex.concat(&[f.clone(), b.clone()]))
        .collect();
    let keys = annotations.iter().map(|a| ex.matvec(Param::AttentionKey, a)).collect();
    let ends = ex.concat(&[fwd[x.len() - 1].clone(), bwd[0].clone()]);
    let pre = affine(ex, Param::DecoderInitW, Param::DecoderInitB, &ends);
    let h0 = ex.tanh(&pre);
    let bos = ex.params().bos_id();
    EncoderOutput {
        annotations,
        keys,
        init: DecoderStepState { h: h0, c: zero, last: bos, step: 0 },
    }
}

/// Returns `(energies, alpha, context)`.
fn attend<E: Exec>(ex: &mut E, enc: &EncoderOutput<E::V>, g: &E::V) -> (E::V, E::V, E::V) {
    let q = affine(ex, Param::AttentionQuery, Param::AttentionB, g);
    let energies: Vec<E::V> = enc
        .keys
        .iter()
        .map(|k| {
            let s = ex.add(&q, k);
            let t = ex.tanh(&s);
            ex.matvec(Param::AttentionV, &t)
        })
        .collect();
    let e = ex.concat(&energies);
    let alpha = ex.softmax(&e);
    let ctx = ex.weighted_sum(&alpha, &enc.annotations);
    (e, alpha, ctx)
}

pub(crate) fn step_with<E: Exec>(
    ex: &mut E,
    enc: &EncoderOutput<E::V>,
    state: &DecoderStepState<E::V>,
    bias: Option<&ConstMatrix>,
) -> StepOutput<E::V> {
    let (energies, alpha, ctx) = attend(ex, enc, &state.h);
    let emb = ex.row(Param::TargetEmbedding, state.last);
    let input = ex.concat(&[emb, ctx.clone()]);
    let (h, c) = lstm(ex, Param::DecoderW, Param::DecoderB, &input, &state.h, &state.c);
    let cg = ex.concat(&[ctx, h.clone()]);
    let pre = affine(ex, Param::OutputMlpW, Param::OutputMlpB, &cg);
    let eta = ex.tanh(&pre);
    let logits = affine(ex, Param::OutputW, Param::OutputB, &eta);

    let mut actions = logits.clone();
    if let Some(m) = bias {
        let b = ex.const_matvec(m, &alpha);
        let eps = ex.params().config.epsilon;
        let lb = ex.ln_eps(&b, eps);
        actions = ex.add(&actions, &lb);
    }
    if ex.params().config.copy {
        let copies = ex.scalar_affine(&energies, Param::CopyScale, Param::CopyShift);
        actions = ex.concat(&[actions, copies]);
    }
    StepOutput {
        logits,
        actions,
        energies,
        alpha,
        state: DecoderStepState { h, c, last: state.last, step: state.step + 1 },
    }
}

/// Action indices that realize `token`: its write action and every matching copy.
fn realizing_actions<S: AsRef<str>>(params: &NeuralParameters, x: &[S], token: &str) -> Vec<usize> {
    let v = params.target_vocab.len();
    let mut out = vec![params.target_vocab.id(token)];
    if params.config.copy {
        out.extend(x.iter().enumerate().filter(|(_, s)| s.as_ref() == token).map(|(j, _)| v + j));
    }
    out
}

/// Teacher-forced negative log-likelihood of `target` followed by `</s>`.
pub(crate) fn sequence_loss_with<E: Exec, S: AsRef<str>, T: AsRef<str>>(
    ex: &mut E,
    x: &[S],
    target: &[T],
    bias: Option<&ConstMatrix>,
) -> E::V {
    let enc = encode_with(ex, x);
    let mut state = enc.init.clone();
    let mut terms = Vec::with_capacity(target.len() + 1);
    for t in target.iter().map(AsRef::as_ref).chain([EOS]) {
        let out = step_with(ex, &enc, &state, bias);
        let subset = realizing_actions(ex.params(), x, t);
        terms.push(ex.neg_log_mass(&out.actions, &subset));
        state = out.state;
        state.last = ex.params().target_vocab.id(t);
    }
    ex.sum(&terms)
}

pub fn encode<S: AsRef<str>>(params: &NeuralParameters, x: &[S]) -> Result<EncoderOutput> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    Ok(encode_with(&mut Eval::new(params), x))
}

/// Attention weights and context for decoder state `g_prev`.
pub fn attention(params: &NeuralParameters, g_prev: &DecoderStepState, enc: &EncoderOutput) -> (Vec<f64>, Vec<f64>) {
    let (_, alpha, ctx) = attend(&mut Eval::new(params), enc, &g_prev.h);
    (alpha, ctx)
}

/// One decoder step without bias or copy handling in `logits`.
pub fn step_logits(params: &NeuralParameters, state: &DecoderStepState, enc: &EncoderOutput) -> StepOutput {
    step_with(&mut Eval::new(params), enc, state, None)
}

/// Dense `P'[k][j] = p_t'(z_k | x_j)` over the target vocabulary.
pub fn bias_matrix<S: AsRef<str>>(params: &NeuralParameters, x: &[S], inverse: &TranslationTable) -> Result<ConstMatrix> {
    if inverse.direction() != Direction::Inverse {
        return Err(Error::InvalidInput("the bias needs an inverse table".into()));
    }
    let n = x.len();
    let mut data = Vec::with_capacity(params.target_vocab.len() * n);
    for z in params.target_vocab.tokens() {
        data.extend(x.iter().map(|xj| inverse.lookup(xj.as_ref(), z)));
    }
    Ok(ConstMatrix { rows: params.target_vocab.len(), cols: n, data: Arc::new(data) })
}

/// `logits + ln(P' α + ε)`.
pub fn bias_logits(params: &NeuralParameters, logits: &[f64], alpha: &[f64], bias: &ConstMatrix) -> Vec<f64> {
    let eps = params.config.epsilon;
    logits
        .iter()
        .zip(bias.matvec(alpha))
        .map(|(l, b)| l + (b + eps).ln())
        .collect()
}

/// Softmax over write and copy actions.
pub fn copy_step(
    params: &NeuralParameters,
    state: &DecoderStepState,
    enc: &EncoderOutput,
    bias: Option<&ConstMatrix>,
) -> Result<Vec<f64>> {
    if !params.config.copy {
        return Err(Error::Model("copying is disabled for this model".into()));
    }
    Ok(softmax(&step_with(&mut Eval::new(params), enc, state, bias).actions))
}

/// Loss of one pair.
pub fn sequence_loss<S: AsRef<str>, T: AsRef<str>>(
    params: &NeuralParameters,
    x: &[S],
    target: &[T],
    bias: Option<&ConstMatrix>,
) -> f64 {
    sequence_loss_with(&mut Eval::new(params), x, target, bias)[0]
}

/// Loss of one pair and its gradient.
pub fn loss_and_gradient<S: AsRef<str>, T: AsRef<str>>(
    params: &NeuralParameters,
    x: &[S],
    target: &[T],
    bias: Option<&ConstMatrix>,
) -> (f64, Gradients) {
    let mut tape = Tape::new(params);
    let root = sequence_loss_with(&mut tape, x, target, bias);
    let loss = tape.val(&root)[0];
    (loss, tape.backward(root))
}

/// Action distribution after one step, with the state to continue from.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub state: DecoderStepState,
}

/// A model bound to one input: encoder output, bias matrix and source tokens.
pub struct NeuralScorer<'a> {
    params: &'a NeuralParameters,
    x: Vec<String>,
    enc: EncoderOutput,
    bias: Option<ConstMatrix>,
}

impl<'a> NeuralScorer<'a> {
    /// `inverse` is required when the model was configured with the lexical bias.
    pub fn new(params: &'a NeuralParameters, x: &[String], inverse: Option<&TranslationTable>) -> Result<Self> {
        let enc = encode(params, x)?;
        let bias = match (params.config.bias, inverse) {
            (true, Some(t)) => Some(bias_matrix(params, x, t)?),
            (true, None) => return Err(Error::InvalidInput("model uses the lexical bias; an inverse table is required".into())),
            (false, _) => None,
        };
        Ok(NeuralScorer { params, x: x.to_vec(), enc, bias })
    }

    pub fn params(&self) -> &NeuralParameters {
        self.params
    }

    pub fn encoder_output(&self) -> &EncoderOutput {
        &self.enc
    }

    pub fn bias(&self) -> Option<&ConstMatrix> {
        self.bias.as_ref()
    }

    pub fn initial_state(&self) -> DecoderStepState {
        self.enc.init.clone()
    }

    pub fn predict(&self, state: &DecoderStepState) -> Prediction {
        let out = step_with(&mut Eval::new(self.params), &self.enc, state, self.bias.as_ref());
        Prediction { probs: softmax(&out.actions), state: out.state }
    }

    /// Probability of emitting `token`, summing write and copy actions.
    /// The flag is set when `token` is outside the target vocabulary.
    pub fn emission(&self, prediction: &Prediction, token: &str) -> (f64, bool) {
        let known = self.params.target_vocab.get(token).is_some();
        let p = realizing_actions(self.params, &self.x, token)
            .iter()
            .map(|&k| prediction.probs[k])
            .sum();
        (p, !known)
    }

    /// State after `prediction` is followed by `token`.
    pub fn advance(&self, prediction: &Prediction, token: &str) -> DecoderStepState {
        DecoderStepState { last: self.params.target_vocab.id(token), ..prediction.state.clone() }
    }

    /// Feeds `tokens` without scoring them.
    pub fn force<S: AsRef<str>>(&self, state: &DecoderStepState, tokens: &[S]) -> DecoderStepState {
        tokens.iter().fold(state.clone(), |s, t| {
            let p = self.predict(&s);
            self.advance(&p, t.as_ref())
        })
    }

    /// `Σ -ln p(token)` along `tokens` from `state`.
    pub fn score<S: AsRef<str>>(&self, state: &DecoderStepState, tokens: &[S]) -> f64 {
        let mut s = state.clone();
        let mut total = 0.0;
        for t in tokens {
            let p = self.predict(&s);
            total += -self.emission(&p, t.as_ref()).0.ln();
            s = self.advance(&p, t.as_ref());
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Pair, ParallelCorpus};
    use crate::neural::NeuralConfig;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn params(copy: bool) -> NeuralParameters {
        let corpus = ParallelCorpus::from_pairs(vec![
            Pair::new(toks("get the max"), toks("max a b"), None).unwrap(),
            Pair::new(toks("get the min"), toks("min a b"), None).unwrap(),
        ]);
        let config = NeuralConfig { embedding: 5, hidden: 4, attention: 3, mlp: 6, copy, init_scale: 0.5, ..Default::default() };
        NeuralParameters::new(config, &corpus).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let p = params(false);
        let enc = encode(&p, &toks("get the max")).unwrap();
        assert_eq!(enc.annotations.len(), 3);
        assert!(enc.annotations.iter().all(|a| a.len() == 8));
        let rev = encode(&p, &toks("max the get")).unwrap();
        assert!(rev.annotations.iter().all(|a| a.len() == 8));
        assert!(encode(&p, &Vec::<String>::new()).is_err());
    }

    #[test]
    fn singleton_attention_is_one() {
        let p = params(false);
        let enc = encode(&p, &toks("zzz")).unwrap();
        let (alpha, ctx) = attention(&p, &enc.init, &enc);
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(ctx, enc.annotations[0]);
    }

    #[test]
    fn zeroed_energy_weights_give_uniform_attention() {
        let mut p = params(false);
        p.tensor_mut(Param::AttentionV).data.iter_mut().for_each(|v| *v = 0.0);
        let enc = encode(&p, &toks("get the max min")).unwrap();
        let (alpha, _) = attention(&p, &enc.init, &enc);
        assert!(alpha.iter().all(|a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn steps_are_reproducible_and_normalized() {
        let p = params(false);
        let enc = encode(&p, &toks("get the max")).unwrap();
        let a = step_logits(&p, &enc.init, &enc);
        let b = step_logits(&p, &enc.init, &enc);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.state, b.state);
        assert!((softmax(&a.logits).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn copy_requires_flag() {
        let p = params(false);
        let enc = encode(&p, &toks("x")).unwrap();
        assert!(copy_step(&p, &enc.init, &enc, None).is_err());
        let p = params(true);
        let enc = encode(&p, &toks("x y")).unwrap();
        let d = copy_step(&p, &enc.init, &enc, None).unwrap();
        assert_eq!(d.len(), p.target_vocab.len() + 2);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_eval_agree() {
        let p = params(true);
        let (loss, _) = loss_and_gradient(&p, &toks("get the max"), &toks("max a b"), None);
        assert_eq!(loss, sequence_loss(&p, &toks("get the max"), &toks("max a b"), None));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = params(true);
        p.config.bias = true;
        let x = toks("get the max");
        let bias = ConstMatrix {
            rows: p.target_vocab.len(),
            cols: 3,
            data: Arc::new((0..p.target_vocab.len() * 3).map(|i| 0.05 + (i % 7) as f64 * 0.1).collect()),
        };
        let target = toks("max a b");
        let (_, g) = loss_and_gradient(&p, &x, &target, Some(&bias));
        for param in Param::ALL {
            let n = p.tensor(param).data.len();
            let mut worst = 0.0f64;
            for k in 0..n {
                let orig = p.tensor(param).data[k];
                p.tensor_mut(param).data[k] = orig + 1e-5;
                let up = sequence_loss(&p, &x, &target, Some(&bias));
                p.tensor_mut(param).data[k] = orig - 1e-5;
                let down = sequence_loss(&p, &x, &target, Some(&bias));
                p.tensor_mut(param).data[k] = orig;
                let num = (up - down) / 2e-5;
                let a = g.get(param)[k];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
            assert!(worst < 1e-4, "{}: {worst}", param.name());
        }
    }
}
