//! Autoregressive answer policy `p(y_j | y_<j, Q, Z)`.
//!
//! Features for position `j` are the question features, the latent block
//! (pooled according to [`LatentPool`]) and a learned prefix summary
//! `pos[j] + mean(emb[BOS], emb[y_0], …, emb[y_{j-1}])`. One tanh hidden
//! layer maps them to logits over the 12-token vocabulary.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numcore::{Graph, MlpSpec, Var};
use crate::tokens::{Token, BOS, EOS, VOCAB};

/// How the latent block enters the text features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPool {
    /// Column means over the `rows` latent tokens (`cols` features).
    Mean,
    /// Every latent value (`rows·cols` features).
    Flat,
    /// No latent input (question-only policy).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPolicy {
    pub offset: usize,
    pub cond_dim: usize,
    pub latent_rows: usize,
    pub latent_cols: usize,
    pub pool: LatentPool,
    pub embed_dim: usize,
    pub max_len: usize,
    pub spec: MlpSpec,
}

/// Sampling controls. Stored log-probs always come from the unmodified
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingOptions {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.98,
            greedy: false,
        }
    }
}

impl SamplingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return config_err("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return config_err("top_p must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One sampled answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub tokens: Vec<Token>,
    /// Full-support log-probability of each emitted token.
    pub logps: Vec<f64>,
    /// Entropy of the full-support distribution at each position.
    pub entropies: Vec<f64>,
    pub reward: f64,
}

impl TextPolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cond_dim: usize,
        latent_rows: usize,
        latent_cols: usize,
        pool: LatentPool,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
        offset: usize,
    ) -> Self {
        let latent_features = match pool {
            LatentPool::Mean => latent_cols,
            LatentPool::Flat => latent_rows * latent_cols,
            LatentPool::None => 0,
        };
        Self {
            offset,
            cond_dim,
            latent_rows,
            latent_cols,
            pool,
            embed_dim,
            max_len,
            spec: MlpSpec::tanh_hidden(vec![cond_dim + latent_features + embed_dim, hidden, VOCAB]),
        }
    }

    fn token_table(&self) -> usize {
        self.offset
    }

    fn position_table(&self) -> usize {
        self.offset + VOCAB * self.embed_dim
    }

    fn mlp_offset(&self) -> usize {
        self.position_table() + self.max_len * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        (VOCAB + self.max_len) * self.embed_dim + self.spec.param_count()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }

    /// Writes an initialization into `out` (this policy's slice only).
    pub fn init<R: Rng + ?Sized>(&self, out: &mut [f64], out_scale: f64, rng: &mut R) {
        let tables = (VOCAB + self.max_len) * self.embed_dim;
        for x in &mut out[..tables] {
            let z: f64 = StandardNormal.sample(rng);
            *x = 0.5 * z;
        }
        self.spec.init(&mut out[tables..], out_scale, rng);
    }

    /// Question features followed by the pooled latent.
    pub fn context_node(&self, g: &mut Graph<'_>, cond: &[f64], latent: Option<Var>) -> Result<Var> {
        if cond.len() != self.cond_dim {
            return config_err(format!(
                "text policy expects a condition of length {}, got {}",
                self.cond_dim,
                cond.len()
            ));
        }
        let q = g.constant(cond.to_vec());
        let pooled = match (self.pool, latent) {
            (LatentPool::None, _) => return Ok(q),
            (_, None) => return config_err("text policy needs a latent block"),
            (pool, Some(z)) => {
                let len = g.value(z).len();
                if len != self.latent_rows * self.latent_cols {
                    return config_err(format!(
                        "latent has {len} values, expected {}",
                        self.latent_rows * self.latent_cols
                    ));
                }
                match pool {
                    LatentPool::Flat => z,
                    _ => {
                        let rows: Vec<Var> = (0..self.latent_rows)
                            .map(|r| g.slice(z, r * self.latent_cols, self.latent_cols))
                            .collect();
                        g.mean_of(&rows)
                    }
                }
            }
        };
        Ok(g.concat(&[q, pooled]))
    }

    /// Log-probabilities over the vocabulary for the next token after `prefix`.
    pub fn logprobs_node(&self, g: &mut Graph<'_>, ctx: Var, prefix: &[Token]) -> Result<Var> {
        let j = prefix.len();
        if j >= self.max_len {
            return Err(Error::Input(format!("prefix length {j} reaches the limit {}", self.max_len)));
        }
        if let Some(bad) = prefix.iter().find(|t| **t >= VOCAB) {
            return Err(Error::Input(format!("token {bad} outside the vocabulary")));
        }
        let e = self.embed_dim;
        let embs: Vec<Var> = std::iter::once(BOS)
            .chain(prefix.iter().copied())
            .map(|t| g.param(self.token_table() + t * e, e))
            .collect();
        let mean = g.mean_of(&embs);
        let pos = g.param(self.position_table() + j * e, e);
        let summary = g.add(pos, mean);
        let input = g.concat(&[ctx, summary]);
        let logits = self.spec.forward(g, self.mlp_offset(), input)?;
        Ok(g.log_softmax(logits))
    }

    /// Next-token probabilities under the full policy.
    pub fn token_distribution(
        &self,
        params: &[f64],
        prefix: &[Token],
        cond: &[f64],
        latent: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let z = latent.map(|l| g.constant(l.to_vec()));
        let ctx = self.context_node(&mut g, cond, z)?;
        let lp = self.logprobs_node(&mut g, ctx, prefix)?;
        Ok(g.value(lp).iter().map(|x| x.exp()).collect())
    }

    /// Teacher-forced per-position log-prob nodes for `tokens`.
    pub fn sequence_logprob_nodes(&self, g: &mut Graph<'_>, ctx: Var, tokens: &[Token]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(tokens.len());
        for j in 0..tokens.len() {
            let lp = self.logprobs_node(g, ctx, &tokens[..j])?;
            out.push(g.pick(lp, tokens[j]));
        }
        Ok(out)
    }

    pub fn sequence_logprobs(
        &self,
        params: &[f64],
        tokens: &[Token],
        cond: &[f64],
        latent: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let z = latent.map(|l| g.constant(l.to_vec()));
        let ctx = self.context_node(&mut g, cond, z)?;
        let nodes = self.sequence_logprob_nodes(&mut g, ctx, tokens)?;
        Ok(nodes.iter().map(|v| g.scalar(*v)).collect())
    }

    /// Draws one answer: nucleus sampling at `opts.temperature`, stopping at
    /// EOS or `max_len` tokens. The reward is left at 0.
    pub fn sample_answer<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        cond: &[f64],
        latent: Option<&[f64]>,
        opts: &SamplingOptions,
        rng: &mut R,
    ) -> Result<AnswerSample> {
        opts.validate()?;
        let mut g = Graph::new(params);
        let z = latent.map(|l| g.constant(l.to_vec()));
        let ctx = self.context_node(&mut g, cond, z)?;
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut logps = Vec::with_capacity(self.max_len);
        let mut entropies = Vec::with_capacity(self.max_len);
        while tokens.len() < self.max_len {
            let lp_node = self.logprobs_node(&mut g, ctx, &tokens)?;
            let lp = g.value(lp_node);
            let tok = if opts.greedy {
                argmax(lp)
            } else {
                let probs = nucleus(&tempered(lp, opts.temperature), opts.top_p);
                WeightedIndex::new(&probs)
                    .map_err(|e| Error::Numeric(format!("degenerate token distribution: {e}")))?
                    .sample(rng)
            };
            entropies.push(entropy_of_logprobs(lp));
            logps.push(lp[tok]);
            tokens.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(AnswerSample {
            tokens,
            logps,
            entropies,
            reward: 0.0,
        })
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logp / T)`.
pub fn tempered(logps: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logps.iter().map(|l| l / temperature).collect();
    crate::numcore::log_softmax(&scaled).iter().map(|x| x.exp()).collect()
}

/// Keeps the smallest set of most-likely tokens whose mass reaches `top_p`
/// and renormalizes; everything else gets probability 0.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for i in order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|p| *p /= mass);
    kept
}

/// Shannon entropy (nats) of a distribution given by its log-probabilities.
pub fn entropy_of_logprobs(logps: &[f64]) -> f64 {
    -logps
        .iter()
        .map(|l| if l.is_finite() { l.exp() * l } else { 0.0 })
        .sum::<f64>()
}

/// Mean per-token entropy over a set of answers.
pub fn mean_token_entropy<'a, I: IntoIterator<Item = &'a AnswerSample>>(answers: I) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for a in answers {
        total += a.entropies.iter().sum::<f64>();
        count += a.entropies.len();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_check, seeded_rng};

    fn policy() -> (TextPolicy, Vec<f64>) {
        let p = TextPolicy::new(3, 2, 2, LatentPool::Mean, 4, 8, 6, 0);
        let mut v = vec![0.0; p.param_count()];
        p.init(&mut v, 1.0, &mut seeded_rng(12));
        (p, v)
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = TextPolicy::new(3, 2, 2, LatentPool::Mean, 4, 8, 6, 0);
        let v = vec![0.0; p.param_count()];
        let d = p
            .token_distribution(&v, &[1, 2], &[1.0, 0.0, 0.0], Some(&[0.1, 0.2, 0.3, 0.4]))
            .unwrap();
        for x in &d {
            assert!((x - 1.0 / 12.0).abs() < 1e-15);
        }
        let lp: Vec<f64> = d.iter().map(|x| x.ln()).collect();
        assert!((entropy_of_logprobs(&lp) - 12f64.ln()).abs() < 1e-12);
        assert!((12f64.ln() - 2.4849).abs() < 1e-4);
        let seq = p.sequence_logprobs(&v, &[3, 4, EOS], &[0.0, 1.0, 0.0], Some(&[0.0; 4])).unwrap();
        for l in seq {
            assert!((l - (1.0f64 / 12.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let (p, v) = policy();
        let mut rng = seeded_rng(1);
        for _ in 0..20 {
            let z: Vec<f64> = crate::numcore::normal_vec(&mut rng, 4);
            let d = p.token_distribution(&v, &[5, 1], &[0.0, 0.0, 1.0], Some(&z)).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_definition_case() {
        let kept = nucleus(&[0.6, 0.3, 0.1], 0.8);
        assert!((kept[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((kept[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kept[2], 0.0);
        assert_eq!(nucleus(&[0.6, 0.3, 0.1], 1.0).iter().filter(|p| **p > 0.0).count(), 3);
    }

    #[test]
    fn stored_logprobs_match_teacher_forcing() {
        let (p, v) = policy();
        let mut rng = seeded_rng(3);
        let z = [0.3, -0.1, 0.7, 0.2];
        for _ in 0..20 {
            let a = p
                .sample_answer(&v, &[0.0, 1.0, 0.0], Some(&z), &SamplingOptions::default(), &mut rng)
                .unwrap();
            assert!(a.tokens.len() <= 6);
            assert!(a.tokens.last() == Some(&EOS) || a.tokens.len() == 6);
            let lp = p.sequence_logprobs(&v, &a.tokens, &[0.0, 1.0, 0.0], Some(&z)).unwrap();
            assert_eq!(lp, a.logps);
            assert!(a.logps.iter().all(|l| *l <= 0.0 && l.is_finite()));
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (p, v) = policy();
        let opts = SamplingOptions {
            greedy: true,
            ..SamplingOptions::default()
        };
        let z = [0.0; 4];
        let a = p.sample_answer(&v, &[1.0, 0.0, 0.0], Some(&z), &opts, &mut seeded_rng(1)).unwrap();
        let b = p.sample_answer(&v, &[1.0, 0.0, 0.0], Some(&z), &opts, &mut seeded_rng(2)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let mut prefix = vec![];
        for &t in &a.tokens {
            let d = p.token_distribution(&v, &prefix, &[1.0, 0.0, 0.0], Some(&z)).unwrap();
            assert_eq!(argmax(&d), t);
            prefix.push(t);
        }
    }

    #[test]
    fn token_frequencies_match_the_distribution() {
        // Single-token answers: max_len 1, so every draw is one token.
        let (mut p, _) = policy();
        p = TextPolicy { max_len: 1, ..p };
        let mut v = vec![0.0; p.param_count()];
        p.init(&mut v, 1.0, &mut seeded_rng(77));
        let cond = [1.0, 0.0, 0.0];
        let z = [0.2; 4];
        let probs = p.token_distribution(&v, &[], &cond, Some(&z)).unwrap();
        let opts = SamplingOptions {
            top_p: 1.0,
            ..SamplingOptions::default()
        };
        let n = 100_000;
        let mut counts = [0usize; VOCAB];
        let mut rng = seeded_rng(5);
        for _ in 0..n {
            let a = p.sample_answer(&v, &cond, Some(&z), &opts, &mut rng).unwrap();
            counts[a.tokens[0]] += 1;
        }
        for (c, q) in counts.iter().zip(&probs) {
            let se = (q * (1.0 - q) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - q).abs() <= 3.0 * se + 1e-12, "freq {c} vs p {q}");
        }
    }

    #[test]
    fn summed_logprob_gradient_matches_finite_differences() {
        let (p, v) = policy();
        let cond = [0.0, 0.0, 1.0];
        let z = vec![0.4, -0.3, 0.1, 0.9];
        let err = finite_diff_check(&v, 1e-5, |g| {
            let zv = g.constant(z.clone());
            let ctx = p.context_node(g, &cond, Some(zv))?;
            let lps = p.sequence_logprob_nodes(g, ctx, &[2, 7, EOS])?;
            Ok(g.add_all(&lps))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn question_only_policy_ignores_latent() {
        let p = TextPolicy::new(3, 2, 2, LatentPool::None, 4, 8, 6, 0);
        let mut v = vec![0.0; p.param_count()];
        p.init(&mut v, 1.0, &mut seeded_rng(0));
        let a = p.token_distribution(&v, &[], &[1.0, 0.0, 0.0], None).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
