//! Cold-start model: a small VAE compresses a reference trace into a latent
//! block, a velocity field learns to generate those latents from the
//! question, and the text policy decodes an answer from (question, latent).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{modsum_condition, Condition};
use crate::error::{config_err, Error, Result};
use crate::flowlat::{draw_fm, fm_term, sample_trajectory, FmDraw, LatentBlock, SamplerConfig, VelocityField};
use crate::numcore::{adamw_step_ranges, grad, normal_vec, AdamState, AdamWConfig, Graph, MlpSpec, ParamLayout, ParamVector, Var};
use crate::textpol::{AnswerSample, LatentPool, SamplingOptions, TextPolicy};
use crate::tokens::{Token, EOS, VOCAB};

/// Sizes of every sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent tokens `B`.
    pub latent_rows: usize,
    /// Latent width `D`.
    pub latent_cols: usize,
    pub velocity_hidden: Vec<usize>,
    pub text_embed: usize,
    pub text_hidden: usize,
    /// Longest answer, EOS included.
    pub max_len: usize,
    pub encoder_embed: usize,
    pub encoder_hidden: usize,
    pub latent_pool: LatentPool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_rows: 8,
            latent_cols: 4,
            velocity_hidden: vec![128],
            text_embed: 16,
            text_hidden: 64,
            max_len: 8,
            encoder_embed: 16,
            encoder_hidden: 64,
            latent_pool: LatentPool::Flat,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_rows == 0 || self.latent_cols == 0 {
            return config_err("latent block dimensions must be positive");
        }
        if self.max_len == 0 || self.text_embed == 0 || self.text_hidden == 0 {
            return config_err("text policy sizes must be positive");
        }
        if self.encoder_embed == 0 || self.encoder_hidden == 0 {
            return config_err("encoder sizes must be positive");
        }
        if self.velocity_hidden.contains(&0) {
            return config_err("velocity hidden widths must be positive");
        }
        if self.latent_pool == LatentPool::None {
            return config_err("the latent model's text policy must read the latent");
        }
        Ok(())
    }
}

/// Trace encoder: position-aware token embeddings, mean-pooled, then an MLP
/// to `(mean, logvar)` of a `B·D` Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub offset: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub latent_dim: usize,
    pub spec: MlpSpec,
}

impl Encoder {
    pub fn new(embed_dim: usize, hidden: usize, max_len: usize, latent_dim: usize, offset: usize) -> Self {
        Self {
            offset,
            embed_dim,
            max_len,
            latent_dim,
            spec: MlpSpec::tanh_hidden(vec![embed_dim, hidden, 2 * latent_dim]),
        }
    }

    fn table_len(&self) -> usize {
        self.max_len * VOCAB * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.table_len() + self.spec.param_count()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }

    pub fn init<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        let n = self.table_len();
        for x in &mut out[..n] {
            let z: f64 = StandardNormal.sample(rng);
            *x = 0.5 * z;
        }
        self.spec.init(&mut out[n..], 0.1, rng);
    }

    /// `(mean, logvar)` nodes for `trace`.
    pub fn encode_node(&self, g: &mut Graph<'_>, trace: &[Token]) -> Result<(Var, Var)> {
        if trace.is_empty() || trace.len() > self.max_len {
            return Err(Error::Input(format!(
                "trace length {} outside 1..={}",
                trace.len(),
                self.max_len
            )));
        }
        if let Some(bad) = trace.iter().find(|t| **t >= VOCAB) {
            return Err(Error::Input(format!("token {bad} outside the vocabulary")));
        }
        let e = self.embed_dim;
        let embs: Vec<Var> = trace
            .iter()
            .enumerate()
            .map(|(j, t)| g.param(self.offset + (j * VOCAB + t) * e, e))
            .collect();
        let pooled = g.mean_of(&embs);
        let out = self.spec.forward(g, self.offset + self.table_len(), pooled)?;
        let mean = g.slice(out, 0, self.latent_dim);
        let logvar = g.slice(out, self.latent_dim, self.latent_dim);
        Ok((mean, logvar))
    }

    /// Reparameterized latent `mean + exp(logvar/2)·eps` as a node.
    pub fn sample_node(&self, g: &mut Graph<'_>, trace: &[Token], eps: &[f64]) -> Result<(Var, Var, Var)> {
        let (mean, logvar) = self.encode_node(g, trace)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps.to_vec());
        let noise = g.mul(std, e);
        Ok((g.add(mean, noise), mean, logvar))
    }
}

/// `KL(N(mean, exp(logvar)) ‖ N(0, I))` as a node.
pub fn gaussian_kl_node(g: &mut Graph<'_>, mean: Var, logvar: Var) -> Var {
    let n = g.value(mean).len() as f64;
    let m2 = g.sq_norm(mean);
    let ev = g.exp(logvar);
    let sev = g.sum(ev);
    let slv = g.sum(logvar);
    let a = g.add(m2, sev);
    let b = g.sub(a, slv);
    let c = g.shift(b, -n);
    g.scale(c, 0.5)
}

/// Velocity field, text policy and encoder sharing one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReasoner {
    pub config: ModelConfig,
    pub cond_dim: usize,
    pub velocity: VelocityField,
    pub text: TextPolicy,
    pub encoder: Encoder,
    pub layout: ParamLayout,
}

impl LatentReasoner {
    pub fn new(config: ModelConfig, cond_dim: usize) -> Result<Self> {
        config.validate()?;
        let (b, d) = (config.latent_rows, config.latent_cols);
        let mut layout = ParamLayout::new();
        let probe = VelocityField::new(b, d, cond_dim, &config.velocity_hidden, 0);
        let v_off = layout.reserve("velocity", probe.param_count());
        let velocity = VelocityField { offset: v_off, ..probe };
        let probe = TextPolicy::new(
            cond_dim,
            b,
            d,
            config.latent_pool,
            config.text_embed,
            config.text_hidden,
            config.max_len,
            0,
        );
        let t_off = layout.reserve("text", probe.param_count());
        let text = TextPolicy { offset: t_off, ..probe };
        let probe = Encoder::new(config.encoder_embed, config.encoder_hidden, config.max_len, b * d, 0);
        let e_off = layout.reserve("encoder", probe.param_count());
        let encoder = Encoder { offset: e_off, ..probe };
        layout.validate()?;
        Ok(Self {
            config,
            cond_dim,
            velocity,
            text,
            encoder,
            layout,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_rows * self.config.latent_cols
    }

    /// Random initialization; read-out layers start small so the initial
    /// velocity is near zero and the initial text policy near uniform.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        self.velocity
            .spec
            .init(&mut p.values[self.velocity.range()], 0.1, rng);
        let r = self.text.range();
        self.text.init(&mut p.values[r], 0.1, rng);
        let r = self.encoder.range();
        self.encoder.init(&mut p.values[r], rng);
        p
    }

    /// Encodes a trace; `deterministic` returns the posterior mean.
    pub fn encode_trace<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        trace: &[Token],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<LatentBlock> {
        let mut g = Graph::new(params);
        let (mean, logvar) = self.encoder.encode_node(&mut g, trace)?;
        let values = if deterministic {
            g.value(mean).to_vec()
        } else {
            let eps = normal_vec(rng, self.latent_dim());
            g.value(mean)
                .iter()
                .zip(g.value(logvar))
                .zip(&eps)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect()
        };
        LatentBlock::new(self.config.latent_rows, self.config.latent_cols, values)
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExample {
    pub question: Condition,
    /// Reference reasoning trace.
    pub trace: Vec<Token>,
    /// Answer tokens, EOS included.
    pub answer: Vec<Token>,
}

/// Line-delimited corpus record: every field an integer token list. The
/// question list holds the modsum target residue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub question: Vec<usize>,
    pub trace: Vec<Token>,
    pub answer: Vec<Token>,
}

impl TraceRecord {
    pub fn to_example(&self) -> Result<TraceExample> {
        match self.question.as_slice() {
            [target] if *target < crate::envs::MODULUS => Ok(TraceExample {
                question: modsum_condition(*target),
                trace: self.trace.clone(),
                answer: self.answer.clone(),
            }),
            other => Err(Error::Data(format!("unsupported question tokens {other:?}"))),
        }
    }

    pub fn from_example(ex: &TraceExample) -> Self {
        Self {
            question: vec![ex.question.id],
            trace: ex.trace.clone(),
            answer: ex.answer.clone(),
        }
    }
}

/// Parses a line-delimited JSON corpus, skipping blank lines.
pub fn parse_corpus(text: &str) -> Result<Vec<TraceExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: TraceRecord =
                serde_json::from_str(l).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
            rec.to_example()
        })
        .collect()
}

pub fn write_corpus(examples: &[TraceExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&TraceRecord::from_example(ex))?);
        out.push('\n');
    }
    Ok(out)
}

/// `per_target` uniformly random valid answers for every residue. The trace
/// holds the freely chosen leading digits; the answer repeats them, adds the
/// digit that completes the sum, then EOS.
pub fn modsum_corpus<R: Rng + ?Sized>(answer_len: usize, per_target: usize, rng: &mut R) -> Vec<TraceExample> {
    let mut out = Vec::with_capacity(per_target * crate::envs::MODULUS);
    for target in 0..crate::envs::MODULUS {
        for _ in 0..per_target {
            let mut digits: Vec<Token> = (0..answer_len - 1).map(|_| rng.random_range(0..10)).collect();
            let partial: usize = digits.iter().sum();
            let trace = digits.clone();
            digits.push((target + 10 - partial % 10) % 10);
            digits.push(EOS);
            out.push(TraceExample {
                question: modsum_condition(target),
                trace,
                answer: digits,
            });
        }
    }
    out
}

/// Per-example randomness for the supervised objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SftDraw {
    pub encoder_noise: Vec<f64>,
    pub fm: FmDraw,
}

pub fn draw_sft<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize, t_clamp: f64) -> Vec<SftDraw> {
    draw_fm(rng, count, dim, t_clamp)
        .into_iter()
        .map(|fm| SftDraw {
            encoder_noise: normal_vec(rng, dim),
            fm,
        })
        .collect()
}

/// Components of the supervised objective as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct SftTerms {
    /// Batch-mean flow-matching error on the encoded latents.
    pub fm: Var,
    /// Mean per-token negative log-likelihood of the answers.
    pub ce: Var,
    /// Batch-mean encoder KL to the unit Gaussian.
    pub kl: Var,
}

pub fn sft_terms(
    g: &mut Graph<'_>,
    model: &LatentReasoner,
    batch: &[TraceExample],
    draws: &[SftDraw],
) -> Result<SftTerms> {
    if batch.is_empty() || draws.len() != batch.len() {
        return config_err("supervised batch is empty or draws are missing");
    }
    let mut fm = Vec::with_capacity(batch.len());
    let mut kl = Vec::with_capacity(batch.len());
    let mut lps = Vec::new();
    for (ex, d) in batch.iter().zip(draws) {
        let (z, mean, logvar) = model.encoder.sample_node(g, &ex.trace, &d.encoder_noise)?;
        fm.push(fm_term(g, &model.velocity, z, &ex.question.features, &d.fm)?);
        kl.push(gaussian_kl_node(g, mean, logvar));
        let ctx = model.text.context_node(g, &ex.question.features, Some(z))?;
        lps.extend(model.text.sequence_logprob_nodes(g, ctx, &ex.answer)?);
    }
    let inv = 1.0 / batch.len() as f64;
    let fm_sum = g.add_all(&fm);
    let fm = g.scale(fm_sum, inv);
    let kl_sum = g.add_all(&kl);
    let kl = g.scale(kl_sum, inv);
    let lp_sum = g.add_all(&lps);
    let ce = g.scale(lp_sum, -1.0 / lps.len().max(1) as f64);
    Ok(SftTerms { fm, ce, kl })
}

/// `λ·FM + CE` on pre-drawn randomness.
pub fn sft_loss_graph(
    g: &mut Graph<'_>,
    model: &LatentReasoner,
    batch: &[TraceExample],
    lambda: f64,
    draws: &[SftDraw],
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return config_err("λ must be non-negative");
    }
    let t = sft_terms(g, model, batch, draws)?;
    let fm = g.scale(t.fm, lambda);
    Ok(g.add(fm, t.ce))
}

/// `λ·FM + CE` with fresh randomness from `rng`.
pub fn sft_loss<R: Rng + ?Sized>(
    model: &LatentReasoner,
    params: &[f64],
    batch: &[TraceExample],
    lambda: f64,
    t_clamp: f64,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_sft(rng, batch.len(), model.latent_dim(), t_clamp);
    crate::numcore::evaluate(params, |g| sft_loss_graph(g, model, batch, lambda, &draws))
}

/// Supervised schedule. The first phase fits encoder and decoder on
/// reconstruction alone; the second adds the flow term with the encoder
/// frozen, so the flow cannot pull the latents toward a trivially
/// predictable code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub lambda: f64,
    pub beta_vae: f64,
    pub recon_epochs: usize,
    pub flow_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub per_target: usize,
    pub t_clamp: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta_vae: 1e-3,
            recon_epochs: 60,
            flow_epochs: 100,
            batch_size: 32,
            lr: 3e-3,
            per_target: 100,
            t_clamp: 1e-3,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta_vae >= 0.0) {
            return config_err("λ and β_vae must be non-negative");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.lr >= 0.0) {
            return config_err("learning rate must be non-negative");
        }
        Ok(())
    }
}

/// Per-epoch supervised metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub phase: String,
    pub epoch: usize,
    pub fm: f64,
    pub ce: f64,
    pub kl: f64,
}

/// Runs both supervised phases, calling `log` after every epoch.
pub fn train_sft<R: Rng + ?Sized>(
    model: &LatentReasoner,
    params: &mut ParamVector,
    adam: &mut AdamState,
    corpus: &[TraceExample],
    cfg: &SftConfig,
    rng: &mut R,
    mut log: impl FnMut(&SftRecord),
) -> Result<()> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("supervised corpus is empty".into()));
    }
    let opt = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };
    let phases = [
        ("recon", cfg.recon_epochs, 0.0, vec![model.text.range(), model.encoder.range()]),
        ("flow", cfg.flow_epochs, cfg.lambda, vec![model.velocity.range(), model.text.range()]),
    ];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for (phase, epochs, lambda, ranges) in phases {
        for epoch in 0..epochs {
            order.shuffle(rng);
            let (mut fm_acc, mut ce_acc, mut kl_acc, mut batches) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<TraceExample> = chunk.iter().map(|i| corpus[*i].clone()).collect();
                let draws = draw_sft(rng, batch.len(), model.latent_dim(), cfg.t_clamp);
                let mut parts = (0.0, 0.0, 0.0);
                let (_, grads) = grad(&params.values, |g| {
                    let t = sft_terms(g, model, &batch, &draws)?;
                    parts = (g.scalar(t.fm), g.scalar(t.ce), g.scalar(t.kl));
                    let fm = g.scale(t.fm, lambda);
                    let kl = g.scale(t.kl, cfg.beta_vae);
                    let a = g.add(fm, t.ce);
                    Ok(g.add(a, kl))
                })?;
                adamw_step_ranges(&mut params.values, &grads, adam, &opt, &ranges)?;
                fm_acc += parts.0;
                ce_acc += parts.1;
                kl_acc += parts.2;
                batches += 1;
            }
            let n = batches as f64;
            log(&SftRecord {
                phase: phase.into(),
                epoch,
                fm: fm_acc / n,
                ce: ce_acc / n,
                kl: kl_acc / n,
            });
        }
    }
    Ok(())
}

/// Denoises a latent for `question` and decodes an answer from it.
pub fn infer<R: Rng + ?Sized>(
    model: &LatentReasoner,
    params: &[f64],
    question: &Condition,
    sampler: &SamplerConfig,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<(LatentBlock, AnswerSample)> {
    let traj = sample_trajectory(&model.velocity, params, question.id, &question.features, sampler, rng)?;
    let block = LatentBlock::new(traj.rows, traj.cols, traj.final_state)?;
    let answer = model
        .text
        .sample_answer(params, &question.features, Some(&block.values), opts, rng)?;
    Ok((block, answer))
}

/// Fraction of trace tokens reproduced by greedy decoding from the
/// deterministic encoding of each example's trace.
pub fn reconstruction_accuracy(model: &LatentReasoner, params: &[f64], corpus: &[TraceExample]) -> Result<f64> {
    let mut rng = crate::numcore::seeded_rng(0);
    let greedy = SamplingOptions {
        greedy: true,
        ..SamplingOptions::default()
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in corpus {
        let z = model.encode_trace(params, &ex.trace, &mut rng, true)?;
        let a = model
            .text
            .sample_answer(params, &ex.question.features, Some(&z.values), &greedy, &mut rng)?;
        for (j, t) in ex.trace.iter().enumerate() {
            total += 1;
            if a.tokens.get(j) == Some(t) {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
