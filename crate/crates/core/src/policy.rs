//! Tiny image-conditioned causal decoder.
//!
//! The input sequence is `[question tokens..., image cells..., response...]`,
//! so cells can already attend to the question. Each cell embeds as
//! `cell_emb[symbol] + row_emb[r] + col_emb[c]`; text tokens as
//! `tok_emb[id] + pos_emb[j]` with `j` counting text tokens only. Blocks
//! are residual multi-head causal attention followed by a tanh
//! feed-forward layer; there is no normalization.
//!
//! Two forward paths share the same parameters:
//! * [`Forward`] runs position by position with a key/value cache and is used
//!   for sampling, scoring and analysis;
//! * [`PolicyParams::tape_log_probs`] records the whole sequence on a
//!   [`Graph`] so objectives can be differentiated.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, InputSource, NodeId, Tensor};
use crate::error::{usage, Result, TorError};
use crate::scoring;
use crate::synthtask::{PlaceholderImage, SyntheticSample, TaskConfig, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    /// Longest response in tokens.
    pub max_len: usize,
    /// Nucleus mass for sampling and for the recorded entropies.
    pub top_p: f64,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_hidden: 64,
            max_len: 32,
            top_p: 0.95,
            init_scale: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TorError::Config(m.to_string()));
        if self.d_model == 0 || self.d_model > 32 {
            return bad("policy.dModel must be in 1..=32");
        }
        if self.num_layers == 0 || self.num_layers > 2 {
            return bad("policy.numLayers must be 1 or 2");
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("policy.numHeads must divide policy.dModel");
        }
        if self.ffn_hidden == 0 {
            return bad("policy.ffnHidden must be positive");
        }
        if self.max_len < 2 {
            return bad("policy.maxLen must be at least 2");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("policy.topP must be in (0, 1]");
        }
        if !(self.init_scale >= 0.0) {
            return bad("policy.initScale must be nonnegative");
        }
        Ok(())
    }
}

/// Everything needed to lay out the parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Architecture {
    pub policy: PolicyConfig,
    pub vocab_size: usize,
    pub alphabet_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub max_question_len: usize,
}

impl Architecture {
    pub fn new(policy: &PolicyConfig, task: &TaskConfig) -> Self {
        Self {
            policy: policy.clone(),
            vocab_size: Vocab::for_task(task).size(),
            alphabet_size: task.alphabet_size,
            grid_height: task.grid_height,
            grid_width: task.grid_width,
            max_question_len: crate::synthtask::MAX_QUESTION_LEN,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    fn head_dim(&self) -> usize {
        self.policy.d_model / self.policy.num_heads
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.policy.d_model;
        let dh = self.head_dim();
        let f = self.policy.ffn_hidden;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_question_len + self.policy.max_len, d]),
            ("cell_emb".to_string(), vec![self.alphabet_size + 1, d]),
            ("row_emb".to_string(), vec![self.grid_height, d]),
            ("col_emb".to_string(), vec![self.grid_width, d]),
        ];
        for l in 0..self.policy.num_layers {
            for h in 0..self.policy.num_heads {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("l{l}.h{h}.{w}"), vec![d, dh]));
                }
                out.push((format!("l{l}.h{h}.wo"), vec![dh, d]));
            }
            out.push((format!("l{l}.ffn.w1"), vec![d, f]));
            out.push((format!("l{l}.ffn.b1"), vec![f]));
            out.push((format!("l{l}.ffn.w2"), vec![f, d]));
            out.push((format!("l{l}.ffn.b2"), vec![d]));
        }
        out.push(("out.w".to_string(), vec![d, self.vocab_size]));
        out.push(("out.b".to_string(), vec![self.vocab_size]));
        out
    }
}

/// Names of the arrays that carry image information into the model.
pub const IMAGE_PATHWAY: [&str; 3] = ["cell_emb", "row_emb", "col_emb"];

/// A parameter snapshot. `version_tag` identifies the snapshot that
/// produced a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    tensors: BTreeMap<String, Tensor>,
    pub version_tag: u64,
}

impl InputSource for PolicyParams {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let tensors = arch.layout().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Self { arch, tensors, version_tag: 0 }
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = arch.policy.init_scale;
        let mut params = Self::zeros(arch);
        for (name, t) in params.tensors.iter_mut() {
            if name.ends_with(".b1") || name.ends_with(".b2") || name == "out.b" {
                continue;
            }
            let fan_in = if name.ends_with("_emb") { 1.0 } else { t.shape()[0] as f64 };
            let bound = scale * if name.ends_with("_emb") { 0.5 } else { (3.0 / fan_in).sqrt() };
            for v in t.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.arch.alphabet_size)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Zeroes the image embeddings so the image cannot influence outputs.
    pub fn zero_image_pathway(&mut self) {
        for name in IMAGE_PATHWAY {
            self.tensors.get_mut(name).unwrap().values_mut().fill(0.0);
        }
    }

    fn check_cells(&self, cells: &[u32]) -> Result<()> {
        if cells.len() != self.arch.cells() {
            return Err(usage(format!("image has {} cells, expected {}", cells.len(), self.arch.cells())));
        }
        if let Some(c) = cells.iter().find(|&&c| c as usize > self.arch.alphabet_size) {
            return Err(usage(format!("cell symbol {c} outside the alphabet")));
        }
        Ok(())
    }

    fn check_tokens(&self, question: &[usize], response: &[usize]) -> Result<()> {
        if question.is_empty() || question.len() > self.arch.max_question_len {
            return Err(usage(format!("question length {} not supported", question.len())));
        }
        if response.len() > self.arch.policy.max_len {
            return Err(usage(format!(
                "response length {} exceeds maxLen {}",
                response.len(),
                self.arch.policy.max_len
            )));
        }
        let v = self.arch.vocab_size;
        if let Some(t) = question.iter().chain(response).find(|&&t| t >= v) {
            return Err(usage(format!("token {t} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Next-token distribution after `prefix`.
    pub fn next_distribution(&self, cells: &[u32], question: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.arch.policy.max_len {
            return Err(usage(format!(
                "prefix length {} must be below maxLen {}",
                prefix.len(),
                self.arch.policy.max_len
            )));
        }
        self.check_cells(cells)?;
        self.check_tokens(question, prefix)?;
        let mut fwd = Forward::new(self, cells, question);
        for &t in prefix {
            fwd.push_token(t);
        }
        Ok(softmax(&fwd.logits()))
    }

    /// Teacher-forced pass over `response`: for every position, the full
    /// next-token distribution and the attention mass on image cells.
    pub fn teacher_force(&self, cells: &[u32], question: &[usize], response: &[usize]) -> Result<Vec<StepOutput>> {
        self.check_cells(cells)?;
        self.check_tokens(question, response)?;
        let mut fwd = Forward::new(self, cells, question);
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            let logits = fwd.logits();
            let log_probs = log_softmax(&logits);
            out.push(StepOutput {
                token: t,
                log_prob: log_probs[t],
                probs: log_probs.iter().map(|l| l.exp()).collect(),
                image_attention: fwd.last_image_attention().to_vec(),
            });
            fwd.push_token(t);
        }
        Ok(out)
    }

    /// `log pi(o_t | o_<t, condition, q)` for every recorded token.
    pub fn score_under_condition(
        &self,
        sample: &SyntheticSample,
        record: &RolloutRecord,
        condition: Condition,
    ) -> Result<Vec<f64>> {
        let cells = match condition {
            Condition::Image => sample.cells(),
            Condition::Placeholder => PlaceholderImage::new(&self.task_shape()).cells().to_vec(),
        };
        self.check_cells(&cells)?;
        self.check_tokens(&sample.question, &record.tokens)?;
        let mut fwd = Forward::new(self, &cells, &sample.question);
        let mut out = Vec::with_capacity(record.tokens.len());
        for &t in &record.tokens {
            out.push(log_softmax(&fwd.logits())[t]);
            fwd.push_token(t);
        }
        Ok(out)
    }

    /// [`Self::score_under_condition`] for every record of `batch`, sharing
    /// the prompt computation within each group.
    pub fn score_batch(&self, batch: &RolloutBatch, condition: Condition) -> Result<Vec<Vec<f64>>> {
        let placeholder = PlaceholderImage::new(&self.task_shape());
        let mut out = Vec::with_capacity(batch.records.len());
        let mut prefix: Option<(usize, Forward<'_>)> = None;
        for rec in &batch.records {
            let sample = &batch.samples[rec.sample_index];
            self.check_tokens(&sample.question, &rec.tokens)?;
            if prefix.as_ref().is_none_or(|(b, _)| *b != rec.sample_index) {
                let cells = match condition {
                    Condition::Image => sample.cells(),
                    Condition::Placeholder => placeholder.cells().to_vec(),
                };
                self.check_cells(&cells)?;
                prefix = Some((rec.sample_index, Forward::new(self, &cells, &sample.question)));
            }
            let mut fwd = prefix.as_ref().unwrap().1.clone();
            let mut lp = Vec::with_capacity(rec.len());
            for (k, &t) in rec.tokens.iter().enumerate() {
                lp.push(log_softmax(&fwd.logits())[t]);
                if k + 1 < rec.len() {
                    fwd.push_token(t);
                }
            }
            out.push(lp);
        }
        Ok(out)
    }

    fn task_shape(&self) -> TaskConfig {
        TaskConfig {
            grid_height: self.arch.grid_height,
            grid_width: self.arch.grid_width,
            alphabet_size: self.arch.alphabet_size,
            ..TaskConfig::default()
        }
    }

    /// Argmax decoding until EOS or `maxLen`.
    pub fn greedy_decode(&self, sample: &SyntheticSample) -> Result<Vec<usize>> {
        let cells = sample.cells();
        self.check_cells(&cells)?;
        self.check_tokens(&sample.question, &[])?;
        let mut fwd = Forward::new(self, &cells, &sample.question);
        let mut out = Vec::new();
        while out.len() < self.arch.policy.max_len {
            let logits = fwd.logits();
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == Vocab::EOS {
                break;
            }
            fwd.push_token(best);
        }
        Ok(out)
    }

    /// Samples `group_size` rollouts per sample from the top-p nucleus.
    /// Reproducible from `rng_seed`.
    pub fn sample_rollouts(
        &self,
        samples: &[SyntheticSample],
        group_size: usize,
        top_p: f64,
        max_len: usize,
        rng_seed: u64,
    ) -> Result<RolloutBatch> {
        if group_size < 2 {
            return Err(usage(format!("group size {group_size} must be at least 2")));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(usage(format!("topP {top_p} outside (0, 1]")));
        }
        if max_len == 0 || max_len > self.arch.policy.max_len {
            return Err(usage(format!("maxLen {max_len} outside 1..={}", self.arch.policy.max_len)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut records = Vec::with_capacity(samples.len() * group_size);
        for (b, sample) in samples.iter().enumerate() {
            let cells = sample.cells();
            self.check_cells(&cells)?;
            self.check_tokens(&sample.question, &[])?;
            let prefix = Forward::new(self, &cells, &sample.question);
            for i in 0..group_size {
                let mut fwd = prefix.clone();
                let mut rec = RolloutRecord {
                    sample_index: b,
                    group_index: i,
                    tokens: Vec::new(),
                    logp_with_image: Vec::new(),
                    entropy: Vec::new(),
                    logp_placeholder: None,
                    behavior_version: self.version_tag,
                };
                loop {
                    let log_probs = log_softmax(&fwd.logits());
                    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
                    let nucleus = scoring::nucleus(&probs, top_p);
                    let mass: f64 = nucleus.iter().map(|&v| probs[v]).sum();
                    let u: f64 = rng.random::<f64>() * mass;
                    let mut acc = 0.0;
                    let mut token = *nucleus.last().unwrap();
                    for &v in &nucleus {
                        acc += probs[v];
                        if u < acc {
                            token = v;
                            break;
                        }
                    }
                    rec.tokens.push(token);
                    rec.logp_with_image.push(log_probs[token]);
                    rec.entropy.push(scoring::top_p_entropy_of_sorted(&probs, &nucleus));
                    if token == Vocab::EOS || rec.tokens.len() >= max_len {
                        break;
                    }
                    fwd.push_token(token);
                }
                records.push(rec);
            }
        }
        Ok(RolloutBatch { samples: samples.to_vec(), group_size, top_p, records })
    }

    /// Records log-probabilities of `response` on `g`. Returns the node
    /// holding one log-prob per response token.
    pub fn tape_log_probs(&self, g: &mut Graph, cells: &[u32], question: &[usize], response: &[usize]) -> Result<NodeId> {
        Ok(self.tape_group_log_probs(g, cells, question, &[response])?[0])
    }

    /// As [`Self::tape_log_probs`] for several responses to the same
    /// prompt; the question and image positions are recorded once.
    pub fn tape_group_log_probs(
        &self,
        g: &mut Graph,
        cells: &[u32],
        question: &[usize],
        responses: &[&[usize]],
    ) -> Result<Vec<NodeId>> {
        self.check_cells(cells)?;
        for r in responses {
            self.check_tokens(question, r)?;
            if r.is_empty() {
                return Err(usage("cannot score an empty response"));
            }
        }
        let a = &self.arch;
        let c = a.cells();
        let w = a.grid_width;
        let q = question.len();

        // Question first, then the image.
        let tok_emb = g.input("tok_emb");
        let pos_emb = g.input("pos_emb");
        let qtok = g.embed(tok_emb, question.to_vec());
        let qpos = g.embed(pos_emb, (0..q).collect());
        let qrows = g.add(qtok, qpos);
        let cell_emb = g.input("cell_emb");
        let row_emb = g.input("row_emb");
        let col_emb = g.input("col_emb");
        let img = g.embed(cell_emb, cells.iter().map(|&s| s as usize).collect());
        let rows = g.embed(row_emb, (0..c).map(|j| j / w).collect());
        let cols = g.embed(col_emb, (0..c).map(|j| j % w).collect());
        let img = g.add(img, rows);
        let img = g.add(img, cols);
        let mut prefix = g.concat_rows(&[qrows, img]);

        // The last response token is never fed back in.
        let mut fed: Vec<Option<NodeId>> = responses
            .iter()
            .map(|r| {
                let fed = &r[..r.len() - 1];
                (!fed.is_empty()).then(|| {
                    let rtok = g.embed(tok_emb, fed.to_vec());
                    let rpos = g.embed(pos_emb, (q..q + fed.len()).collect());
                    g.add(rtok, rpos)
                })
            })
            .collect();

        let scale = 1.0 / (a.head_dim() as f64).sqrt();
        for l in 0..a.policy.num_layers {
            let mut prefix_delta = Vec::with_capacity(a.policy.num_heads);
            let mut fed_delta: Vec<Vec<NodeId>> = vec![Vec::new(); fed.len()];
            for h in 0..a.policy.num_heads {
                let wq = g.input(&format!("l{l}.h{h}.wq"));
                let wk = g.input(&format!("l{l}.h{h}.wk"));
                let wv = g.input(&format!("l{l}.h{h}.wv"));
                let wo = g.input(&format!("l{l}.h{h}.wo"));
                let pq = g.matmul(prefix, wq);
                let pk = g.matmul(prefix, wk);
                let pv = g.matmul(prefix, wv);
                let attend = |g: &mut Graph, q: NodeId, k: NodeId, v: NodeId| {
                    let kt = g.transpose(k);
                    let s = g.matmul(q, kt);
                    let s = g.scale(s, scale);
                    let att = g.causal_softmax(s);
                    let o = g.matmul(att, v);
                    g.matmul(o, wo)
                };
                prefix_delta.push(attend(g, pq, pk, pv));
                for (x, out) in fed.iter().zip(fed_delta.iter_mut()) {
                    if let Some(x) = *x {
                        let rq = g.matmul(x, wq);
                        let rk = g.matmul(x, wk);
                        let rv = g.matmul(x, wv);
                        let k = g.concat_rows(&[pk, rk]);
                        let v = g.concat_rows(&[pv, rv]);
                        out.push(attend(g, rq, k, v));
                    }
                }
            }
            let w1 = g.input(&format!("l{l}.ffn.w1"));
            let b1 = g.input(&format!("l{l}.ffn.b1"));
            let w2 = g.input(&format!("l{l}.ffn.w2"));
            let b2 = g.input(&format!("l{l}.ffn.b2"));
            let block = |g: &mut Graph, mut x: NodeId, deltas: &[NodeId]| {
                for &d in deltas {
                    x = g.add(x, d);
                }
                let hdn = g.matmul(x, w1);
                let hdn = g.add_row(hdn, b1);
                let hdn = g.tanh(hdn);
                let f = g.matmul(hdn, w2);
                let f = g.add_row(f, b2);
                g.add(x, f)
            };
            prefix = block(g, prefix, &prefix_delta);
            for (x, deltas) in fed.iter_mut().zip(&fed_delta) {
                if let Some(node) = x {
                    *node = block(g, *node, deltas);
                }
            }
        }
        let wout = g.input("out.w");
        let bout = g.input("out.b");
        // Only the last prefix position predicts a response token.
        let last = g.embed(prefix, vec![q + c - 1]);
        let mut out = Vec::with_capacity(responses.len());
        for (x, r) in fed.iter().zip(responses) {
            let x = match *x {
                Some(x) => g.concat_rows(&[last, x]),
                None => last,
            };
            let logits = g.matmul(x, wout);
            let logits = g.add_row(logits, bout);
            let lsm = g.log_softmax(logits);
            out.push(g.gather(lsm, (0..r.len()).collect(), r.to_vec()));
        }
        Ok(out)
    }

    /// Writes the checkpoint format: magic, format version, version tag,
    /// architecture JSON, then every array with its shape header.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT.to_le_bytes())?;
        w.write_all(&self.version_tag.to_le_bytes())?;
        let arch = serde_json::to_vec(&self.arch)?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(&arch)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &dim in t.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TorError::Checkpoint("not a policy checkpoint".into()));
        }
        let format = read_u32(&mut r)?;
        if format != CHECKPOINT_FORMAT {
            return Err(TorError::Checkpoint(format!(
                "checkpoint format {format}, this build reads {CHECKPOINT_FORMAT}"
            )));
        }
        let version_tag = read_u64(&mut r)?;
        let arch_len = read_u32(&mut r)? as usize;
        let mut arch = vec![0u8; arch_len];
        r.read_exact(&mut arch)?;
        let arch: Architecture = serde_json::from_slice(&arch)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| TorError::Checkpoint(e.to_string()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let shape = (0..ndim[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            tensors.insert(name, Tensor::new(shape, values)?);
        }
        let expected: Vec<(String, Vec<usize>)> = arch.layout();
        let found: Vec<(String, Vec<usize>)> =
            tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let mut expected_sorted = expected;
        expected_sorted.sort();
        if expected_sorted != found {
            return Err(TorError::Checkpoint("parameter arrays do not match the architecture".into()));
        }
        Ok(Self { arch, tensors, version_tag })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TORCKPT\0";
pub const CHECKPOINT_FORMAT: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Image,
    Placeholder,
}

/// One teacher-forced position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub token: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
    /// Attention mass on image cells, averaged over heads, one entry per layer.
    pub image_attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub sample_index: usize,
    pub group_index: usize,
    pub tokens: Vec<usize>,
    pub logp_with_image: Vec<f64>,
    pub entropy: Vec<f64>,
    pub logp_placeholder: Option<Vec<f64>>,
    pub behavior_version: u64,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `B` samples with `G` rollouts each, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub samples: Vec<SyntheticSample>,
    pub group_size: usize,
    pub top_p: f64,
    pub records: Vec<RolloutRecord>,
}

impl RolloutBatch {
    pub fn total_tokens(&self) -> usize {
        self.records.iter().map(RolloutRecord::len).sum()
    }

    /// Records of sample `b`.
    pub fn group(&self, b: usize) -> &[RolloutRecord] {
        &self.records[b * self.group_size..(b + 1) * self.group_size]
    }

    pub fn num_groups(&self) -> usize {
        self.records.len() / self.group_size
    }

    /// Version of the snapshot that sampled the batch.
    pub fn behavior_version(&self) -> Option<u64> {
        self.records.first().map(|r| r.behavior_version)
    }

    /// Keeps only the listed groups, renumbering sample indices.
    pub fn retain_groups(&self, keep: &[usize]) -> RolloutBatch {
        let mut samples = Vec::with_capacity(keep.len());
        let mut records = Vec::with_capacity(keep.len() * self.group_size);
        for (nb, &b) in keep.iter().enumerate() {
            samples.push(self.samples[b].clone());
            for r in self.group(b) {
                let mut r = r.clone();
                r.sample_index = nb;
                records.push(r);
            }
        }
        RolloutBatch { samples, group_size: self.group_size, top_p: self.top_p, records }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `x[1, n] . w[n, m]`
fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let m = w.cols();
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// Incremental forward pass with a key/value cache.
#[derive(Debug, Clone)]
pub struct Forward<'a> {
    params: &'a PolicyParams,
    layers: Vec<LayerRefs<'a>>,
    /// `[layer][head]` -> flattened keys/values, one row per position.
    keys: Vec<Vec<Vec<f64>>>,
    vals: Vec<Vec<Vec<f64>>>,
    text_pos: usize,
    /// Position of the first image cell.
    image_start: usize,
    hidden: Vec<f64>,
    image_attention: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerRefs<'a> {
    /// `(wq, wk, wv, wo)` per head.
    heads: Vec<[&'a Tensor; 4]>,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
}

impl<'a> LayerRefs<'a> {
    fn collect(p: &'a PolicyParams) -> Vec<Self> {
        (0..p.arch.policy.num_layers)
            .map(|l| LayerRefs {
                heads: (0..p.arch.policy.num_heads)
                    .map(|h| ["wq", "wk", "wv", "wo"].map(|w| p.get(&format!("l{l}.h{h}.{w}"))))
                    .collect(),
                w1: p.get(&format!("l{l}.ffn.w1")),
                b1: p.get(&format!("l{l}.ffn.b1")),
                w2: p.get(&format!("l{l}.ffn.w2")),
                b2: p.get(&format!("l{l}.ffn.b2")),
            })
            .collect()
    }
}

impl<'a> Forward<'a> {
    /// Feeds the question, then the image cells.
    pub fn new(params: &'a PolicyParams, cells: &[u32], question: &[usize]) -> Self {
        let a = &params.arch;
        let mut fwd = Self {
            params,
            layers: LayerRefs::collect(params),
            keys: vec![vec![Vec::new(); a.policy.num_heads]; a.policy.num_layers],
            vals: vec![vec![Vec::new(); a.policy.num_heads]; a.policy.num_layers],
            text_pos: 0,
            image_start: 0,
            hidden: Vec::new(),
            image_attention: vec![0.0; a.policy.num_layers],
        };
        for &t in question {
            fwd.push_token(t);
        }
        fwd.image_start = question.len();
        let cell_emb = params.get("cell_emb");
        let row_emb = params.get("row_emb");
        let col_emb = params.get("col_emb");
        for (j, &s) in cells.iter().enumerate() {
            let (r, c) = (j / a.grid_width, j % a.grid_width);
            let x: Vec<f64> = cell_emb
                .row(s as usize)
                .iter()
                .zip(row_emb.row(r))
                .zip(col_emb.row(c))
                .map(|((e, r), c)| e + r + c)
                .collect();
            fwd.step(x);
        }
        fwd
    }

    pub fn push_token(&mut self, token: usize) {
        let tok = self.params.get("tok_emb").row(token);
        let pos = self.params.get("pos_emb").row(self.text_pos);
        let x = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        self.text_pos += 1;
        self.step(x);
    }

    fn step(&mut self, mut x: Vec<f64>) {
        let a = &self.params.arch;
        let dh = a.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cells = a.cells();
        let mut scores = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut delta = vec![0.0; x.len()];
            let mut img_mass = 0.0;
            for (h, [wq, wk, wv, wo]) in layer.heads.iter().enumerate() {
                let q = vec_mat(&x, wq);
                self.keys[l][h].extend(vec_mat(&x, wk));
                self.vals[l][h].extend(vec_mat(&x, wv));
                let keys = &self.keys[l][h];
                let vals = &self.vals[l][h];
                scores.clear();
                scores.extend(
                    keys.chunks_exact(dh).map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale),
                );
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let mut o = vec![0.0; dh];
                for (j, (wj, v)) in scores.iter().zip(vals.chunks_exact(dh)).enumerate() {
                    let wj = wj / z;
                    if (self.image_start..self.image_start + cells).contains(&j) {
                        img_mass += wj;
                    }
                    for (oi, vi) in o.iter_mut().zip(v) {
                        *oi += wj * vi;
                    }
                }
                let proj = vec_mat(&o, wo);
                delta.iter_mut().zip(&proj).for_each(|(d, y)| *d += y);
            }
            self.image_attention[l] = img_mass / a.policy.num_heads as f64;
            x.iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
            let mut hdn = vec_mat(&x, layer.w1);
            for (hv, b) in hdn.iter_mut().zip(layer.b1.values()) {
                *hv = (*hv + b).tanh();
            }
            let f = vec_mat(&hdn, layer.w2);
            for ((xv, fv), b) in x.iter_mut().zip(&f).zip(layer.b2.values()) {
                *xv += fv + b;
            }
        }
        self.hidden = x;
    }

    /// Logits at the most recent position.
    pub fn logits(&self) -> Vec<f64> {
        let mut out = vec_mat(&self.hidden, self.params.get("out.w"));
        out.iter_mut().zip(self.params.get("out.b").values()).for_each(|(o, b)| *o += b);
        out
    }

    /// Attention mass on image cells at the most recent position, per layer.
    pub fn last_image_attention(&self) -> &[f64] {
        &self.image_attention
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtask::generate_sample;

    fn small_arch() -> Architecture {
        let policy = PolicyConfig { d_model: 8, num_layers: 2, num_heads: 2, ffn_hidden: 12, max_len: 6, ..Default::default() };
        Architecture::new(&policy, &TaskConfig::default())
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(small_arch());
        let s = generate_sample(1, &TaskConfig::default());
        let probs = p.next_distribution(&s.cells(), &s.question, &[]).unwrap();
        let v = probs.len() as f64;
        assert!(probs.iter().all(|&q| (q - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn next_distribution_is_normalized_and_deterministic() {
        let p = PolicyParams::init(small_arch(), 3);
        let s = generate_sample(2, &TaskConfig::default());
        let a = p.next_distribution(&s.cells(), &s.question, &[Vocab::ANS_START]).unwrap();
        let b = p.next_distribution(&s.cells(), &s.question, &[Vocab::ANS_START]).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prefix_too_long_is_usage_error() {
        let p = PolicyParams::init(small_arch(), 3);
        let s = generate_sample(2, &TaskConfig::default());
        let prefix = vec![Vocab::ANS_START; 6];
        assert!(matches!(p.next_distribution(&s.cells(), &s.question, &prefix), Err(TorError::Usage(_))));
    }

    #[test]
    fn deterministic_eos_gives_length_one() {
        let mut p = PolicyParams::zeros(small_arch());
        p.tensors_mut().get_mut("out.b").unwrap().values_mut()[Vocab::EOS] = 1e3;
        let s = generate_sample(2, &TaskConfig::default());
        let batch = p.sample_rollouts(&[s], 2, 1.0, 6, 0).unwrap();
        for r in &batch.records {
            assert_eq!(r.tokens, vec![Vocab::EOS]);
            assert_eq!(r.logp_with_image, vec![0.0]);
            assert_eq!(r.entropy, vec![0.0]);
        }
    }

    #[test]
    fn tape_matches_incremental_path() {
        let p = PolicyParams::init(small_arch(), 5);
        let s = generate_sample(4, &TaskConfig::default());
        let batch = p.sample_rollouts(std::slice::from_ref(&s), 2, 1.0, 6, 9).unwrap();
        for r in &batch.records {
            let mut g = Graph::new();
            let lp = p.tape_log_probs(&mut g, &s.cells(), &s.question, &r.tokens).unwrap();
            let sum = g.sum(lp);
            g.set_output(sum);
            g.evaluate(&p).unwrap();
            let tape = g.value(lp).unwrap().values().to_vec();
            for (a, b) in tape.iter().zip(&r.logp_with_image) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn score_batch_matches_per_record_scoring() {
        let p = PolicyParams::init(small_arch(), 6);
        let samples: Vec<_> = (0..3).map(|k| generate_sample(10 + k, &TaskConfig::default())).collect();
        let batch = p.sample_rollouts(&samples, 3, 1.0, 6, 2).unwrap();
        for condition in [Condition::Image, Condition::Placeholder] {
            let fast = p.score_batch(&batch, condition).unwrap();
            for (rec, lp) in batch.records.iter().zip(&fast) {
                let slow = p.score_under_condition(&batch.samples[rec.sample_index], rec, condition).unwrap();
                assert_eq!(lp, &slow);
            }
        }
    }

    #[test]
    fn group_tape_matches_single_tapes() {
        let p = PolicyParams::init(small_arch(), 11);
        let s = generate_sample(3, &TaskConfig::default());
        let batch = p.sample_rollouts(std::slice::from_ref(&s), 4, 1.0, 6, 5).unwrap();
        let responses: Vec<&[usize]> = batch.records.iter().map(|r| r.tokens.as_slice()).collect();
        let mut g = Graph::new();
        let nodes = p.tape_group_log_probs(&mut g, &s.cells(), &s.question, &responses).unwrap();
        let all = g.concat(&nodes);
        let sum = g.sum(all);
        g.set_output(sum);
        g.evaluate(&p).unwrap();
        for (node, rec) in nodes.iter().zip(&batch.records) {
            let grouped = g.value(*node).unwrap().values().to_vec();
            for (a, b) in grouped.iter().zip(&rec.logp_with_image) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = PolicyParams::init(small_arch(), 8);
        p.version_tag = 42;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = PolicyParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut buf2 = Vec::new();
        q.write_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_rejects_other_format() {
        let p = PolicyParams::init(small_arch(), 8);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(PolicyParams::read_checkpoint(buf.as_slice()), Err(TorError::Checkpoint(_))));
    }

    #[test]
    fn default_model_fits_budget() {
        let arch = Architecture::new(&PolicyConfig::default(), &TaskConfig::default());
        let p = PolicyParams::zeros(arch);
        assert!(p.num_parameters() <= 100_000, "{}", p.num_parameters());
    }
}
