//! The multi-stage acoustic model: text encoder, duration-based length
//! regulator, and per-stage decoders that consume down-sampled context plus
//! the stage above's output. Training teacher-forces the cross-stage
//! feedback with analyzer-extracted code vectors; inference feeds back
//! quantized predictions.

use crate::analyzer::{Analyzer, Msmcr, MsmcrStage};
use crate::autodiff::{Tape, Var};
use crate::config::{AnalyzerConfig, PredictorConfig};
use crate::corpus::CorpusItem;
use crate::error::{Error, Result};
use crate::nn::{Binder, BlockStack, Conv1d, Init, Linear, ParamGrads, ParamStore};
use crate::train::Adam;
use crate::vq::MultiHeadCodebook;
use ndarray::Array2;

/// Predictions and feedback for every stage, finest first.
#[derive(Debug, Clone)]
pub struct PredictorOutput {
    /// `p^{(j)}`: predicted continuous sequences, `L_j x N`.
    pub predicted: Vec<Array2<f64>>,
    /// Cross-stage feedback actually used: teacher codes in training,
    /// quantized predictions at inference.
    pub feedback: Vec<MsmcrStage>,
    /// Predicted log(1 + duration) per token, `T x 1`.
    pub log_durations: Array2<f64>,
    /// Stage-level loss masks (1.0 over frames backed by real input).
    pub masks: Vec<Vec<f64>>,
    /// Frame count before padding (sum of durations).
    pub orig_len: usize,
}

/// Loss breakdown of one predictor step (batch means).
#[derive(Debug, Clone)]
pub struct PredictorLossReport {
    pub mse: f64,
    pub triplet: f64,
    pub duration: f64,
    pub total: f64,
}

impl PredictorLossReport {
    pub fn combine(mse: f64, triplet: f64, duration: f64, gamma: f64, dur_weight: f64) -> f64 {
        mse + gamma * triplet + dur_weight * duration
    }

    fn diverged_term(&self) -> Option<(String, f64)> {
        for (name, v) in [
            ("mse", self.mse),
            ("triplet", self.triplet),
            ("duration", self.duration),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some((name.to_string(), v));
            }
        }
        None
    }
}

struct ItemGraph {
    p: Vec<Var>,
    log_dur: Var,
    output: PredictorOutput,
}

struct ItemLossTerms {
    mse: Var,
    triplet: Var,
    duration: Var,
}

/// The multi-stage predictor. Holds frozen copies of the analyzer codebooks
/// and the structural config they belong to.
pub struct Predictor {
    cfg: PredictorConfig,
    structure: AnalyzerConfig,
    codebooks: Vec<MultiHeadCodebook>,
    params: ParamStore,
    analyzer_ckpt_hash: Option<[u8; 32]>,
    iteration: u64,
}

impl Predictor {
    /// Builds a fresh predictor against a trained analyzer, snapshotting its
    /// codebooks (they never change afterwards).
    pub fn new(cfg: PredictorConfig, analyzer: &Analyzer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let structure = analyzer.config().clone();
        let codebooks = analyzer.codebooks().to_vec();
        let mut params = ParamStore::new();
        Self::register_params(&cfg, &structure, &mut params, seed);
        Ok(Predictor {
            cfg,
            structure,
            codebooks,
            params,
            analyzer_ckpt_hash: None,
            iteration: 0,
        })
    }

    pub fn from_state(
        cfg: PredictorConfig,
        structure: AnalyzerConfig,
        codebooks: Vec<MultiHeadCodebook>,
        params: ParamStore,
        analyzer_ckpt_hash: Option<[u8; 32]>,
        iteration: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        structure.validate()?;
        if codebooks.len() != structure.stages {
            return Err(Error::format("checkpoint stage count mismatch"));
        }
        Ok(Predictor {
            cfg,
            structure,
            codebooks,
            params,
            analyzer_ckpt_hash,
            iteration,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn structure(&self) -> &AnalyzerConfig {
        &self.structure
    }

    pub fn codebooks(&self) -> &[MultiHeadCodebook] {
        &self.codebooks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn analyzer_fingerprint(&self) -> u64 {
        self.structure.fingerprint()
    }

    pub fn analyzer_ckpt_hash(&self) -> Option<[u8; 32]> {
        self.analyzer_ckpt_hash
    }

    /// Records the content hash of the analyzer checkpoint this predictor
    /// was trained against.
    pub fn set_analyzer_ckpt_hash(&mut self, hash: [u8; 32]) {
        self.analyzer_ckpt_hash = Some(hash);
    }

    fn register_params(
        cfg: &PredictorConfig,
        structure: &AnalyzerConfig,
        store: &mut ParamStore,
        seed: u64,
    ) {
        let m = cfg.model_dim;
        store.create("embed.table", cfg.vocab_size, m, Init::XavierUniform, seed);
        BlockStack::new("enc.blocks", cfg.block_family, m, cfg.attn_heads, cfg.enc_blocks)
            .register(store, seed);
        Conv1d::new("dur.conv0", m, m, 3, 1).register(store, seed);
        Conv1d::new("dur.conv1", m, m, 3, 1).register(store, seed);
        Linear::new("dur.out", m, 1).register(store, seed);
        for sidx in 0..structure.stages {
            Conv1d::downsampler(format!("sc.{sidx}"), m, m, structure.downsample[sidx])
                .register(store, seed);
            let top = sidx == structure.stages - 1;
            let in_dim = if top { m } else { m + structure.vq_dim + m };
            Linear::new(format!("dec.{sidx}.in"), in_dim, m).register(store, seed);
            BlockStack::new(
                format!("dec.{sidx}.blocks"),
                cfg.block_family,
                m,
                cfg.attn_heads,
                cfg.dec_blocks,
            )
            .register(store, seed);
            Linear::new(format!("dec.{sidx}.out"), m, structure.vq_dim).register(store, seed);
        }
    }

    /// Token encodings repeated by duration, concatenated in order; the
    /// length regulator.
    fn length_regulate(&self, tape: &Tape, encoded: Var, durations: &[usize]) -> Result<Var> {
        if tape.shape(encoded).0 != durations.len() {
            return Err(Error::contract("durations do not match token count"));
        }
        if durations.iter().sum::<usize>() == 0 {
            return Err(Error::input("all-zero durations produce an empty sequence"));
        }
        Ok(tape.repeat_rows(encoded, durations))
    }

    /// Builds one item's forward graph. `durations`: `Some` to force (teacher
    /// durations), `None` to use the duration predictor. `teacher`: `Some`
    /// for teacher-forced feedback, `None` for quantized-prediction feedback.
    fn forward_item(
        &self,
        tape: &Tape,
        binder: &Binder,
        tokens: &[usize],
        durations: Option<&[usize]>,
        teacher: Option<&Msmcr>,
    ) -> Result<ItemGraph> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.iter().any(|t| *t >= self.cfg.vocab_size) {
            return Err(Error::input(format!(
                "token id out of vocabulary 0..{}",
                self.cfg.vocab_size
            )));
        }
        let cfg = &self.cfg;
        let st = &self.structure;
        let m = cfg.model_dim;

        let table = binder.var("embed.table");
        let embedded = tape.gather_rows(table, tokens);
        let enc_out = BlockStack::new(
            "enc.blocks",
            cfg.block_family,
            m,
            cfg.attn_heads,
            cfg.enc_blocks,
        )
        .apply(tape, binder, embedded);

        // duration head: two conv blocks + linear, predicting log(1 + d)
        let d0 = tape.gelu(Conv1d::new("dur.conv0", m, m, 3, 1).apply(tape, binder, enc_out));
        let d1 = tape.gelu(Conv1d::new("dur.conv1", m, m, 3, 1).apply(tape, binder, d0));
        let log_dur = Linear::new("dur.out", m, 1).apply(tape, binder, d1);

        let owned_durations: Vec<usize> = match durations {
            Some(d) => {
                if d.len() != tokens.len() {
                    return Err(Error::contract("durations do not match token count"));
                }
                d.to_vec()
            }
            None => self.round_durations(&tape.value(log_dur)),
        };
        let orig_len = owned_durations.iter().sum::<usize>();
        let regulated = self.length_regulate(tape, enc_out, &owned_durations)?;
        let padded_len = st.padded_len(orig_len);
        let c0 = tape.pad_rows_last(regulated, padded_len);

        // strided context chain mirrors the analyzer's resolutions
        let mut contexts = Vec::with_capacity(st.stages);
        let mut cur = c0;
        for sidx in 0..st.stages {
            cur = Conv1d::downsampler(format!("sc.{sidx}"), m, m, st.downsample[sidx])
                .apply(tape, binder, cur);
            contexts.push(cur);
        }

        let stage_lens = st.stage_lens(padded_len)?;
        let stage_valid = st.stage_valid_lens(orig_len);
        if let Some(t) = teacher {
            if t.fingerprint != st.fingerprint() {
                return Err(Error::Mismatch(format!(
                    "teacher representation fingerprint {:#x} != analyzer structure {:#x}",
                    t.fingerprint,
                    st.fingerprint()
                )));
            }
            for (sidx, stage) in t.stages.iter().enumerate() {
                if stage.indices.nrows() != stage_lens[sidx] {
                    return Err(Error::contract(format!(
                        "teacher stage {} length {} != expected {}",
                        sidx + 1,
                        stage.indices.nrows(),
                        stage_lens[sidx]
                    )));
                }
            }
        }

        // top-down decoding with cross-stage feedback
        let mut p_vars: Vec<Option<Var>> = vec![None; st.stages];
        let mut feedback: Vec<Option<MsmcrStage>> = vec![None; st.stages];
        let mut prev_hidden: Option<Var> = None;
        let mut prev_feedback: Option<Array2<f64>> = None;
        for sidx in (0..st.stages).rev() {
            let top = sidx == st.stages - 1;
            let dec_in = if top {
                Linear::new(format!("dec.{sidx}.in"), m, m).apply(tape, binder, contexts[sidx])
            } else {
                let rate = st.downsample[sidx + 1];
                let up_hidden = tape.upsample_repeat(prev_hidden.unwrap(), rate);
                let fb = upsample_const(prev_feedback.as_ref().unwrap(), rate);
                let fb_leaf = tape.leaf(fb);
                let joined = tape.concat_cols(&[up_hidden, fb_leaf, contexts[sidx]]);
                Linear::new(format!("dec.{sidx}.in"), m + st.vq_dim + m, m)
                    .apply(tape, binder, joined)
            };
            let hidden = BlockStack::new(
                format!("dec.{sidx}.blocks"),
                cfg.block_family,
                m,
                cfg.attn_heads,
                cfg.dec_blocks,
            )
            .apply(tape, binder, dec_in);
            let p = Linear::new(format!("dec.{sidx}.out"), m, st.vq_dim)
                .apply(tape, binder, hidden);
            p_vars[sidx] = Some(p);

            let fb_stage = match teacher {
                Some(t) => t.stages[sidx].clone(),
                None => {
                    let quant = self.codebooks[sidx].quantize_mh(&tape.value(p))?;
                    MsmcrStage {
                        indices: quant.indices,
                        vectors: quant.quantized,
                    }
                }
            };
            prev_feedback = Some(fb_stage.vectors.clone());
            feedback[sidx] = Some(fb_stage);
            prev_hidden = Some(hidden);
        }

        let masks: Vec<Vec<f64>> = (0..st.stages)
            .map(|sidx| {
                let mut mask = vec![1.0; stage_valid[sidx]];
                mask.resize(stage_lens[sidx], 0.0);
                mask
            })
            .collect();
        let p_vars: Vec<Var> = p_vars.into_iter().map(|v| v.unwrap()).collect();
        let output = PredictorOutput {
            predicted: p_vars.iter().map(|v| tape.value(*v)).collect(),
            feedback: feedback.into_iter().map(|f| f.unwrap()).collect(),
            log_durations: tape.value(log_dur),
            masks,
            orig_len,
        };
        Ok(ItemGraph {
            p: p_vars,
            log_dur,
            output,
        })
    }

    /// Inference duration rule: `max(1, round(expm1(log_dur)))`.
    fn round_durations(&self, log_dur: &Array2<f64>) -> Vec<usize> {
        log_dur
            .column(0)
            .iter()
            .map(|v| v.exp_m1().round().max(1.0) as usize)
            .collect()
    }

    /// Stage-averaged MSE, stage-and-head-averaged triplet, and duration
    /// loss for one item, teacher-forced.
    fn loss_terms(
        &self,
        tape: &Tape,
        graph: &ItemGraph,
        teacher: &Msmcr,
        durations: &[usize],
    ) -> ItemLossTerms {
        let st = &self.structure;
        let stage_w = 1.0 / st.stages as f64;
        let mut mse_terms = Vec::with_capacity(st.stages);
        let mut tpl_terms = Vec::with_capacity(st.stages);
        for sidx in 0..st.stages {
            let mask = &graph.output.masks[sidx];
            let p = graph.p[sidx];
            let target = &teacher.stages[sidx].vectors;
            mse_terms.push((tape.mse_const(p, target, Some(mask)), stage_w));
            let hd = st.head_dim();
            let head_w = 1.0 / st.heads as f64;
            let mut heads = Vec::with_capacity(st.heads);
            for k in 0..st.heads {
                let p_head = tape.slice_cols(p, k * hd, hd);
                let idx: Vec<usize> = teacher.stages[sidx]
                    .indices
                    .column(k)
                    .iter()
                    .cloned()
                    .collect();
                let tpl = tape.triplet_const(
                    p_head,
                    &idx,
                    self.codebooks[sidx].heads()[k].codes(),
                    self.cfg.margin,
                    Some(mask),
                );
                heads.push((tpl, head_w));
            }
            tpl_terms.push((tape.affine_sum(&heads), stage_w));
        }
        let mse = tape.affine_sum(&mse_terms);
        let triplet = tape.affine_sum(&tpl_terms);
        let dur_target =
            Array2::from_shape_fn((durations.len(), 1), |(t, _)| (1.0 + durations[t] as f64).ln());
        let duration = tape.mse_const(graph.log_dur, &dur_target, None);
        ItemLossTerms {
            mse,
            triplet,
            duration,
        }
    }

    fn batch_graph(
        &self,
        tape: &Tape,
        binder: &Binder,
        batch: &[(&CorpusItem, &Msmcr)],
    ) -> Result<(Var, PredictorLossReport)> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for (item, teacher) in batch {
            let graph = self.forward_item(
                tape,
                binder,
                &item.tokens,
                Some(&item.durations),
                Some(teacher),
            )?;
            terms.push(self.loss_terms(tape, &graph, teacher, &item.durations));
        }
        let bw = 1.0 / batch.len() as f64;
        let mean = |vars: Vec<Var>| {
            tape.affine_sum(&vars.into_iter().map(|v| (v, bw)).collect::<Vec<_>>())
        };
        let mse = mean(terms.iter().map(|t| t.mse).collect());
        let triplet = mean(terms.iter().map(|t| t.triplet).collect());
        let duration = mean(terms.iter().map(|t| t.duration).collect());
        let total = tape.affine_sum(&[
            (mse, 1.0),
            (triplet, self.cfg.gamma),
            (duration, self.cfg.duration_weight),
        ]);
        let report = PredictorLossReport {
            mse: tape.value(mse)[[0, 0]],
            triplet: tape.value(triplet)[[0, 0]],
            duration: tape.value(duration)[[0, 0]],
            total: tape.value(total)[[0, 0]],
        };
        Ok((total, report))
    }

    /// Teacher-forced batch loss without any update.
    pub fn batch_loss(&self, batch: &[(&CorpusItem, &Msmcr)]) -> Result<PredictorLossReport> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let (_, report) = self.batch_graph(&tape, &binder, batch)?;
        Ok(report)
    }

    /// Gradients of the batch total w.r.t. every parameter, plus the report.
    pub fn batch_gradients(
        &self,
        batch: &[(&CorpusItem, &Msmcr)],
    ) -> Result<(PredictorLossReport, ParamGrads)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let (total, report) = self.batch_graph(&tape, &binder, batch)?;
        let grads = tape.backward(total);
        Ok((report, crate::analyzer::collect_param_grads(&binder, &grads)))
    }

    /// One optimizer step against the combined loss. Codebooks are never
    /// touched here.
    pub fn train_step(
        &mut self,
        batch: &[(&CorpusItem, &Msmcr)],
        opt: &mut Adam,
        lr: f64,
    ) -> Result<PredictorLossReport> {
        let (report, grads) = self.batch_gradients(batch)?;
        if let Some((term, value)) = report.diverged_term() {
            return Err(Error::Divergence { term, value });
        }
        opt.step(&mut self.params, &grads, lr)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Full forward pass outside training. `durations`: `Some` forces the
    /// given per-token frame counts, `None` uses the duration predictor.
    /// `teacher`: `Some` teacher-forces the cross-stage feedback, `None`
    /// feeds back quantized predictions.
    pub fn predict(
        &self,
        tokens: &[usize],
        durations: Option<&[usize]>,
        teacher: Option<&Msmcr>,
    ) -> Result<PredictorOutput> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        Ok(self
            .forward_item(&tape, &binder, tokens, durations, teacher)?
            .output)
    }

    /// Text-to-representation inference: predicted durations (floored at one
    /// frame), quantized feedback between stages, quantized outputs packaged
    /// as a representation.
    pub fn synthesize(&self, tokens: &[usize]) -> Result<Msmcr> {
        let output = self.predict(tokens, None, None)?;
        Ok(Msmcr {
            stages: output.feedback,
            fingerprint: self.structure.fingerprint(),
        })
    }
}

fn upsample_const(seq: &Array2<f64>, rate: usize) -> Array2<f64> {
    crate::analyzer::upsample_repeat(seq, rate)
}
