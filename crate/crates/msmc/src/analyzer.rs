//! The multi-stage multi-codebook feature analyzer: stage-wise encoders with
//! strided down-sampling, top-down quantization with residual and prediction
//! modules, and a decoder reconstructing the input features.
//!
//! Stage indices run 0..S internally (0 = finest resolution); the coarsest
//! stage is quantized first and its residual output is up-sampled and fused
//! into the next stage down.

use crate::autodiff::{Gradients, Tape, Var};
use crate::config::AnalyzerConfig;
use crate::error::{Error, Result};
use crate::nn::{Binder, Block, BlockStack, Conv1d, Linear, ParamGrads, ParamStore};
use crate::train::Adam;
use crate::vq::{mix_seed, CodeAssignments, MultiHeadCodebook, QuantizationResult};
use ndarray::{s, Array2};

/// A length-L sequence of D-dimensional feature frames, time-major.
pub type FeatureSequence = Array2<f64>;

/// One stage of a multi-stage multi-codebook representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmcrStage {
    /// `L_j x H` code indices.
    pub indices: Array2<usize>,
    /// `L_j x N` dequantized vectors (exact codebook entries).
    pub vectors: Array2<f64>,
}

/// Quantized sequences for every stage, finest first, plus the structural
/// fingerprint of the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Msmcr {
    pub stages: Vec<MsmcrStage>,
    pub fingerprint: u64,
}

impl Msmcr {
    pub fn stage1_len(&self) -> usize {
        self.stages[0].indices.nrows()
    }

    /// Checks `L_j == L_{j+1} * d_{j+1}` across consecutive stages.
    pub fn validate_chain(&self, downsample: &[usize]) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() != downsample.len() {
            return Err(Error::contract(format!(
                "representation has {} stages, config has {}",
                self.stages.len(),
                downsample.len()
            )));
        }
        for j in 0..self.stages.len() - 1 {
            let fine = self.stages[j].indices.nrows();
            let coarse = self.stages[j + 1].indices.nrows();
            if fine != coarse * downsample[j + 1] {
                return Err(Error::contract(format!(
                    "stage {} length {fine} != stage {} length {coarse} x rate {}",
                    j + 1,
                    j + 2,
                    downsample[j + 1]
                )));
            }
        }
        for stage in &self.stages {
            if stage.vectors.nrows() != stage.indices.nrows() {
                return Err(Error::contract("index/vector length mismatch"));
            }
        }
        Ok(())
    }

    /// Checks that every stored vector is exactly the codebook entry named
    /// by its index.
    pub fn validate_membership(&self, codebooks: &[MultiHeadCodebook]) -> Result<()> {
        if codebooks.len() != self.stages.len() {
            return Err(Error::contract("stage/codebook count mismatch"));
        }
        for (stage, mcb) in self.stages.iter().zip(codebooks) {
            let expect = mcb.lookup(&stage.indices)?;
            if expect != stage.vectors {
                return Err(Error::contract(
                    "representation vectors are not codebook entries",
                ));
            }
        }
        Ok(())
    }
}

/// Repeats each frame `rate` consecutive times (pure numeric form).
pub fn upsample_repeat(seq: &Array2<f64>, rate: usize) -> Array2<f64> {
    assert!(rate >= 1);
    let (len, cols) = seq.dim();
    let mut out = Array2::zeros((len * rate, cols));
    for t in 0..len {
        for r in 0..rate {
            out.row_mut(t * rate + r).assign(&seq.row(t));
        }
    }
    out
}

/// How quantization behaves during a forward pass.
#[derive(Clone, Copy)]
pub enum QuantMode<'a> {
    /// Nearest-code lookup with the straight-through gradient path.
    Learned,
    /// Quantizer bypassed entirely (`q := h`); the model degenerates to a
    /// plain autoencoder. Commitment/triplet terms are dropped.
    Bypass,
    /// Quantization outputs frozen at a previously captured state, making
    /// the loss a smooth function of the parameters (for derivative checks).
    Frozen(&'a FrozenQuant),
}

/// Captured quantization state: per stage, the straight-through offset
/// `q - h` and the constant targets, all at some base parameter point.
#[derive(Debug, Clone)]
pub struct FrozenQuant {
    pub offsets: Vec<Array2<f64>>,
    pub targets: Vec<Array2<f64>>,
    pub indices: Vec<Array2<usize>>,
}

/// Per-stage intermediates of one forward pass (numeric values).
#[derive(Debug, Clone)]
pub struct StageTrace {
    /// Encoder output `e^{(j)}`, `L_j x model_dim`.
    pub encoded: Array2<f64>,
    /// `h^{(j)}`: pre-quantization hidden sequence, `L_j x N`.
    pub hidden_prequant: Array2<f64>,
    /// `q^{(j)}`: indices, quantized vectors, distances.
    pub quant: QuantizationResult,
    /// `p^{(j)}`: prediction from the stage above (absent at the top stage).
    pub predicted: Option<Array2<f64>>,
    /// Residual-module output, `L_j x model_dim`.
    pub residual: Array2<f64>,
    /// 1.0 for stage frames containing real input, 0.0 for padding.
    pub mask: Vec<f64>,
}

/// Everything Eq.-style losses and diagnostics need from one forward pass.
#[derive(Debug, Clone)]
pub struct AnalyzerForward {
    pub stages: Vec<StageTrace>,
    pub reconstruction: Array2<f64>,
    pub input_padded: Array2<f64>,
    pub frame_mask: Vec<f64>,
    pub orig_len: usize,
}

/// Loss breakdown of one analyzer step (batch means).
#[derive(Debug, Clone)]
pub struct AnalyzerLossReport {
    pub recon_mse: f64,
    pub commit_per_stage: Vec<f64>,
    /// Per lower stage: stage-prediction MSE plus gamma x triplet.
    pub predict_per_stage: Vec<f64>,
    pub total: f64,
}

impl AnalyzerLossReport {
    /// The defining combination; `total` always equals this.
    pub fn combine(
        recon: f64,
        commit: &[f64],
        predict: &[f64],
        alpha: f64,
        beta: f64,
    ) -> f64 {
        let stages = commit.len() as f64;
        let mut total = recon + alpha / stages * commit.iter().sum::<f64>();
        if !predict.is_empty() {
            total += beta / predict.len() as f64 * predict.iter().sum::<f64>();
        }
        total
    }

    fn diverged_term(&self) -> Option<(String, f64)> {
        if !self.recon_mse.is_finite() {
            return Some(("reconstruction".into(), self.recon_mse));
        }
        for (j, v) in self.commit_per_stage.iter().enumerate() {
            if !v.is_finite() {
                return Some((format!("commitment[stage {}]", j + 1), *v));
            }
        }
        for (j, v) in self.predict_per_stage.iter().enumerate() {
            if !v.is_finite() {
                return Some((format!("stage-prediction[stage {}]", j + 1), *v));
            }
        }
        if !self.total.is_finite() {
            return Some(("total".into(), self.total));
        }
        None
    }
}

/// Graph-side handles produced while building one sequence's forward pass.
struct SeqGraph {
    h: Vec<Var>,
    pred: Vec<Option<Var>>,
    recon: Var,
    trace: AnalyzerForward,
}

/// Per-sequence loss term handles.
struct SeqLossTerms {
    recon: Var,
    commit: Vec<Var>,
    predict: Vec<Var>,
}

/// The feature analyzer: parameters plus one multi-head codebook per stage.
pub struct Analyzer {
    cfg: AnalyzerConfig,
    params: ParamStore,
    codebooks: Vec<MultiHeadCodebook>,
    iteration: u64,
}

impl Analyzer {
    pub fn new(cfg: AnalyzerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for spec in Self::layer_plan(&cfg) {
            spec.register(&mut params, seed);
        }
        let codebooks = (0..cfg.stages)
            .map(|s| {
                MultiHeadCodebook::init(
                    cfg.codebook_size,
                    cfg.vq_dim,
                    cfg.heads,
                    mix_seed(seed, 0x5eed_c0de + s as u64),
                    cfg.ema_decay,
                    cfg.smoothing_eps,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Analyzer {
            cfg,
            params,
            codebooks,
            iteration: 0,
        })
    }

    pub fn from_state(
        cfg: AnalyzerConfig,
        params: ParamStore,
        codebooks: Vec<MultiHeadCodebook>,
        iteration: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if codebooks.len() != cfg.stages {
            return Err(Error::format("checkpoint stage count mismatch"));
        }
        Ok(Analyzer {
            cfg,
            params,
            codebooks,
            iteration,
        })
    }

    pub fn config(&self) -> &AnalyzerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebooks(&self) -> &[MultiHeadCodebook] {
        &self.codebooks
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Layer inventory; registration and forward stay in sync through this.
    fn layer_plan(cfg: &AnalyzerConfig) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        let m = cfg.model_dim;
        for sidx in 0..cfg.stages {
            let in_dim = if sidx == 0 { cfg.feature_dim } else { m };
            plan.push(LayerSpec::Conv(Conv1d::downsampler(
                format!("enc.{sidx}.down"),
                in_dim,
                m,
                cfg.downsample[sidx],
            )));
            plan.push(LayerSpec::Stack(BlockStack::new(
                format!("enc.{sidx}.blocks"),
                cfg.block_family,
                m,
                cfg.attn_heads,
                cfg.enc_blocks,
            )));
            let top = sidx == cfg.stages - 1;
            let proj_in = if top { m } else { 2 * m };
            plan.push(LayerSpec::Lin(Linear::new(
                format!("quant.{sidx}.proj"),
                proj_in,
                cfg.vq_dim,
            )));
            let res_in = if top { cfg.vq_dim } else { m + cfg.vq_dim };
            plan.push(LayerSpec::Lin(Linear::new(
                format!("res.{sidx}.in"),
                res_in,
                m,
            )));
            plan.push(LayerSpec::Block(Block::new(
                format!("res.{sidx}.block"),
                cfg.block_family,
                m,
                cfg.attn_heads,
            )));
            if !top {
                plan.push(LayerSpec::Lin(Linear::new(
                    format!("pred.{sidx}"),
                    m,
                    cfg.vq_dim,
                )));
            }
        }
        plan.push(LayerSpec::Stack(BlockStack::new(
            "dec.blocks",
            cfg.block_family,
            m,
            cfg.attn_heads,
            cfg.dec_blocks,
        )));
        plan.push(LayerSpec::Lin(Linear::new("dec.out", m, cfg.feature_dim)));
        plan
    }

    /// Right-pads `x` (repeating the last frame) to a multiple of the total
    /// down-sample factor. Returns the padded sequence, the per-frame valid
    /// mask, and the original length.
    pub fn pad_input(&self, x: &FeatureSequence) -> Result<(Array2<f64>, Vec<f64>, usize)> {
        let (len, dim) = x.dim();
        if len == 0 {
            return Err(Error::input("empty feature sequence"));
        }
        if dim != self.cfg.feature_dim {
            return Err(Error::input(format!(
                "feature dim {dim} != configured {}",
                self.cfg.feature_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite feature values"));
        }
        let target = self.cfg.padded_len(len);
        if target != len && !self.cfg.pad_inputs {
            return Err(Error::input(format!(
                "length {len} not divisible by {} and padding is disabled",
                self.cfg.total_rate()
            )));
        }
        let mut padded = Array2::zeros((target, dim));
        padded.slice_mut(s![..len, ..]).assign(x);
        for t in len..target {
            padded.row_mut(t).assign(&x.row(len - 1));
        }
        let mut mask = vec![1.0; len];
        mask.resize(target, 0.0);
        Ok((padded, mask, len))
    }

    /// Builds one sequence's forward graph on `tape`.
    #[allow(clippy::needless_range_loop)] // stages index several parallel structures
    fn forward_seq(
        &self,
        tape: &Tape,
        binder: &Binder,
        x: &FeatureSequence,
        mode: QuantMode,
    ) -> Result<SeqGraph> {
        let cfg = &self.cfg;
        let (x_padded, frame_mask, orig_len) = self.pad_input(x)?;
        let stage_valid = cfg.stage_valid_lens(orig_len);
        let stage_lens = cfg.stage_lens(x_padded.nrows())?;

        // Bottom-up encoders: strided down-sampling then a block stack.
        let mut enc = Vec::with_capacity(cfg.stages);
        let mut cur = tape.leaf(x_padded.clone());
        for sidx in 0..cfg.stages {
            let in_dim = if sidx == 0 { cfg.feature_dim } else { cfg.model_dim };
            let down = Conv1d::downsampler(
                format!("enc.{sidx}.down"),
                in_dim,
                cfg.model_dim,
                cfg.downsample[sidx],
            )
            .apply(tape, binder, cur);
            let stack = BlockStack::new(
                format!("enc.{sidx}.blocks"),
                cfg.block_family,
                cfg.model_dim,
                cfg.attn_heads,
                cfg.enc_blocks,
            );
            cur = stack.apply(tape, binder, down);
            debug_assert_eq!(tape.shape(cur).0, stage_lens[sidx]);
            enc.push(cur);
        }

        // Top-down quantization with residual and prediction paths.
        let mut h_vars = vec![None; cfg.stages];
        let mut pred_vars: Vec<Option<Var>> = vec![None; cfg.stages];
        let mut traces: Vec<Option<StageTrace>> = (0..cfg.stages).map(|_| None).collect();
        let mut upsampled: Option<Var> = None; // residual from the stage above
        for sidx in (0..cfg.stages).rev() {
            let top = sidx == cfg.stages - 1;
            let quant_in = if top {
                enc[sidx]
            } else {
                tape.concat_cols(&[upsampled.expect("residual path"), enc[sidx]])
            };
            let proj_in = if top { cfg.model_dim } else { 2 * cfg.model_dim };
            let h = Linear::new(format!("quant.{sidx}.proj"), proj_in, cfg.vq_dim)
                .apply(tape, binder, quant_in);
            h_vars[sidx] = Some(h);
            let h_val = tape.value(h);

            let (qst, quant) = match mode {
                QuantMode::Learned => {
                    if let Some(bad) = h_val.iter().find(|v| !v.is_finite()) {
                        return Err(Error::Divergence {
                            term: format!("hidden[stage {}]", sidx + 1),
                            value: *bad,
                        });
                    }
                    let quant = self.codebooks[sidx].quantize_mh(&h_val)?;
                    (tape.straight_through(h, &quant.quantized), quant)
                }
                QuantMode::Bypass => {
                    let quant = QuantizationResult {
                        indices: Array2::zeros((h_val.nrows(), cfg.heads)),
                        quantized: h_val.clone(),
                        distances: Array2::zeros((h_val.nrows(), cfg.heads)),
                    };
                    (h, quant)
                }
                QuantMode::Frozen(frozen) => {
                    let quant = QuantizationResult {
                        indices: frozen.indices[sidx].clone(),
                        quantized: frozen.targets[sidx].clone(),
                        distances: Array2::zeros((h_val.nrows(), cfg.heads)),
                    };
                    (tape.add_const(h, &frozen.offsets[sidx]), quant)
                }
            };

            let residual = self.residual_path(tape, binder, sidx, qst, upsampled);
            let up = tape.upsample_repeat(residual, cfg.downsample[sidx]);
            if sidx > 0 {
                // predict the next stage down from the up-sampled residual
                let p = Linear::new(format!("pred.{}", sidx - 1), cfg.model_dim, cfg.vq_dim)
                    .apply(tape, binder, up);
                pred_vars[sidx - 1] = Some(p);
            }

            let mut mask = vec![1.0; stage_valid[sidx]];
            mask.resize(stage_lens[sidx], 0.0);
            traces[sidx] = Some(StageTrace {
                encoded: tape.value(enc[sidx]),
                hidden_prequant: h_val,
                quant,
                predicted: None,
                residual: tape.value(residual),
                mask,
            });
            upsampled = Some(up);
        }

        // Decoder consumes the finest stage's up-sampled residual output.
        let recon = self.decode_path(tape, binder, upsampled.expect("at least one stage"));

        let mut stages: Vec<StageTrace> = traces.into_iter().map(|t| t.unwrap()).collect();
        for (sidx, stage) in stages.iter_mut().enumerate() {
            stage.predicted = pred_vars[sidx].map(|p| tape.value(p));
        }

        Ok(SeqGraph {
            h: h_vars.into_iter().map(|v| v.unwrap()).collect(),
            pred: pred_vars,
            recon,
            trace: AnalyzerForward {
                stages,
                reconstruction: tape.value(recon),
                input_padded: x_padded,
                frame_mask,
                orig_len,
            },
        })
    }

    /// Residual module at stage `sidx`: an input projection (fused with the
    /// up-sampled residual from above at lower stages) followed by one
    /// encoder-family block. Consumes only quantized values and parameters.
    fn residual_path(
        &self,
        tape: &Tape,
        binder: &Binder,
        sidx: usize,
        qst: Var,
        upsampled: Option<Var>,
    ) -> Var {
        let cfg = &self.cfg;
        let top = sidx == cfg.stages - 1;
        let res_pre = if top {
            Linear::new(format!("res.{sidx}.in"), cfg.vq_dim, cfg.model_dim)
                .apply(tape, binder, qst)
        } else {
            let up = upsampled.expect("residual path");
            let fused = tape.concat_cols(&[up, qst]);
            let projected = Linear::new(
                format!("res.{sidx}.in"),
                cfg.model_dim + cfg.vq_dim,
                cfg.model_dim,
            )
            .apply(tape, binder, fused);
            tape.add(projected, up)
        };
        Block::new(
            format!("res.{sidx}.block"),
            cfg.block_family,
            cfg.model_dim,
            cfg.attn_heads,
        )
        .apply(tape, binder, res_pre)
    }

    /// Decoder block stack + output projection over the finest stage's
    /// up-sampled residual output.
    fn decode_path(&self, tape: &Tape, binder: &Binder, dec_in: Var) -> Var {
        let cfg = &self.cfg;
        let hidden = BlockStack::new(
            "dec.blocks",
            cfg.block_family,
            cfg.model_dim,
            cfg.attn_heads,
            cfg.dec_blocks,
        )
        .apply(tape, binder, dec_in);
        Linear::new("dec.out", cfg.model_dim, cfg.feature_dim).apply(tape, binder, hidden)
    }

    /// Decodes features from a representation alone. The decoder path is a
    /// pure function of the quantized vectors, so
    /// `decode_msmcr(analyze(x))` equals the reconstruction produced during
    /// analysis bit for bit.
    pub fn decode_msmcr(&self, msmcr: &Msmcr) -> Result<FeatureSequence> {
        if msmcr.fingerprint != self.cfg.fingerprint() {
            return Err(Error::Mismatch(format!(
                "representation fingerprint {:#x} != analyzer {:#x}",
                msmcr.fingerprint,
                self.cfg.fingerprint()
            )));
        }
        msmcr.validate_chain(&self.cfg.downsample)?;
        for stage in &msmcr.stages {
            if stage.vectors.ncols() != self.cfg.vq_dim {
                return Err(Error::contract("representation width mismatch"));
            }
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let mut upsampled: Option<Var> = None;
        for sidx in (0..self.cfg.stages).rev() {
            let qst = tape.leaf(msmcr.stages[sidx].vectors.clone());
            let residual = self.residual_path(&tape, &binder, sidx, qst, upsampled);
            upsampled = Some(tape.upsample_repeat(residual, self.cfg.downsample[sidx]));
        }
        let recon = self.decode_path(&tape, &binder, upsampled.expect("at least one stage"));
        Ok(tape.value(recon))
    }

    /// Adds the per-stage loss terms for one sequence to the graph. The
    /// quantized side always enters as a constant; gradients reach the
    /// codebooks only through the EMA update, never through the tape.
    fn loss_terms(&self, tape: &Tape, graph: &SeqGraph, mode: QuantMode) -> SeqLossTerms {
        let cfg = &self.cfg;
        let recon = tape.mse_const(
            graph.recon,
            &graph.trace.input_padded,
            Some(&graph.trace.frame_mask),
        );
        let mut commit = Vec::with_capacity(cfg.stages);
        let mut predict = Vec::new();
        let bypass = matches!(mode, QuantMode::Bypass);
        for sidx in 0..cfg.stages {
            let stage = &graph.trace.stages[sidx];
            let commit_term = if bypass {
                tape.affine_sum(&[(tape.leaf(Array2::zeros((1, 1))), 1.0)])
            } else {
                tape.mse_const(graph.h[sidx], &stage.quant.quantized, Some(&stage.mask))
            };
            commit.push(commit_term);
            if let Some(p) = graph.pred[sidx] {
                let mse = tape.mse_const(p, &stage.quant.quantized, Some(&stage.mask));
                if bypass {
                    predict.push(mse);
                } else {
                    let hd = cfg.head_dim();
                    let mut head_terms = Vec::with_capacity(cfg.heads);
                    for k in 0..cfg.heads {
                        let p_head = tape.slice_cols(p, k * hd, hd);
                        let idx: Vec<usize> =
                            stage.quant.indices.column(k).iter().cloned().collect();
                        let tpl = tape.triplet_const(
                            p_head,
                            &idx,
                            self.codebooks[sidx].heads()[k].codes(),
                            cfg.margin,
                            Some(&stage.mask),
                        );
                        head_terms.push((tpl, 1.0 / cfg.heads as f64));
                    }
                    let tpl = tape.affine_sum(&head_terms);
                    predict.push(tape.affine_sum(&[(mse, 1.0), (tpl, cfg.gamma)]));
                }
            }
        }
        SeqLossTerms {
            recon,
            commit,
            predict,
        }
    }

    /// Builds the full batch graph and returns the scalar total plus the
    /// batch-mean loss report.
    fn batch_graph(
        &self,
        tape: &Tape,
        binder: &Binder,
        batch: &[FeatureSequence],
        mode: QuantMode,
    ) -> Result<(Var, AnalyzerLossReport, Vec<SeqGraph>)> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let cfg = &self.cfg;
        let mut graphs = Vec::with_capacity(batch.len());
        let mut terms = Vec::with_capacity(batch.len());
        for x in batch {
            let graph = self.forward_seq(tape, binder, x, mode)?;
            terms.push(self.loss_terms(tape, &graph, mode));
            graphs.push(graph);
        }
        let bw = 1.0 / batch.len() as f64;
        let batch_mean = |vars: Vec<Var>| -> Var {
            let weighted: Vec<(Var, f64)> = vars.into_iter().map(|v| (v, bw)).collect();
            tape.affine_sum(&weighted)
        };
        let recon = batch_mean(terms.iter().map(|t| t.recon).collect());
        let commit: Vec<Var> = (0..cfg.stages)
            .map(|j| batch_mean(terms.iter().map(|t| t.commit[j]).collect()))
            .collect();
        let n_pred = terms[0].predict.len();
        let predict: Vec<Var> = (0..n_pred)
            .map(|j| batch_mean(terms.iter().map(|t| t.predict[j]).collect()))
            .collect();

        let mut total_terms = vec![(recon, 1.0)];
        if !commit.is_empty() {
            let commit_sum = tape.affine_sum(
                &commit.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(),
            );
            total_terms.push((commit_sum, cfg.alpha / cfg.stages as f64));
        }
        if !predict.is_empty() {
            let pred_sum = tape.affine_sum(
                &predict.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(),
            );
            total_terms.push((pred_sum, cfg.beta / n_pred as f64));
        }
        let total = tape.affine_sum(&total_terms);

        let report = AnalyzerLossReport {
            recon_mse: tape.value(recon)[[0, 0]],
            commit_per_stage: commit.iter().map(|v| tape.value(*v)[[0, 0]]).collect(),
            predict_per_stage: predict.iter().map(|v| tape.value(*v)[[0, 0]]).collect(),
            total: tape.value(total)[[0, 0]],
        };
        Ok((total, report, graphs))
    }

    /// Loss of a batch without any update (used by evaluations and the
    /// finite-difference harness).
    pub fn batch_loss(&self, batch: &[FeatureSequence], mode: QuantMode) -> Result<AnalyzerLossReport> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let (_, report, _) = self.batch_graph(&tape, &binder, batch, mode)?;
        Ok(report)
    }

    /// Gradients of the batch total w.r.t. every parameter, plus the report.
    pub fn batch_gradients(
        &self,
        batch: &[FeatureSequence],
        mode: QuantMode,
    ) -> Result<(AnalyzerLossReport, ParamGrads)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let (total, report, _) = self.batch_graph(&tape, &binder, batch, mode)?;
        let grads = tape.backward(total);
        Ok((report, collect_param_grads(&binder, &grads)))
    }

    /// Captures the quantization state of a batch at the current parameters
    /// so a smooth surrogate loss can be evaluated at perturbed parameters.
    pub fn freeze_quantization(&self, x: &FeatureSequence) -> Result<FrozenQuant> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let graph = self.forward_seq(&tape, &binder, x, QuantMode::Learned)?;
        let mut offsets = Vec::new();
        let mut targets = Vec::new();
        let mut indices = Vec::new();
        for stage in &graph.trace.stages {
            offsets.push(&stage.quant.quantized - &stage.hidden_prequant);
            targets.push(stage.quant.quantized.clone());
            indices.push(stage.quant.indices.clone());
        }
        Ok(FrozenQuant {
            offsets,
            targets,
            indices,
        })
    }

    /// One optimizer step on all non-codebook parameters against the batch
    /// loss, then one EMA update per codebook from this batch's assignments.
    pub fn train_step(
        &mut self,
        batch: &[FeatureSequence],
        opt: &mut Adam,
        lr: f64,
    ) -> Result<AnalyzerLossReport> {
        self.train_step_inner(batch, opt, lr, false)
    }

    /// Training step with the quantizer bypassed (`q := h`): the model is a
    /// plain autoencoder and codebooks are left untouched. Exists for paired
    /// ablation runs against the quantized model.
    pub fn train_step_bypassed(
        &mut self,
        batch: &[FeatureSequence],
        opt: &mut Adam,
        lr: f64,
    ) -> Result<AnalyzerLossReport> {
        self.train_step_inner(batch, opt, lr, true)
    }

    fn train_step_inner(
        &mut self,
        batch: &[FeatureSequence],
        opt: &mut Adam,
        lr: f64,
        bypass: bool,
    ) -> Result<AnalyzerLossReport> {
        let mode = if bypass {
            QuantMode::Bypass
        } else {
            QuantMode::Learned
        };
        let (report, grads, assignments) = {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &self.params);
            let (total, report, graphs) = self.batch_graph(&tape, &binder, batch, mode)?;
            if let Some((term, value)) = report.diverged_term() {
                return Err(Error::Divergence { term, value });
            }
            let grads = tape.backward(total);
            let param_grads = collect_param_grads(&binder, &grads);

            // batch assignment statistics per stage, masked to real frames
            let mut assignments: Vec<Vec<CodeAssignments>> = self
                .codebooks
                .iter()
                .map(|mcb| {
                    mcb.heads()
                        .iter()
                        .map(|b| CodeAssignments::new(b.len(), b.dim()))
                        .collect()
                })
                .collect();
            if !bypass {
                for graph in &graphs {
                    for (sidx, stage) in graph.trace.stages.iter().enumerate() {
                        self.codebooks[sidx].accumulate_assignments(
                            &stage.hidden_prequant,
                            &stage.quant,
                            Some(&stage.mask),
                            &mut assignments[sidx],
                        )?;
                    }
                }
            }
            (report, param_grads, assignments)
        };

        opt.step(&mut self.params, &grads, lr)?;
        if !bypass {
            for (mcb, acc) in self.codebooks.iter_mut().zip(&assignments) {
                for (bank, a) in mcb.heads_mut().iter_mut().zip(acc) {
                    bank.ema_update(a)?;
                }
            }
        }
        self.iteration += 1;
        Ok(report)
    }

    /// Full forward pass returning every intermediate (no loss, no update).
    pub fn forward(&self, x: &FeatureSequence, mode: QuantMode) -> Result<AnalyzerForward> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        Ok(self.forward_seq(&tape, &binder, x, mode)?.trace)
    }

    /// Extracts the multi-stage representation of `x`.
    pub fn analyze(&self, x: &FeatureSequence) -> Result<Msmcr> {
        let trace = self.forward(x, QuantMode::Learned)?;
        Ok(Msmcr {
            stages: trace
                .stages
                .iter()
                .map(|s| MsmcrStage {
                    indices: s.quant.indices.clone(),
                    vectors: s.quant.quantized.clone(),
                })
                .collect(),
            fingerprint: self.cfg.fingerprint(),
        })
    }

    /// Reconstructs features from the analysis path of `x` (analysis +
    /// synthesis in one pass); returns the padded-length reconstruction.
    pub fn reconstruct(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        Ok(self.forward(x, QuantMode::Learned)?.reconstruction)
    }
}

enum LayerSpec {
    Lin(Linear),
    Conv(Conv1d),
    Block(Block),
    Stack(BlockStack),
}

impl LayerSpec {
    fn register(&self, store: &mut ParamStore, seed: u64) {
        match self {
            LayerSpec::Lin(l) => l.register(store, seed),
            LayerSpec::Conv(c) => c.register(store, seed),
            LayerSpec::Block(b) => b.register(store, seed),
            LayerSpec::Stack(s) => s.register(store, seed),
        }
    }
}

/// Maps tape gradients back to parameter names.
pub fn collect_param_grads(binder: &Binder, grads: &Gradients) -> ParamGrads {
    binder
        .bound()
        .into_iter()
        .filter_map(|(name, var)| grads.get(var).map(|g| (name, g.clone())))
        .collect()
}
