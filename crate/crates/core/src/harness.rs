//! Sequential training over a task stream, rehearsal selection, evaluation
//! after every task, and persistence of the results.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datastream::{generate_stream, load_external, StreamConfig, TaskStream};
use crate::diffmath::{Array, Tape};
use crate::encoder::{augment_batch, encode, AugmentationConfig, EncoderConfig, Mlp};
use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, evaluate_all_tasks, AccuracyMatrix, KnnConfig, MetricsReport};
use crate::losses::{cucl_loss, ntxent_loss, siamese_stopgrad_loss, Backbone, LossConfig};
use crate::quantizer::{soft_quantize_var, Codebook, QuantizerConfig};
use crate::rehearsal::{replay_merge, RehearsalBuffer, RehearsalMode, ReplayCount};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamConfig,
    /// Read the stream from this CSV instead of generating it.
    pub stream_path: Option<PathBuf>,
    pub encoder: EncoderConfig,
    /// Hidden width of the prediction head used by the Siamese backbone.
    pub predictor_hidden: usize,
    pub augmentation: AugmentationConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossConfig,
    pub knn: KnnConfig,
    pub cucl_enabled: bool,
    pub rehearsal: RehearsalMode,
    /// Samples kept per task.
    pub buffer_size: usize,
    pub replay: ReplayCount,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stream: StreamConfig::default(),
            stream_path: None,
            encoder: EncoderConfig::default(),
            predictor_hidden: 64,
            augmentation: AugmentationConfig::default(),
            quantizer: QuantizerConfig::default(),
            loss: LossConfig::default(),
            knn: KnnConfig::default(),
            cucl_enabled: true,
            rehearsal: RehearsalMode::Furthest,
            buffer_size: 20,
            replay: ReplayCount::Auto,
            epochs: 50,
            batch_size: 64,
            lr: 0.03,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.quantizer.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        if self.stream_path.is_none() {
            self.stream.validate()?;
        }
        if self.epochs == 0 || self.batch_size < 2 || self.predictor_hidden == 0 {
            return Err(Error::InvalidConfig(
                "epochs and predictor width must be positive, batch size at least 2".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} is invalid", self.lr)));
        }
        if self.encoder.output_dim != self.quantizer.dim() {
            return Err(Error::InvalidConfig(format!(
                "encoder output {} != codebooks × sub_dim = {}",
                self.encoder.output_dim,
                self.quantizer.dim()
            )));
        }
        if self.knn.k == 0 || !(self.knn.tau > 0.0) {
            return Err(Error::InvalidConfig("knn k and temperature must be positive".into()));
        }
        Ok(())
    }

    fn keeps_buffer(&self) -> bool {
        self.rehearsal != RehearsalMode::Off && self.buffer_size > 0
    }
}

/// Trainable state shared across all tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: Mlp,
    pub predictor: Option<Mlp>,
    pub codebook: Codebook,
}

impl TrainState {
    /// Random encoder (and predictor for the Siamese backbone); codewords
    /// scaled to the encoder's output on `first_batch`.
    pub fn init(config: &RunConfig, first_batch: &Array, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Mlp::new(&config.encoder.layer_dims(), rng)?;
        let predictor = match config.loss.backbone {
            Backbone::SiameseStopgrad => {
                let d = config.encoder.output_dim;
                Some(Mlp::new(&[d, config.predictor_hidden, d], rng)?)
            }
            Backbone::Ntxent => None,
        };
        let features = encode(first_batch, &encoder)?;
        let codebook = Codebook::init_from_batch(&config.quantizer, &features, rng)?;
        Ok(TrainState {
            encoder,
            predictor,
            codebook,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub unsup: f64,
    /// Absent when the cross-quantized term is disabled.
    pub cucl: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

struct StepLoss {
    unsup: f64,
    cucl: Option<f64>,
}

fn term_error(term: &'static str, task: usize, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, task, epoch },
        other => other,
    }
}

fn train_step(
    state: &mut TrainState,
    view_a: Array,
    view_b: Array,
    config: &RunConfig,
    task: usize,
    epoch: usize,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let enc = state.encoder.register(&mut tape);
    let pred = state.predictor.as_ref().map(|p| p.register(&mut tape));
    let book = config
        .cucl_enabled
        .then(|| state.codebook.register(&mut tape));

    let in_a = tape.constant(view_a);
    let in_b = tape.constant(view_b);

    let unsup_err = term_error("l_unsup", task, epoch);
    let x_a = enc.forward(&mut tape, in_a).map_err(&unsup_err)?;
    let x_b = enc.forward(&mut tape, in_b).map_err(&unsup_err)?;
    let l_unsup = match (config.loss.backbone, &pred) {
        (Backbone::Ntxent, _) => ntxent_loss(&mut tape, x_a, x_b, config.loss.tau_l),
        (Backbone::SiameseStopgrad, Some(pred)) => (|| {
            let p_a = pred.forward(&mut tape, x_a)?;
            let p_b = pred.forward(&mut tape, x_b)?;
            siamese_stopgrad_loss(&mut tape, p_a, x_a, p_b, x_b)
        })(),
        (Backbone::SiameseStopgrad, None) => {
            Err(Error::InvalidConfig("siamese backbone needs a predictor".into()))
        }
    }
    .map_err(&unsup_err)?;

    let l_cucl = match &book {
        Some(book) => Some(
            (|| {
                let tau_q = config.quantizer.tau_q;
                let z_a = soft_quantize_var(&mut tape, x_a, book, tau_q)?;
                let z_b = soft_quantize_var(&mut tape, x_b, book, tau_q)?;
                cucl_loss(&mut tape, x_a, z_b, x_b, z_a, &config.loss)
            })()
            .map_err(term_error("l_cucl", task, epoch))?,
        ),
        None => None,
    };

    let total = match l_cucl {
        Some(c) => tape.add(l_unsup, c).map_err(term_error("total", task, epoch))?,
        None => l_unsup,
    };
    let grads = tape.backward(total).map_err(term_error("total", task, epoch))?;

    let update_err = term_error("total", task, epoch);
    state.encoder.sgd_step(&enc, &grads, config.lr).map_err(&update_err)?;
    if let (Some(p), Some(vars)) = (state.predictor.as_mut(), pred.as_ref()) {
        p.sgd_step(vars, &grads, config.lr).map_err(&update_err)?;
    }
    if let Some(vars) = &book {
        state.codebook.sgd_step(vars, &grads, config.lr).map_err(&update_err)?;
    }

    Ok(StepLoss {
        unsup: tape.scalar(l_unsup)?,
        cucl: l_cucl.map(|c| tape.scalar(c)).transpose()?,
    })
}

/// Trains on one task's unlabeled inputs for `config.epochs` epochs.
///
/// Each batch is merged with replayed buffer samples, augmented twice, and
/// optimised on the backbone loss plus (if enabled) the cross-quantized
/// loss. Batches with fewer than two rows are skipped.
pub fn train_task(
    state: &mut TrainState,
    task_data: &Array,
    task_index: usize,
    buffer: &RehearsalBuffer,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTrace> {
    let n = task_data.rows();
    if n == 0 {
        return Err(Error::Stream(format!("task {task_index} has no training data")));
    }
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut sum_unsup, mut sum_cucl, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = task_data.select_rows(chunk)?;
            let merged = replay_merge(&batch, buffer, config.replay, rng)?;
            let view_a = augment_batch(&merged, &config.augmentation, rng)?;
            let view_b = augment_batch(&merged, &config.augmentation, rng)?;
            let step = train_step(state, view_a, view_b, config, task_index, epoch)?;
            sum_unsup += step.unsup;
            sum_cucl += step.cucl.unwrap_or(0.0);
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Stream(format!(
                "task {task_index} yields no batch of at least two rows"
            )));
        }
        let unsup = sum_unsup / steps as f64;
        let cucl = config.cucl_enabled.then(|| sum_cucl / steps as f64);
        let total = unsup + cucl.unwrap_or(0.0);
        debug!("task {task_index} epoch {epoch}: unsup {unsup:.5} cucl {cucl:?}");
        trace.epochs.push(EpochLoss { unsup, cucl, total });
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub after_task: usize,
    pub maa_so_far: f64,
    pub aa_so_far: f64,
}

/// Running MAA and average accuracy after each training point (1-based).
pub fn emit_learning_curve(matrix: &AccuracyMatrix) -> Result<Vec<CurvePoint>> {
    if !matrix.is_complete() || matrix.tasks() == 0 {
        return Err(Error::IncompleteMatrix(format!(
            "{} of {} rows present",
            matrix.completed(),
            matrix.tasks()
        )));
    }
    let mut running = 0.0;
    Ok(matrix
        .row_means()
        .into_iter()
        .enumerate()
        .map(|(j, aa)| {
            running += aa;
            CurvePoint {
                after_task: j + 1,
                maa_so_far: running / (j + 1) as f64,
                aa_so_far: aa,
            }
        })
        .collect())
}

pub fn write_curve_csv<W: std::io::Write>(mut out: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "after_task,maa_so_far,aa_so_far")?;
    for p in curve {
        writeln!(out, "{},{:.6},{:.6}", p.after_task, p.maa_so_far, p.aa_so_far)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    /// One trace per task.
    pub loss_traces: Vec<LossTrace>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
    #[serde(skip)]
    pub final_state: Option<TrainState>,
    #[serde(skip)]
    pub buffer: Option<RehearsalBuffer>,
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn load_stream(config: &RunConfig) -> Result<TaskStream> {
    match &config.stream_path {
        Some(path) => load_external(path),
        None => generate_stream(&config.stream),
    }
}

/// Runs the whole protocol; writes `matrix.csv`, `curve.csv`, `summary.json`
/// and checkpoints when an output directory is configured. On failure the
/// rows finished so far are still flushed to `matrix.csv`.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let started = Instant::now();
    let stream = load_stream(config)?;
    if stream.input_dim() != config.encoder.input_dim {
        return Err(Error::InvalidConfig(format!(
            "stream has {} features, encoder expects {}",
            stream.input_dim(),
            config.encoder.input_dim
        )));
    }
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut init_rng = derive_rng(config.seed, 0);
    let mut train_rng = derive_rng(config.seed, 1);

    let first = stream.tasks()[0].unlabeled_train();
    let mut idx: Vec<usize> = (0..first.rows()).collect();
    idx.shuffle(&mut init_rng);
    idx.truncate(config.batch_size);
    let mut state = TrainState::init(config, &first.select_rows(&idx)?, &mut init_rng)?;

    let capacity = if config.keeps_buffer() { config.buffer_size } else { 0 };
    let mut buffer = RehearsalBuffer::new(capacity);
    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut traces = Vec::with_capacity(stream.len());

    let outcome: Result<()> = (|| {
        for (t, task) in stream.tasks().iter().enumerate() {
            let trace = train_task(&mut state, task.unlabeled_train(), t, &buffer, config, &mut train_rng)?;
            if let (Some(first), Some(last)) = (trace.epochs.first(), trace.epochs.last()) {
                info!("task {}: loss {:.4} -> {:.4}", t + 1, first.total, last.total);
            }
            traces.push(trace);
            if config.keeps_buffer() {
                let raw = task.unlabeled_train();
                let features = encode(raw, &state.encoder)?;
                buffer.store_task(t, raw, &features, &state.codebook, config.rehearsal)?;
            }
            let row = evaluate_all_tasks(&state.encoder, &stream, t, config.knn)?;
            info!("after task {}: {:?}", t + 1, row);
            matrix.push_row(row)?;
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        if let Some(dir) = &config.output_dir {
            if let Err(flush) = matrix.save_csv(&dir.join("matrix.csv")) {
                warn!("could not flush partial matrix: {flush}");
            }
        }
        return Err(e);
    }

    let metrics = compute_metrics(&matrix)?;
    let mut summary = RunSummary {
        config: config.clone(),
        matrix,
        metrics,
        loss_traces: traces,
        wall_clock_secs: 0.0,
        artifacts: Vec::new(),
        final_state: None,
        buffer: None,
    };
    if let Some(dir) = &config.output_dir {
        summary.artifacts = write_outputs(dir, &summary, &state, &buffer, stream.input_dim())?;
    }
    summary.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &config.output_dir {
        write_summary(&dir.join("summary.json"), &summary)?;
    }
    summary.final_state = Some(state);
    summary.buffer = Some(buffer);
    Ok(summary)
}

fn write_outputs(
    dir: &Path,
    summary: &RunSummary,
    state: &TrainState,
    buffer: &RehearsalBuffer,
    input_dim: usize,
) -> Result<Vec<PathBuf>> {
    let matrix_path = dir.join("matrix.csv");
    summary.matrix.save_csv(&matrix_path)?;
    let curve_path = dir.join("curve.csv");
    let curve = emit_learning_curve(&summary.matrix)?;
    write_curve_csv(std::fs::File::create(&curve_path)?, &curve)?;

    let encoder_path = dir.join("encoder.ckpt");
    let mut tensors = checkpoint::mlp_tensors("encoder", &state.encoder);
    if let Some(p) = &state.predictor {
        tensors.extend(checkpoint::mlp_tensors("predictor", p));
    }
    checkpoint::save(&encoder_path, &tensors)?;
    let codebook_path = dir.join("codebook.ckpt");
    checkpoint::save(&codebook_path, &checkpoint::codebook_tensors(&state.codebook))?;
    let buffer_path = dir.join("buffer.ckpt");
    checkpoint::save(&buffer_path, &checkpoint::buffer_tensors(buffer, input_dim))?;

    Ok(vec![
        matrix_path,
        curve_path,
        dir.join("summary.json"),
        encoder_path,
        codebook_path,
        buffer_path,
    ])
}

fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), summary)?;
    Ok(())
}
