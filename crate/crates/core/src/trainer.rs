//! Joint generation/translation training with AdamW, warmup + cosine
//! learning rate, atomic checkpoints and a JSON-lines log.
//!
//! All randomness of step `k` comes from a ChaCha8 stream keyed by
//! `(seed, k)` and the epoch permutations from a second keyed stream, so a
//! run resumed from a checkpoint replays exactly the same batches.

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, CodecSpec};
use crate::config::Provenance;
use crate::denoiser::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, PatchEmbedder, TaskMode, Unet, UnetConfig};
use crate::diffusion::LossWeighting;
use crate::error::{Error, Result};
use crate::nn::{Act, Grads, ParamStore, TokenSeq};
use crate::schedule::NoiseSchedule;
use crate::synth::{read_dataset, PairedSample};
use crate::denoiser::{TokenSource, UnetBatch};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear ramp length. The large-scale default of 1000 is scaled down
    /// to the desk-scale step budget.
    pub warmup_steps: usize,
    pub p_gen: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many steps without changing the lr schedule.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 2e-4,
            warmup_steps: 100,
            p_gen: 0.5,
            gamma: 5.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            dataset_dir: PathBuf::from("data/train"),
            checkpoint_dir: PathBuf::from("runs/train"),
            checkpoint_every: 2000,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_gen) {
            return Err(Error::invalid(format!("p_gen must lie in [0, 1], got {}", self.p_gen)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::invalid("adam_eps must be positive; weight_decay and grad_clip non-negative"));
        }
        LossWeighting::new(self.gamma)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_samples)
    }
}

/// Linear warmup from 0 to `peak`, then a half-cosine down to 0 at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    let warmup = warmup.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        let st = &mut self.state;
        st.step += 1;
        let bc1 = 1.0 - self.beta1.powi(st.step as i32);
        let bc2 = 1.0 - self.beta2.powi(st.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = self.eps as f32;
        let decay = (lr * self.weight_decay) as f32;
        for (((entry, g), m), v) in params.entries_mut().iter_mut().zip(grads.iter()).zip(&mut st.m).zip(&mut st.v) {
            for (((p, &g), m), v) in entry.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
                *p -= update + decay * *p;
            }
        }
    }
}

fn grad_norm(g: &Grads<f32>) -> f64 {
    g.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Encoded latents and morphology tokens for every training pair.
#[derive(Debug, Clone)]
pub struct TrainData {
    shape: [usize; 3],
    source: Vec<Vec<f32>>,
    target: Vec<Vec<f32>>,
    tokens: Vec<TokenSeq<f32>>,
    target_reads: std::cell::Cell<usize>,
}

impl TrainData {
    pub fn from_samples(samples: &[PairedSample], codec: &CodecSpec, embedder: &PatchEmbedder) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::data("training set is empty"))?;
        let shape = codec.latent_shape(first.source.width(), first.source.height())?;
        let to_f32 = |z: crate::diffusion::LatentGrid| z.data().iter().map(|&v| v as f32).collect::<Vec<_>>();
        let mut data = Self {
            shape,
            source: Vec::with_capacity(samples.len()),
            target: Vec::with_capacity(samples.len()),
            tokens: Vec::with_capacity(samples.len()),
            target_reads: Default::default(),
        };
        for s in samples {
            let zs = encode(codec, &s.source)?;
            let zt = encode(codec, &s.target)?;
            if zs.shape() != shape || zt.shape() != shape {
                return Err(Error::data(format!("pair {} has a different size from the first pair", s.image_id)));
            }
            let tok = embedder.embed(&s.source)?;
            data.tokens.push(TokenSeq::new(tok.count(), tok.dim(), tok.data().iter().map(|&v| v as f32).collect()));
            data.source.push(to_f32(zs));
            data.target.push(to_f32(zt));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn target(&self, i: usize) -> &[f32] {
        self.target_reads.set(self.target_reads.get() + 1);
        &self.target[i]
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: TaskMode,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Conditioning audit: both counters must stay at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaskAudit {
    pub generation_steps: usize,
    pub translation_steps: usize,
    /// Target images read while assembling a generation batch.
    pub generation_target_reads: usize,
    /// Translation samples that were given the learned generation token.
    pub translation_generation_tokens: usize,
}

pub struct TrainOutcome {
    pub model: Unet<f32>,
    pub optimizer: AdamW,
    pub records: Vec<StepRecord>,
    pub audit: TaskAudit,
    pub final_checkpoint: PathBuf,
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub model: UnetConfig,
    pub schedule: NoiseSchedule,
    pub codec: CodecSpec,
    pub provenance: Provenance,
}

/// Reproduction record written when a step produces a non-finite loss.
#[derive(Debug, Serialize)]
struct FailureDump<'a> {
    seed: u64,
    step: usize,
    epoch: usize,
    task: TaskMode,
    indices: &'a [usize],
    timesteps: &'a [usize],
    lr: f64,
    reason: String,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Loads the dataset named in the config and trains from scratch.
pub fn train(setup: &TrainSetup) -> Result<TrainOutcome> {
    let data = load_train_data(setup)?;
    train_on(setup, &data, None, &mut |_| {})
}

/// Continues a run from `checkpoint`, which must carry optimizer state.
pub fn resume(checkpoint: &Path, setup: &TrainSetup) -> Result<TrainOutcome> {
    let data = load_train_data(setup)?;
    train_on(setup, &data, Some(checkpoint), &mut |_| {})
}

pub fn load_train_data(setup: &TrainSetup) -> Result<TrainData> {
    let samples = read_dataset(&setup.train.dataset_dir)?;
    let embedder = PatchEmbedder::new(setup.model.token_dim, setup.model.embed_patch, setup.model.embed_seed)?;
    TrainData::from_samples(&samples, &setup.codec, &embedder)
}

/// The training loop. `on_step` sees every record as it is logged.
pub fn train_on(
    setup: &TrainSetup,
    data: &TrainData,
    resume_from: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    let weighting = LossWeighting::new(cfg.gamma)?;
    let schedule = &setup.schedule;
    let t_max = schedule.num_timesteps();
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let total = cfg.total_steps(data.len());
    let stop = cfg.max_steps.map_or(total, |m| m.min(total));
    let per_epoch = cfg.steps_per_epoch(data.len());

    let (mut model, mut opt) = match resume_from {
        None => {
            let model = Unet::<f32>::new(setup.model, cfg.seed, true)?;
            let opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
            (model, opt)
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config != setup.model {
                return Err(Error::data(format!(
                    "checkpoint architecture {:?} does not match the configured model {:?}",
                    ck.config, setup.model
                )));
            }
            let state = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::data(format!("{} has no optimizer state to resume from", path.display())))?;
            let model = ck.to_model()?;
            let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
            opt.state = state;
            (model, opt)
        }
    };
    let start = opt.state.step as usize;

    fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let log_path = cfg.checkpoint_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, start == 0, &setup.provenance)?;

    let [c, h, w] = data.latent_shape();
    let len = c * h * w;
    let mut audit = TaskAudit::default();
    let mut records = Vec::with_capacity(stop.saturating_sub(start));
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    let zeros = vec![0.0f32; len];

    for step in start..stop {
        let clock = Instant::now();
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, data.len());
            order_epoch = epoch;
        }
        let j = step % per_epoch;
        let idx = &order[j * cfg.batch_size..((j + 1) * cfg.batch_size).min(data.len())];
        let n = idx.len();

        let mut rng = step_rng(cfg.seed, step);
        let task = if rng.random::<f64>() < cfg.p_gen { TaskMode::Generation } else { TaskMode::Translation };
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=t_max)).collect();

        let reads_before = data.target_reads.get();
        let mut z_t = Vec::with_capacity(n * len);
        let mut structural = Vec::with_capacity(n * len);
        let mut v_true = Vec::with_capacity(n * len);
        let mut tokens = Vec::with_capacity(n);
        for (&i, &t) in idx.iter().zip(&ts) {
            let (x0, cond, tok) = match task {
                TaskMode::Generation => (&data.source[i][..], &zeros[..], TokenSource::Generation),
                TaskMode::Translation => (data.target(i), &data.source[i][..], TokenSource::Fixed(data.tokens[i].clone())),
            };
            let a = schedule.sqrt_alpha_bar(t)?;
            let b = schedule.sqrt_one_minus_alpha_bar(t)?;
            for &x in x0 {
                let e: f64 = rng.sample(StandardNormal);
                let x = x as f64;
                z_t.push((a * x + b * e) as f32);
                v_true.push(a * e - b * x);
            }
            structural.extend_from_slice(cond);
            tokens.push(tok);
        }
        match task {
            TaskMode::Generation => {
                audit.generation_steps += 1;
                audit.generation_target_reads += data.target_reads.get() - reads_before;
            }
            TaskMode::Translation => {
                audit.translation_steps += 1;
                audit.translation_generation_tokens +=
                    tokens.iter().filter(|t| matches!(t, TokenSource::Generation)).count();
            }
        }

        let lr = learning_rate(step, cfg.learning_rate, cfg.warmup_steps, total);
        let fail = |reason: String| -> Error {
            let dump = FailureDump {
                seed: cfg.seed,
                step,
                epoch,
                task,
                indices: idx,
                timesteps: &ts,
                lr,
                reason: reason.clone(),
            };
            let path = cfg.checkpoint_dir.join(format!("failure_step{step:07}.json"));
            let note = match crate::synth::write_json(&path, &dump) {
                Ok(()) => format!("seed state dumped to {}", path.display()),
                Err(e) => format!("could not dump seed state: {e}"),
            };
            Error::Numerical(format!("step {step}: {reason}; {note}"))
        };

        let batch = UnetBatch {
            z_t: Act::from_vec(n, c, h, w, z_t),
            structural: Act::from_vec(n, c, h, w, structural),
            timesteps: ts.iter().map(|&t| t as f64).collect(),
            tokens,
        };
        let (v_pred, cache) = match model.forward(&batch) {
            Ok(r) => r,
            Err(Error::Numerical(m)) => return Err(fail(m)),
            Err(e) => return Err(e),
        };
        let mut loss = 0.0;
        let mut dv = Act::zeros(n, c, h, w);
        for (k, &t) in ts.iter().enumerate() {
            let lam = weighting.lambda(schedule.snr(t)?);
            let pred = v_pred.sample(k);
            let truth = &v_true[k * len..(k + 1) * len];
            let scale = 2.0 * lam / (len * n) as f64;
            let mut sq = 0.0;
            for ((d, &p), &y) in dv.sample_mut(k).iter_mut().zip(pred).zip(truth) {
                let r = p as f64 - y;
                sq += r * r;
                *d = (scale * r) as f32;
            }
            loss += lam * sq / (len * n) as f64;
        }
        if !loss.is_finite() {
            return Err(fail(format!("non-finite loss {loss}")));
        }
        let mut grads = model.backward(&cache, &dv);
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(fail(format!("non-finite gradient norm {norm}")));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grads.scale((cfg.grad_clip / norm) as f32);
        }
        opt.step(model.params_mut(), &grads, lr);

        let rec = StepRecord {
            step,
            task,
            loss,
            lr,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        write_record(&mut log, &log_path, &rec)?;
        on_step(&rec);
        records.push(rec);

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < stop {
            let path = cfg.checkpoint_dir.join(format!("step{done:07}.ckpt"));
            save_checkpoint(&path, &checkpoint_of(setup, &model, &opt, done))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let final_checkpoint = cfg.checkpoint_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &checkpoint_of(setup, &model, &opt, opt.state.step as usize))?;
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        records,
        audit,
        final_checkpoint,
    })
}

fn checkpoint_of(setup: &TrainSetup, model: &Unet<f32>, opt: &AdamW, step: usize) -> Checkpoint {
    let meta = serde_json::json!({
        "step": step,
        "train": setup.train,
        "schedule_timesteps": setup.schedule.num_timesteps(),
        "zero_terminal_snr": setup.schedule.terminal_snr_zero(),
        "codec": setup.codec,
    });
    Checkpoint::from_model(model, &setup.provenance.config_hash, &meta.to_string(), Some(opt.state.clone()))
}

fn open_log(path: &Path, fresh: bool, prov: &Provenance) -> Result<BufWriter<File>> {
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut log = BufWriter::new(file);
    let header = serde_json::json!({
        "config_hash": prov.config_hash,
        "tool_version": prov.tool_version,
        "resumed": !fresh,
    });
    writeln!(log, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(log)
}

fn write_record(log: &mut BufWriter<File>, path: &Path, rec: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::data(e.to_string()))?;
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))?;
    log.flush().map_err(|e| Error::io(path, e))
}

/// Step records from a training log, skipping header lines.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| l.contains("\"step\"")) {
        out.push(serde_json::from_str(line).map_err(|e| Error::data(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_linear_schedule, rescale_zero_terminal_snr};
    use crate::synth::{generate_pair, SynthParams};

    fn tiny_model() -> UnetConfig {
        UnetConfig {
            base_width: 8,
            token_dim: 6,
            heads: 2,
            norm_groups: 4,
            time_dim: 8,
            embed_patch: 8,
            ..UnetConfig::default()
        }
    }

    fn setup(dir: &Path, train: TrainConfig) -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                checkpoint_dir: dir.to_path_buf(),
                ..train
            },
            model: tiny_model(),
            schedule: rescale_zero_terminal_snr(&make_linear_schedule(1000, 1e-4, 0.02).unwrap()).unwrap(),
            codec: CodecSpec::Identity,
            provenance: Provenance::new("test"),
        }
    }

    fn data(n: usize) -> TrainData {
        let sp = SynthParams {
            size: 16,
            nuclei_min: 1,
            nuclei_max: 3,
            radius_min: 2.0,
            radius_max: 3.0,
            density_radius: 6.0,
            ..SynthParams::default()
        };
        let samples: Vec<_> = (0..n as u64).map(|i| generate_pair(&sp, i).unwrap()).collect();
        TrainData::from_samples(&samples, &CodecSpec::Identity, &PatchEmbedder::new(6, 8, 1).unwrap()).unwrap()
    }

    #[test]
    fn lr_schedule_shape() {
        let (peak, warm, total) = (1e-3, 10, 110);
        assert_eq!(learning_rate(0, peak, warm, total), 0.0);
        assert!((learning_rate(5, peak, warm, total) - 5e-4).abs() < 1e-15);
        assert!((learning_rate(10, peak, warm, total) - peak).abs() < 1e-15);
        assert!((learning_rate(60, peak, warm, total) - peak / 2.0).abs() < 1e-12);
        assert!(learning_rate(110, peak, warm, total).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in warm..=total {
            let lr = learning_rate(s, peak, warm, total);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add("w", &[3], crate::nn::Init::Zeros, &mut rng);
        store.get_mut(id).copy_from_slice(&[1.0, -1.0, 0.5]);
        let mut g = store.zero_grads();
        g.get_mut(id).copy_from_slice(&[0.3, -2.0, 0.0]);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &g, 0.1);
        let w = store.get(id);
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6 && w[2] == 0.5);
        assert_eq!(opt.state.step, 1);

        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.5);
        let before = store.get(id).to_vec();
        let zero = store.zero_grads();
        opt.step(&mut store, &zero, 0.1);
        for (a, b) in store.get(id).iter().zip(before) {
            assert!((a - b * 0.95).abs() < 1e-7, "decoupled decay");
        }
    }

    #[test]
    fn fixed_seed_gives_identical_trace() {
        let d = data(6);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_steps: 2,
            seed: 9,
            max_steps: Some(5),
            ..TrainConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train_on(&setup(a.path(), cfg.clone()), &d, None, &mut |_| {}).unwrap();
        let rb = train_on(&setup(b.path(), cfg), &d, None, &mut |_| {}).unwrap();
        let strip = |r: &[StepRecord]| r.iter().map(|r| (r.step, r.task, r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&ra.records), strip(&rb.records));
        assert_eq!(ra.records.len(), 5);
        assert_eq!(ra.model.params(), rb.model.params());
        assert_eq!(strip(&read_log(a.path().join(LOG_FILE)).unwrap()), strip(&ra.records));
    }

    #[test]
    fn task_coin_and_audit() {
        let d = data(4);
        let dir = tempfile::tempdir().unwrap();
        let base = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let all_gen = TrainConfig { p_gen: 1.0, ..base.clone() };
        let out = train_on(&setup(dir.path(), all_gen), &d, None, &mut |_| {}).unwrap();
        assert!(out.records.iter().all(|r| r.task == TaskMode::Generation));
        assert_eq!(out.audit.generation_steps, 6);
        assert_eq!(out.audit.generation_target_reads, 0);

        let mixed = TrainConfig { p_gen: 0.5, ..base };
        let out = train_on(&setup(dir.path(), mixed), &d, None, &mut |_| {}).unwrap();
        assert_eq!(out.audit.generation_target_reads, 0);
        assert_eq!(out.audit.translation_generation_tokens, 0);
        assert!(out.audit.translation_steps > 0 && out.audit.generation_steps > 0);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let d = data(5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            warmup_steps: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = train_on(&setup(a.path(), cfg.clone()), &d, None, &mut |_| {}).unwrap();
        assert_eq!(full.records.len(), 9);

        let head_cfg = TrainConfig { max_steps: Some(4), ..cfg.clone() };
        let head = train_on(&setup(b.path(), head_cfg), &d, None, &mut |_| {}).unwrap();
        assert_eq!(head.optimizer.state.step, 4);
        let tail = train_on(&setup(b.path(), cfg), &d, Some(&head.final_checkpoint), &mut |_| {}).unwrap();
        assert_eq!(tail.records.first().map(|r| r.step), Some(4));

        let bits = |r: &[StepRecord]| r.iter().map(|r| (r.step, r.task, r.loss.to_bits())).collect::<Vec<_>>();
        let stitched: Vec<_> = head.records.iter().chain(&tail.records).cloned().collect();
        assert_eq!(bits(&stitched), bits(&full.records));
        assert_eq!(tail.model.params(), full.model.params());
        assert_eq!(tail.optimizer.state, full.optimizer.state);
        assert_eq!(bits(&read_log(b.path().join(LOG_FILE)).unwrap()), bits(&full.records));
    }

    #[test]
    fn resume_rejects_other_width() {
        let d = data(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_on(&setup(dir.path(), cfg.clone()), &d, None, &mut |_| {}).unwrap();
        let mut s = setup(dir.path(), cfg);
        s.model.base_width = 16;
        assert!(matches!(train_on(&s, &d, Some(&out.final_checkpoint), &mut |_| {}), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_loss_dumps_seed_state() {
        let d = data(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e30,
            warmup_steps: 0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let err = train_on(&setup(dir.path(), cfg), &d, None, &mut |_| {}).err().expect("diverges");
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        let dumps: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("failure_step"))
            .collect();
        assert_eq!(dumps.len(), 1);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dumps[0].path()).unwrap()).unwrap();
        assert_eq!(v["seed"], 0);
        assert!(v["timesteps"].as_array().unwrap().len() == 2);
    }
}
