//! Configuration, training, evaluation and ablation switches.

pub mod metrics;

use std::io::BufReader;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::csi::{preprocess, read_records, CsiError, CsiRecord, Split};
use crate::explain::{self, aopc, importance_scores, jacobian, mask_schedule, perturbation_curve, ExplainError, ImportanceCurve, Order};
use crate::field::{sample_ray, Checkpoint, FieldConfig, FieldError, FieldModel};
use crate::geometry::{Aabb, Vec3};
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, NumericsError, OptimizerState, Tape, Tensor};
use crate::attention::AttentionError;
use crate::powermlp::{NormKind, PowerMlpError};
use crate::renderer::{direction_grid, render_links_var, render_spectrum, RenderError};
use crate::scene::{simulate_spectrum, SceneError, SceneSpec, RX_MARGIN};

use metrics::{cdf, snr_db, ssim, MetricError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("checkpoint fingerprint {found} does not match configuration {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, last_good: Box<Checkpoint> },
    #[error("cannot parse configuration")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Failures caused by arithmetic rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            HarnessError::NonFinite { .. } => true,
            HarnessError::Numerics(e) => numerics_numeric(e),
            HarnessError::Metric(e) => *e == MetricError::NonFinite,
            HarnessError::Field(e) => field_numeric(e),
            HarnessError::Render(e) => render_numeric(e),
            HarnessError::Explain(e) => match e {
                ExplainError::NonFinite { .. } => true,
                ExplainError::Numerics(n) => numerics_numeric(n),
                ExplainError::Field(f) => field_numeric(f),
                ExplainError::Render(r) => render_numeric(r),
                _ => false,
            },
            _ => false,
        }
    }
}

fn numerics_numeric(e: &NumericsError) -> bool {
    matches!(e, NumericsError::NanGradient { .. } | NumericsError::NonFinite { .. })
}

fn field_numeric(e: &FieldError) -> bool {
    match e {
        FieldError::Numerics(n) | FieldError::PowerMlp(PowerMlpError::Numerics(n)) => numerics_numeric(n),
        FieldError::Attention(a) => match a {
            AttentionError::DegenerateNormalizer { .. } | AttentionError::NonFinite => true,
            AttentionError::Numerics(n) => numerics_numeric(n),
            _ => false,
        },
        _ => false,
    }
}

fn render_numeric(e: &RenderError) -> bool {
    match e {
        RenderError::Numerics(n) => numerics_numeric(n),
        RenderError::Field(f) => field_numeric(f),
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene file; its room box bounds the position encoder.
    pub scene: Option<PathBuf>,
    pub train: Option<PathBuf>,
    /// Separate test file; otherwise the `split` field of `train` is used.
    pub test: Option<PathBuf>,
    pub preprocess: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scene: None, train: None, test: None, preprocess: true }
    }
}

/// Receive-direction grid `G = az_bins × el_bins` summed per link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub az_bins: usize,
    pub el_bins: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { az_bins: 8, el_bins: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cap on the joint gradient L2 norm of each step.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 8, learning_rate: 1e-3, clip_norm: 1.0, seed: 0 }
    }
}

/// Half-open subcarrier ranges; unset means lower and upper halves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    pub train: Option<[usize; 2]>,
    pub eval: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test receivers whose rendered spectrum is compared by SSIM against
    /// the scene oracle; needs `data.scene`.
    pub spectra: usize,
    pub az_bins: usize,
    pub el_bins: usize,
    pub explain_log_points: usize,
    pub explain_linear_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { spectra: 0, az_bins: 36, el_bins: 9, explain_log_points: 10, explain_linear_points: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub bands: BandConfig,
    pub eval: EvalConfig,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), HarnessError> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Parses a file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.data.scene, &mut c.data.train, &mut c.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        let (r, t, e) = (&self.render, &self.train, &self.eval);
        check((1..=360).contains(&r.az_bins) && (1..=180).contains(&r.el_bins), || {
            format!("direction grid {}×{} outside 1..=360 × 1..=180", r.az_bins, r.el_bins)
        })?;
        check((1..=100_000).contains(&t.epochs), || format!("epochs {} outside 1..=100000", t.epochs))?;
        check((1..=4096).contains(&t.batch_size), || format!("batch_size {} outside 1..=4096", t.batch_size))?;
        check(t.learning_rate > 0.0 && t.learning_rate <= 1.0, || format!("learning_rate {} outside (0, 1]", t.learning_rate))?;
        check(t.clip_norm > 0.0, || format!("clip_norm {} must be positive", t.clip_norm))?;
        check((1..=720).contains(&e.az_bins) && (1..=360).contains(&e.el_bins), || "spectrum grid out of range".into())?;
        check(e.spectra == 0 || self.data.scene.is_some(), || "eval.spectra needs data.scene".into())?;
        check(e.explain_log_points <= 1000 && e.explain_linear_points <= 1000, || "explain schedule too long".into())?;
        for band in [self.bands.train, self.bands.eval].into_iter().flatten() {
            check(band[0] < band[1], || format!("empty subcarrier band {band:?}"))?;
        }
        Ok(())
    }

    /// Canonical TOML rendering; the fingerprint hashes this text.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn directions(&self) -> Vec<Vec3> {
        direction_grid(self.render.az_bins, self.render.el_bins)
    }

    /// Train and eval bands for `k` subcarriers.
    pub fn resolve_bands(&self, k: usize) -> Result<([usize; 2], [usize; 2]), HarnessError> {
        let half = k / 2;
        let train = self.bands.train.unwrap_or([0, half]);
        let eval = self.bands.eval.unwrap_or([half, k]);
        for b in [train, eval] {
            check(b[0] < b[1] && b[1] <= k, || format!("band {b:?} does not fit {k} subcarriers"))?;
        }
        Ok((train, eval))
    }
}

/// Everything needed to rebuild a trained model; stored as the checkpoint's
/// config text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub n_subcarriers: usize,
    pub train_band: [usize; 2],
    pub eval_band: [usize; 2],
    pub bounds: Aabb,
    pub config: RunConfig,
}

impl Setup {
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn text(&self) -> String {
        toml::to_string(self).expect("setup serializes")
    }

    pub fn build_model(&self) -> Result<FieldModel, HarnessError> {
        Ok(FieldModel::new(self.config.model.clone(), self.bounds, self.n_subcarriers)?)
    }

    pub fn checkpoint(&self, model: &FieldModel) -> Checkpoint {
        Checkpoint::from_model(model, &self.fingerprint(), &self.text())
    }

    /// Rebuilds the model stored in `ck`, checking its fingerprint.
    pub fn restore(ck: &Checkpoint) -> Result<(Setup, FieldModel), HarnessError> {
        let setup: Setup = toml::from_str(&ck.config_text)?;
        setup.config.validate()?;
        let expected = setup.fingerprint();
        if expected != ck.fingerprint {
            return Err(HarnessError::Fingerprint { expected, found: ck.fingerprint.clone() });
        }
        let mut model = setup.build_model()?;
        ck.apply(&mut model)?;
        Ok((setup, model))
    }

    pub fn freqs(band: [usize; 2]) -> Vec<usize> {
        (band[0]..band[1]).collect()
    }
}

pub fn load_records(path: &Path) -> Result<Vec<CsiRecord>, HarnessError> {
    Ok(read_records(BufReader::new(std::fs::File::open(path)?))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    Ok(Checkpoint::read_from(BufReader::new(std::fs::File::open(path)?))?)
}

/// `(train, test)` by the records' split field; unlabelled records train.
pub fn split_records(records: &[CsiRecord]) -> (Vec<CsiRecord>, Vec<CsiRecord>) {
    records.iter().cloned().partition(|r| r.split != Some(Split::Test))
}

/// Reference-antenna channel over all subcarriers, preprocessed if asked.
pub fn record_target(rec: &CsiRecord, preprocessing: bool) -> Result<Vec<Complex64>, HarnessError> {
    let h = rec.csi()?;
    let h = if preprocessing { preprocess(&h)? } else { h };
    Ok(h.antenna(0).to_vec())
}

fn band_targets(records: &[CsiRecord], preprocessing: bool, band: [usize; 2]) -> Result<Vec<Vec<Complex64>>, HarnessError> {
    records.iter().map(|r| Ok(record_target(r, preprocessing)?[band[0]..band[1]].to_vec())).collect()
}

/// Room box from the scene file, else the span of all receiver and
/// transmitter positions widened by the receiver margin.
pub fn resolve_bounds(config: &RunConfig, records: &[CsiRecord]) -> Result<Aabb, HarnessError> {
    if let Some(path) = &config.data.scene {
        return Ok(SceneSpec::load(path)?.bounds);
    }
    let mut lo = Vec3([f64::INFINITY; 3]);
    let mut hi = Vec3([f64::NEG_INFINITY; 3]);
    for p in records.iter().flat_map(|r| [r.rx_pos, r.tx_pos]) {
        for i in 0..3 {
            lo.0[i] = lo.0[i].min(p.0[i]);
            hi.0[i] = hi.0[i].max(p.0[i]);
        }
    }
    let b = Aabb::new(lo, hi).padded(RX_MARGIN);
    if !b.is_valid() {
        return Err(HarnessError::Data("cannot derive a room box from the records".into()));
    }
    Ok(b)
}

fn target_tensor(targets: &[&Vec<Complex64>]) -> Tensor {
    let k = targets[0].len();
    let mut data = Vec::with_capacity(targets.len() * 2 * k);
    for t in targets {
        data.extend(t.iter().map(|v| v.re));
        data.extend(t.iter().map(|v| v.im));
    }
    Tensor::matrix(targets.len(), 2 * k, data).expect("target shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub setup: Setup,
    pub model: FieldModel,
    pub log: Vec<EpochLog>,
}

/// Mean squared real/imaginary error in output-scale units, summed over
/// every batch of `links`.
fn batch_loss<'t>(
    model: &FieldModel,
    tape: &'t Tape,
    p: &crate::numerics::Bound<'t>,
    links: &[(Vec3, Vec3)],
    targets: &[&Vec<Complex64>],
    directions: &[Vec3],
    freqs: &[usize],
) -> Result<crate::numerics::Var<'t>, HarnessError> {
    let pred = render_links_var(model, p, tape, links, directions, freqs)?;
    let gt = tape.constant(target_tensor(targets));
    Ok(pred.sub(&gt)?.scale(1.0 / model.output_scale).square()?.mean())
}

fn rms(targets: &[Vec<Complex64>]) -> f64 {
    let n: usize = targets.iter().map(Vec::len).sum();
    let s: f64 = targets.iter().flatten().map(Complex64::norm_sqr).sum();
    (s / n.max(1) as f64).sqrt()
}

/// Trains on the training band of `records` (all of which are used).
pub fn train(
    config: &RunConfig,
    records: &[CsiRecord],
    bounds: Aabb,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if records.is_empty() {
        return Err(HarnessError::Data("no training records".into()));
    }
    let k = records[0].n_subcarriers;
    if records.iter().any(|r| r.n_subcarriers != k) {
        return Err(HarnessError::Data("records disagree on the subcarrier count".into()));
    }
    let (train_band, eval_band) = config.resolve_bands(k)?;
    let setup = Setup { n_subcarriers: k, train_band, eval_band, bounds, config: config.clone() };
    let mut model = setup.build_model()?;
    let targets = band_targets(records, config.data.preprocess, train_band)?;
    let scale = rms(&targets);
    model.output_scale = if scale > 0.0 { scale } else { 1.0 };

    let links: Vec<(Vec3, Vec3)> = records.iter().map(|r| (r.rx_pos, r.tx_pos)).collect();
    let directions = config.directions();
    let freqs = Setup::freqs(train_band);
    let adam = AdamConfig { lr: config.train.learning_rate, ..AdamConfig::default() };
    let mut state = OptimizerState::new(model.store.tensors());
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.train.batch_size).enumerate() {
            let tape = Tape::new();
            let p = model.store.bind(&tape, true);
            let bl: Vec<(Vec3, Vec3)> = batch.iter().map(|&i| links[i]).collect();
            let bt: Vec<&Vec<Complex64>> = batch.iter().map(|&i| &targets[i]).collect();
            let abort = || HarnessError::NonFinite { epoch, step, last_good: Box::new(setup.checkpoint(&model)) };
            let loss = match batch_loss(&model, &tape, &p, &bl, &bt, &directions, &freqs) {
                Err(e) if e.is_numeric() => return Err(abort()),
                other => other?,
            };
            let value = loss.value().data()[0];
            let grads = tape.backward(&loss)?;
            let mut grads = p.gradients(&grads);
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(abort());
            }
            clip_global_norm(&mut grads, config.train.clip_norm);
            drop(p);
            adam_step(model.store.tensors_mut(), &grads, &mut state, &adam)?;
            total += value * batch.len() as f64;
        }
        let entry = EpochLog { epoch, loss: total / records.len() as f64 };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { setup, model, log })
}

/// Training-band loss of `records` in fixed, unshuffled batches.
pub fn dataset_loss(model: &FieldModel, setup: &Setup, records: &[CsiRecord]) -> Result<f64, HarnessError> {
    let targets = band_targets(records, setup.config.data.preprocess, setup.train_band)?;
    let directions = setup.config.directions();
    let freqs = Setup::freqs(setup.train_band);
    let mut total = 0.0;
    for (chunk, t) in records.chunks(setup.config.train.batch_size).zip(targets.chunks(setup.config.train.batch_size)) {
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        let links: Vec<(Vec3, Vec3)> = chunk.iter().map(|r| (r.rx_pos, r.tx_pos)).collect();
        let bt: Vec<&Vec<Complex64>> = t.iter().collect();
        let loss = batch_loss(model, &tape, &p, &links, &bt, &directions, &freqs)?;
        total += loss.value().data()[0] * chunk.len() as f64;
    }
    Ok(total / records.len().max(1) as f64)
}

/// Predicted channels at `band` for each record, in batches.
pub fn predict(model: &FieldModel, setup: &Setup, records: &[CsiRecord], band: [usize; 2]) -> Result<Vec<Vec<Complex64>>, HarnessError> {
    let directions = setup.config.directions();
    let freqs = Setup::freqs(band);
    let k = freqs.len();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(setup.config.train.batch_size) {
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        let links: Vec<(Vec3, Vec3)> = chunk.iter().map(|r| (r.rx_pos, r.tx_pos)).collect();
        let pred = render_links_var(model, &p, &tape, &links, &directions, &freqs)?.to_tensor();
        for r in 0..chunk.len() {
            let row = pred.row(r);
            out.push((0..k).map(|f| Complex64::new(row[f], row[k + f])).collect());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub band: [usize; 2],
    pub snr_db: Vec<f64>,
    pub mean_snr_db: f64,
    pub cdf: Vec<(f64, f64)>,
    /// Mean SNR of predicting the per-subcarrier mean of the reference
    /// records' targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mean_snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_cdf_csv(&self, w: impl std::io::Write) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["snr_db", "fraction"]).map_err(|e| HarnessError::Data(e.to_string()))?;
        for (v, f) in &self.cdf {
            out.write_record([v.to_string(), f.to_string()]).map_err(|e| HarnessError::Data(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions<'a> {
    /// Defaults to the setup's evaluation band.
    pub band: Option<[usize; 2]>,
    pub baseline: Option<&'a [CsiRecord]>,
    pub scene: Option<&'a SceneSpec>,
}

pub fn evaluate(model: &FieldModel, setup: &Setup, records: &[CsiRecord], opts: EvalOptions<'_>) -> Result<EvalReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Data("no evaluation records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.n_subcarriers != setup.n_subcarriers) {
        return Err(HarnessError::Data(format!("record has {} subcarriers, model {}", r.n_subcarriers, setup.n_subcarriers)));
    }
    let band = opts.band.unwrap_or(setup.eval_band);
    if !(band[0] < band[1] && band[1] <= setup.n_subcarriers) {
        return Err(HarnessError::Config(format!("band {band:?} does not fit {} subcarriers", setup.n_subcarriers)));
    }
    let pre = setup.config.data.preprocess;
    let targets = band_targets(records, pre, band)?;
    let preds = predict(model, setup, records, band)?;
    let snr = preds.iter().zip(&targets).map(|(p, t)| snr_db(p, t)).collect::<Result<Vec<_>, _>>()?;
    let mean = snr.iter().sum::<f64>() / snr.len() as f64;
    let baseline = match opts.baseline {
        Some(reference) if !reference.is_empty() => {
            let mean_pred = mean_target(&band_targets(reference, pre, band)?);
            let b = targets.iter().map(|t| snr_db(&mean_pred, t)).collect::<Result<Vec<_>, _>>()?;
            Some(b.iter().sum::<f64>() / b.len() as f64)
        }
        _ => None,
    };
    let ssim_values = match opts.scene {
        Some(scene) if setup.config.eval.spectra > 0 => Some(
            records
                .iter()
                .take(setup.config.eval.spectra)
                .map(|r| spectrum_ssim(model, setup, scene, r))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        _ => None,
    };
    Ok(EvalReport {
        fingerprint: setup.fingerprint(),
        band,
        cdf: cdf(&snr)?,
        snr_db: snr,
        mean_snr_db: mean,
        baseline_mean_snr_db: baseline,
        ssim: ssim_values,
    })
}

/// Per-subcarrier mean of a set of targets.
pub fn mean_target(targets: &[Vec<Complex64>]) -> Vec<Complex64> {
    let k = targets[0].len();
    let n = targets.len() as f64;
    (0..k).map(|f| targets.iter().map(|t| t[f]).sum::<Complex64>() / n).collect()
}

/// SSIM between rendered and oracle spectra, each normalized to unit total.
pub fn spectrum_ssim(model: &FieldModel, setup: &Setup, scene: &SceneSpec, rec: &CsiRecord) -> Result<f64, HarnessError> {
    let (az, el) = (setup.config.eval.az_bins, setup.config.eval.el_bins);
    let mut a = render_spectrum(model, rec.rx_pos, rec.tx_pos, az, el)?;
    let mut b = simulate_spectrum(&scene.with_tx(rec.tx_pos), rec.rx_pos, az, el)?;
    for g in [&mut a, &mut b] {
        let t = g.total();
        if t > 0.0 {
            g.values.iter_mut().for_each(|v| *v /= t);
        }
    }
    Ok(ssim(&a, &b)?)
}

/// Ablation variants of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoResidual,
    NoAttention,
    NoPreprocessing,
    BatchNorm,
    LayerNorm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] =
        [Ablation::Full, Ablation::NoResidual, Ablation::NoAttention, Ablation::NoPreprocessing, Ablation::BatchNorm, Ablation::LayerNorm];

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoResidual => c.model.residual = false,
            Ablation::NoAttention => c.model.attention = false,
            Ablation::NoPreprocessing => c.data.preprocess = false,
            Ablation::BatchNorm => c.model.norm = NormKind::Batch,
            Ablation::LayerNorm => c.model.norm = NormKind::Layer,
        }
        c
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoResidual => "w/o residual",
            Ablation::NoAttention => "w/o attention",
            Ablation::NoPreprocessing => "w/o preprocessing",
            Ablation::BatchNorm => "w batchnorm",
            Ablation::LayerNorm => "w layernorm",
        }
    }
}

pub struct RayExplanation {
    pub jacobian: Tensor,
    pub scores: Vec<f64>,
    pub morf: ImportanceCurve,
    pub lerf: ImportanceCurve,
    pub freqs: Vec<usize>,
}

impl RayExplanation {
    pub fn aopc_morf(&self) -> f64 {
        aopc(&self.morf)
    }

    pub fn aopc_lerf(&self) -> f64 {
        aopc(&self.lerf)
    }
}

/// Ray `index` of a record set enumerates `(record, direction)` pairs,
/// direction fastest.
pub fn explain_ray(model: &FieldModel, setup: &Setup, records: &[CsiRecord], index: usize) -> Result<RayExplanation, HarnessError> {
    let directions = setup.config.directions();
    let (r, d) = (index / directions.len(), index % directions.len());
    let rec = records
        .get(r)
        .ok_or_else(|| HarnessError::Data(format!("ray {index} needs record {r}, only {} available", records.len())))?;
    let c = &setup.config.model;
    let ray = sample_ray(rec.rx_pos, directions[d], rec.tx_pos, c.samples, c.max_depth)?;
    let freqs = Setup::freqs(setup.eval_band);
    let j = jacobian(model, &ray, &freqs)?;
    let scores = importance_scores(&j);
    let sched = mask_schedule(scores.len(), setup.config.eval.explain_log_points, setup.config.eval.explain_linear_points);
    let morf = perturbation_curve(model, &ray, &scores, Order::MoRF, &sched, &freqs)?;
    let lerf = perturbation_curve(model, &ray, &scores, Order::LeRF, &sched, &freqs)?;
    Ok(RayExplanation { jacobian: j, scores, morf, lerf, freqs })
}

pub use explain::{write_curves_csv, write_jacobian_csv};
