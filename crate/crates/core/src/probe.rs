//! Downstream probe: a small classification head on top of the pretrained
//! encoder, trained either end to end or with the encoder frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::{self, Image, MaeArchitecture, MaeError};
use crate::optim::{Adam, OptimError, Optimizer};
use crate::partition::{apply_domain_shift, generate_image, CorpusSpec, DomainShift};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::weights::checksum;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("labeled data needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("empty confusion matrix")]
    EmptyConfusion,
    #[error("confusion matrix must be square")]
    NotSquare,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0} images but {1} labels")]
    Mismatch(usize, usize),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] MaeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Full,
    Frozen,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Full => "full",
            ProbeMode::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    TwoLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub head: HeadKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Encoder learning rate relative to `lr` in full mode.
    pub encoder_lr_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Full,
            head: HeadKind::Linear,
            hidden: 16,
            epochs: 20,
            lr: 1e-2,
            encoder_lr_scale: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(ProbeError::Mismatch(images.len(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(ProbeError::Label {
                label: l,
                classes: n_classes,
            });
        }
        Ok(LabeledSet {
            images,
            labels,
            n_classes,
        })
    }

    fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.n_classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().filter(|s| **s).count()
    }
}

/// Held-out generator images labeled by family, each passed through a
/// randomly chosen site shift from `shifts`.
pub fn synthetic_task(
    spec: &CorpusSpec,
    first_index: usize,
    n: usize,
    shifts: &[DomainShift],
    seed: u64,
) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, fam) = generate_image(spec, first_index + i);
        let img = if shifts.is_empty() {
            img
        } else {
            apply_domain_shift(&img, &shifts[rng.random_range(0..shifts.len())])
        };
        images.push(img);
        labels.push(fam);
    }
    LabeledSet {
        images,
        labels,
        n_classes: spec.families.max(1),
    }
}

pub fn head_param_count(head: HeadKind, d: usize, hidden: usize, classes: usize) -> usize {
    match head {
        HeadKind::Linear => d * classes + classes,
        HeadKind::TwoLayer => d * hidden + hidden + hidden * classes + classes,
    }
}

fn init_head(
    head: HeadKind,
    d: usize,
    hidden: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(head_param_count(head, d, hidden, classes));
    let mut layer = |out: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    };
    match head {
        HeadKind::Linear => layer(&mut out, d, classes),
        HeadKind::TwoLayer => {
            layer(&mut out, d, hidden);
            layer(&mut out, hidden, classes);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn head_logits(
    g: &mut Graph,
    weights: &[f64],
    offset: usize,
    x: Var,
    head: HeadKind,
    d: usize,
    hidden: usize,
    classes: usize,
) -> Result<Var> {
    let dense = |g: &mut Graph, x: Var, at: usize, i: usize, o: usize| -> Result<Var> {
        let w = g.param(weights, at, vec![i, o])?;
        let b = g.param(weights, at + i * o, vec![o])?;
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    };
    match head {
        HeadKind::Linear => dense(g, x, offset, d, classes),
        HeadKind::TwoLayer => {
            let h = dense(g, x, offset, d, hidden)?;
            let h = g.gelu(h)?;
            dense(g, h, offset + d * hidden + hidden, hidden, classes)
        }
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (r, c) = (logits.rows(), logits.cols());
    let mut grad = vec![0.0; r * c];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..c {
            let p = (row[j] - m).exp() / z;
            grad[i * c + j] = (p - if j == y { 1.0 } else { 0.0 }) / r as f64;
        }
    }
    (loss / r as f64, Tensor::matrix(r, c, grad).expect("shape"))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Mean over classes of `2PR / (P + R)`, rows = truth, columns = prediction.
/// Undefined precision or recall counts as zero, and a class with
/// `P + R = 0` contributes zero while still counting toward the mean.
pub fn f1_macro(confusion: &[Vec<usize>]) -> Result<f64> {
    let k = confusion.len();
    if k == 0 {
        return Err(ProbeError::EmptyConfusion);
    }
    if confusion.iter().any(|r| r.len() != k) {
        return Err(ProbeError::NotSquare);
    }
    let mut total = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let p = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        if p + r > 0.0 {
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub head: HeadKind,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub final_train_loss: f64,
    pub encoder_checksum_pre: u64,
    pub encoder_checksum_post: u64,
    pub head_weights: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

fn features(encoder: &[f64], arch: &MaeArchitecture, images: &[&Image]) -> Result<Tensor> {
    let mut g = Graph::new(encoder.len());
    let f = mae::encoder_features(&mut g, encoder, arch, images)?;
    Ok(g.value(f).clone())
}

/// Trains a head on `train` and scores it on `test`.
///
/// `model` is a full autoencoder parameter vector; only its encoder prefix
/// is used. In frozen mode the encoder is never written.
pub fn run_probe(
    model: &[f64],
    arch: &MaeArchitecture,
    cfg: &ProbeConfig,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<ProbeReport> {
    let found = train.distinct_labels();
    if found < 2 {
        return Err(ProbeError::SingleClass(found));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(ProbeError::Config(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    if cfg.head == HeadKind::TwoLayer && cfg.hidden == 0 {
        return Err(ProbeError::Config("two-layer head needs hidden > 0".into()));
    }
    let expected = mae::count_params(arch);
    if model.len() != expected {
        return Err(MaeError::ParamCount {
            expected,
            got: model.len(),
        }
        .into());
    }
    let classes = train.n_classes.max(test.n_classes);
    let enc_len = mae::encoder_param_count(arch);
    let d = arch.encoder_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head_len = head_param_count(cfg.head, d, cfg.hidden, classes);
    let mut weights = model[..enc_len].to_vec();
    weights.extend(init_head(cfg.head, d, cfg.hidden, classes, &mut rng));
    let pre = checksum(&weights[..enc_len]);

    let mut head_opt = Adam::new(head_len);
    let mut enc_opt = Adam::new(enc_len);
    let frozen_features = match cfg.mode {
        ProbeMode::Frozen => {
            let refs: Vec<&Image> = train.images.iter().collect();
            Some(
                refs.chunks(64)
                    .map(|c| features(&weights[..enc_len], arch, c))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        ProbeMode::Full => None,
    };
    let frozen_row = |i: usize| -> &[f64] {
        let f = frozen_features.as_ref().expect("frozen features");
        f[i / 64].row(i % 64)
    };

    let mut order: Vec<usize> = (0..train.images.len()).collect();
    let mut last_loss = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            match cfg.mode {
                ProbeMode::Frozen => {
                    let rows: Vec<f64> =
                        batch.iter().flat_map(|&i| frozen_row(i).to_vec()).collect();
                    let mut g = Graph::new(head_len);
                    let x = g.input(Tensor::matrix(batch.len(), d, rows)?)?;
                    let logits = head_logits(
                        &mut g,
                        &weights[enc_len..],
                        0,
                        x,
                        cfg.head,
                        d,
                        cfg.hidden,
                        classes,
                    )?;
                    let (loss, dl) = cross_entropy(g.value(logits), &labels);
                    let grad = g.backward(logits, &dl)?;
                    head_opt.step(&mut weights[enc_len..], &grad, cfg.lr)?;
                    sum += loss * batch.len() as f64;
                }
                ProbeMode::Full => {
                    let imgs: Vec<&Image> = batch.iter().map(|&i| &train.images[i]).collect();
                    let mut g = Graph::new(weights.len());
                    let x = mae::encoder_features(&mut g, &weights, arch, &imgs)?;
                    let logits = head_logits(
                        &mut g, &weights, enc_len, x, cfg.head, d, cfg.hidden, classes,
                    )?;
                    let (loss, dl) = cross_entropy(g.value(logits), &labels);
                    let grad = g.backward(logits, &dl)?;
                    enc_opt.step(
                        &mut weights[..enc_len],
                        &grad[..enc_len],
                        cfg.lr * cfg.encoder_lr_scale,
                    )?;
                    head_opt.step(&mut weights[enc_len..], &grad[enc_len..], cfg.lr)?;
                    sum += loss * batch.len() as f64;
                }
            }
        }
        last_loss = sum / train.images.len() as f64;
    }

    let test_refs: Vec<&Image> = test.images.iter().collect();
    let mut pred = Vec::with_capacity(test.images.len());
    for chunk in test_refs.chunks(64) {
        let f = features(&weights[..enc_len], arch, chunk)?;
        let mut g = Graph::new(head_len);
        let x = g.input(f)?;
        let logits = head_logits(
            &mut g,
            &weights[enc_len..],
            0,
            x,
            cfg.head,
            d,
            cfg.hidden,
            classes,
        )?;
        let lv = g.value(logits);
        pred.extend((0..chunk.len()).map(|r| argmax(lv.row(r))));
    }
    let correct = pred
        .iter()
        .zip(&test.labels)
        .filter(|(p, t)| p == t)
        .count();
    let confusion = confusion_matrix(&test.labels, &pred, classes);
    Ok(ProbeReport {
        mode: cfg.mode,
        head: cfg.head,
        seed: cfg.seed,
        epochs: cfg.epochs,
        accuracy: if pred.is_empty() {
            0.0
        } else {
            correct as f64 / pred.len() as f64
        },
        f1_macro: f1_macro(&confusion)?,
        final_train_loss: last_loss,
        encoder_checksum_pre: pre,
        encoder_checksum_post: checksum(&weights[..enc_len]),
        head_weights: weights[enc_len..].to_vec(),
        confusion,
    })
}

pub const PROBE_CSV_HEADER: &str =
    "mode,seed,accuracy,f1_macro,epochs,encoder_checksum_pre,encoder_checksum_post";

pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:016x},{:016x}\n",
            r.mode.name(),
            r.seed,
            r.accuracy,
            r.f1_macro,
            r.epochs,
            r.encoder_checksum_pre,
            r.encoder_checksum_post
        ));
    }
    out
}
