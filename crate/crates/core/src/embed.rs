//! Segment embedders: fixed pooled projection, trainable affine+tanh, or
//! rows imported from an external feature extractor.
//!
//! Every backend starts from the same pooled statistics: per-mel-bin mean and
//! standard deviation over the frames of a segment, optionally split into
//! sub-windows and optionally extended by a context margin on each side.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::PcenGram;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::task::SegmentGrid;

/// Rows with a smaller norm are replaced by `e_1` during normalisation.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Pooled,
    Trainable,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pooling {
    /// Number of equal sub-windows whose statistics are concatenated.
    pub sub_windows: usize,
    /// Context added on each side, as a fraction of the segment length.
    pub context: f64,
}

impl Default for Pooling {
    fn default() -> Self {
        Self {
            sub_windows: 1,
            context: 0.0,
        }
    }
}

/// Trainable affine map `tanh(weight * x + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub d: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub seed: u64,
    /// Standardise every mel bin over the whole recording before pooling.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Materialised on first training; otherwise drawn from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineParams>,
    /// External rows; `{role}` is replaced by `support` or `query`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl EmbedderSpec {
    /// Local-detail student: four sub-windows, no context.
    pub fn student_default() -> Self {
        Self {
            kind: EmbedderKind::Pooled,
            d: 64,
            pooling: Pooling {
                sub_windows: 4,
                context: 0.0,
            },
            trainable: false,
            seed: 17,
            affine: None,
            standardize: true,
            path: None,
        }
    }

    /// Long-context teacher: whole-window statistics over the segment
    /// extended by half a segment on each side.
    pub fn teacher_default() -> Self {
        Self {
            kind: EmbedderKind::Pooled,
            d: 64,
            pooling: Pooling {
                sub_windows: 1,
                context: 0.5,
            },
            trainable: false,
            seed: 29,
            affine: None,
            standardize: true,
            path: None,
        }
    }

    pub fn trainable(d: usize, pooling: Pooling, seed: u64) -> Self {
        Self {
            kind: EmbedderKind::Trainable,
            d,
            pooling,
            trainable: true,
            seed,
            affine: None,
            standardize: true,
            path: None,
        }
    }

    pub fn external(d: usize, path: impl Into<PathBuf>) -> Self {
        Self {
            kind: EmbedderKind::External,
            d,
            pooling: Pooling::default(),
            trainable: false,
            seed: 0,
            affine: None,
            standardize: false,
            path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be >= 2".into(),
            ));
        }
        if self.trainable != (self.kind == EmbedderKind::Trainable) {
            return Err(Error::InvalidConfig(
                "only the trainable backend may set trainable=true".into(),
            ));
        }
        if self.kind == EmbedderKind::External && self.path.is_none() {
            return Err(Error::InvalidConfig(
                "external embedder needs a path".into(),
            ));
        }
        if self.pooling.sub_windows == 0 || self.pooling.context < 0.0 {
            return Err(Error::InvalidConfig("invalid pooling".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self, n_mels: usize) -> usize {
        2 * n_mels * self.pooling.sub_windows
    }

    /// Pooled statistics as seen by this embedder.
    pub fn features(&self, gram: &PcenGram, windows: &[(usize, usize)]) -> Array2<f64> {
        if self.standardize {
            pooled_features(&standardize_bins(gram), windows, &self.pooling)
        } else {
            pooled_features(gram, windows, &self.pooling)
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Seeded Gaussian `d x f` matrix with variance `1/f`.
    fn random_matrix(&self, f: usize) -> Array2<f64> {
        let mut rng = self.rng();
        let normal = Normal::new(0.0, 1.0 / (f as f64).sqrt()).expect("valid sigma");
        Array2::from_shape_simple_fn((self.d, f), || normal.sample(&mut rng))
    }

    fn affine_or_init(&self, f: usize) -> AffineParams {
        self.affine.clone().unwrap_or_else(|| AffineParams {
            weight: self.random_matrix(f),
            bias: Array1::zeros(self.d),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub normalized: bool,
    /// Rows replaced by `e_1` because their norm was below [`MIN_ROW_NORM`].
    pub degenerate_rows: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>) -> Self {
        Self {
            rows,
            normalized: false,
            degenerate_rows: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            rows: self.rows.select(Axis(0), indices),
            normalized: self.normalized,
            degenerate_rows: 0,
        }
    }
}

/// Robust per-bin standardisation over all frames: subtract the median and
/// divide by the scaled median absolute deviation. Each bin's scale is floored
/// by the median scale across bins, so bins that sit near zero most of the time
/// do not blow up; constant grams become 0.
pub fn standardize_bins(gram: &PcenGram) -> PcenGram {
    let mut values = gram.values.clone();
    let mut buf = Vec::with_capacity(values.nrows());
    let mut stats = Vec::with_capacity(values.ncols());
    for col in values.columns() {
        buf.clear();
        buf.extend(col.iter().copied());
        let med = median(&mut buf);
        buf.iter_mut().for_each(|v| *v = (*v - med).abs());
        stats.push((med, 1.4826 * median(&mut buf)));
    }
    let mut scales: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let floor = median(&mut scales);
    for (mut col, (med, scale)) in values.columns_mut().into_iter().zip(stats) {
        let scale = scale.max(floor);
        let inv = if scale > 1e-12 { 1.0 / scale } else { 0.0 };
        col.mapv_inplace(|v| (v - med) * inv);
    }
    PcenGram {
        values,
        frame_shift_ms: gram.frame_shift_ms,
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Pooled statistics for absolute frame windows of a PCEN matrix.
///
/// Frames past the end of the recording count as zeros (padding).
pub fn pooled_features(
    gram: &PcenGram,
    windows: &[(usize, usize)],
    pooling: &Pooling,
) -> Array2<f64> {
    let n = gram.n_frames();
    let n_mels = gram.n_mels();
    let k = pooling.sub_windows.max(1);

    // prefix sums of x and x^2 per bin, shifted by the first frame to limit cancellation
    let shift: Vec<f64> = (0..n_mels)
        .map(|m| if n > 0 { gram.values[[0, m]] } else { 0.0 })
        .collect();
    let mut cs = Array2::<f64>::zeros((n + 1, n_mels));
    let mut cs2 = Array2::<f64>::zeros((n + 1, n_mels));
    for t in 0..n {
        for m in 0..n_mels {
            let x = gram.values[[t, m]] - shift[m];
            cs[[t + 1, m]] = cs[[t, m]] + x;
            cs2[[t + 1, m]] = cs2[[t, m]] + x * x;
        }
    }

    let mut out = Array2::zeros((windows.len(), 2 * n_mels * k));
    for (row, &(start, end)) in windows.iter().enumerate() {
        let len = end - start;
        let ext = (pooling.context * len as f64).floor() as usize;
        let lo = start.saturating_sub(ext);
        let hi = end.max((end + ext).min(n));
        for j in 0..k {
            let a = lo + (hi - lo) * j / k;
            let b = (lo + (hi - lo) * (j + 1) / k).max(a + 1);
            let count = (b - a) as f64;
            let (ca, cb) = (a.min(n), b.min(n));
            let base = 2 * n_mels * j;
            let padded = (b - cb) as f64;
            for m in 0..n_mels {
                // padding frames are zeros, i.e. -shift in shifted units
                let sum = cs[[cb, m]] - cs[[ca, m]] - padded * shift[m];
                let sum2 = cs2[[cb, m]] - cs2[[ca, m]] + padded * shift[m] * shift[m];
                let mean = sum / count;
                let var = (sum2 / count - mean * mean).max(0.0);
                out[[row, base + m]] = mean + shift[m];
                out[[row, base + n_mels + m]] = var.sqrt();
            }
        }
    }
    out
}

fn affine_tanh(features: ArrayView2<f64>, p: &AffineParams) -> Array2<f64> {
    let mut h = features.dot(&p.weight.t());
    h += &p.bias;
    h.mapv_inplace(f64::tanh);
    h
}

/// Embed absolute frame windows with a non-external backend.
pub fn embed_windows(
    spec: &EmbedderSpec,
    gram: &PcenGram,
    windows: &[(usize, usize)],
) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    let f = spec.feature_dim(gram.n_mels());
    let feats = spec.features(gram, windows);
    let rows = match spec.kind {
        EmbedderKind::Pooled => feats.dot(&spec.random_matrix(f).t()),
        EmbedderKind::Trainable => {
            let p = spec.affine_or_init(f);
            if p.weight.dim() != (spec.d, f) {
                return Err(Error::DimensionMismatch {
                    expected: f,
                    got: p.weight.ncols(),
                });
            }
            affine_tanh(feats.view(), &p)
        }
        EmbedderKind::External => {
            return Err(Error::InvalidConfig(
                "external embeddings are read per grid, not per window".into(),
            ))
        }
    };
    Ok(EmbeddingMatrix::new(rows))
}

/// One row per grid segment, not yet normalised.
pub fn embed(spec: &EmbedderSpec, gram: &PcenGram, grid: &SegmentGrid) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    match spec.kind {
        EmbedderKind::External => {
            let template = spec.path.as_ref().expect("validated").to_string_lossy();
            let path = template.replace("{role}", grid.role.as_str());
            import_external_embeddings(&path, grid.len(), spec.d)
        }
        _ => embed_windows(spec, gram, &grid.absolute()),
    }
}

/// Divide every row by its Euclidean norm; near-zero rows become `e_1`.
pub fn l2_normalize(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut rows = m.rows.clone();
    let mut degenerate = 0;
    for mut row in rows.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < MIN_ROW_NORM {
            row.fill(0.0);
            row[0] = 1.0;
            degenerate += 1;
        } else {
            row /= norm;
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} zero-norm embedding rows mapped to e_1");
    }
    EmbeddingMatrix {
        rows,
        normalized: true,
        degenerate_rows: degenerate,
    }
}

/// Embed and normalise in one call.
pub fn embed_normalized(
    spec: &EmbedderSpec,
    gram: &PcenGram,
    grid: &SegmentGrid,
) -> Result<EmbeddingMatrix> {
    embed(spec, gram, grid).map(|m| l2_normalize(&m))
}

// ---------------------------------------------------------------------------
// training

/// Frame windows of one recording with class labels (0 = positive, 1 = negative).
#[derive(Debug, Clone)]
pub struct LabeledWindows {
    pub gram: PcenGram,
    pub windows: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl LabeledWindows {
    fn has_both_classes(&self) -> (bool, bool) {
        (self.labels.contains(&0), self.labels.contains(&1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy per epoch (or per step for fine-tuning).
    pub losses: Vec<f64>,
    /// Set when training was skipped.
    pub notice: Option<String>,
}

/// Embedder plus a two-way linear head, flattened for the optimiser.
///
/// Layout: `weight (d x f) | bias (d) | head (2 x d) | head_bias (2)`.
#[derive(Debug, Clone)]
pub struct HeadNet {
    pub d: usize,
    pub f: usize,
    pub params: Vec<f64>,
}

impl HeadNet {
    pub fn new(affine: &AffineParams, seed: u64) -> Self {
        let (d, f) = affine.weight.dim();
        let mut params = Vec::with_capacity(d * f + 3 * d + 2);
        params.extend(affine.weight.iter());
        params.extend(affine.bias.iter());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_4EAD);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid sigma");
        params.extend((0..2 * d).map(|_| normal.sample(&mut rng)));
        params.extend([0.0, 0.0]);
        Self { d, f, params }
    }

    pub fn affine(&self) -> AffineParams {
        let (d, f) = (self.d, self.f);
        AffineParams {
            weight: Array2::from_shape_vec((d, f), self.params[..d * f].to_vec()).expect("layout"),
            bias: Array1::from_vec(self.params[d * f..d * f + d].to_vec()),
        }
    }

    fn views(&self) -> (ArrayView2<'_, f64>, &[f64], ArrayView2<'_, f64>, &[f64]) {
        let (d, f) = (self.d, self.f);
        let p = &self.params;
        let w = ArrayView2::from_shape((d, f), &p[..d * f]).expect("layout");
        let b = &p[d * f..d * f + d];
        let v = ArrayView2::from_shape((2, d), &p[d * f + d..d * f + 3 * d]).expect("layout");
        let c = &p[d * f + 3 * d..];
        (w, b, v, c)
    }

    /// Mean softmax cross-entropy over the batch; writes the gradient when asked.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: &[usize], grad: Option<&mut [f64]>) -> f64 {
        let (w, b, v, c) = self.views();
        let n = x.nrows() as f64;
        let mut h = x.dot(&w.t());
        for mut row in h.rows_mut() {
            row.iter_mut()
                .zip(b)
                .for_each(|(hv, bv)| *hv = (*hv + bv).tanh());
        }
        let mut logits = h.dot(&v.t());
        let mut loss = 0.0;
        for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
            let (a0, a1) = (row[0] + c[0], row[1] + c[1]);
            let mx = a0.max(a1);
            let lse = mx + ((a0 - mx).exp() + (a1 - mx).exp()).ln();
            let target = if y[i] == 0 { a0 } else { a1 };
            loss += lse - target;
            // reuse the row for dL/dlogits
            row[0] = ((a0 - lse).exp() - (y[i] == 0) as u8 as f64) / n;
            row[1] = ((a1 - lse).exp() - (y[i] == 1) as u8 as f64) / n;
        }

        if let Some(g) = grad {
            let (d, f) = (self.d, self.f);
            let dlogits = logits;
            let dv = dlogits.t().dot(&h);
            let dc = dlogits.sum_axis(Axis(0));
            let mut dpre = dlogits.dot(&v);
            dpre.zip_mut_with(&h, |dp, hv| *dp *= 1.0 - hv * hv);
            let dw = dpre.t().dot(&x);
            let db = dpre.sum_axis(Axis(0));
            g[..d * f]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(o, v)| *o = *v);
            g[d * f..d * f + d]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(o, v)| *o = *v);
            g[d * f + d..d * f + 3 * d]
                .iter_mut()
                .zip(dv.iter())
                .for_each(|(o, v)| *o = *v);
            g[d * f + 3 * d..]
                .iter_mut()
                .zip(dc.iter())
                .for_each(|(o, v)| *o = *v);
        }
        loss / n
    }
}

fn require_trainable(spec: &EmbedderSpec) -> Result<()> {
    spec.validate()?;
    if spec.kind != EmbedderKind::Trainable {
        return Err(Error::InvalidConfig(format!(
            "{:?} embedder has no trainable parameters",
            spec.kind
        )));
    }
    Ok(())
}

/// Cross-entropy pretraining of a trainable embedder with a throwaway linear head.
pub fn pretrain_embedder(
    corpus: &[LabeledWindows],
    spec: &EmbedderSpec,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(EmbedderSpec, TrainLog)> {
    require_trainable(spec)?;
    let (mut any_pos, mut any_neg) = (false, false);
    for item in corpus {
        let (p, n) = item.has_both_classes();
        any_pos |= p;
        any_neg |= n;
    }
    if !(any_pos && any_neg) {
        return Err(Error::SingleClassCorpus);
    }
    if epochs == 0 || lr == 0.0 {
        return Ok((spec.clone(), TrainLog::default()));
    }

    let n_mels = corpus[0].gram.n_mels();
    let f = spec.feature_dim(n_mels);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for item in corpus {
        if item.gram.n_mels() != n_mels {
            return Err(Error::DimensionMismatch {
                expected: n_mels,
                got: item.gram.n_mels(),
            });
        }
        feats.push(spec.features(&item.gram, &item.windows));
        labels.extend_from_slice(&item.labels);
    }
    let views: Vec<_> = feats.iter().map(|a| a.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("same width");

    let mut net = HeadNet::new(&spec.affine_or_init(f), seed);
    let mut opt = Adam::new(net.params.len(), lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut grad = vec![0.0; net.params.len()];
    let batch = batch_size.max(1);
    let mut log = TrainLog::default();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            total += net.loss_and_grad(xb.view(), &yb, Some(&mut grad)) * chunk.len() as f64;
            opt.step(&mut net.params, &grad);
        }
        log.losses.push(total / x.nrows() as f64);
    }
    let mut out = spec.clone();
    out.affine = Some(net.affine());
    Ok((out, log))
}

/// Full-batch binary fine-tuning on the support windows of one episode.
///
/// Non-trainable backends and single-class support sets are returned unchanged
/// with a notice.
pub fn finetune_on_support(
    spec: &EmbedderSpec,
    support: &LabeledWindows,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<(EmbedderSpec, TrainLog)> {
    spec.validate()?;
    let skip = |why: &str| {
        log::info!("fine-tuning skipped: {why}");
        Ok((
            spec.clone(),
            TrainLog {
                losses: Vec::new(),
                notice: Some(why.to_string()),
            },
        ))
    };
    if spec.kind != EmbedderKind::Trainable {
        return skip("embedder is not trainable");
    }
    if !matches!(support.has_both_classes(), (true, true)) {
        return skip("support set lacks one of the classes");
    }
    if steps == 0 || lr == 0.0 {
        return Ok((spec.clone(), TrainLog::default()));
    }
    let f = spec.feature_dim(support.gram.n_mels());
    let x = spec.features(&support.gram, &support.windows);
    let mut net = HeadNet::new(&spec.affine_or_init(f), seed);
    let mut opt = Adam::new(net.params.len(), lr);
    let mut grad = vec![0.0; net.params.len()];
    let mut log = TrainLog::default();
    for _ in 0..steps {
        log.losses
            .push(net.loss_and_grad(x.view(), &support.labels, Some(&mut grad)));
        opt.step(&mut net.params, &grad);
    }
    let mut out = spec.clone();
    out.affine = Some(net.affine());
    Ok((out, log))
}

// ---------------------------------------------------------------------------
// external embedding files

const EMBD_MAGIC: &[u8; 4] = b"EMBD";

/// Binary layout: `"EMBD"`, u32 rows, u32 d, f32 row-major little endian.
pub fn write_embeddings_bin(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + 4 * m.len());
    bytes.extend_from_slice(EMBD_MAGIC);
    bytes.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Headerless CSV, one row per segment.
pub fn write_embeddings_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an `EMBD` binary or CSV embedding file and check its shape.
pub fn import_external_embeddings(
    path: impl AsRef<Path>,
    expected_rows: usize,
    d: usize,
) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let (rows, cols, data) = if bytes.starts_with(EMBD_MAGIC) {
        if bytes.len() < 12 {
            return Err(Error::CorruptHeader("truncated EMBD header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (rows, cols) = (word(4), word(8));
        if bytes.len() != 12 + 4 * rows * cols {
            return Err(Error::CorruptHeader(format!(
                "EMBD payload does not match {rows}x{cols}"
            )));
        }
        let data: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        (rows, cols, data)
    } else {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(bytes.as_slice());
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for rec in rdr.records() {
            let rec = rec?;
            match cols {
                None => cols = Some(rec.len()),
                Some(c) if c != rec.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: c,
                        got: rec.len(),
                    })
                }
                _ => {}
            }
            for (j, field) in rec.iter().enumerate() {
                let v = field.parse::<f64>().map_err(|_| Error::MalformedRow {
                    row: rows,
                    reason: format!("column {j}: {field:?} is not a number"),
                })?;
                data.push(v);
            }
            rows += 1;
        }
        (rows, cols.unwrap_or(d), data)
    };

    if cols != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: cols,
        });
    }
    if rows != expected_rows {
        return Err(Error::RowCountMismatch {
            expected: expected_rows,
            got: rows,
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: i / d,
            col: i % d,
        });
    }
    let m = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
    Ok(EmbeddingMatrix::new(m))
}

/// Slice of rows `[from, to)`.
pub fn rows_range(m: &EmbeddingMatrix, from: usize, to: usize) -> EmbeddingMatrix {
    EmbeddingMatrix {
        rows: m.rows.slice(s![from..to, ..]).to_owned(),
        normalized: m.normalized,
        degenerate_rows: 0,
    }
}
