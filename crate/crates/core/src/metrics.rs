//! Identity retrieval and similarity, factor-regression attribute errors,
//! temporal identity flicker (VIDD), a Fréchet distance on toy video
//! features, and ridge probes.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensors_hash, Archive};
use crate::dil::IdentityEncoder;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, ResBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{l2_normalize, scalar, to_f64_vec};
use crate::videodata::{generate_synthetic_clip, sample_factors_and_motion, IdentityCodebook, SyntheticFactors, VideoClip};

const CHUNK: usize = 64;

/// Unit-norm identity embeddings of `[N, 3, H, W]` frames, in chunks.
pub fn embed_frames(encoder: &IdentityEncoder, frames: &Tensor) -> Result<Tensor> {
    let n = frames.dim(0)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let k = CHUNK.min(n - i);
        out.push(encoder.embed_global(&frames.narrow(0, i, k)?.to_dtype(DType::F32)?)?.detach());
        i += k;
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Normalized mean of a clip's frame embeddings, `[D]`.
pub fn clip_embedding(encoder: &IdentityEncoder, clip: &VideoClip) -> Result<Tensor> {
    mean_direction(&embed_frames(encoder, &clip.frames)?)
}

fn mean_direction(e: &Tensor) -> Result<Tensor> {
    l2_normalize(&e.mean_keepdim(0)?)?.squeeze(0).map_err(Into::into)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = t.dims2()?;
    let flat = to_f64_vec(t)?;
    Ok((0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-12)
}

/// Identity centroids to retrieve against.
#[derive(Debug, Clone)]
pub struct Gallery {
    ids: Vec<u32>,
    centroids: Vec<Vec<f64>>,
}

impl Gallery {
    /// One centroid per identity from `[n_i, D]` embedding sets.
    pub fn new(ids: Vec<u32>, embeddings: &[Tensor]) -> Result<Self> {
        if ids.is_empty() || ids.len() != embeddings.len() {
            return Err(Error::invalid("gallery", "needs one embedding set per identity"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::invalid("gallery", "duplicate identity"));
        }
        let centroids = embeddings
            .iter()
            .map(|e| to_f64_vec(&mean_direction(e)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ids, centroids })
    }

    /// Centroids from `renders` random single-frame renders of each codebook identity.
    pub fn from_codebook(
        encoder: &IdentityEncoder,
        codebook: &IdentityCodebook,
        ids: &[u32],
        renders: usize,
        seed: u64,
    ) -> Result<Self> {
        let size = encoder.config().input_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sets = Vec::with_capacity(ids.len());
        for &id in ids {
            let faces = (0..renders.max(1))
                .map(|_| crate::dil::random_face(codebook, id, size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            sets.push(embed_frames(encoder, &Tensor::stack(&faces, 0)?)?);
        }
        Self::new(ids.to_vec(), &sets)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Identity of the most cosine-similar centroid; ties go to the smaller id.
    pub fn nearest(&self, embedding: &[f64]) -> u32 {
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (id, c) in self.ids.iter().zip(&self.centroids) {
            let s = cos(embedding, c);
            if s > best.0 || (s == best.0 && *id < best.1) {
                best = (s, *id);
            }
        }
        best.1
    }

    /// A copy with identities in another order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            centroids: order.iter().map(|&i| self.centroids[i].clone()).collect(),
        }
    }
}

/// Fraction of `[N, D]` embeddings whose nearest centroid is the true identity.
pub fn retrieval_accuracy(embeddings: &Tensor, truth: &[u32], gallery: &Gallery) -> Result<f64> {
    let e = rows(embeddings)?;
    if e.is_empty() || e.len() != truth.len() {
        return Err(Error::Empty("retrieval inputs"));
    }
    if let Some(t) = truth.iter().find(|t| !gallery.ids.contains(t)) {
        return Err(Error::invalid("gallery", format!("identity {t} missing from the gallery")));
    }
    let hits = e.iter().zip(truth).filter(|(x, &t)| gallery.nearest(x) == t).count();
    Ok(hits as f64 / e.len() as f64)
}

/// Identity retrieval accuracy of swapped clips against their source identities.
pub fn id_retrieval(encoder: &IdentityEncoder, results: &[(&VideoClip, u32)], gallery: &Gallery) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("retrieval results"));
    }
    let e = results
        .iter()
        .map(|(c, _)| clip_embedding(encoder, c))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<u32> = results.iter().map(|(_, id)| *id).collect();
    retrieval_accuracy(&Tensor::stack(&e, 0)?, &truth, gallery)
}

/// Mean cosine between each frame's embedding and a source embedding `[D]`.
pub fn id_similarity(encoder: &IdentityEncoder, clip: &VideoClip, source_embedding: &Tensor) -> Result<f64> {
    let src = to_f64_vec(source_embedding)?;
    let e = rows(&embed_frames(encoder, &clip.frames)?)?;
    Ok(e.iter().map(|x| cos(x, &src)).sum::<f64>() / e.len() as f64)
}

/// `1 − cos` between consecutive frame embeddings of `[F, D]`.
pub fn vidd_trace(embeddings: &Tensor) -> Result<Vec<f64>> {
    let e = rows(embeddings)?;
    if e.len() < 2 {
        return Err(Error::invalid("vidd", format!("needs at least 2 frames, got {}", e.len())));
    }
    Ok(e.windows(2).map(|w| 1.0 - cos(&w[0], &w[1])).collect())
}

pub fn vidd_from_embeddings(embeddings: &Tensor) -> Result<f64> {
    let t = vidd_trace(embeddings)?;
    Ok(t.iter().sum::<f64>() / t.len() as f64)
}

/// Mean identity-embedding distance between consecutive frames.
pub fn vidd(encoder: &IdentityEncoder, clip: &VideoClip) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::invalid("vidd", format!("needs at least 2 frames, got {}", clip.len())));
    }
    vidd_from_embeddings(&embed_frames(encoder, &clip.frames)?)
}

/// Per-factor mean absolute errors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeErrors {
    pub pose: f64,
    pub lighting: f64,
    pub expression: f64,
}

impl AttributeErrors {
    pub fn mean(&self) -> f64 {
        (self.pose + self.lighting + self.expression) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub input_size: usize,
    pub widths: [usize; 3],
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: [16, 24, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Small CNN estimating `(pose, lighting, expression)` from a frame.
pub struct FactorRegressor {
    config: RegressorConfig,
    store: ParamStore,
    convs: Vec<(Conv2d, ResBlock)>,
    head: Linear,
}

impl FactorRegressor {
    pub fn init(config: RegressorConfig, seed: u64) -> Result<Self> {
        Self::build(ParamStore::new(DType::F32, seed), config)
    }

    fn build(store: ParamStore, config: RegressorConfig) -> Result<Self> {
        if config.input_size == 0 || config.input_size % 16 != 0 {
            return Err(Error::invalid("regressor.input_size", "must be a positive multiple of 16"));
        }
        let p = store.root().pp("regressor");
        let mut convs = Vec::new();
        let mut prev = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let q = p.pp(format!("stage{i}"));
            convs.push((Conv2d::new(&q.pp("down"), prev, w, 3, 2, 1)?, ResBlock::new(&q.pp("res"), w, w, None)?));
            prev = w;
        }
        let head = Linear::new(&p.pp("head"), prev, 3)?;
        Ok(Self {
            config,
            store,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    /// `[N, 3, S, S]` → `[N, 3]` as `(pose, lighting, expression)`; differentiable.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != s || d[3] != s {
            return Err(Error::invalid("regressor input", format!("expected [N, 3, {s}, {s}], got {d:?}")));
        }
        let mut h = x.to_dtype(DType::F32)?.avg_pool2d(2)?;
        for (down, res) in &self.convs {
            h = res.forward(&down.forward(&h)?, None)?;
        }
        self.head.forward(&h.mean(3)?.mean(2)?)
    }

    /// Predictions for every frame of `[N, 3, S, S]`, as rows.
    pub fn predict(&self, frames: &Tensor) -> Result<Vec<[f64; 3]>> {
        let n = frames.dim(0)?;
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let k = CHUNK.min(n - i);
            let p = to_f64_vec(&self.forward(&frames.narrow(0, i, k)?)?.detach())?;
            out.extend(p.chunks(3).map(|c| [c[0], c[1], c[2]]));
            i += k;
        }
        Ok(out)
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::build(ParamStore::frozen(self.store.tensors(), DType::F32)?, self.config.clone())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new().with_meta("regressor", &self.config)?;
        a.extend(self.store.tensors());
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Self::build(ParamStore::frozen(a.tensors.clone(), DType::F32)?, a.meta("regressor")?)
    }

    pub fn weights_hash(&self) -> Result<String> {
        tensors_hash(&self.store.tensors())
    }
}

fn factor_targets(f: &SyntheticFactors) -> [f64; 3] {
    [f.pose as f64, f.lighting as f64, f.expression as f64]
}

/// Random single-frame renders with their factors.
pub fn labelled_renders<R: Rng>(
    codebook: &IdentityCodebook,
    identities: usize,
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<SyntheticFactors>)> {
    let mut faces = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    for _ in 0..count {
        let id = rng.gen_range(0..identities.clamp(1, codebook.len())) as u32;
        let (f, _) = sample_factors_and_motion(rng, id, 1);
        let clip = generate_synthetic_clip(codebook, &f, &[], 1, (size, size), rng.gen())?;
        faces.push(clip.frame(0)?);
        factors.push(f);
    }
    Ok((Tensor::stack(&faces, 0)?.to_dtype(DType::F32)?, factors))
}

/// MSE regression of the synthetic factors on random renders; returns the
/// frozen regressor and the loss curve.
pub fn pretrain_factor_regressor(
    config: RegressorConfig,
    train: &RegressorTrainConfig,
    codebook: &IdentityCodebook,
) -> Result<(FactorRegressor, Vec<f64>)> {
    let reg = FactorRegressor::init(config.clone(), train.seed)?;
    let mut opt = AdamW::new(
        reg.store.vars(),
        AdamWConfig {
            lr: train.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let (x, factors) = labelled_renders(codebook, codebook.len(), train.batch, config.input_size, &mut rng)?;
        let y: Vec<f32> = factors.iter().flat_map(|f| factor_targets(f).map(|v| v as f32)).collect();
        let y = Tensor::from_vec(y, (train.batch, 3), &Device::Cpu)?;
        let loss = (reg.forward(&x)? - y)?.sqr()?.mean_all()?;
        let progress = step as f64 / train.steps.max(1) as f64;
        opt.set_lr(train.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step(&loss.backward()?)?;
        losses.push(scalar(&loss)?);
    }
    Ok((reg.frozen()?, losses))
}

/// Mean absolute error of regressed factors of `outputs` against the target factors.
pub fn attribute_errors(regressor: &FactorRegressor, results: &[(&VideoClip, &[SyntheticFactors])]) -> Result<AttributeErrors> {
    if results.is_empty() {
        return Err(Error::Empty("attribute results"));
    }
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (clip, truth) in results {
        if truth.len() != clip.len() {
            return Err(Error::invalid("factors", format!("{} factor rows for {} frames", truth.len(), clip.len())));
        }
        for (p, t) in regressor.predict(&clip.frames)?.iter().zip(truth.iter()) {
            let t = factor_targets(t);
            for k in 0..3 {
                sum[k] += (p[k] - t[k]).abs();
            }
            n += 1;
        }
    }
    Ok(AttributeErrors {
        pose: sum[0] / n as f64,
        lighting: sum[1] / n as f64,
        expression: sum[2] / n as f64,
    })
}

/// Seed of the pinned random-feature video extractor.
pub const FVD_EXTRACTOR_SEED: u64 = 0xF1D;

/// Frozen random-weight spatio-temporal feature extractor.
pub struct FvdExtractor {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl FvdExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let init = ParamStore::new(DType::F32, seed);
        Self::build(init.clone())?;
        Self::build(ParamStore::frozen(init.tensors(), DType::F32)?)
    }

    fn build(store: ParamStore) -> Result<Self> {
        let p = store.root().pp("fvd");
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), 3, 16, 3, 2, 1)?,
            conv2: Conv2d::new(&p.pp("conv2"), 16, 16, 3, 2, 1)?,
            conv3: Conv2d::new(&p.pp("conv3"), 16, 16, 3, 2, 1)?,
            store,
        })
    }

    pub fn pinned() -> Result<Self> {
        Self::new(FVD_EXTRACTOR_SEED)
    }

    pub fn weights_hash(&self) -> Result<String> {
        tensors_hash(&self.store.tensors())
    }

    /// Per-clip feature vector: spatial means of three conv levels, their
    /// temporal standard deviation, and mean absolute frame differences.
    pub fn features(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let x = clip.frames.to_dtype(DType::F32)?;
        let f = x.dim(0)?;
        let mut out = Vec::new();
        let mut h = x;
        for conv in [&self.conv1, &self.conv2, &self.conv3] {
            h = conv.forward(&h)?.relu()?;
            let m = h.mean(3)?.mean(2)?;
            out.extend(to_f64_vec(&m.mean(0)?)?);
            let centered = m.broadcast_sub(&m.mean_keepdim(0)?)?;
            out.extend(to_f64_vec(&centered.sqr()?.mean(0)?.sqrt()?)?);
            if f > 1 {
                let d = (h.narrow(0, 1, f - 1)? - h.narrow(0, 0, f - 1)?)?.abs()?;
                out.extend(to_f64_vec(&d.mean(3)?.mean(2)?.mean(0)?)?);
            } else {
                out.extend(std::iter::repeat(0.0).take(h.dim(1)?));
            }
        }
        Ok(out)
    }
}

/// Diagonal regularization added to both covariances.
pub const FRECHET_EPS: f64 = 1e-6;

fn gaussian(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("fvd", format!("needs at least 2 clips per side, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("fvd", "feature lengths differ"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64 + DMatrix::identity(d, d) * FRECHET_EPS;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^½)` between Gaussian fits.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian(a)?;
    let (mu_b, cov_b) = gaussian(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid("fvd", "feature lengths differ"));
    }
    let ra = psd_sqrt(&cov_a);
    let rb = psd_sqrt(&cov_b);
    // Tr((Σ_a Σ_b)^½) via both symmetric forms, averaged so the result is symmetric
    let t1: f64 = SymmetricEigen::new(&ra * &cov_b * &ra).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let t2: f64 = SymmetricEigen::new(&rb * &cov_a * &rb).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - (t1 + t2);
    Ok(d.max(0.0))
}

/// Fréchet distance between extractor features of two clip sets.
pub fn fvd(extractor: &FvdExtractor, real: &[&VideoClip], generated: &[&VideoClip]) -> Result<f64> {
    let fa = real.iter().map(|c| extractor.features(c)).collect::<Result<Vec<_>>>()?;
    let fb = generated.iter().map(|c| extractor.features(c)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}

/// Ridge regression with an unpenalized intercept.
#[derive(Debug, Clone)]
pub struct Ridge {
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
    weights: DMatrix<f64>,
}

impl Ridge {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Empty("ridge samples"));
        }
        let (d, k) = (x[0].len(), y[0].len());
        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
        let mean_x = DVector::from_fn(d, |j, _| xm.column(j).mean());
        let mean_y = DVector::from_fn(k, |j, _| ym.column(j).mean());
        let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - mean_x[j]);
        let yc = DMatrix::from_fn(n, k, |i, j| ym[(i, j)] - mean_y[j]);
        let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda.max(1e-12);
        let rhs = xc.transpose() * yc;
        let weights = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("ridge", "normal equations are not positive definite"))?
            .solve(&rhs);
        Ok(Self { mean_x, mean_y, weights })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let xc = DVector::from_fn(x.len(), |j, _| x[j] - self.mean_x[j]);
        let y = self.weights.transpose() * xc + &self.mean_y;
        y.iter().copied().collect()
    }
}

/// `1 − SSE/SST`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

/// Held-out accuracy of a one-vs-rest ridge classifier.
pub fn probe_accuracy(
    train_x: &[Vec<f64>],
    train_labels: &[u32],
    test_x: &[Vec<f64>],
    test_labels: &[u32],
    lambda: f64,
) -> Result<f64> {
    let mut classes: Vec<u32> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let onehot: Vec<Vec<f64>> = train_labels
        .iter()
        .map(|l| classes.iter().map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let model = Ridge::fit(train_x, &onehot, lambda)?;
    if test_x.is_empty() || test_x.len() != test_labels.len() {
        return Err(Error::Empty("probe test set"));
    }
    let hits = test_x
        .iter()
        .zip(test_labels)
        .filter(|(x, l)| {
            let s = model.predict(x);
            let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            classes[best] == **l
        })
        .count();
    Ok(hits as f64 / test_x.len() as f64)
}

/// Held-out R² of a ridge regressor.
pub fn probe_r2(train_x: &[Vec<f64>], train_y: &[f64], test_x: &[Vec<f64>], test_y: &[f64], lambda: f64) -> Result<f64> {
    let y: Vec<Vec<f64>> = train_y.iter().map(|v| vec![*v]).collect();
    let model = Ridge::fit(train_x, &y, lambda)?;
    let pred: Vec<f64> = test_x.iter().map(|x| model.predict(x)[0]).collect();
    Ok(r_squared(&pred, test_y))
}

/// The evaluation summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub idr: f64,
    pub ids: f64,
    pub attr_errors: AttributeErrors,
    pub vidd: f64,
    pub fvd: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.idr)
            && (-1.0 - 1e-9..=1.0 + 1e-9).contains(&self.ids)
            && self.vidd >= 0.0
            && self.fvd >= 0.0
            && self.n_samples > 0
            && [self.attr_errors.pose, self.attr_errors.lighting, self.attr_errors.expression]
                .iter()
                .all(|e| *e >= 0.0);
        if !ok {
            return Err(Error::invalid("report", format!("values out of range: {self:?}")));
        }
        Ok(())
    }
}
