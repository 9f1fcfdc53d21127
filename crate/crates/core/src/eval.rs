//! Swap-and-score evaluation on held-out clips, self-swap identity checks and
//! linear probes on attribute features.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    attribute_errors, clip_embedding, embed_frames, fvd, id_similarity, probe_accuracy, probe_r2, vidd_trace,
    AttributeErrors, EvalReport, FactorRegressor, FvdExtractor, Gallery,
};
use crate::tensor::to_f64_vec;
use crate::trainer::{swap_batch, Model, Pretrained, SwapOptions};
use crate::videodata::{ClipSource, SourceFace, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pairs: usize,
    /// Pairs per sampler run.
    pub batch: usize,
    /// Leading target frames kept per pair; 0 keeps whole clips.
    pub frames: usize,
    /// Evenly spaced frames per clip embedded into the gallery.
    pub gallery_frames: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 32,
            batch: 4,
            frames: 0,
            gallery_frames: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 2 || self.batch == 0 || self.gallery_frames == 0 {
            return Err(Error::Config("eval needs pairs >= 2, batch >= 1 and gallery_frames >= 1".into()));
        }
        Ok(())
    }
}

/// A target clip and the clip frame donating the source face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub target: usize,
    pub source_clip: usize,
    pub source_frame: usize,
    pub target_id: u32,
    pub source_id: u32,
}

fn labels<D: ClipSource + ?Sized>(data: &D) -> Result<Vec<u32>> {
    (0..data.len())
        .map(|i| {
            data.identity(i)
                .ok_or_else(|| Error::invalid("dataset", format!("clip {i} has no identity label")))
        })
        .collect()
}

/// Cross-identity pairs; targets cycle through the clips in order, sources are
/// drawn uniformly among clips of other identities.
pub fn choose_pairs<D: ClipSource + ?Sized>(data: &D, n: usize, seed: u64) -> Result<Vec<PairSpec>> {
    let ids = labels(data)?;
    if ids.iter().all(|&i| i == ids[0]) {
        return Err(Error::invalid("dataset", "cross-identity pairs need at least two identities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let target = k % ids.len();
        let source_clip = loop {
            let s = rng.gen_range(0..ids.len());
            if ids[s] != ids[target] {
                break s;
            }
        };
        let len = data.clip(source_clip)?.len();
        out.push(PairSpec {
            target,
            source_clip,
            source_frame: rng.gen_range(0..len),
            target_id: ids[target],
            source_id: ids[source_clip],
        });
    }
    Ok(out)
}

/// Identity centroids from evenly spaced frames of every clip.
pub fn gallery_from_clips<D: ClipSource + ?Sized>(encoder: &crate::dil::IdentityEncoder, data: &D, per_clip: usize) -> Result<Gallery> {
    let ids = labels(data)?;
    let mut unique = ids.clone();
    unique.sort_unstable();
    unique.dedup();
    let mut sets: Vec<Vec<Tensor>> = vec![Vec::new(); unique.len()];
    for (i, id) in ids.iter().enumerate() {
        let clip = data.clip(i)?;
        let k = per_clip.min(clip.len());
        let idx: Vec<u32> = (0..k).map(|j| (j * clip.len() / k) as u32).collect();
        let frames = clip.frames.index_select(&Tensor::new(idx.as_slice(), clip.frames.device())?, 0)?;
        let slot = unique.binary_search(id).expect("id from the same list");
        sets[slot].push(embed_frames(encoder, &frames)?);
    }
    let embeddings = sets.iter().map(|s| Tensor::cat(s, 0)).collect::<candle_core::Result<Vec<_>>>()?;
    Gallery::new(unique, &embeddings)
}

fn crop(clip: VideoClip, frames: usize) -> Result<VideoClip> {
    if frames == 0 || frames >= clip.len() {
        return Ok(clip);
    }
    clip.window(0, frames)
}

/// Per-pair scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: usize,
    #[serde(flatten)]
    pub spec: PairSpec,
    pub ids: f64,
    pub retrieved: bool,
    pub vidd: f64,
    pub attr_errors: AttributeErrors,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<PairRow>,
    /// Consecutive-frame identity distances of each output.
    pub vidd_traces: Vec<Vec<f64>>,
}

/// Swaps every chosen pair and scores the composited outputs.
pub fn evaluate<D: ClipSource + ?Sized>(
    model: &Model,
    pre: &Pretrained,
    regressor: &FactorRegressor,
    extractor: &FvdExtractor,
    data: &D,
    cfg: &EvalConfig,
    swap: &SwapOptions,
) -> Result<Evaluation> {
    cfg.validate()?;
    let pairs = choose_pairs(data, cfg.pairs, cfg.seed)?;
    let gallery = gallery_from_clips(&pre.idenc, data, cfg.gallery_frames)?;
    let mut targets = Vec::with_capacity(pairs.len());
    let mut sources = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let t = crop(data.clip(p.target)?, cfg.frames)?;
        if t.factors.is_none() {
            return Err(Error::invalid("dataset", format!("clip {} has no factors", p.target)));
        }
        targets.push(t);
        sources.push(data.clip(p.source_clip)?.source_face(p.source_frame)?);
    }
    let mut outputs = Vec::with_capacity(pairs.len());
    for start in (0..pairs.len()).step_by(cfg.batch) {
        let end = (start + cfg.batch).min(pairs.len());
        let batch: Vec<(&SourceFace, &VideoClip)> = (start..end).map(|i| (&sources[i], &targets[i])).collect();
        let opts = SwapOptions {
            seed: swap.seed.wrapping_add(start as u64),
            ..swap.clone()
        };
        outputs.extend(swap_batch(model, pre, &batch, &opts)?.into_iter().map(|r| r.clip));
    }

    let mut rows = Vec::with_capacity(pairs.len());
    let mut traces = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let out = &outputs[i];
        let src = embed_frames(&pre.idenc, &sources[i].image.unsqueeze(0)?)?.squeeze(0)?;
        let trace = vidd_trace(&embed_frames(&pre.idenc, &out.frames)?)?;
        let factors = targets[i].factors.as_deref().expect("checked");
        let retrieved = gallery.nearest(&to_f64_vec(&clip_embedding(&pre.idenc, out)?)?) == p.source_id;
        rows.push(PairRow {
            pair: i,
            spec: *p,
            ids: id_similarity(&pre.idenc, out, &src)?,
            retrieved,
            vidd: trace.iter().sum::<f64>() / trace.len() as f64,
            attr_errors: attribute_errors(regressor, &[(out, factors)])?,
        });
        traces.push(trace);
    }
    let results: Vec<(&VideoClip, &[crate::videodata::SyntheticFactors])> = outputs
        .iter()
        .zip(&targets)
        .map(|(o, t)| (o, t.factors.as_deref().expect("checked")))
        .collect();
    let n = rows.len() as f64;
    let report = EvalReport {
        idr: rows.iter().filter(|r| r.retrieved).count() as f64 / n,
        ids: rows.iter().map(|r| r.ids).sum::<f64>() / n,
        attr_errors: attribute_errors(regressor, &results)?,
        vidd: rows.iter().map(|r| r.vidd).sum::<f64>() / n,
        fvd: fvd(extractor, &targets.iter().collect::<Vec<_>>(), &outputs.iter().collect::<Vec<_>>())?,
        n_samples: rows.len(),
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        rows,
        vidd_traces: traces,
    })
}

/// Identity similarity of a self-swap output to its own source and to a face
/// of another identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfSwapScore {
    pub target: usize,
    pub ids_source: f64,
    pub ids_other: f64,
}

/// Swaps a frame of each target back into it. Clip `k % len` is the target;
/// the comparison face comes from a random clip of another identity.
pub fn self_swap_scores<D: ClipSource + ?Sized>(
    model: &Model,
    pre: &Pretrained,
    data: &D,
    n: usize,
    frames: usize,
    batch: usize,
    swap: &SwapOptions,
) -> Result<Vec<SelfSwapScore>> {
    let pairs = choose_pairs(data, n, swap.seed ^ 0x5e1f)?;
    let mut targets = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut others = Vec::with_capacity(n);
    for p in &pairs {
        let t = crop(data.clip(p.target)?, frames)?;
        sources.push(t.source_face(p.source_frame % t.len())?);
        targets.push(t);
        others.push(data.clip(p.source_clip)?.frame(p.source_frame)?);
    }
    let mut scores = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(n);
        let pairs_in: Vec<(&SourceFace, &VideoClip)> = (start..end).map(|i| (&sources[i], &targets[i])).collect();
        let opts = SwapOptions {
            seed: swap.seed.wrapping_add(start as u64),
            ..swap.clone()
        };
        for (j, r) in swap_batch(model, pre, &pairs_in, &opts)?.into_iter().enumerate() {
            let i = start + j;
            let faces = Tensor::stack(&[sources[i].image.to_dtype(DType::F32)?, others[i].to_dtype(DType::F32)?], 0)?;
            let e = embed_frames(&pre.idenc, &faces)?;
            scores.push(SelfSwapScore {
                target: pairs[i].target,
                ids_source: id_similarity(&pre.idenc, &r.clip, &e.get(0)?)?,
                ids_other: id_similarity(&pre.idenc, &r.clip, &e.get(1)?)?,
            });
        }
    }
    Ok(scores)
}

/// Held-out linear probes on per-frame `f_attr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub identity_accuracy: f64,
    pub chance: f64,
    pub pose_r2: f64,
    pub train_frames: usize,
    pub test_frames: usize,
}

fn attr_features<D: ClipSource + ?Sized>(model: &Model, pre: &Pretrained, data: &D) -> Result<(Vec<Vec<f64>>, Vec<u32>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut ids = Vec::new();
    let mut pose = Vec::new();
    for i in 0..data.len() {
        let clip = data.clip(i)?;
        let factors = clip
            .factors
            .clone()
            .ok_or_else(|| Error::invalid("dataset", format!("clip {i} has no factors")))?;
        let frames = clip.frames.unsqueeze(0)?.to_dtype(DType::F32)?;
        let latents = pre.encode(&frames)?;
        let f_attr = model.fal.encoder.forward(&model.fal_input(pre, &frames, &latents)?)?.f_attr.squeeze(0)?;
        let flat = f_attr.flatten_from(1)?;
        let d = flat.dim(1)?;
        let v = to_f64_vec(&flat)?;
        for (j, f) in factors.iter().enumerate() {
            x.push(v[j * d..(j + 1) * d].to_vec());
            ids.push(f.identity_id);
            pose.push(f.pose as f64);
        }
    }
    Ok((x, ids, pose))
}

/// Ridge probes for identity (one-vs-rest) and pose on the attribute
/// features of `train` clips, scored on `test` clips.
pub fn attribute_probes<A, B>(model: &Model, pre: &Pretrained, train: &A, test: &B, lambda: f64) -> Result<ProbeReport>
where
    A: ClipSource + ?Sized,
    B: ClipSource + ?Sized,
{
    let (tx, tid, tpose) = attr_features(model, pre, train)?;
    let (vx, vid, vpose) = attr_features(model, pre, test)?;
    let mut classes = tid.clone();
    classes.sort_unstable();
    classes.dedup();
    Ok(ProbeReport {
        identity_accuracy: probe_accuracy(&tx, &tid, &vx, &vid, lambda)?,
        chance: 1.0 / classes.len() as f64,
        pose_r2: probe_r2(&tx, &tpose, &vx, &vpose, lambda)?,
        train_frames: tx.len(),
        test_frames: vx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Codec, CodecConfig, CodecKind};
    use crate::denoiser::DenoiserConfig;
    use crate::dil::{IdentityEncoder, IdentityEncoderConfig};
    use crate::edm::SamplerSchedule;
    use crate::fal::{FalConfig, FalSpace};
    use crate::metrics::RegressorConfig;
    use crate::trainer::ModelConfig;
    use crate::videodata::{SyntheticDataset, SyntheticDatasetConfig};

    fn setup() -> (Pretrained, Model, SyntheticDataset) {
        let codec = Codec::init(
            CodecConfig {
                kind: CodecKind::Learned,
                factor: 8,
                channels: 4,
                hidden: 8,
            },
            1,
        )
        .unwrap();
        let idenc = IdentityEncoder::init(
            IdentityEncoderConfig {
                input_size: 64,
                widths: [8, 8, 8, 8],
                embed_dim: 16,
            },
            2,
        )
        .unwrap();
        let pre = Pretrained::new(&codec, &idenc).unwrap();
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                latent_channels: 4,
                base_channels: 8,
                channel_mult: vec![1, 2],
                heads: 2,
                d_model: 16,
                frames: 3,
                temporal_layers: true,
            },
            fal: FalConfig {
                input_channels: 4,
                widths: [8, 8, 8],
                heads: 2,
                low_channels: 8,
                id_dim: 16,
                rid_tokens: 2,
                space: FalSpace::Latent,
            },
            positional_tokens: true,
        };
        let model = Model::new(cfg, &pre, 3).unwrap();
        let ds = SyntheticDataset::new(SyntheticDatasetConfig {
            clips: 6,
            frames: 4,
            height: 64,
            width: 64,
            identities: 3,
            seed: 9,
        })
        .unwrap();
        (pre, model, ds)
    }

    fn quick() -> SwapOptions {
        SwapOptions {
            schedule: SamplerSchedule {
                steps: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn pairs_cross_identities_deterministically() {
        let (_, _, ds) = setup();
        let a = choose_pairs(&ds, 10, 4).unwrap();
        assert_eq!(a, choose_pairs(&ds, 10, 4).unwrap());
        for p in &a {
            assert_ne!(p.source_id, p.target_id);
            assert_eq!(Some(p.source_id), ds.identity(p.source_clip));
        }
        let one = SyntheticDataset::new(SyntheticDatasetConfig { identities: 1, ..ds.config }).unwrap();
        assert!(choose_pairs(&one, 2, 0).is_err());
    }

    #[test]
    fn evaluation_is_reproducible_and_batch_invariant() {
        let (pre, model, ds) = setup();
        let reg = FactorRegressor::init(RegressorConfig::default(), 0).unwrap().frozen().unwrap();
        let ext = FvdExtractor::pinned().unwrap();
        let cfg = EvalConfig {
            pairs: 3,
            batch: 3,
            frames: 3,
            gallery_frames: 2,
            seed: 1,
        };
        let a = evaluate(&model, &pre, &reg, &ext, &ds, &cfg, &quick()).unwrap();
        let b = evaluate(&model, &pre, &reg, &ext, &ds, &EvalConfig { batch: 1, ..cfg.clone() }, &quick()).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.report.n_samples, 3);
        assert_eq!(a.vidd_traces.len(), 3);
        assert!(a.vidd_traces.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn self_swap_scores_are_bounded() {
        let (pre, model, ds) = setup();
        let s = self_swap_scores(&model, &pre, &ds, 2, 3, 2, &quick()).unwrap();
        assert_eq!(s.len(), 2);
        for x in s {
            assert!(x.ids_source.abs() <= 1.0 + 1e-9 && x.ids_other.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn probes_report_chance_level() {
        let (pre, model, ds) = setup();
        let train = SyntheticDataset::new(SyntheticDatasetConfig { clips: 3, ..ds.config }).unwrap();
        let r = attribute_probes(&model, &pre, &train, &ds, 1.0).unwrap();
        assert!((r.chance - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.train_frames, r.test_frames), (12, 24));
        assert!((0.0..=1.0).contains(&r.identity_accuracy));
    }
}
