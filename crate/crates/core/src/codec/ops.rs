use crate::numerics::{ElementRng, GradTensor, Purpose, RngStream, StreamKey};

use super::{Block, Bucketing, CodecConfig, CodecError, EncodedGradient, PassthroughBlock, TernaryBlock};

/// Clamps every element to `[-c*sigma, c*sigma]`, where sigma is the
/// population standard deviation of the tensor.
///
/// Tensors with fewer than two elements are returned unchanged: their sigma
/// is zero and clamping would erase the gradient.
pub fn clip(g: &GradTensor, c: f32) -> GradTensor {
    let mut out = g.clone();
    clip_values(out.values_mut(), c);
    out
}

/// In-place form of [`clip`]. Returns the number of clamped elements.
pub fn clip_values(values: &mut [f32], c: f32) -> usize {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let bound = c as f64 * var.sqrt();
    let clamped = bound as f32;
    let mut count = 0;
    for v in values.iter_mut() {
        if (*v as f64).abs() > bound {
            *v = clamped.copysign(*v);
            count += 1;
        }
    }
    count
}

/// Maximum absolute value; zero for empty or all-zero input.
pub fn scaler(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Stochastically ternarizes a tensor under scaler `s`.
pub fn ternarize(g: &GradTensor, s: f32, rng: &mut ElementRng) -> Result<TernaryBlock, CodecError> {
    ternarize_values(g.name(), g.values(), s, rng)
}

/// Element `k` becomes `sign(g_k)` with probability `|g_k| / s` and zero
/// otherwise, one uniform draw per element. `s` must dominate every `|g_k|`.
pub fn ternarize_values(
    name: &str,
    values: &[f32],
    s: f32,
    rng: &mut ElementRng,
) -> Result<TernaryBlock, CodecError> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(CodecError::Contract(format!("scaler must be finite and nonnegative, got {s}")));
    }
    let max = scaler(values);
    if s < max {
        return Err(CodecError::Contract(format!(
            "{name}: scaler {s} below max |g| = {max}"
        )));
    }
    let mut codes = Vec::with_capacity(values.len());
    if s == 0.0 {
        codes.resize(values.len(), 0i8);
    } else {
        let s64 = s as f64;
        for &v in values {
            // |v| == s divides to exactly 1.0, so those elements always keep their sign.
            let keep = rng.bernoulli(v.abs() as f64 / s64);
            codes.push(if keep && v != 0.0 { v.signum() as i8 } else { 0 });
        }
    }
    TernaryBlock::from_values(name, s, &codes)
}

/// `s * code` for every element.
pub fn decode(block: &TernaryBlock) -> Result<GradTensor, CodecError> {
    let s = block.scaler();
    let values = block.values().into_iter().map(|c| s * c as f32).collect();
    Ok(GradTensor::flat(block.name(), values)?)
}

/// The shared scaler: the maximum of the workers' local scalers.
pub fn share_scalers(locals: &[f32]) -> Result<f32, CodecError> {
    if locals.is_empty() {
        return Err(CodecError::Contract("no scalers to share".into()));
    }
    Ok(locals.iter().cloned().fold(0.0f32, f32::max))
}

/// Re-expresses a block under a larger scaler without bias.
///
/// Each nonzero code survives with probability `s_local / s_shared`. The
/// result is distributed exactly as if the original gradient had been
/// ternarized against `s_shared` directly, since
/// `P(nonzero) = |g|/s_local * s_local/s_shared = |g|/s_shared`.
pub fn rescale_to_shared(
    block: &TernaryBlock,
    shared: f32,
    rng: &mut ElementRng,
) -> Result<TernaryBlock, CodecError> {
    let local = block.scaler();
    if !(shared >= local && shared.is_finite()) {
        return Err(CodecError::Contract(format!(
            "{}: shared scaler {shared} below local {local}",
            block.name()
        )));
    }
    if shared == local {
        return Ok(block.clone());
    }
    let p = local as f64 / shared as f64;
    let codes: Vec<i8> = block
        .values()
        .into_iter()
        .map(|c| if rng.bernoulli(p) { c } else { 0 })
        .collect();
    TernaryBlock::from_values(block.name(), shared, &codes)
}

/// Encodes one worker's gradients for iteration `t`.
///
/// Returns the push message and the local scalers of its ternary blocks.
/// Deterministic in `(cfg.seed, t, worker)`.
pub fn encode_step(
    grads: &[GradTensor],
    cfg: &CodecConfig,
    t: u64,
    worker: u16,
) -> Result<(EncodedGradient, Vec<f32>), CodecError> {
    cfg.validate()?;
    let streams = RngStream::new(cfg.seed);

    let prepared: Vec<(bool, GradTensor)> = grads
        .iter()
        .map(|g| {
            let ternary = cfg.ternarizes(g.name());
            let g = if ternary && cfg.clipping {
                clip(g, cfg.clip_factor)
            } else {
                g.clone()
            };
            (ternary, g)
        })
        .collect();
    let global = prepared
        .iter()
        .filter(|(ternary, _)| *ternary)
        .map(|(_, g)| scaler(g.values()))
        .fold(0.0f32, f32::max);

    let mut blocks = Vec::with_capacity(grads.len());
    for (ternary, g) in prepared {
        if !ternary {
            blocks.push(Block::Passthrough(PassthroughBlock {
                name: g.name().to_string(),
                values: g.values().to_vec(),
            }));
            continue;
        }
        let bucket = match cfg.bucketing {
            Bucketing::FixedSize(k) => k,
            Bucketing::PerTensor | Bucketing::Global => g.len().max(1),
        };
        if g.is_empty() {
            blocks.push(Block::Ternary(TernaryBlock::from_values(g.name(), 0.0, &[])?));
            continue;
        }
        for (b, chunk) in g.values().chunks(bucket).enumerate() {
            let s = match cfg.bucketing {
                Bucketing::Global => global,
                _ => scaler(chunk),
            };
            let mut rng = streams.open(&StreamKey {
                purpose: Purpose::Ternarize,
                iteration: t,
                worker: worker as u64,
                tensor: g.name(),
                element_base: (b * bucket) as u64,
            });
            blocks.push(Block::Ternary(ternarize_values(g.name(), chunk, s, &mut rng)?));
        }
    }
    let encoded = EncodedGradient {
        iteration: t,
        worker,
        blocks,
    };
    let locals = encoded.scalers();
    Ok((encoded, locals))
}

/// Server-side result for one block position.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregateBlock {
    /// Integer code sums under one shared scaler; decodes to
    /// `scaler * sum / workers`.
    SharedSum {
        name: String,
        scaler: f32,
        workers: u16,
        sums: Vec<i32>,
    },
    /// Already-averaged floats.
    Dense { name: String, values: Vec<f32> },
}

impl AggregateBlock {
    pub fn name(&self) -> &str {
        match self {
            AggregateBlock::SharedSum { name, .. } | AggregateBlock::Dense { name, .. } => name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AggregateBlock::SharedSum { sums, .. } => sums.len(),
            AggregateBlock::Dense { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Averaged values for this block.
    pub fn decode(&self) -> Vec<f32> {
        match self {
            AggregateBlock::SharedSum {
                scaler,
                workers,
                sums,
                ..
            } => {
                let n = *workers as f32;
                sums.iter().map(|&k| scaler * k as f32 / n).collect()
            }
            AggregateBlock::Dense { values, .. } => values.clone(),
        }
    }
}

/// Combines the pushes of all `workers` workers for one iteration.
///
/// With scaler sharing on, ternary blocks are re-expressed under the
/// maximum scaler and summed as integers. Otherwise ternary and passthrough
/// blocks are averaged in f64 and rounded once to f32. Messages are
/// processed in worker-id order so the result does not depend on arrival
/// order.
pub fn aggregate(
    encoded: &[EncodedGradient],
    workers: usize,
    cfg: &CodecConfig,
) -> Result<Vec<AggregateBlock>, CodecError> {
    let msgs = check_round(encoded, workers)?;
    let first = msgs[0];
    let t = first.iteration;
    let streams = RngStream::new(cfg.seed);
    let inv_n = 1.0 / workers as f64;
    let mut offsets: Vec<(String, usize)> = Vec::new();
    let mut out = Vec::with_capacity(first.blocks.len());

    for (pos, lead) in first.blocks.iter().enumerate() {
        let base = match offsets.last_mut() {
            Some((name, off)) if name == lead.name() => {
                let b = *off;
                *off += lead.len();
                b
            }
            _ => {
                offsets.push((lead.name().to_string(), lead.len()));
                0
            }
        };
        let column: Vec<&Block> = msgs.iter().map(|m| &m.blocks[pos]).collect();
        match lead {
            Block::Ternary(_) => {
                let blocks: Vec<&TernaryBlock> = column
                    .iter()
                    .map(|b| match b {
                        Block::Ternary(t) => Ok(t),
                        Block::Passthrough(_) => Err(structure_err(pos)),
                    })
                    .collect::<Result<_, _>>()?;
                if cfg.scaler_sharing {
                    let locals: Vec<f32> = blocks.iter().map(|b| b.scaler()).collect();
                    let shared = share_scalers(&locals)?;
                    let mut sums = vec![0i32; lead.len()];
                    for (msg, block) in msgs.iter().zip(&blocks) {
                        let mut rng = streams.open(&StreamKey {
                            purpose: Purpose::ShareScaler,
                            iteration: t,
                            worker: msg.worker as u64,
                            tensor: lead.name(),
                            element_base: base as u64,
                        });
                        let rescaled = rescale_to_shared(block, shared, &mut rng)?;
                        for (s, c) in sums.iter_mut().zip(rescaled.values()) {
                            *s += c as i32;
                        }
                    }
                    out.push(AggregateBlock::SharedSum {
                        name: lead.name().to_string(),
                        scaler: shared,
                        workers: workers as u16,
                        sums,
                    });
                } else {
                    let mut acc = vec![0.0f64; lead.len()];
                    for block in &blocks {
                        let s = block.scaler() as f64;
                        for (a, c) in acc.iter_mut().zip(block.values()) {
                            *a += s * c as f64;
                        }
                    }
                    out.push(AggregateBlock::Dense {
                        name: lead.name().to_string(),
                        values: acc.into_iter().map(|a| (a * inv_n) as f32).collect(),
                    });
                }
            }
            Block::Passthrough(_) => {
                let mut acc = vec![0.0f64; lead.len()];
                for b in &column {
                    match b {
                        Block::Passthrough(p) => {
                            for (a, &v) in acc.iter_mut().zip(&p.values) {
                                *a += v as f64;
                            }
                        }
                        Block::Ternary(_) => return Err(structure_err(pos)),
                    }
                }
                out.push(AggregateBlock::Dense {
                    name: lead.name().to_string(),
                    values: acc.into_iter().map(|a| (a * inv_n) as f32).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Decodes aggregated blocks into one flat tensor per name, concatenating
/// consecutive buckets of the same tensor.
pub fn decode_aggregate(blocks: &[AggregateBlock]) -> Result<Vec<GradTensor>, CodecError> {
    let mut grouped: Vec<(String, Vec<f32>)> = Vec::new();
    for b in blocks {
        let values = b.decode();
        match grouped.last_mut() {
            Some((name, acc)) if name == b.name() => acc.extend(values),
            _ => grouped.push((b.name().to_string(), values)),
        }
    }
    grouped
        .into_iter()
        .map(|(name, values)| GradTensor::flat(name, values).map_err(CodecError::from))
        .collect()
}

/// Averaged gradient `(1/N) * sum_i decode(push_i)`, one flat tensor per
/// parameter. Equal to what a worker decodes from the server's pull.
pub fn average(
    encoded: &[EncodedGradient],
    workers: usize,
    cfg: &CodecConfig,
) -> Result<Vec<GradTensor>, CodecError> {
    decode_aggregate(&aggregate(encoded, workers, cfg)?)
}

fn structure_err(pos: usize) -> CodecError {
    CodecError::Protocol(format!("block {pos} differs in kind across workers"))
}

/// Checks one round of pushes and returns them sorted by worker id.
fn check_round(encoded: &[EncodedGradient], workers: usize) -> Result<Vec<&EncodedGradient>, CodecError> {
    if workers == 0 || workers > u16::MAX as usize {
        return Err(CodecError::Contract(format!("invalid worker count {workers}")));
    }
    if encoded.len() != workers {
        return Err(CodecError::Protocol(format!(
            "expected {workers} messages, got {}",
            encoded.len()
        )));
    }
    let mut msgs: Vec<&EncodedGradient> = encoded.iter().collect();
    msgs.sort_by_key(|m| m.worker);
    for (k, m) in msgs.iter().enumerate() {
        if m.worker as usize != k {
            return Err(CodecError::Protocol(format!(
                "missing or duplicate worker: expected id {k}, found {}",
                m.worker
            )));
        }
    }
    let lead = msgs[0];
    for m in &msgs[1..] {
        if m.iteration != lead.iteration {
            return Err(CodecError::Protocol(format!(
                "iteration mismatch: worker {} at {}, worker {} at {}",
                lead.worker, lead.iteration, m.worker, m.iteration
            )));
        }
        if m.blocks.len() != lead.blocks.len() {
            return Err(CodecError::Protocol(format!(
                "worker {} sent {} blocks, worker {} sent {}",
                lead.worker,
                lead.blocks.len(),
                m.worker,
                m.blocks.len()
            )));
        }
        for (pos, (a, b)) in lead.blocks.iter().zip(&m.blocks).enumerate() {
            if a.name() != b.name() || a.len() != b.len() {
                return Err(CodecError::Protocol(format!(
                    "block {pos}: {} [{}] vs {} [{}]",
                    a.name(),
                    a.len(),
                    b.name(),
                    b.len()
                )));
            }
        }
    }
    Ok(msgs)
}

/// One equal-width histogram bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
}

/// Equal-width histogram over `[min, max]` of the values. The last bin is
/// closed on the right. A constant tensor lands entirely in the first bin.
pub fn histogram(values: &[f32], bins: usize) -> Result<Vec<HistogramBin>, CodecError> {
    if bins == 0 {
        return Err(CodecError::Contract("histogram needs at least one bin".into()));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let k = if width > 0.0 {
            (((v as f64 - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + k as f64 * width,
            upper: if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width },
            count,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ElementRng {
        RngStream::new(seed).open(&StreamKey {
            purpose: Purpose::Other,
            iteration: 0,
            worker: 0,
            tensor: "t",
            element_base: 0,
        })
    }

    fn tensor(values: &[f32]) -> GradTensor {
        GradTensor::flat("g", values.to_vec()).unwrap()
    }

    #[test]
    fn clip_leaves_small_values() {
        let g = tensor(&[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(clip(&g, 2.5), g);
    }

    #[test]
    fn clip_clamps_outlier() {
        let mut v = vec![0.0f32; 99];
        v.push(100.0);
        let out = clip(&tensor(&v), 2.5);
        // mean 1, population sigma = sqrt(99) = 9.9499
        let bound = (2.5 * 99f64.sqrt()) as f32;
        assert_eq!(out.values()[99], bound);
        assert!(out.values()[..99].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clip_degenerate_sizes() {
        assert_eq!(clip(&tensor(&[]), 2.5).len(), 0);
        assert_eq!(clip(&tensor(&[5.0]), 2.5).values(), &[5.0]);
    }

    #[test]
    fn scaler_examples() {
        assert_eq!(scaler(&[0.5, -2.0, 1.0]), 2.0);
        assert_eq!(scaler(&[0.0; 5]), 0.0);
        assert_eq!(scaler(&[-3.5]), 3.5);
        assert_eq!(scaler(&[]), 0.0);
    }

    #[test]
    fn ternarize_at_full_scale_is_sign() {
        let b = ternarize(&tensor(&[0.7, -0.7]), 0.7, &mut rng(1)).unwrap();
        assert_eq!(b.values(), vec![1, -1]);
        assert_eq!(b.scaler(), 0.7);
    }

    #[test]
    fn ternarize_zeros() {
        for s in [0.0, 1.0] {
            let b = ternarize(&tensor(&[0.0; 9]), s, &mut rng(2)).unwrap();
            assert!(b.values().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn ternarize_rejects_small_scaler() {
        let err = ternarize(&tensor(&[0.5, -1.0]), 0.9, &mut rng(3)).unwrap_err();
        assert!(matches!(err, CodecError::Contract(_)));
        assert!(ternarize(&tensor(&[0.5]), f32::NAN, &mut rng(3)).is_err());
    }

    #[test]
    fn ternarize_mean_matches_gradient() {
        let g = tensor(&[0.3, -0.6]);
        let draws = 100_000;
        let mut r = rng(4);
        let mut sum = [0.0f64; 2];
        for _ in 0..draws {
            let d = decode(&ternarize(&g, 0.6, &mut r).unwrap()).unwrap();
            sum[0] += d.values()[0] as f64;
            sum[1] += d.values()[1] as f64;
        }
        // Var(s*b) = |g| s - g^2; element 1 is deterministic.
        let se0 = ((0.3 * 0.6 - 0.09f64) / draws as f64).sqrt();
        assert!((sum[0] / draws as f64 - 0.3).abs() < 4.0 * se0);
        assert!((sum[1] / draws as f64 + 0.6).abs() < 1e-6);
    }

    #[test]
    fn decode_examples() {
        let b = TernaryBlock::from_values("b", 2.0, &[1, 0, -1]).unwrap();
        assert_eq!(decode(&b).unwrap().values(), &[2.0, 0.0, -2.0]);
        let z = TernaryBlock::from_values("z", 0.0, &[0; 7]).unwrap();
        assert!(decode(&z).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(TernaryBlock::from_values("z", 0.0, &[1]).is_err());
        assert!(TernaryBlock::from_packed("c", 1, 1.0, vec![0b11]).is_err());
    }

    #[test]
    fn share_examples() {
        assert_eq!(share_scalers(&[0.1, 0.3, 0.2]).unwrap(), 0.3);
        assert_eq!(share_scalers(&[0.5]).unwrap(), 0.5);
        assert_eq!(share_scalers(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(share_scalers(&[]).is_err());
    }

    fn msg(worker: u16, scaler: f32, codes: &[i8]) -> EncodedGradient {
        EncodedGradient {
            iteration: 0,
            worker,
            blocks: vec![Block::Ternary(TernaryBlock::from_values("w", scaler, codes).unwrap())],
        }
    }

    #[test]
    fn average_two_workers_shared() {
        let cfg = CodecConfig::default();
        let out = average(&[msg(0, 1.0, &[1, 0]), msg(1, 1.0, &[1, -1])], 2, &cfg).unwrap();
        assert_eq!(out[0].values(), &[1.0, -0.5]);
    }

    #[test]
    fn average_single_worker_is_decode() {
        let cfg = CodecConfig::default();
        let m = msg(0, 0.25, &[1, 0, -1, 1]);
        let out = average(std::slice::from_ref(&m), 1, &cfg).unwrap();
        let Block::Ternary(b) = &m.blocks[0] else { unreachable!() };
        assert_eq!(out[0], decode(b).unwrap().reshape(vec![4]).unwrap());
    }

    #[test]
    fn average_protocol_errors() {
        let cfg = CodecConfig::default();
        assert!(average(&[msg(0, 1.0, &[1])], 2, &cfg).is_err(), "missing worker");
        assert!(average(&[msg(0, 1.0, &[1]), msg(0, 1.0, &[1])], 2, &cfg).is_err(), "duplicate");
        let mut late = msg(1, 1.0, &[1]);
        late.iteration = 3;
        assert!(average(&[msg(0, 1.0, &[1]), late], 2, &cfg).is_err(), "iteration skew");
        assert!(average(&[msg(0, 1.0, &[1]), msg(1, 1.0, &[1, 0])], 2, &cfg).is_err(), "layout");
    }

    #[test]
    fn average_without_sharing_is_float_mean() {
        let cfg = CodecConfig {
            scaler_sharing: false,
            ..CodecConfig::default()
        };
        let out = average(&[msg(0, 1.0, &[1, 0]), msg(1, 0.5, &[1, -1])], 2, &cfg).unwrap();
        assert_eq!(out[0].values(), &[0.75, -0.25]);
    }

    #[test]
    fn rescale_keeps_expectation() {
        let b = TernaryBlock::from_values("w", 0.25, &[1; 64]).unwrap();
        let mut r = rng(8);
        let trials = 4000;
        let mut kept = 0usize;
        for _ in 0..trials {
            let out = rescale_to_shared(&b, 1.0, &mut r).unwrap();
            assert_eq!(out.scaler(), 1.0);
            kept += out.values().iter().filter(|&&c| c == 1).count();
        }
        let frac = kept as f64 / (trials * 64) as f64;
        assert!((frac - 0.25).abs() < 0.005, "{frac}");
        assert!(rescale_to_shared(&b, 0.1, &mut r).is_err());
    }

    #[test]
    fn fixed_size_one_reproduces_clipped_gradient() {
        let g = vec![
            GradTensor::new("a", vec![2, 3], vec![0.1, -0.4, 0.0, 2.0, -7.5, 0.3]).unwrap(),
            GradTensor::flat("b", vec![1e-3]).unwrap(),
        ];
        let cfg = CodecConfig {
            bucketing: Bucketing::FixedSize(1),
            scaler_sharing: false,
            ..CodecConfig::default()
        };
        let (enc, locals) = encode_step(&g, &cfg, 5, 0).unwrap();
        assert_eq!(enc.blocks.len(), 7);
        assert_eq!(locals.len(), 7);
        let avg = average(&[enc], 1, &cfg).unwrap();
        for (a, orig) in avg.iter().zip(&g) {
            assert_eq!(a.values(), clip(orig, 2.5).values());
        }
    }

    #[test]
    fn passthrough_is_verbatim() {
        let g = vec![
            GradTensor::flat("fc.w", vec![0.5, -0.25, 0.125]).unwrap(),
            GradTensor::flat("fc.last", vec![3.0, -1e-7, 9.0]).unwrap(),
        ];
        let cfg = CodecConfig {
            passthrough: ["fc.last".to_string()].into(),
            ..CodecConfig::default()
        };
        let (enc, locals) = encode_step(&g, &cfg, 0, 0).unwrap();
        assert_eq!(locals.len(), 1);
        match &enc.blocks[1] {
            Block::Passthrough(p) => {
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&p.values), bits(g[1].values()));
            }
            other => panic!("expected passthrough, got {other:?}"),
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let g = vec![GradTensor::flat("w", (0..100).map(|k| (k as f32).sin()).collect()).unwrap()];
        let cfg = CodecConfig {
            seed: 99,
            ..CodecConfig::default()
        };
        assert_eq!(encode_step(&g, &cfg, 3, 2).unwrap(), encode_step(&g, &cfg, 3, 2).unwrap());
        assert_ne!(encode_step(&g, &cfg, 3, 2).unwrap().0.blocks, encode_step(&g, &cfg, 3, 1).unwrap().0.blocks);
    }

    #[test]
    fn global_bucketing_shares_one_scaler() {
        let g = vec![
            GradTensor::flat("a", vec![0.1, -0.2]).unwrap(),
            GradTensor::flat("b", vec![4.0, 1.0]).unwrap(),
        ];
        let cfg = CodecConfig {
            bucketing: Bucketing::Global,
            clipping: false,
            ..CodecConfig::default()
        };
        let (_, locals) = encode_step(&g, &cfg, 0, 0).unwrap();
        assert_eq!(locals, vec![4.0, 4.0]);
    }

    #[test]
    fn invalid_config_rejected() {
        let g = vec![GradTensor::flat("w", vec![1.0]).unwrap()];
        let bad = CodecConfig {
            bucketing: Bucketing::FixedSize(0),
            ..CodecConfig::default()
        };
        assert!(encode_step(&g, &bad, 0, 0).is_err());
        let bad = CodecConfig {
            clip_factor: 0.0,
            ..CodecConfig::default()
        };
        assert!(encode_step(&g, &bad, 0, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[3.0; 10], 4).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h[0].count, 10);
        let h = histogram(&[-1.0, 1.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1]);
        assert_eq!((h[0].lower, h[1].upper), (-1.0, 1.0));
        assert!(histogram(&[1.0], 0).is_err());
        assert_eq!(histogram(&[], 3).unwrap().iter().map(|b| b.count).sum::<u64>(), 0);
    }

    proptest! {
        #[test]
        fn decoded_values_are_ternary(vals in prop::collection::vec(-10.0f32..10.0, 1..64), seed in any::<u64>()) {
            let g = tensor(&vals);
            let s = scaler(&vals);
            let d = decode(&ternarize(&g, s, &mut rng(seed)).unwrap()).unwrap();
            for &v in d.values() {
                prop_assert!(v == 0.0 || v == s || v == -s);
            }
        }

        #[test]
        fn bucket_scalers_never_exceed_tensor_scaler(vals in prop::collection::vec(-5.0f32..5.0, 1..200), k in 1usize..50) {
            let whole = scaler(&vals);
            for chunk in vals.chunks(k) {
                prop_assert!(scaler(chunk) <= whole);
            }
        }

        #[test]
        fn histogram_counts_sum(vals in prop::collection::vec(-1e3f32..1e3, 0..300), bins in 1usize..40) {
            let h = histogram(&vals, bins).unwrap();
            prop_assert_eq!(h.len(), bins);
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), vals.len() as u64);
        }
    }
}
