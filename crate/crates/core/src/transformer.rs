//! Per-level transformer encoders with inverse-transform-sampled context
//! from the previous (finer) level, plus the single-encoder and
//! convolutional variants used for ablations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bfs::CombinedFeature;
use crate::config::ContextSource;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Tape, Var};
use crate::params::{Bound, Conv, Init, Linear, Norm, ParamStore};

/// One post-norm encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub blocks: Vec<EncoderBlock>,
    /// Embedding added to every sampled context token in place of a
    /// positional encoding.
    pub context_embed: Option<Var>,
    pub heads: usize,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        ffn_mult: usize,
        depth: usize,
        with_context: bool,
    ) {
        for b in 0..depth {
            let p = format!("{prefix}.b{b}");
            for name in ["query", "key", "value", "output"] {
                Linear::register(store, init, &format!("{p}.{name}"), channels, channels);
            }
            Norm::register(store, &format!("{p}.norm1"), channels);
            Linear::register(store, init, &format!("{p}.ff1"), channels, ffn_mult * channels);
            Linear::register(store, init, &format!("{p}.ff2"), ffn_mult * channels, channels);
            Norm::register(store, &format!("{p}.norm2"), channels);
        }
        if with_context {
            store.insert(format!("{prefix}.context"), init.projection(&[channels]));
        }
    }

    pub fn bind(bound: &Bound, prefix: &str, depth: usize, heads: usize, with_context: bool) -> Result<Self> {
        let blocks = (0..depth)
            .map(|b| {
                let p = format!("{prefix}.b{b}");
                Ok(EncoderBlock {
                    query: Linear::bind(bound, &format!("{p}.query"))?,
                    key: Linear::bind(bound, &format!("{p}.key"))?,
                    value: Linear::bind(bound, &format!("{p}.value"))?,
                    output: Linear::bind(bound, &format!("{p}.output"))?,
                    norm1: Norm::bind(bound, &format!("{p}.norm1"))?,
                    ff1: Linear::bind(bound, &format!("{p}.ff1"))?,
                    ff2: Linear::bind(bound, &format!("{p}.ff2"))?,
                    norm2: Norm::bind(bound, &format!("{p}.norm2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let context_embed = if with_context {
            Some(bound.get(&format!("{prefix}.context"))?)
        } else {
            None
        };
        Ok(Self {
            blocks,
            context_embed,
            heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SampledContext {
    pub source_level: usize,
    pub indices: Vec<usize>,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct EncodedLevel {
    pub level: usize,
    pub z: Var,
    /// Attention matrices, block-major then head-major.
    pub attention: Vec<Var>,
}

/// Channelwise mean per location followed by a softmax over time.
pub fn pdf_from_features(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let means: Vec<f64> = (0..rows)
        .map(|r| values[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols.max(1) as f64)
        .collect();
    softmax(&means)
}

/// Stratified sample points `(k + 0.5) / K`.
pub fn stratified_u(count: usize) -> Vec<f64> {
    (0..count).map(|k| (k as f64 + 0.5) / count as f64).collect()
}

/// Inverts the CDF of `pdf` at each `u`: the smallest index with positive
/// mass whose cumulative probability reaches `u`. Output is sorted.
pub fn inverse_transform_sample(pdf: &[f64], u_values: &[f64]) -> Result<Vec<usize>> {
    if u_values.is_empty() {
        return Ok(Vec::new());
    }
    if pdf.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty distribution".into()));
    }
    if pdf.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("sampling distribution".into()));
    }
    if pdf.iter().any(|p| *p < 0.0) {
        return Err(Error::InvalidArgument("pdf entries must be nonnegative".into()));
    }
    let total: f64 = pdf.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("pdf sums to {total}, expected 1")));
    }
    if u_values.iter().any(|u| !(0.0..1.0).contains(u)) {
        return Err(Error::InvalidArgument("u values must lie in [0, 1)".into()));
    }
    let mut cdf = Vec::with_capacity(pdf.len());
    let mut acc = 0.0;
    for p in pdf {
        acc += p;
        cdf.push(acc);
    }
    let last_positive = pdf.iter().rposition(|p| *p > 0.0).expect("pdf has mass");
    let mut us = u_values.to_vec();
    us.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(us.len());
    let mut i = 0;
    for u in us {
        while i < pdf.len() && (pdf[i] <= 0.0 || cdf[i] < u) {
            i += 1;
        }
        out.push(i.min(last_positive));
        i = i.min(last_positive);
    }
    Ok(out)
}

/// Fixed sinusoidal encodings, `len×channels`.
pub fn sinusoidal_encoding(len: usize, channels: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * channels];
    for pos in 0..len {
        for i in 0..channels {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / channels as f64);
            let angle = pos as f64 * freq;
            pe[pos * channels + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn attention_block(
    tape: &mut Tape,
    x: Var,
    block: &EncoderBlock,
    heads: usize,
    eps: f64,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let channels = tape.cols(x);
    let dh = channels / heads;
    let q = block.query.forward(tape, x)?;
    let k = block.key.forward(tape, x)?;
    let v = block.value.forward(tape, x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_rows(scores)?;
        attention.push(weights);
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let attended = block.output.forward(tape, merged)?;
    let x = tape.add(x, attended)?;
    let x = block.norm1.forward(tape, x, eps)?;
    let ff = block.ff1.forward(tape, x)?;
    let ff = tape.relu(ff);
    let ff = block.ff2.forward(tape, ff)?;
    let x = tape.add(x, ff)?;
    block.norm2.forward(tape, x, eps)
}

fn run_blocks(tape: &mut Tape, x: Var, params: &EncoderParams, eps: f64) -> Result<(Var, Vec<Var>)> {
    let mut attention = Vec::new();
    let mut x = x;
    for block in &params.blocks {
        x = attention_block(tape, x, block, params.heads, eps, &mut attention)?;
    }
    Ok((x, attention))
}

/// Encodes `H_l` (with sinusoidal positions) jointly with the optional
/// context tokens and returns the outputs of the `T_l` native tokens.
pub fn encode_level(
    tape: &mut Tape,
    combined: &CombinedFeature,
    context: Option<&SampledContext>,
    params: &EncoderParams,
    eps: f64,
) -> Result<EncodedLevel> {
    let h = combined.features;
    let (len, channels) = (tape.rows(h), tape.cols(h));
    let pe = tape.constant(&[len, channels], sinusoidal_encoding(len, channels))?;
    let native = tape.add(h, pe)?;
    let tokens = match context {
        Some(ctx) if tape.rows(ctx.features) > 0 => {
            if tape.cols(ctx.features) != channels {
                return Err(Error::shape(
                    "encode_level",
                    format!("context has {} channels, level has {channels}", tape.cols(ctx.features)),
                ));
            }
            let ctx_tokens = match params.context_embed {
                Some(e) => tape.add_bias(ctx.features, e)?,
                None => ctx.features,
            };
            tape.concat_rows(&[native, ctx_tokens])?
        }
        _ => native,
    };
    let (out, attention) = run_blocks(tape, tokens, params, eps)?;
    let z = if tape.rows(out) == len {
        out
    } else {
        tape.slice_rows(out, 0, len)?
    };
    Ok(EncodedLevel {
        level: combined.level,
        z,
        attention,
    })
}

/// Source of the sampling positions `u`.
pub enum Sampling<'a> {
    /// `(k + 0.5) / K`, deterministic.
    Stratified,
    /// Sorted uniform draws.
    Random(&'a mut ChaCha8Rng),
    /// Replays previously drawn indices, one list per level `l >= 2`.
    Fixed(&'a [Vec<usize>]),
}

/// Hierarchical encoding: level 1 alone, then each level `l >= 2` joined
/// by `T_l` tokens sampled from level `l-1`. Returns the encodings and the
/// sampled index lists (empty for level 1).
pub fn encode_pyramid(
    tape: &mut Tape,
    combined: &[CombinedFeature],
    params: &[EncoderParams],
    mut sampling: Sampling,
    source: ContextSource,
    eps: f64,
) -> Result<(Vec<EncodedLevel>, Vec<Vec<usize>>)> {
    if params.len() != combined.len() {
        return Err(Error::shape(
            "encode_pyramid",
            format!("{} encoders for {} levels", params.len(), combined.len()),
        ));
    }
    let mut encoded: Vec<EncodedLevel> = Vec::with_capacity(combined.len());
    let mut sampled = Vec::with_capacity(combined.len());
    for (l, (feat, enc)) in combined.iter().zip(params).enumerate() {
        if l == 0 {
            encoded.push(encode_level(tape, feat, None, enc, eps)?);
            sampled.push(Vec::new());
            continue;
        }
        let src = match source {
            ContextSource::Combined => combined[l - 1].features,
            ContextSource::Encoded => encoded[l - 1].z,
        };
        let k = tape.rows(feat.features);
        let indices = match &mut sampling {
            Sampling::Fixed(lists) => lists
                .get(l)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no fixed indices for level {}", l + 1)))?,
            other => {
                let pdf = pdf_from_features(tape.value(src), tape.rows(src), tape.cols(src));
                let u = match other {
                    Sampling::Random(rng) => {
                        let mut u: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                        u.sort_by(f64::total_cmp);
                        u
                    }
                    _ => stratified_u(k),
                };
                inverse_transform_sample(&pdf, &u)?
            }
        };
        let features = tape.gather_rows(src, &indices)?;
        let ctx = SampledContext {
            source_level: l,
            indices: indices.clone(),
            features,
        };
        encoded.push(encode_level(tape, feat, Some(&ctx), enc, eps)?);
        sampled.push(indices);
    }
    Ok((encoded, sampled))
}

/// Single shared encoder over all levels concatenated in time, split back
/// per level afterwards.
pub fn encode_vanilla(
    tape: &mut Tape,
    combined: &[CombinedFeature],
    params: &EncoderParams,
    eps: f64,
) -> Result<Vec<EncodedLevel>> {
    let parts: Vec<Var> = combined.iter().map(|c| c.features).collect();
    let seq = tape.concat_rows(&parts)?;
    let (len, channels) = (tape.rows(seq), tape.cols(seq));
    let pe = tape.constant(&[len, channels], sinusoidal_encoding(len, channels))?;
    let seq = tape.add(seq, pe)?;
    let (out, attention) = run_blocks(tape, seq, params, eps)?;
    let mut offset = 0;
    let mut levels = Vec::with_capacity(combined.len());
    for c in combined {
        let n = tape.rows(c.features);
        levels.push(EncodedLevel {
            level: c.level,
            z: tape.slice_rows(out, offset, offset + n)?,
            attention: attention.clone(),
        });
        offset += n;
    }
    Ok(levels)
}

/// Two-layer temporal convolution stack per level.
pub fn encode_cnn(tape: &mut Tape, combined: &[CombinedFeature], convs: &[(Conv, Conv)]) -> Result<Vec<EncodedLevel>> {
    combined
        .iter()
        .zip(convs)
        .map(|(c, (c1, c2))| {
            let x = c1.forward(tape, c.features, 1)?;
            let x = tape.relu(x);
            let x = c2.forward(tape, x, 1)?;
            Ok(EncodedLevel {
                level: c.level,
                z: tape.relu(x),
                attention: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;

    #[test]
    fn constant_features_give_uniform_pdf() {
        let pdf = pdf_from_features(&[2.0; 12], 4, 3);
        for p in pdf {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_offset_doubles_probability() {
        let mut v = vec![0.3; 5 * 2];
        v[2 * 2] += std::f64::consts::LN_2;
        v[2 * 2 + 1] += std::f64::consts::LN_2;
        let pdf = pdf_from_features(&v, 5, 2);
        assert!((pdf[2] / pdf[0] - 2.0).abs() < 1e-12);
        assert!((pdf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_uniform_inversion() {
        let pdf = vec![0.125; 8];
        let idx = inverse_transform_sample(&pdf, &stratified_u(4)).unwrap();
        assert_eq!(idx, vec![0, 2, 4, 6]);
    }

    #[test]
    fn point_mass_and_zero_u() {
        let mut pdf = vec![0.0; 6];
        pdf[3] = 1.0;
        assert_eq!(inverse_transform_sample(&pdf, &stratified_u(5)).unwrap(), vec![3; 5]);
        assert_eq!(inverse_transform_sample(&pdf, &[0.0]).unwrap(), vec![3]);
        let pdf = vec![0.5, 0.5];
        assert_eq!(inverse_transform_sample(&pdf, &[0.0]).unwrap(), vec![0]);
    }

    #[test]
    fn sample_count_edge_cases() {
        let pdf = vec![0.5, 0.5];
        assert!(inverse_transform_sample(&pdf, &[]).unwrap().is_empty());
        assert_eq!(inverse_transform_sample(&pdf, &stratified_u(6)).unwrap().len(), 6);
    }

    fn encoder(store: &mut ParamStore, channels: usize, heads: usize, ctx: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut init = Init::new(&mut rng, 0.3);
        EncoderParams::register(store, &mut init, "enc", channels, 2, 1, ctx);
        let _ = heads;
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_is_native() {
        let mut store = ParamStore::new();
        encoder(&mut store, 8, 2, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EncoderParams::bind(&bound, "enc", 1, 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = tape.leaf(&Init::new(&mut rng, 1.0).uniform(&[6, 8], 1.0));
        let c = tape.leaf(&Init::new(&mut rng, 1.0).uniform(&[6, 8], 1.0));
        let combined = CombinedFeature { level: 2, features: h };
        let ctx = SampledContext {
            source_level: 1,
            indices: (0..6).collect(),
            features: c,
        };
        let enc = encode_level(&mut tape, &combined, Some(&ctx), &p, 1e-5).unwrap();
        assert_eq!(tape.shape(enc.z), &[6, 8]);
        assert_eq!(enc.attention.len(), 2);
        for &a in &enc.attention {
            assert_eq!(tape.shape(a), &[12, 12]);
            for r in 0..12 {
                let s: f64 = tape.value(a)[r * 12..(r + 1) * 12].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut store = ParamStore::new();
        encoder(&mut store, 4, 1, false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EncoderParams::bind(&bound, "enc", 1, 1, false).unwrap();
        let h = tape.constant(&[1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let enc = encode_level(&mut tape, &CombinedFeature { level: 1, features: h }, None, &p, 1e-5).unwrap();
        assert_eq!(tape.value(enc.attention[0]), &[1.0]);
    }

    #[test]
    fn context_channel_mismatch_rejected() {
        let mut store = ParamStore::new();
        encoder(&mut store, 4, 1, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EncoderParams::bind(&bound, "enc", 1, 1, true).unwrap();
        let h = tape.leaf(&Tensor::zeros(&[2, 4]));
        let c = tape.leaf(&Tensor::zeros(&[2, 3]));
        let ctx = SampledContext {
            source_level: 1,
            indices: vec![0, 1],
            features: c,
        };
        assert!(encode_level(&mut tape, &CombinedFeature { level: 2, features: h }, Some(&ctx), &p, 1e-5).is_err());
    }
}
