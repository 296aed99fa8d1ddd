//! The raw network `F(x, t, u)` and its reverse-mode differentiation.
//!
//! A fully-connected trunk conditioned on both noise scales: each time
//! argument is mapped to sinusoidal features of `ln(t + 1e-8)` (the floor
//! admits `u = 0`, which every sampler targets), the two feature blocks are
//! concatenated and projected through one dense layer, and the projection is
//! concatenated with the rescaled state before entering the trunk. The final
//! layer starts at zero so the wrapped consistency function begins as the
//! pure skip path.
//!
//! Differentiation is a hand-written backward pass over recorded
//! activations. A forward pass returns a trace; the trace is consumed by
//! either a parameter-gradient pass (accumulating into a [`GradientTape`])
//! or an input-gradient pass (no parameter accumulation, used for the
//! frozen outer evaluations of the trajectory loss). Calling backward
//! without a forward is unrepresentable: only a forward can mint a trace.
//!
//! All math is in `f64`; forward passes are deterministic, so identical
//! parameters and inputs give bitwise identical outputs.

use crate::error::{BcmError, Result};
use crate::model::ConsistencyModel;
use crate::parameterization::coeffs;
use crate::rng::{stream_rng, tag};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Sinusoidal features of a log-transformed noise scale.
///
/// Frequencies climb half an octave per channel starting at `0.25 * scale`;
/// a single time argument maps to `n_freqs` sine plus `n_freqs` cosine
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub n_freqs: usize,
    pub scale: f64,
    omegas: Vec<f64>,
}

/// Floor added before the log transform so u = 0 embeds finitely.
const LOG_FLOOR: f64 = 1e-8;

impl TimeEmbedding {
    pub fn new(n_freqs: usize, scale: f64) -> Self {
        let omegas = (0..n_freqs)
            .map(|i| scale * 0.25 * 2f64.powf(i as f64 / 2.0))
            .collect();
        TimeEmbedding { n_freqs, scale, omegas }
    }

    /// Feature length for a single time argument.
    pub fn out_dim(&self) -> usize {
        2 * self.n_freqs
    }

    fn write(&self, t: f64, out: &mut [f64]) {
        let g = (t + LOG_FLOOR).ln();
        for (i, &omega) in self.omegas.iter().enumerate() {
            let (s, c) = (omega * g).sin_cos();
            out[i] = s;
            out[self.n_freqs + i] = c;
        }
    }

    /// Features of one time argument: sine block then cosine block.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.write(t, &mut out);
        out
    }

    /// Concatenated features of `(t, u)`, length `4 * n_freqs`.
    pub fn embed_times(&self, t: f64, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.out_dim()];
        let half = self.out_dim();
        self.write(t, &mut out[..half]);
        self.write(u, &mut out[half..]);
        out
    }
}

/// Network shape. Fully determines every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub emb_proj_width: usize,
    pub embedding: TimeEmbedding,
}

impl Arch {
    /// Default shape for a given data dimensionality.
    pub fn for_dim(data_dim: usize) -> Self {
        Arch {
            data_dim,
            hidden_width: 128,
            hidden_layers: 3,
            emb_proj_width: 64,
            embedding: TimeEmbedding::new(16, 1.0),
        }
    }

    /// Width of the concatenated trunk input.
    fn trunk_in(&self) -> usize {
        self.data_dim + self.emb_proj_width
    }
}

/// One dense layer, row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    fn fan_in_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        Dense { w, b: vec![0.0; out_dim], in_dim, out_dim }
    }
}

/// All trainable weights plus the data scale they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub sigma_data: f64,
    pub emb_proj: Dense,
    pub layers: Vec<Dense>,
}

impl ModelParams {
    /// Variance-preserving fan-in initialization with a zero final layer, so
    /// the wrapped map starts as `c_skip * x`.
    pub fn init(arch: Arch, sigma_data: f64, seed: u64) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(BcmError::invalid("sigma_data must be positive"));
        }
        if arch.data_dim == 0 || arch.hidden_width == 0 || arch.hidden_layers == 0 {
            return Err(BcmError::invalid("arch dimensions must be positive"));
        }
        let mut rng = stream_rng(seed, tag::INIT, 0, 0);
        let emb_in = 2 * arch.embedding.out_dim();
        let emb_proj = Dense::fan_in_init(emb_in, arch.emb_proj_width, &mut rng);
        let mut layers = Vec::with_capacity(arch.hidden_layers + 1);
        let mut in_dim = arch.trunk_in();
        for _ in 0..arch.hidden_layers {
            layers.push(Dense::fan_in_init(in_dim, arch.hidden_width, &mut rng));
            in_dim = arch.hidden_width;
        }
        layers.push(Dense::zeros(in_dim, arch.data_dim));
        Ok(ModelParams { arch, sigma_data, emb_proj, layers })
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.emb_proj.w, &self.emb_proj.b];
        for l in &self.layers {
            v.push(&l.w);
            v.push(&l.b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.emb_proj.w, &mut self.emb_proj.b];
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Raw network evaluation `F(x, t, u)` for a single state.
    pub fn forward(&self, x: &[f64], t: f64, u: f64) -> Result<Vec<f64>> {
        if x.len() != self.arch.data_dim {
            return Err(BcmError::DimensionMismatch { expected: self.arch.data_dim, got: x.len() });
        }
        let (out, _) = self.forward_batch(x, &[t], &[u], false);
        Ok(out)
    }

    /// Wrapped consistency evaluation `f(x, t, u)` for a single state.
    pub fn consistency(&self, x: &[f64], t: f64, u: f64) -> Result<Vec<f64>> {
        if x.len() != self.arch.data_dim {
            return Err(BcmError::DimensionMismatch { expected: self.arch.data_dim, got: x.len() });
        }
        coeffs(t, u, self.sigma_data)?;
        let (out, _) = self.consistency_batch(x, &[t], &[u], false);
        Ok(out)
    }

    /// Batched raw forward. `xs` is row-major `bsz x data_dim`; `ts`/`us`
    /// hold one pair per row. Returns the output and, when requested, the
    /// activation trace needed for a backward pass.
    pub(crate) fn forward_batch(
        &self,
        xs: &[f64],
        ts: &[f64],
        us: &[f64],
        record: bool,
    ) -> (Vec<f64>, Option<NetTrace>) {
        let d = self.arch.data_dim;
        let bsz = ts.len();
        debug_assert_eq!(xs.len(), bsz * d);
        debug_assert_eq!(us.len(), bsz);
        let emb = &self.arch.embedding;
        let emb_in = 2 * emb.out_dim();
        let half = emb.out_dim();

        let mut emb_raw = vec![0.0; bsz * emb_in];
        for r in 0..bsz {
            let row = &mut emb_raw[r * emb_in..(r + 1) * emb_in];
            emb.write(ts[r], &mut row[..half]);
            emb.write(us[r], &mut row[half..]);
        }

        let e_out = self.arch.emb_proj_width;
        let mut emb_pre = vec![0.0; bsz * e_out];
        affine_forward(&self.emb_proj, &emb_raw, bsz, &mut emb_pre);
        let emb_sig = sigmoid_slice(&emb_pre);

        let trunk_in = self.arch.trunk_in();
        let mut concat = vec![0.0; bsz * trunk_in];
        for r in 0..bsz {
            let dst = &mut concat[r * trunk_in..(r + 1) * trunk_in];
            dst[..d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            for (j, (&z, &s)) in emb_pre[r * e_out..(r + 1) * e_out]
                .iter()
                .zip(&emb_sig[r * e_out..(r + 1) * e_out])
                .enumerate()
            {
                dst[d + j] = z * s;
            }
        }

        let n_layers = self.layers.len();
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(if record { n_layers } else { 0 });
        let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(if record { n_layers - 1 } else { 0 });
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(if record { n_layers - 1 } else { 0 });
        let mut cur = concat.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut pre = vec![0.0; bsz * layer.out_dim];
            affine_forward(layer, &cur, bsz, &mut pre);
            let last = li == n_layers - 1;
            if last {
                cur = pre.clone();
            } else {
                let sig = sigmoid_slice(&pre);
                cur = pre.iter().zip(&sig).map(|(&z, &s)| z * s).collect();
                if record {
                    sigs.push(sig);
                    acts.push(cur.clone());
                }
            }
            if record {
                pres.push(pre);
            }
        }

        let trace =
            record.then(|| NetTrace { bsz, emb_raw, emb_pre, emb_sig, concat, pres, sigs, acts });
        (cur, trace)
    }

    /// Batched consistency evaluation; per-row `(t, u)` coefficients applied
    /// around the raw network.
    pub(crate) fn consistency_batch(
        &self,
        xs: &[f64],
        ts: &[f64],
        us: &[f64],
        record: bool,
    ) -> (Vec<f64>, Option<WrapTrace>) {
        let d = self.arch.data_dim;
        let bsz = ts.len();
        let mut c_in = vec![0.0; bsz];
        let mut c_out = vec![0.0; bsz];
        let mut c_skip = vec![0.0; bsz];
        for r in 0..bsz {
            let c = coeffs(ts[r], us[r], self.sigma_data)
                .expect("noise scales validated by caller");
            c_in[r] = c.c_in;
            c_out[r] = c.c_out;
            c_skip[r] = c.c_skip;
        }
        let mut scaled = vec![0.0; bsz * d];
        for r in 0..bsz {
            for j in 0..d {
                scaled[r * d + j] = c_in[r] * xs[r * d + j];
            }
        }
        let (net, trace) = self.forward_batch(&scaled, ts, us, record);
        let mut out = vec![0.0; bsz * d];
        for r in 0..bsz {
            for j in 0..d {
                out[r * d + j] = c_skip[r] * xs[r * d + j] + c_out[r] * net[r * d + j];
            }
        }
        let trace = trace.map(|net| WrapTrace { net, c_in, c_out, c_skip });
        (out, trace)
    }

    /// Accumulate parameter gradients of the raw network given the upstream
    /// gradient on its output.
    pub(crate) fn backward_params(&self, trace: &NetTrace, d_out: &[f64], tape: &mut GradientTape) {
        let d_concat = self.backward_trunk(trace, d_out, Some(tape));
        self.backward_embedding(trace, &d_concat, tape);
    }

    /// Input gradient of the raw network; parameters receive nothing.
    pub(crate) fn backward_input(&self, trace: &NetTrace, d_out: &[f64]) -> Vec<f64> {
        let d = self.arch.data_dim;
        let trunk_in = self.arch.trunk_in();
        let d_concat = self.backward_trunk(trace, d_out, None);
        let mut d_x = vec![0.0; trace.bsz * d];
        for r in 0..trace.bsz {
            d_x[r * d..(r + 1) * d]
                .copy_from_slice(&d_concat[r * trunk_in..r * trunk_in + d]);
        }
        d_x
    }

    /// Shared trunk backward: returns the gradient on the concatenated
    /// input, optionally accumulating layer gradients.
    fn backward_trunk(
        &self,
        trace: &NetTrace,
        d_out: &[f64],
        mut tape: Option<&mut GradientTape>,
    ) -> Vec<f64> {
        let bsz = trace.bsz;
        let n_layers = self.layers.len();
        let mut d_cur = d_out.to_vec();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            // d_cur currently holds the gradient on this layer's
            // post-activation output; convert to pre-activation.
            if li != n_layers - 1 {
                let pre = &trace.pres[li];
                let sig = &trace.sigs[li];
                for ((g, &z), &s) in d_cur.iter_mut().zip(pre.iter()).zip(sig.iter()) {
                    *g *= silu_prime_from_sigmoid(z, s);
                }
            }
            if let Some(t) = tape.as_deref_mut() {
                let input = if li == 0 { &trace.concat } else { &trace.acts[li - 1] };
                let (dw, db) = t.layer_mut(li);
                affine_back_params(layer, input, &d_cur, bsz, dw, db);
            }
            d_cur = affine_back_input(layer, &d_cur, bsz);
        }
        d_cur
    }

    /// Embedding-projection backward from the gradient on the concatenated
    /// trunk input.
    fn backward_embedding(&self, trace: &NetTrace, d_concat: &[f64], tape: &mut GradientTape) {
        let d = self.arch.data_dim;
        let e_out = self.arch.emb_proj_width;
        let trunk_in = self.arch.trunk_in();
        let mut d_pre = vec![0.0; trace.bsz * e_out];
        for r in 0..trace.bsz {
            for j in 0..e_out {
                let z = trace.emb_pre[r * e_out + j];
                let s = trace.emb_sig[r * e_out + j];
                d_pre[r * e_out + j] = d_concat[r * trunk_in + d + j] * silu_prime_from_sigmoid(z, s);
            }
        }
        affine_back_params(
            &self.emb_proj,
            &trace.emb_raw,
            &d_pre,
            trace.bsz,
            &mut tape.emb_w,
            &mut tape.emb_b,
        );
    }

    /// Parameter gradients of the wrapped consistency output.
    pub(crate) fn consistency_backward_params(
        &self,
        trace: &WrapTrace,
        d_out: &[f64],
        tape: &mut GradientTape,
    ) {
        let d = self.arch.data_dim;
        let mut d_net = vec![0.0; d_out.len()];
        for r in 0..trace.net.bsz {
            for j in 0..d {
                d_net[r * d + j] = trace.c_out[r] * d_out[r * d + j];
            }
        }
        self.backward_params(&trace.net, &d_net, tape);
    }

    /// Input gradient of the wrapped consistency output.
    pub(crate) fn consistency_backward_input(&self, trace: &WrapTrace, d_out: &[f64]) -> Vec<f64> {
        let d = self.arch.data_dim;
        let bsz = trace.net.bsz;
        let mut d_net = vec![0.0; d_out.len()];
        for r in 0..bsz {
            for j in 0..d {
                d_net[r * d + j] = trace.c_out[r] * d_out[r * d + j];
            }
        }
        let d_scaled = self.backward_input(&trace.net, &d_net);
        let mut d_x = vec![0.0; bsz * d];
        for r in 0..bsz {
            for j in 0..d {
                d_x[r * d + j] =
                    trace.c_skip[r] * d_out[r * d + j] + trace.c_in[r] * d_scaled[r * d + j];
            }
        }
        d_x
    }
}

impl ConsistencyModel for ModelParams {
    fn dim(&self) -> usize {
        self.arch.data_dim
    }

    fn consistency_map(&self, x: &[f64], t: f64, u: f64) -> Vec<f64> {
        self.consistency(x, t, u).expect("dimensions validated by caller")
    }
}

/// Recorded activations of one batched forward pass. Sigmoids are kept so
/// the backward pass needs no fresh exponentials.
pub(crate) struct NetTrace {
    bsz: usize,
    emb_raw: Vec<f64>,
    emb_pre: Vec<f64>,
    emb_sig: Vec<f64>,
    concat: Vec<f64>,
    pres: Vec<Vec<f64>>,
    sigs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

/// Recorded activations plus the coefficients applied around them.
pub(crate) struct WrapTrace {
    net: NetTrace,
    c_in: Vec<f64>,
    c_out: Vec<f64>,
    c_skip: Vec<f64>,
}

/// Per-parameter gradient accumulators, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub emb_w: Vec<f64>,
    pub emb_b: Vec<f64>,
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl GradientTape {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientTape {
            emb_w: vec![0.0; params.emb_proj.w.len()],
            emb_b: vec![0.0; params.emb_proj.b.len()],
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn layer_mut(&mut self, li: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = &mut self.layers[li];
        (w, b)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.emb_w, &self.emb_b];
        for (w, b) in &self.layers {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.emb_w, &mut self.emb_b];
        for (w, b) in &mut self.layers {
            v.push(w);
            v.push(b);
        }
        v
    }

    /// Accumulate another tape into this one.
    pub fn add_assign(&mut self, other: &GradientTape) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    /// True when every accumulator is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-z))
}

#[inline]
fn silu_prime_from_sigmoid(z: f64, s: f64) -> f64 {
    s * (1.0 + z * (1.0 - s))
}

/// Branch-light `exp` that the compiler can vectorize across activation
/// buffers. Classic range reduction `x = k ln2 + r` with a rational
/// approximation on `|r| <= ln2/2`; relative error is at the few-ulp level,
/// checked against the libm reference in the tests.
#[inline]
fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.93145751953125e-1;
    const LN2_LO: f64 = 1.42860682030941723212e-6;
    const P0: f64 = 1.26177193074810590878e-4;
    const P1: f64 = 3.02994407707441961300e-2;
    const P2: f64 = 9.99999999999999999910e-1;
    const Q0: f64 = 3.00198505138664455042e-6;
    const Q1: f64 = 2.52448340349684104192e-3;
    const Q2: f64 = 2.27265548208155028766e-1;
    const Q3: f64 = 2.0;

    let x = x.clamp(-708.0, 708.0);
    let k = (x * LOG2E).round();
    let r = x - k * LN2_HI - k * LN2_LO;
    let r2 = r * r;
    let p = r * (P2 + r2 * (P1 + r2 * P0));
    let q = Q3 + r2 * (Q2 + r2 * (Q1 + r2 * Q0));
    let e = 1.0 + 2.0 * p / (q - p);
    // Scale by 2^k in two hops so |k| up to 1416 stays in range; i32
    // exponent arithmetic keeps the loop vectorizable on AVX2.
    let k1 = (k * 0.5).floor() as i32;
    let k2 = (k as i32) - k1;
    let s1 = f64::from_bits(((k1 as i64 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((k2 as i64 + 1023) as u64) << 52);
    e * s1 * s2
}

/// Sigmoid over a buffer, chunked so the exponential vectorizes.
fn sigmoid_slice(pre: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pre.len()];
    let mut zi = pre.chunks_exact(8);
    let mut oi = out.chunks_exact_mut(8);
    for (z, o) in (&mut zi).zip(&mut oi) {
        let z: &[f64; 8] = z.try_into().unwrap();
        let o: &mut [f64; 8] = o.try_into().unwrap();
        for j in 0..8 {
            o[j] = 1.0 / (1.0 + fast_exp(-z[j]));
        }
    }
    for (z, o) in zi.remainder().iter().zip(oi.into_remainder()) {
        *o = sigmoid(*z);
    }
    out
}

// Reductions with a single accumulator serialize on FMA latency; eight
// independent partials over fixed-size chunks keep the pipes full and let
// LLVM vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        let ca: &[f64; 8] = ca.try_into().unwrap();
        let cb: &[f64; 8] = cb.try_into().unwrap();
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

// The affine kernels process four batch rows per pass over the weight
// matrix; one row at a time is memory-bound on re-streaming the weights.

fn affine_forward(layer: &Dense, input: &[f64], bsz: usize, out: &mut [f64]) {
    let (ni, no) = (layer.in_dim, layer.out_dim);
    let mut r = 0;
    while r + 4 <= bsz {
        let x0 = &input[r * ni..(r + 1) * ni];
        let x1 = &input[(r + 1) * ni..(r + 2) * ni];
        let x2 = &input[(r + 2) * ni..(r + 3) * ni];
        let x3 = &input[(r + 3) * ni..(r + 4) * ni];
        for o in 0..no {
            let row = &layer.w[o * ni..(o + 1) * ni];
            let mut a0 = [0.0f64; 4];
            let mut a1 = [0.0f64; 4];
            let mut a2 = [0.0f64; 4];
            let mut a3 = [0.0f64; 4];
            let mut wi = row.chunks_exact(4);
            let mut i0 = x0.chunks_exact(4);
            let mut i1 = x1.chunks_exact(4);
            let mut i2 = x2.chunks_exact(4);
            let mut i3 = x3.chunks_exact(4);
            for ((((w, c0), c1), c2), c3) in
                (&mut wi).zip(&mut i0).zip(&mut i1).zip(&mut i2).zip(&mut i3)
            {
                let w: &[f64; 4] = w.try_into().unwrap();
                let c0: &[f64; 4] = c0.try_into().unwrap();
                let c1: &[f64; 4] = c1.try_into().unwrap();
                let c2: &[f64; 4] = c2.try_into().unwrap();
                let c3: &[f64; 4] = c3.try_into().unwrap();
                for j in 0..4 {
                    a0[j] += w[j] * c0[j];
                    a1[j] += w[j] * c1[j];
                    a2[j] += w[j] * c2[j];
                    a3[j] += w[j] * c3[j];
                }
            }
            let mut t0 = (a0[0] + a0[1]) + (a0[2] + a0[3]);
            let mut t1 = (a1[0] + a1[1]) + (a1[2] + a1[3]);
            let mut t2 = (a2[0] + a2[1]) + (a2[2] + a2[3]);
            let mut t3 = (a3[0] + a3[1]) + (a3[2] + a3[3]);
            for (k, &w) in wi.remainder().iter().enumerate() {
                t0 += w * i0.remainder()[k];
                t1 += w * i1.remainder()[k];
                t2 += w * i2.remainder()[k];
                t3 += w * i3.remainder()[k];
            }
            let b = layer.b[o];
            out[r * no + o] = b + t0;
            out[(r + 1) * no + o] = b + t1;
            out[(r + 2) * no + o] = b + t2;
            out[(r + 3) * no + o] = b + t3;
        }
        r += 4;
    }
    while r < bsz {
        let xi = &input[r * ni..(r + 1) * ni];
        let dst = &mut out[r * no..(r + 1) * no];
        for (o, d) in dst.iter_mut().enumerate() {
            let row = &layer.w[o * ni..(o + 1) * ni];
            *d = layer.b[o] + dot(row, xi);
        }
        r += 1;
    }
}

fn affine_back_input(layer: &Dense, d_out: &[f64], bsz: usize) -> Vec<f64> {
    let (ni, no) = (layer.in_dim, layer.out_dim);
    let mut d_in = vec![0.0; bsz * ni];
    let mut r = 0;
    while r + 4 <= bsz {
        for o in 0..no {
            let g0 = d_out[r * no + o];
            let g1 = d_out[(r + 1) * no + o];
            let g2 = d_out[(r + 2) * no + o];
            let g3 = d_out[(r + 3) * no + o];
            if g0 == 0.0 && g1 == 0.0 && g2 == 0.0 && g3 == 0.0 {
                continue;
            }
            let row = &layer.w[o * ni..(o + 1) * ni];
            for k in 0..ni {
                let w = row[k];
                d_in[r * ni + k] += g0 * w;
                d_in[(r + 1) * ni + k] += g1 * w;
                d_in[(r + 2) * ni + k] += g2 * w;
                d_in[(r + 3) * ni + k] += g3 * w;
            }
        }
        r += 4;
    }
    while r < bsz {
        let base = r * ni;
        for o in 0..no {
            let g = d_out[r * no + o];
            if g == 0.0 {
                continue;
            }
            let row = &layer.w[o * ni..(o + 1) * ni];
            for (k, &b) in row.iter().enumerate() {
                d_in[base + k] += g * b;
            }
        }
        r += 1;
    }
    d_in
}

fn affine_back_params(
    layer: &Dense,
    input: &[f64],
    d_out: &[f64],
    bsz: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (ni, no) = (layer.in_dim, layer.out_dim);
    let mut r = 0;
    while r + 4 <= bsz {
        let x0 = &input[r * ni..(r + 1) * ni];
        let x1 = &input[(r + 1) * ni..(r + 2) * ni];
        let x2 = &input[(r + 2) * ni..(r + 3) * ni];
        let x3 = &input[(r + 3) * ni..(r + 4) * ni];
        for o in 0..no {
            let g0 = d_out[r * no + o];
            let g1 = d_out[(r + 1) * no + o];
            let g2 = d_out[(r + 2) * no + o];
            let g3 = d_out[(r + 3) * no + o];
            if g0 == 0.0 && g1 == 0.0 && g2 == 0.0 && g3 == 0.0 {
                continue;
            }
            db[o] += (g0 + g1) + (g2 + g3);
            let row = &mut dw[o * ni..(o + 1) * ni];
            for k in 0..ni {
                row[k] += g0 * x0[k] + g1 * x1[k] + g2 * x2[k] + g3 * x3[k];
            }
        }
        r += 4;
    }
    while r < bsz {
        let xi = &input[r * ni..(r + 1) * ni];
        for o in 0..no {
            let g = d_out[r * no + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = &mut dw[o * ni..(o + 1) * ni];
            for (a, &b) in row.iter_mut().zip(xi) {
                *a += g * b;
            }
        }
        r += 1;
    }
}
