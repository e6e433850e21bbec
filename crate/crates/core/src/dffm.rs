//! Dynamic feature fusion: a large receptive field decoupled into a chain of
//! small submanifold stages whose intermediate outputs are blended by a
//! per-site, per-stage sigmoid gate computed from channel-pooled statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mat, ParamId, ParamStore, Tape, Var};
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::rulebook::{ConvMode, Kernel, RulebookCache};
use crate::sparse::SparseTensor;

/// Kernel size `k`, dilation `d` and stride `s` of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageKernel {
    pub k: usize,
    pub d: usize,
    pub s: usize,
}

impl StageKernel {
    pub const fn new(k: usize, d: usize, s: usize) -> Self {
        StageKernel { k, d, s }
    }

    pub fn kernel(self) -> Kernel {
        Kernel::new(self.k, self.d, self.s)
    }
}

/// `RF_1 = k_1`, `RF_i = RF_{i-1} + d_i * s_i * (k_i - 1)`.
pub fn receptive_field(spec: &[StageKernel]) -> Result<usize> {
    let (first, rest) = spec.split_first().ok_or(Error::EmptySpec)?;
    let mut rf = first.k;
    for st in rest {
        rf += st.d * st.s * (st.k - 1);
    }
    Ok(rf)
}

/// Chain of `(target_rf - 1) / 2` stages of `(3, 1, 1)`.
pub fn decouple_kernel(target_rf: usize) -> Result<Vec<StageKernel>> {
    if target_rf < 3 || target_rf % 2 == 0 {
        return Err(Error::InvalidRf(target_rf));
    }
    Ok(alloc::vec![StageKernel::new(3, 1, 1); (target_rf - 1) / 2])
}

/// Per-row `(mean, max)` over all `cols` channels of a row-major matrix.
pub fn channel_pool(features: &[f64], cols: usize) -> Vec<[f64; 2]> {
    if cols == 0 {
        return Vec::new();
    }
    features
        .chunks_exact(cols)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [mean, max]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DffmParams {
    /// `C_1 .. C_n`, submanifold `c -> c`, no bias.
    pub stage_convs: Vec<ConvParams>,
    /// `2 -> n`, 3x3x3 submanifold, with bias.
    pub attention_conv: ConvParams,
    /// `c -> c`, 1x1x1, no bias.
    pub out_conv: ConvParams,
    /// Applied after every stage convolution.
    pub activation: Activation,
}

impl DffmParams {
    /// All-zero module for `channels` and the given stage kernels.
    pub fn zeros(channels: usize, spec: &[StageKernel], activation: Activation) -> Self {
        let stage_convs = spec
            .iter()
            .map(|st| ConvParams::zeros(st.kernel(), ConvMode::Submanifold, channels, channels, false))
            .collect();
        DffmParams {
            stage_convs,
            attention_conv: ConvParams::zeros(Kernel::cube(3), ConvMode::Submanifold, 2, spec.len(), true),
            out_conv: ConvParams::zeros(Kernel::cube(1), ConvMode::Submanifold, channels, channels, false),
            activation,
        }
    }

    /// Uniform `[-scale, scale]` initialization of every weight and bias.
    pub fn random<R: Rng + ?Sized>(channels: usize, spec: &[StageKernel], activation: Activation, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, spec, activation);
        let mut fill = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
        for c in &mut p.stage_convs {
            fill(&mut c.weights);
        }
        fill(&mut p.attention_conv.weights);
        fill(p.attention_conv.bias.as_mut().expect("attention bias"));
        fill(&mut p.out_conv.weights);
        p
    }

    pub fn stages(&self) -> usize {
        self.stage_convs.len()
    }

    pub fn channels(&self) -> usize {
        self.out_conv.c_in
    }

    pub fn spec(&self) -> Vec<StageKernel> {
        self.stage_convs
            .iter()
            .map(|c| StageKernel::new(c.kernel.size[0], c.kernel.dilation, c.kernel.stride))
            .collect()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::EmptySpec);
        }
        for (i, c) in self.stage_convs.iter().enumerate() {
            let cubic = c.kernel.size[0] == c.kernel.size[1] && c.kernel.size[1] == c.kernel.size[2];
            if c.mode != ConvMode::Submanifold || c.kernel.stride != 1 || !cubic || c.kernel.size[0] % 2 == 0 {
                return Err(Error::NonSubmanifoldStage(i));
            }
            c.validate()?;
            check_width("stage conv input", channels, c.c_in)?;
            check_width("stage conv output", channels, c.c_out)?;
        }
        let a = &self.attention_conv;
        a.validate()?;
        if a.mode != ConvMode::Submanifold {
            return Err(Error::InvalidKernel("attention convolution must be submanifold"));
        }
        check_width("attention input", 2, a.c_in)?;
        check_width("attention output", n, a.c_out)?;
        let o = &self.out_conv;
        o.validate()?;
        if o.kernel != Kernel::cube(1) || o.mode != ConvMode::Submanifold {
            return Err(Error::InvalidKernel("output convolution must be a submanifold 1x1x1"));
        }
        check_width("output conv input", channels, o.c_in)?;
        check_width("output conv output", channels, o.c_out)?;
        Ok(())
    }

    /// Registers every tensor in `store` under `prefix`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<DffmIds> {
        let mut stages = Vec::with_capacity(self.stages());
        for (i, c) in self.stage_convs.iter().enumerate() {
            stages.push(store.add(format!("{prefix}.stage{i}.w"), conv_shape(c), c.weights.clone())?);
        }
        let a = &self.attention_conv;
        let attn_w = store.add(format!("{prefix}.attn.w"), conv_shape(a), a.weights.clone())?;
        let attn_b = store.add(format!("{prefix}.attn.b"), alloc::vec![a.c_out], a.bias.clone().expect("attention bias"))?;
        let out_w = store.add(format!("{prefix}.out.w"), conv_shape(&self.out_conv), self.out_conv.weights.clone())?;
        Ok(DffmIds {
            kernels: self.stage_convs.iter().map(|c| c.kernel).collect(),
            attn_kernel: a.kernel,
            activation: self.activation,
            stages,
            attn_w,
            attn_b,
            out_w,
        })
    }

    /// Reads the module back out of `store`.
    pub fn from_store(store: &ParamStore, ids: &DffmIds) -> Self {
        let c = store.shape(ids.out_w)[1];
        let n = ids.stages.len();
        let stage_convs = ids
            .stages
            .iter()
            .zip(&ids.kernels)
            .map(|(&id, &k)| ConvParams {
                kernel: k,
                mode: ConvMode::Submanifold,
                c_in: c,
                c_out: c,
                weights: store.get(id).to_vec(),
                bias: None,
            })
            .collect();
        DffmParams {
            stage_convs,
            attention_conv: ConvParams {
                kernel: ids.attn_kernel,
                mode: ConvMode::Submanifold,
                c_in: 2,
                c_out: n,
                weights: store.get(ids.attn_w).to_vec(),
                bias: Some(store.get(ids.attn_b).to_vec()),
            },
            out_conv: ConvParams {
                kernel: Kernel::cube(1),
                mode: ConvMode::Submanifold,
                c_in: c,
                c_out: c,
                weights: store.get(ids.out_w).to_vec(),
                bias: None,
            },
            activation: ids.activation,
        }
    }
}

fn check_width(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { what, expected, got });
    }
    Ok(())
}

pub(crate) fn conv_shape(c: &ConvParams) -> Vec<usize> {
    alloc::vec![c.kernel.volume(), c.c_in, c.c_out]
}

/// Where a module's tensors live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DffmIds {
    pub kernels: Vec<Kernel>,
    pub attn_kernel: Kernel,
    pub activation: Activation,
    pub stages: Vec<ParamId>,
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub out_w: ParamId,
}

/// Tape handles of the intermediate quantities.
#[derive(Debug, Clone)]
pub struct DffmNodes {
    pub output: Var,
    /// `rows x n` gate values.
    pub gates: Var,
    pub stage_features: Vec<Var>,
}

/// Records the module on `tape`. `x` holds the rows of the tensor whose
/// active set `cache` was built from.
pub fn dffm_graph(tape: &mut Tape, x: Var, store: &ParamStore, ids: &DffmIds, cache: &mut RulebookCache) -> Result<DffmNodes> {
    let mut feats = Vec::with_capacity(ids.stages.len());
    let mut prev = x;
    for (&id, &k) in ids.stages.iter().zip(&ids.kernels) {
        let rb = cache.get(k, ConvMode::Submanifold)?;
        let w = tape.param(store, id);
        let f = tape.conv(prev, w, None, rb);
        let f = tape.activate(f, ids.activation);
        feats.push(f);
        prev = f;
    }
    let cat = tape.concat(&feats);
    let pooled = tape.mean_max(cat);
    let rb = cache.get(ids.attn_kernel, ConvMode::Submanifold)?;
    let aw = tape.param(store, ids.attn_w);
    let ab = tape.param(store, ids.attn_b);
    let logits = tape.conv(pooled, aw, Some(ab), rb);
    let gates = tape.sigmoid(logits);
    let mut fused: Option<Var> = None;
    for (n, &f) in feats.iter().enumerate() {
        let g = tape.select_col(gates, n);
        let term = tape.scale_rows(f, g);
        fused = Some(match fused {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let fused = fused.ok_or(Error::EmptySpec)?;
    let rb = cache.get(Kernel::cube(1), ConvMode::Submanifold)?;
    let ow = tape.param(store, ids.out_w);
    let out = tape.conv(fused, ow, None, rb);
    let output = tape.add(out, x);
    Ok(DffmNodes {
        output,
        gates,
        stage_features: feats,
    })
}

/// Result of a standalone forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DffmOutput {
    pub output: SparseTensor,
    /// Per-site gate `W_n`, row-major `rows x n`.
    pub gates: Vec<f64>,
}

/// Forward pass on a sparse tensor; the output shares its coordinates.
pub fn dffm_forward(x: &SparseTensor, p: &DffmParams) -> Result<SparseTensor> {
    dffm_forward_full(x, p).map(|o| o.output)
}

pub fn dffm_forward_full(x: &SparseTensor, p: &DffmParams) -> Result<DffmOutput> {
    p.validate(x.channels())?;
    if x.is_empty() {
        return Ok(DffmOutput {
            output: x.clone(),
            gates: Vec::new(),
        });
    }
    let mut store = ParamStore::new();
    let ids = p.register(&mut store, "dffm")?;
    let mut tape = Tape::new();
    let xv = tape.constant(Mat::new(x.len(), x.channels(), x.features().to_vec()));
    let mut cache = RulebookCache::new(x);
    let nodes = dffm_graph(&mut tape, xv, &store, &ids, &mut cache)?;
    let output = x.with_features(x.channels(), tape.value(nodes.output).data.clone())?;
    Ok(DffmOutput {
        output,
        gates: tape.value(nodes.gates).data.clone(),
    })
}

/// Short description used in reports, e.g. `"(3,1)->(3,1)"`.
pub fn describe_spec(spec: &[StageKernel]) -> String {
    let parts: Vec<String> = spec.iter().map(|s| format!("({},{})", s.k, s.d)).collect();
    parts.join("->")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Coord, DenseGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_table() {
        assert_eq!(receptive_field(&[StageKernel::new(5, 1, 1)]).unwrap(), 5);
        assert_eq!(receptive_field(&[StageKernel::new(3, 1, 1); 2]).unwrap(), 5);
        assert_eq!(receptive_field(&[StageKernel::new(1, 1, 1)]).unwrap(), 1);
        assert_eq!(receptive_field(&[]), Err(Error::EmptySpec));
        assert_eq!(receptive_field(&[StageKernel::new(3, 1, 1), StageKernel::new(3, 2, 1)]).unwrap(), 7);
    }

    #[test]
    fn decoupling() {
        assert_eq!(decouple_kernel(5).unwrap(), alloc::vec![StageKernel::new(3, 1, 1); 2]);
        assert_eq!(decouple_kernel(3).unwrap().len(), 1);
        let s = decouple_kernel(9).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(receptive_field(&s).unwrap(), 9);
        assert_eq!(decouple_kernel(4), Err(Error::InvalidRf(4)));
        assert_eq!(decouple_kernel(1), Err(Error::InvalidRf(1)));
    }

    #[test]
    fn pooling() {
        assert_eq!(channel_pool(&[1.0, 2.0, 3.0, 4.0], 4), alloc::vec![[2.5, 4.0]]);
        assert_eq!(channel_pool(&[7.0; 6], 3), alloc::vec![[7.0, 7.0]; 2]);
        assert!(channel_pool(&[], 3).is_empty());
    }

    fn cube_tensor(n: u32, c: usize, rng: &mut ChaCha8Rng) -> SparseTensor {
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if rng.random::<f64>() < 0.5 {
                        coords.push(Coord::new(x, y, z));
                        feats.extend((0..c).map(|_| rng.random_range(-1.0..1.0)));
                    }
                }
            }
        }
        SparseTensor::new([n as usize; 3], c, coords, feats).unwrap()
    }

    #[test]
    fn zero_module_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cube_tensor(4, 3, &mut rng);
        let p = DffmParams::zeros(3, &decouple_kernel(5).unwrap(), Activation::Silu);
        let out = dffm_forward_full(&x, &p).unwrap();
        assert_eq!(out.output, x);
        assert!(out.gates.iter().all(|&g| g == 0.5));
        let e = SparseTensor::empty([4; 3], 3);
        assert_eq!(dffm_forward(&e, &p).unwrap(), e);
    }

    #[test]
    fn rejects_strided_stage_and_width() {
        let mut p = DffmParams::zeros(2, &decouple_kernel(5).unwrap(), Activation::Silu);
        let x = SparseTensor::empty([4; 3], 3);
        assert!(matches!(dffm_forward(&x, &p), Err(Error::ShapeMismatch { .. })));
        p.stage_convs[1].kernel.stride = 2;
        let x = SparseTensor::empty([4; 3], 2);
        assert_eq!(dffm_forward(&x, &p), Err(Error::NonSubmanifoldStage(1)));
    }

    #[test]
    fn saturated_gate_selects_one_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cube_tensor(4, 2, &mut rng);
        let spec = decouple_kernel(7).unwrap();
        let mut p = DffmParams::random(2, &spec, Activation::Tanh, 0.3, &mut rng);
        p.attention_conv.weights.iter_mut().for_each(|w| *w = 0.0);
        let j = 1;
        p.attention_conv.bias = Some((0..3).map(|n| if n == j { 800.0 } else { -800.0 }).collect());
        let y = dffm_forward(&x, &p).unwrap();

        // reference: out_conv(F_j) + x via direct conv calls
        let mut f = x.clone();
        for c in &p.stage_convs[..=j] {
            f = crate::conv::sparse_conv(&f, c).unwrap();
            let act: Vec<f64> = f.features().iter().map(|&v| p.activation.apply(v)).collect();
            f = f.with_features(2, act).unwrap();
        }
        let o = crate::conv::sparse_conv(&f, &p.out_conv).unwrap();
        for (a, (b, c)) in y.features().iter().zip(o.features().iter().zip(x.features())) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_support_within_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 9usize;
        for stages in 1..=3 {
            let spec = alloc::vec![StageKernel::new(3, 1, 1); stages];
            let p = DffmParams::random(1, &spec, Activation::Tanh, 0.5, &mut rng);
            let mut d = DenseGrid::zeros([n; 3], 1);
            d.at_mut(Coord::new(4, 4, 4))[0] = 1.0;
            let x = SparseTensor::from_dense_full(&d);
            let y = dffm_forward(&x, &p).unwrap();
            let centre = Coord::new(4, 4, 4);
            let mut reach = 0;
            for (i, &c) in y.coords().iter().enumerate() {
                if y.row(i)[0] != x.row(i)[0] {
                    reach = reach.max(c.chebyshev(centre));
                }
            }
            assert_eq!(reach as usize, stages);
        }
    }
}
