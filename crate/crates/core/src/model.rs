//! Four-stage sparse backbone with optional fusion modules, optional voxel
//! selection before the head, losses and one optimizer step.
//!
//! A forward pass is split into phases ([`Model::begin`],
//! [`Model::run_backbone`], [`Model::run_selection`], [`Model::run_head`]) so
//! callers can time them separately.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step_store, Activation, Mat, OptimState, ParamId, ParamStore, Tape, Var};
use crate::conv::ConvParams;
use crate::detector::{decode_boxes, detection_loss_graph, head_graph, head_targets, nms_bev, Detection, HeadConfig, HeadIds, HeadOutput, HeadParams, REG_CHANNELS};
use crate::dffm::{decouple_kernel, dffm_graph, DffmIds, DffmParams};
use crate::error::{Error, Result};
use crate::fsm::{fsm_graph, fsm_targets, random_subset, topk_rows, FsmConfig, FsmIds, FsmParams, ImportanceResult};
use crate::geometry::Box3D;
use crate::math::{ln, sqrt};
use crate::rulebook::{ConvMode, Kernel, RulebookCache};
use crate::sparse::{height_map, Coord, SparseTensor};
use crate::voxel::{GridGeometry, VoxelConfig, VOXEL_FEATURES};

pub const STAGES: usize = 4;
/// Downsampling factor between consecutive stages.
pub const STAGE_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: [usize; STAGES],
    pub activation: Activation,
    /// Build the importance head and select voxels before the detection head.
    pub fsm: bool,
    /// Bias terms on backbone convolutions.
    pub bias: bool,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 64],
            activation: Activation::Silu,
            fsm: true,
            bias: false,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DffmConfig {
    /// 1-based stages followed by a fusion module.
    pub stages: Vec<usize>,
    pub target_rf: usize,
    /// Where in a stage the module sits. Only `after_residual` exists.
    pub placement: String,
}

impl Default for DffmConfig {
    fn default() -> Self {
        DffmConfig {
            stages: vec![2, 3],
            target_rf: 5,
            placement: String::from("after_residual"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(default = "VoxelConfig::toy")]
    pub voxel: VoxelConfig,
    pub backbone: BackboneConfig,
    pub dffm: DffmConfig,
    pub fsm: FsmConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            voxel: VoxelConfig::toy(),
            backbone: BackboneConfig::default(),
            dffm: DffmConfig::default(),
            fsm: FsmConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        if self.backbone.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("backbone channel widths must be positive")));
        }
        for &s in &self.dffm.stages {
            if !(1..=STAGES).contains(&s) {
                return Err(Error::Config(format!("dffm stage {s} outside 1..={STAGES}")));
            }
        }
        if self.dffm.placement != "after_residual" {
            return Err(Error::Config(format!("unknown dffm placement '{}'", self.dffm.placement)));
        }
        if !self.dffm.stages.is_empty() {
            decouple_kernel(self.dffm.target_rf)?;
        }
        self.fsm.validate()?;
        self.head.validate()?;
        Ok(())
    }

    /// Geometry of the stage `s` grid (0-based).
    pub fn stage_geometry(&self, s: usize) -> GridGeometry {
        GridGeometry::of(&self.voxel).downsample(STAGE_STRIDE.pow(s as u32))
    }

    pub fn stage_grid(&self, s: usize) -> [usize; 3] {
        let mut g = self.voxel.grid_dims();
        for _ in 0..s {
            g = g.map(|v| v.div_ceil(STAGE_STRIDE));
        }
        g
    }

    /// Geometry of the BEV cells the head predicts on.
    pub fn bev_geometry(&self) -> GridGeometry {
        self.stage_geometry(STAGES - 1)
    }
}

/// What reaches the detection head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Every final-stage voxel.
    Full,
    /// Importance top-ratio selection with gating.
    Importance,
    /// Uniformly random subset, features unscaled.
    RandomMask { fraction: f64, seed: u64 },
}

type ConvIds = (ParamId, Option<ParamId>);

#[derive(Debug, Clone, PartialEq)]
pub struct StageIds {
    pub down: Option<ConvIds>,
    pub res_a: ConvIds,
    pub res_b: ConvIds,
    pub dffm: Option<DffmIds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelIds {
    pub input: ConvIds,
    pub stages: Vec<StageIds>,
    pub fsm: Option<FsmIds>,
    pub head: HeadIds,
}

/// Plain-struct view of one stage, for replicas built from direct conv calls.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub down: Option<ConvParams>,
    pub res_a: ConvParams,
    pub res_b: ConvParams,
    pub dffm: Option<DffmParams>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

const DOWN_KERNEL: Kernel = Kernel::new(3, 1, STAGE_STRIDE);
const RES_KERNEL: Kernel = Kernel::cube(3);

fn lecun<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize, gain: f64) -> Vec<f64> {
    let a = gain * sqrt(3.0 / fan_in.max(1) as f64);
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}

fn init_conv<R: Rng + ?Sized>(rng: &mut R, p: &mut ConvParams, gain: f64) {
    let fan_in = p.kernel.volume() * p.c_in;
    p.weights = lecun(rng, fan_in, p.weight_len(), gain);
}

fn add_conv(store: &mut ParamStore, name: &str, p: &ConvParams) -> Result<ConvIds> {
    let w = store.add(format!("{name}.w"), vec![p.kernel.volume(), p.c_in, p.c_out], p.weights.clone())?;
    let b = match &p.bias {
        Some(b) => Some(store.add(format!("{name}.b"), vec![p.c_out], b.clone())?),
        None => None,
    };
    Ok((w, b))
}

impl Model {
    /// Fresh parameters drawn from `cfg.backbone.init_seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.init_seed);
        let mut store = ParamStore::new();
        let ch = cfg.backbone.channels;
        let act = cfg.backbone.activation;
        let sm = ConvMode::Submanifold;
        let bias = cfg.backbone.bias;

        let mut input = ConvParams::zeros(RES_KERNEL, sm, VOXEL_FEATURES, ch[0], bias);
        init_conv(&mut rng, &mut input, 1.0);
        let input = add_conv(&mut store, "input", &input)?;

        let spec = if cfg.dffm.stages.is_empty() {
            Vec::new()
        } else {
            decouple_kernel(cfg.dffm.target_rf)?
        };
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = ch[s];
            let down = if s > 0 {
                let mut p = ConvParams::zeros(DOWN_KERNEL, ConvMode::Strided, ch[s - 1], c, bias);
                init_conv(&mut rng, &mut p, 1.0);
                Some(add_conv(&mut store, &format!("stage{}.down", s + 1), &p)?)
            } else {
                None
            };
            let mut a = ConvParams::zeros(RES_KERNEL, sm, c, c, bias);
            init_conv(&mut rng, &mut a, 1.0);
            let mut b = ConvParams::zeros(RES_KERNEL, sm, c, c, bias);
            init_conv(&mut rng, &mut b, 0.5);
            let res_a = add_conv(&mut store, &format!("stage{}.res_a", s + 1), &a)?;
            let res_b = add_conv(&mut store, &format!("stage{}.res_b", s + 1), &b)?;
            let dffm = if cfg.dffm.stages.contains(&(s + 1)) {
                let mut p = DffmParams::zeros(c, &spec, act);
                for st in &mut p.stage_convs {
                    init_conv(&mut rng, st, 1.0);
                }
                init_conv(&mut rng, &mut p.attention_conv, 0.5);
                init_conv(&mut rng, &mut p.out_conv, 0.5);
                Some(p.register(&mut store, &format!("stage{}.dffm", s + 1))?)
            } else {
                None
            };
            stages.push(StageIds { down, res_a, res_b, dffm });
        }

        let c_last = ch[STAGES - 1];
        let fsm = if cfg.backbone.fsm {
            let mut p = FsmParams::zeros(c_last, cfg.fsm.hidden, act);
            init_conv(&mut rng, &mut p.hidden_conv, 1.0);
            init_conv(&mut rng, &mut p.out_conv, 1.0);
            Some(p.register(&mut store, "fsm")?)
        } else {
            None
        };

        let nz = cfg.stage_grid(STAGES - 1)[2];
        let hc = &cfg.head;
        let mut head = HeadParams::zeros(c_last * nz, hc.hidden, 1, act);
        init_conv(&mut rng, &mut head.cls_hidden, 1.0);
        init_conv(&mut rng, &mut head.cls_out, 0.1);
        init_conv(&mut rng, &mut head.reg_hidden, 1.0);
        init_conv(&mut rng, &mut head.reg_out, 0.1);
        head.cls_out.bias = Some(vec![hc.cls_prior]);
        // typical car: 3.9 x 1.6 x 1.55 m, heading +x
        let mut reg_bias = vec![0.0; REG_CHANNELS];
        reg_bias[3] = ln(3.9);
        reg_bias[4] = ln(1.6);
        reg_bias[5] = ln(1.55);
        reg_bias[7] = 1.0;
        head.reg_out.bias = Some(reg_bias);
        let head = head.register(&mut store, "head")?;

        Ok(Model {
            cfg,
            store,
            ids: ModelIds { input, stages, fsm, head },
        })
    }

    /// Replaces every parameter value; shapes must match.
    pub fn load_values(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::LengthMismatch {
                expected: self.store.len(),
                got: values.len(),
            });
        }
        for (id, v) in self.store.ids().zip(values) {
            let n = self.store.get(id).len();
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "parameter values",
                    expected: n,
                    got: v.len(),
                });
            }
            self.store.get_mut(id).copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn default_selection(&self) -> Selection {
        if self.ids.fsm.is_some() {
            Selection::Importance
        } else {
            Selection::Full
        }
    }

    fn conv_params(&self, ids: ConvIds, kernel: Kernel, mode: ConvMode) -> ConvParams {
        let shape = self.store.shape(ids.0);
        ConvParams {
            kernel,
            mode,
            c_in: shape[1],
            c_out: shape[2],
            weights: self.store.get(ids.0).to_vec(),
            bias: ids.1.map(|b| self.store.get(b).to_vec()),
        }
    }

    pub fn input_params(&self) -> ConvParams {
        self.conv_params(self.ids.input, RES_KERNEL, ConvMode::Submanifold)
    }

    pub fn stage_params(&self, s: usize) -> StageParams {
        let st = &self.ids.stages[s];
        StageParams {
            down: st.down.map(|d| self.conv_params(d, DOWN_KERNEL, ConvMode::Strided)),
            res_a: self.conv_params(st.res_a, RES_KERNEL, ConvMode::Submanifold),
            res_b: self.conv_params(st.res_b, RES_KERNEL, ConvMode::Submanifold),
            dffm: st.dffm.as_ref().map(|ids| DffmParams::from_store(&self.store, ids)),
        }
    }

    pub fn fsm_params(&self) -> Option<FsmParams> {
        self.ids.fsm.as_ref().map(|ids| FsmParams::from_store(&self.store, ids))
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams::from_store(&self.store, &self.ids.head)
    }

    /// Input features scaled to the unit cube of the range; intensity unchanged.
    pub fn normalize_input(&self, x: &SparseTensor) -> Vec<f64> {
        let v = &self.cfg.voxel;
        let mut f = x.features().to_vec();
        for row in f.chunks_exact_mut(VOXEL_FEATURES) {
            for a in 0..3 {
                row[a] = (row[a] - v.range_min[a]) / (v.range_max[a] - v.range_min[a]);
            }
        }
        f
    }

    /// Starts a pass on a voxelized frame.
    pub fn begin(&self, x: &SparseTensor) -> Result<Pass> {
        if x.channels() != VOXEL_FEATURES {
            return Err(Error::ShapeMismatch {
                what: "input voxel channels",
                expected: VOXEL_FEATURES,
                got: x.channels(),
            });
        }
        if x.grid() != self.cfg.voxel.grid_dims() {
            return Err(Error::Config(format!(
                "input grid {:?} does not match the configured grid {:?}",
                x.grid(),
                self.cfg.voxel.grid_dims()
            )));
        }
        let mut tape = Tape::new();
        let h = tape.constant(Mat::new(x.len(), VOXEL_FEATURES, self.normalize_input(x)));
        Ok(Pass {
            tape,
            x: h,
            cache: RulebookCache::new(x),
            stage: 0,
            stage_sites: Vec::new(),
            fsm_logits: None,
            pre_selection: Vec::new(),
            importance: None,
            head: None,
            head_coords: Vec::new(),
        })
    }

    fn conv(&self, pass: &mut Pass, x: Var, ids: ConvIds, kernel: Kernel, mode: ConvMode) -> Result<Var> {
        let rb = pass.cache.get(kernel, mode)?;
        let w = pass.tape.param(&self.store, ids.0);
        let b = ids.1.map(|b| pass.tape.param(&self.store, b));
        Ok(pass.tape.conv(x, w, b, rb))
    }

    /// Input convolution, then per stage: optional stride-2 downsampling,
    /// a two-conv residual block and an optional fusion module.
    pub fn run_backbone(&self, pass: &mut Pass) -> Result<()> {
        let act = self.cfg.backbone.activation;
        let sm = ConvMode::Submanifold;
        let mut h = self.conv(pass, pass.x, self.ids.input, RES_KERNEL, sm)?;
        h = pass.tape.activate(h, act);
        for (s, st) in self.ids.stages.iter().enumerate() {
            if let Some(d) = st.down {
                let rb = pass.cache.get(DOWN_KERNEL, ConvMode::Strided)?;
                let w = pass.tape.param(&self.store, d.0);
                let b = d.1.map(|b| pass.tape.param(&self.store, b));
                h = pass.tape.conv(h, w, b, rb.clone());
                h = pass.tape.activate(h, act);
                let next = SparseTensor::from_canonical(rb.out_grid, 0, rb.out_coords.clone(), Vec::new());
                pass.cache = RulebookCache::new(&next);
            }
            let r = self.conv(pass, h, st.res_a, RES_KERNEL, sm)?;
            let r = pass.tape.activate(r, act);
            let r = self.conv(pass, r, st.res_b, RES_KERNEL, sm)?;
            let sum = pass.tape.add(h, r);
            h = pass.tape.activate(sum, act);
            if let Some(ids) = &st.dffm {
                h = dffm_graph(&mut pass.tape, h, &self.store, ids, &mut pass.cache)?.output;
            }
            pass.stage = s;
            pass.stage_sites.push(pass.cache.input().len());
        }
        pass.x = h;
        Ok(())
    }

    /// Chooses the voxels that reach the head.
    pub fn run_selection(&self, pass: &mut Pass, selection: Selection) -> Result<()> {
        let active = pass.cache.input().clone();
        pass.pre_selection = active.coords().to_vec();
        let kept: Vec<usize> = match selection {
            Selection::Full => return Ok(()),
            Selection::Importance => {
                let ids = self
                    .ids
                    .fsm
                    .as_ref()
                    .ok_or_else(|| Error::Config(String::from("importance selection needs a model built with fsm enabled")))?;
                let logits = fsm_graph(&mut pass.tape, pass.x, &self.store, ids, &mut pass.cache)?;
                let probs = pass.tape.sigmoid(logits);
                let weights = pass.tape.value(probs).data.clone();
                let ratio = self.cfg.fsm.keep_ratio;
                let kept = topk_rows(&weights, ratio)?;
                let threshold = if kept.is_empty() {
                    0.0
                } else {
                    kept.iter().map(|&r| weights[r]).fold(f64::INFINITY, f64::min)
                };
                let rows: Arc<[usize]> = kept.clone().into();
                let feats = pass.tape.gather_rows(pass.x, rows.clone());
                let w = pass.tape.gather_rows(probs, rows);
                pass.x = pass.tape.scale_rows(feats, w);
                pass.fsm_logits = Some(logits);
                pass.importance = Some(ImportanceResult {
                    weights,
                    threshold,
                    kept_rows: kept.clone(),
                    keep_ratio: ratio,
                });
                kept
            }
            Selection::RandomMask { fraction, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let kept = random_subset(active.len(), fraction, &mut rng)?;
                pass.x = pass.tape.gather_rows(pass.x, kept.clone().into());
                kept
            }
        };
        pass.cache = RulebookCache::new(&active.select_rows(&kept));
        Ok(())
    }

    /// Height compression and the detection head.
    pub fn run_head(&self, pass: &mut Pass) -> Result<HeadOutput> {
        let active = pass.cache.input().clone();
        let [nx, ny, nz] = active.grid();
        let c = self.cfg.backbone.channels[STAGES - 1];
        let (cols, map) = height_map(active.coords(), c);
        let n_cols = cols.len();
        let bev_x = pass.tape.scatter(pass.x, map.into(), n_cols, c * nz);
        let bev = SparseTensor::from_canonical([nx, ny, 1], 0, cols, Vec::new());
        let mut cache = RulebookCache::new(&bev);
        let (cls, reg) = head_graph(&mut pass.tape, bev_x, &self.store, &self.ids.head, &mut cache)?;
        pass.head = Some((cls, reg));
        pass.head_coords = bev.coords().to_vec();
        Ok(HeadOutput {
            coords: pass.head_coords.clone(),
            classes: 1,
            logits: pass.tape.value(cls).data.clone(),
            reg: pass.tape.value(reg).data.clone(),
        })
    }

    /// All phases in order.
    pub fn forward(&self, x: &SparseTensor, selection: Selection) -> Result<(Pass, HeadOutput)> {
        let mut pass = self.begin(x)?;
        self.run_backbone(&mut pass)?;
        self.run_selection(&mut pass, selection)?;
        let out = self.run_head(&mut pass)?;
        Ok((pass, out))
    }

    /// Score threshold, decode and NMS.
    pub fn postprocess(&self, out: &HeadOutput) -> Vec<Detection> {
        let h = &self.cfg.head;
        let dets = decode_boxes(out, h.score_threshold, &self.cfg.bev_geometry(), h.z_ref);
        nms_bev(&dets, h.nms_iou)
    }

    /// Records the losses of a finished pass against ground-truth boxes.
    pub fn losses(&self, pass: &mut Pass, gts: &[Box3D]) -> Result<LossVars> {
        let (cls, reg) = pass.head.ok_or_else(|| Error::Config(String::from("losses need a finished head phase")))?;
        let h = &self.cfg.head;
        let targets = head_targets(&pass.head_coords, &self.cfg.bev_geometry(), gts, h.z_ref);
        let det = detection_loss_graph(&mut pass.tape, cls, reg, &targets, h);
        let importance = match pass.fsm_logits {
            Some(logits) => {
                let geom = self.cfg.stage_geometry(STAGES - 1);
                let labels = fsm_targets(&pass.pre_selection, &geom, gts);
                let f = &self.cfg.fsm;
                Some(pass.tape.focal(logits, labels.into(), f.alpha_f, f.gamma_f))
            }
            None => None,
        };
        let total = match importance {
            Some(imp) => {
                let weighted = pass.tape.scale(imp, self.cfg.fsm.lambda_imp);
                pass.tape.add(det.total, weighted)
            }
            None => det.total,
        };
        Ok(LossVars {
            total,
            detection: det.total,
            cls: det.cls,
            reg: det.reg,
            importance,
        })
    }

    /// Forward, losses, backward and one Adam step.
    pub fn train_step(&mut self, opt: &mut OptimState, x: &SparseTensor, gts: &[Box3D], step: usize) -> Result<StepLosses> {
        let (mut pass, _) = self.forward(x, self.default_selection())?;
        let lv = self.losses(&mut pass, gts)?;
        let losses = lv.values(&pass.tape);
        if !losses.total.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let grads = pass.tape.backward(lv.total)?;
        let g = pass.tape.param_grads(&grads, &self.store);
        if g.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
        adam_step_store(opt, &mut self.store, &g)?;
        Ok(losses)
    }

    /// Adam over every parameter. Kernel steps are scaled by `1/sqrt(fan_in)`.
    pub fn optimizer(&self, lr: f64, weight_decay: f64) -> OptimState {
        let mut opt = OptimState::new(self.store.values(), lr, weight_decay);
        for (id, k) in self.store.ids().zip(opt.lr_scale.iter_mut()) {
            if let [volume, c_in, _] = self.store.shape(id) {
                *k = 1.0 / sqrt((volume * c_in) as f64);
            }
        }
        opt
    }
}

/// State of one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub tape: Tape,
    /// Rows of the current active set.
    pub x: Var,
    cache: RulebookCache,
    /// Index of the last finished stage.
    pub stage: usize,
    /// Active sites after each stage.
    pub stage_sites: Vec<usize>,
    pub fsm_logits: Option<Var>,
    /// Final-stage coordinates before selection.
    pub pre_selection: Vec<Coord>,
    pub importance: Option<ImportanceResult>,
    pub head: Option<(Var, Var)>,
    pub head_coords: Vec<Coord>,
}

impl Pass {
    /// Current active set (coordinates only).
    pub fn active(&self) -> &SparseTensor {
        self.cache.input()
    }

    /// Sites consumed by the detection head.
    pub fn head_sites(&self) -> usize {
        self.head_coords.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub detection: Var,
    pub cls: Var,
    pub reg: Var,
    pub importance: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> StepLosses {
        StepLosses {
            total: tape.value(self.total).item(),
            detection: tape.value(self.detection).item(),
            cls: tape.value(self.cls).item(),
            reg: tape.value(self.reg).item(),
            importance: self.importance.map(|v| tape.value(v).item()).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub detection: f64,
    pub cls: f64,
    pub reg: f64,
    pub importance: f64,
}
