//! Two-stage multimodal vehicle detector.
//!
//! Lidar and radar frames go through twin 4-layer convolutional extractors.
//! Each modality is then enhanced by attending over the other one, the two
//! maps are concatenated, and a rotated-anchor region proposal network feeds
//! a small RoI head that refines boxes and predicts heading direction.

mod anchors;
mod loss;
mod nms;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rotated_iou;
use crate::geom::RotatedBox;
use crate::grad::{CellWindow, ParamStore, Tape, Tensor, Var};
use crate::scene::Sample;
use crate::seed;

pub use anchors::{
    assign_targets, decode_offsets, encode_offsets, generate_anchors, AnchorConfig, AnchorLabel,
    AnchorTargets, MatchThresholds, MAX_LOG_SCALE,
};
pub use loss::{mce_loss, mce_term, objectness_loss, rpn_cls_loss, LossBreakdown, LossConfig};
pub use nms::{nms, rank_by_score, select_proposals};

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: RotatedBox,
    pub score: f64,
}

/// Slope of the leaky ReLU used throughout.
pub const LEAK: f64 = 0.1;

/// Strides of the four extractor layers; the product is the anchor stride.
pub const EXTRACTOR_STRIDES: [usize; 4] = [1, 2, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub grid: usize,
    pub lidar_channels: usize,
    /// Channels of each extractor's output.
    pub width: usize,
    /// Query/key dimension of the cross-attention.
    pub attention_dim: usize,
    pub rpn_hidden: usize,
    /// RoI pooling output is `roi_size × roi_size` per channel.
    pub roi_size: usize,
    pub hidden: usize,
    pub anchors: AnchorConfig,
    pub matching: MatchThresholds,
    pub roi_positive_iou: f64,
    pub pre_nms: usize,
    pub post_nms: usize,
    pub train_nms_iou: f64,
    pub test_nms_iou: f64,
    pub max_dets: usize,
    /// Initial objectness probability.
    pub objectness_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            grid: 128,
            lidar_channels: 4,
            width: 8,
            attention_dim: 8,
            rpn_hidden: 16,
            roi_size: 3,
            hidden: 32,
            anchors: AnchorConfig::default(),
            matching: MatchThresholds::default(),
            roi_positive_iou: 0.5,
            pre_nms: 256,
            post_nms: 64,
            train_nms_iou: 0.7,
            test_nms_iou: 0.2,
            max_dets: 100,
            objectness_prior: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let down: usize = EXTRACTOR_STRIDES.iter().product();
        let bad = |m: String| Err(Error::Config(format!("detector: {m}")));
        if self.grid == 0 || !self.grid.is_multiple_of(down) {
            return bad(format!("grid {} must be a positive multiple of {down}", self.grid));
        }
        if self.anchors.stride != down {
            return bad(format!("anchor stride {} must equal the extractor stride {down}", self.anchors.stride));
        }
        let sizes = [
            self.lidar_channels,
            self.width,
            self.attention_dim,
            self.rpn_hidden,
            self.roi_size,
            self.hidden,
            self.pre_nms,
            self.post_nms,
            self.max_dets,
        ];
        if sizes.contains(&0) {
            return bad("channel counts, sizes and proposal budgets must be positive".into());
        }
        for (name, v) in [
            ("roi_positive_iou", self.roi_positive_iou),
            ("train_nms_iou", self.train_nms_iou),
            ("test_nms_iou", self.test_nms_iou),
            ("matching.positive", self.matching.positive),
            ("matching.negative", self.matching.negative),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.matching.negative > self.matching.positive {
            return bad("matching.negative exceeds matching.positive".into());
        }
        if !(self.objectness_prior > 0.0 && self.objectness_prior < 1.0) {
            return bad(format!("objectness_prior {} outside (0, 1)", self.objectness_prior));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.grid / EXTRACTOR_STRIDES.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    q: Affine,
    k: Affine,
    v: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    lidar: [Affine; 4],
    radar: [Affine; 4],
    /// Index 0 enhances lidar, 1 enhances radar.
    attention: [AttentionParams; 2],
    rpn_conv: Affine,
    rpn_head: Affine,
    fc1: Affine,
    fc2: Affine,
    cls: Affine,
    reg: Affine,
    dir: Affine,
}

/// Which sensor an extractor or attention block serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Lidar,
    Radar,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<usize> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.register(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<usize> {
        self.store.register(name, Tensor::full(shape, v))
    }

    /// He-initialised kernel `[out, in, k, k]` with zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, std: Option<f64>) -> Result<Affine> {
        let std = std.unwrap_or((2.0 / (cin * k * k) as f64).sqrt());
        Ok(Affine {
            w: self.normal(format!("{name}.w"), &[cout, cin, k, k], std)?,
            b: self.constant(format!("{name}.b"), &[cout], 0.0)?,
        })
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, std: Option<f64>) -> Result<Affine> {
        let std = std.unwrap_or((2.0 / cin as f64).sqrt());
        Ok(Affine {
            w: self.normal(format!("{name}.w"), &[cout, cin], std)?,
            b: self.constant(format!("{name}.b"), &[cout], 0.0)?,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub lidar_features: Var,
    pub radar_features: Var,
    pub fused: Var,
    /// Objectness probability per anchor, `[N]`.
    pub objectness: Var,
    /// Box offsets per anchor, `[N, 5]`.
    pub offsets: Var,
}

/// Output of [`Detector::cross_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `z_s + z'_s`.
    pub enhanced: Var,
    /// `z'_s` alone.
    pub attended: Var,
    /// Row-stochastic `[P, P]` attention matrix.
    pub weights: Var,
}

/// Second-stage head outputs for `R` regions.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[R]` foreground probability.
    pub cls: Var,
    /// `[R, 5]` refinement offsets.
    pub reg: Var,
    /// `[R]` probability that the heading is `forward`.
    pub dir: Var,
}

/// The network architecture; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    anchors: Vec<RotatedBox>,
    layout: Layout,
    num_params: usize,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let (store, layout) = Self::build(&config, 0)?;
        let f = config.feature_size();
        let anchors = generate_anchors(&config.anchors, f, f);
        Ok(Detector {
            config,
            anchors,
            layout,
            num_params: store.num_scalars(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn anchors(&self) -> &[RotatedBox] {
        &self.anchors
    }

    /// Scalar parameter count `D`.
    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Freshly initialised weights.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        Ok(Self::build(&self.config, seed)?.0)
    }

    fn build(c: &DetectorConfig, seed: u64) -> Result<(ParamStore, Layout)> {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: seed::rng(seed::derive(seed, &[seed::stream::INIT])),
        };
        let w = c.width;
        let extractor = |init: &mut Init<_>, name: &str, cin: usize| -> Result<[Affine; 4]> {
            Ok([
                init.conv(&format!("{name}.conv1"), cin, w, 3, None)?,
                init.conv(&format!("{name}.conv2"), w, w, 3, None)?,
                init.conv(&format!("{name}.conv3"), w, w, 3, None)?,
                init.conv(&format!("{name}.conv4"), w, w, 3, None)?,
            ])
        };
        let lidar = extractor(&mut init, "lidar", c.lidar_channels)?;
        let radar = extractor(&mut init, "radar", 1)?;
        let d = c.attention_dim;
        let qk_std = Some(1.0 / (w as f64).sqrt());
        let attn = |init: &mut Init<_>, name: &str| -> Result<AttentionParams> {
            Ok(AttentionParams {
                q: init.linear(&format!("{name}.q"), w, d, qk_std)?,
                k: init.linear(&format!("{name}.k"), w, d, qk_std)?,
                v: init.linear(&format!("{name}.v"), w, w, qk_std)?,
            })
        };
        let attention = [attn(&mut init, "attn.lidar")?, attn(&mut init, "attn.radar")?];
        let a = c.anchors.per_cell();
        let rpn_conv = init.conv("rpn.conv", 2 * w, c.rpn_hidden, 3, None)?;
        let rpn_head = init.conv("rpn.head", c.rpn_hidden, 6 * a, 1, Some(0.01))?;
        let prior = (c.objectness_prior / (1.0 - c.objectness_prior)).ln();
        {
            let bias = init.store.tensor_mut(rpn_head.b).data_mut();
            bias[..a].fill(prior);
        }
        let pooled = 2 * w * c.roi_size * c.roi_size;
        let fc1 = init.linear("roi.fc1", pooled, c.hidden, None)?;
        let fc2 = init.linear("roi.fc2", c.hidden, c.hidden, None)?;
        let cls = init.linear("roi.cls", c.hidden, 1, Some(0.01))?;
        let reg = init.linear("roi.reg", c.hidden, 5, Some(0.01))?;
        let dir = init.linear("roi.dir", c.hidden, 1, Some(0.01))?;
        let layout = Layout {
            lidar,
            radar,
            attention,
            rpn_conv,
            rpn_head,
            fc1,
            fc2,
            cls,
            reg,
            dir,
        };
        Ok((store, layout))
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.num_scalars() != self.num_params {
            return Err(Error::Config(format!(
                "weights hold {} scalars, detector expects {}",
                params.num_scalars(),
                self.num_params
            )));
        }
        Ok(())
    }

    /// Lidar and radar frames of `sample`; a missing modality reads as zeros.
    pub fn input_frames(&self, sample: &Sample) -> Result<(Tensor, Tensor)> {
        let n = self.config.grid;
        let lidar = sample
            .lidar
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&[self.config.lidar_channels, n, n]));
        let radar = sample.radar.clone().unwrap_or_else(|| Tensor::zeros(&[1, n, n]));
        let want_l = [self.config.lidar_channels, n, n];
        if lidar.shape() != want_l || radar.shape() != [1, n, n] {
            return Err(Error::Config(format!(
                "sample {} frames {:?}/{:?} do not match detector input {want_l:?}/[1, {n}, {n}]",
                sample.id,
                lidar.shape(),
                radar.shape()
            )));
        }
        Ok((lidar, radar))
    }

    /// Four conv layers, kernel 3, padding 1, leaky ReLU after each.
    pub fn extract_features(&self, tape: &mut Tape, vars: &[Var], frame: Var, m: Modality) -> Result<Var> {
        let layers = match m {
            Modality::Lidar => &self.layout.lidar,
            Modality::Radar => &self.layout.radar,
        };
        let mut x = frame;
        for (layer, stride) in layers.iter().zip(EXTRACTOR_STRIDES) {
            x = tape.conv2d(x, vars[layer.w], stride, 1)?;
            x = tape.add_channel_bias(x, vars[layer.b])?;
            x = tape.leaky_relu(x, LEAK)?;
        }
        Ok(x)
    }

    /// Enhances `z_s` (`m`'s own map) with attention whose queries and keys
    /// come from the other modality's map `z_other`.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z_s: Var,
        z_other: Var,
        m: Modality,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(z_s).to_vec();
        if shape.len() != 3 || tape.shape(z_other) != shape.as_slice() {
            return Err(Error::shape(
                "cross_attention",
                format!("maps {:?} and {:?}", shape, tape.shape(z_other)),
            ));
        }
        let p = match m {
            Modality::Lidar => self.layout.attention[0],
            Modality::Radar => self.layout.attention[1],
        };
        let (c, positions) = (shape[0], shape[1] * shape[2]);
        let seq = |tape: &mut Tape, z: Var| -> Result<Var> {
            let flat = tape.reshape(z, &[c, positions])?;
            tape.transpose(flat)
        };
        let own = seq(tape, z_s)?;
        let other = seq(tape, z_other)?;
        let q = tape.linear(other, vars[p.q.w], vars[p.q.b])?;
        let k = tape.linear(other, vars[p.k.w], vars[p.k.b])?;
        let v = tape.linear(own, vars[p.v.w], vars[p.v.b])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let d_k = tape.shape(q)[1] as f64;
        let scores = tape.scale(scores, 1.0 / d_k.sqrt())?;
        let weights = tape.softmax(scores, 1)?;
        let out = tape.matmul(weights, v)?;
        let out = tape.transpose(out)?;
        let attended = tape.reshape(out, &shape)?;
        let enhanced = tape.add(z_s, attended)?;
        Ok(AttentionOutput {
            enhanced,
            attended,
            weights,
        })
    }

    /// Channel concatenation of the two enhanced maps, lidar first.
    pub fn fuse(&self, tape: &mut Tape, lidar: Var, radar: Var) -> Result<Var> {
        tape.concat(&[lidar, radar])
    }

    /// Objectness `[N]` (after sigmoid) and offsets `[N, 5]` in anchor order.
    pub fn rpn_forward(&self, tape: &mut Tape, vars: &[Var], fused: Var) -> Result<(Var, Var)> {
        let l = &self.layout;
        let h = tape.conv2d(fused, vars[l.rpn_conv.w], 1, 1)?;
        let h = tape.add_channel_bias(h, vars[l.rpn_conv.b])?;
        let h = tape.leaky_relu(h, LEAK)?;
        let out = tape.conv2d(h, vars[l.rpn_head.w], 1, 0)?;
        let out = tape.add_channel_bias(out, vars[l.rpn_head.b])?;
        let (rows, cols) = (tape.shape(out)[1], tape.shape(out)[2]);
        let a = self.config.anchors.per_cell();
        let plane = rows * cols;
        let n = plane * a;
        let mut obj_idx = Vec::with_capacity(n);
        let mut off_idx = Vec::with_capacity(n * 5);
        for cell in 0..plane {
            for k in 0..a {
                obj_idx.push(k * plane + cell);
                for j in 0..5 {
                    off_idx.push((a + 5 * k + j) * plane + cell);
                }
            }
        }
        let logits = tape.gather(out, obj_idx, &[n])?;
        let objectness = tape.sigmoid(logits)?;
        let offsets = tape.gather(out, off_idx, &[n, 5])?;
        Ok((objectness, offsets))
    }

    /// Full trunk: extractors, cross-attention, fusion and RPN.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], sample: &Sample) -> Result<Forward> {
        let (lidar, radar) = self.input_frames(sample)?;
        let l_in = tape.leaf(lidar);
        let r_in = tape.leaf(radar);
        let zl = self.extract_features(tape, vars, l_in, Modality::Lidar)?;
        let zr = self.extract_features(tape, vars, r_in, Modality::Radar)?;
        let el = self.cross_attention(tape, vars, zl, zr, Modality::Lidar)?;
        let er = self.cross_attention(tape, vars, zr, zl, Modality::Radar)?;
        let fused = self.fuse(tape, el.enhanced, er.enhanced)?;
        let (objectness, offsets) = self.rpn_forward(tape, vars, fused)?;
        Ok(Forward {
            lidar_features: zl,
            radar_features: zr,
            fused,
            objectness,
            offsets,
        })
    }

    /// Feature-map cells covered by the axis-aligned hull of `b`.
    pub fn roi_window(&self, b: &RotatedBox) -> CellWindow {
        let s = self.config.anchors.stride as f64;
        let f = self.config.feature_size() as f64;
        let (x0, y0, x1, y1) = b.hull();
        let lo = |v: f64| (v / s).floor().clamp(0.0, f) as usize;
        let hi = |v: f64| (v / s).ceil().clamp(0.0, f) as usize;
        CellWindow {
            r0: lo(y0),
            r1: hi(y1),
            c0: lo(x0),
            c1: hi(x1),
        }
    }

    /// Pooled features `[R, 2·C·g·g]` for each region.
    pub fn roi_features(&self, tape: &mut Tape, fused: Var, rois: &[RotatedBox]) -> Result<Var> {
        if rois.is_empty() {
            return Err(Error::Usage("roi_features needs at least one region".into()));
        }
        let g = self.config.roi_size;
        let pooled = rois
            .iter()
            .map(|b| tape.roi_max_pool(fused, self.roi_window(b), g).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&pooled)?;
        let per_roi = tape.value(stacked).numel() / rois.len();
        tape.reshape(stacked, &[rois.len(), per_roi])
    }

    /// Two hidden affine layers, then class, box and direction heads.
    pub fn second_stage(&self, tape: &mut Tape, vars: &[Var], feats: Var) -> Result<HeadOutput> {
        let l = &self.layout;
        let r = tape.shape(feats)[0];
        let h = tape.linear(feats, vars[l.fc1.w], vars[l.fc1.b])?;
        let h = tape.leaky_relu(h, LEAK)?;
        let h = tape.linear(h, vars[l.fc2.w], vars[l.fc2.b])?;
        let h = tape.leaky_relu(h, LEAK)?;
        let cls = tape.linear(h, vars[l.cls.w], vars[l.cls.b])?;
        let cls = tape.reshape(cls, &[r])?;
        let cls = tape.sigmoid(cls)?;
        let reg = tape.linear(h, vars[l.reg.w], vars[l.reg.b])?;
        let dir = tape.linear(h, vars[l.dir.w], vars[l.dir.b])?;
        let dir = tape.reshape(dir, &[r])?;
        let dir = tape.sigmoid(dir)?;
        Ok(HeadOutput { cls, reg, dir })
    }

    /// Anchor labels against the sample's kept annotations.
    pub fn targets(&self, sample: &Sample) -> AnchorTargets {
        assign_targets(&self.anchors, &sample.kept_boxes(), self.config.matching)
    }

    fn decode_all(&self, offsets: &[f64]) -> Vec<RotatedBox> {
        self.anchors
            .iter()
            .zip(offsets.chunks_exact(5))
            .map(|(a, d)| decode_offsets(a, d))
            .collect()
    }

    /// Builds the five loss terms on `tape` and returns `(breakdown, total)`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sample: &Sample,
        targets: &AnchorTargets,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Var)> {
        let fw = self.forward(tape, vars, sample)?;
        let n = self.anchors.len();
        if targets.labels.len() != n {
            return Err(Error::shape(
                "total_loss",
                format!("{} targets for {n} anchors", targets.labels.len()),
            ));
        }
        let rpn_cls = rpn_cls_loss(tape, fw.objectness, &targets.labels, cfg)?;

        let positives = targets.positives();
        let unit = if positives == 0 { 0.0 } else { 1.0 / positives as f64 };
        let mut loc_t = Vec::with_capacity(n * 5);
        let mut loc_w = Vec::with_capacity(n * 5);
        for (label, off) in targets.labels.iter().zip(&targets.offsets) {
            let w = if *label == AnchorLabel::Positive { unit } else { 0.0 };
            loc_t.extend_from_slice(off);
            loc_w.extend_from_slice(&[w; 5]);
        }
        let rpn_loc = tape.weighted_l1(fw.offsets, loc_t, loc_w)?;

        // Regions: proposals from the current RPN plus the kept boxes.
        let kept = sample.kept_boxes();
        let scores = tape.value(fw.objectness).data().to_vec();
        let boxes = self.decode_all(tape.value(fw.offsets).data());
        let c = &self.config;
        let mut rois: Vec<RotatedBox> =
            select_proposals(&scores, &boxes, c.pre_nms, c.post_nms, c.train_nms_iou)
                .into_iter()
                .map(|i| boxes[i])
                .collect();
        rois.extend_from_slice(&kept);
        let mut cls_t = Vec::with_capacity(rois.len());
        let mut reg_t = Vec::with_capacity(rois.len() * 5);
        let mut reg_w = Vec::with_capacity(rois.len() * 5);
        let mut dir_t = Vec::with_capacity(rois.len());
        let mut dir_w = Vec::with_capacity(rois.len());
        let mut matches = Vec::with_capacity(rois.len());
        for roi in &rois {
            let best = kept
                .iter()
                .enumerate()
                .map(|(g, gt)| (g, rotated_iou(roi, gt)))
                .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((g, iou)),
                });
            matches.push(best.filter(|(_, iou)| *iou >= c.roi_positive_iou).map(|(g, _)| g));
        }
        let roi_pos = matches.iter().filter(|m| m.is_some()).count();
        let roi_unit = if roi_pos == 0 { 0.0 } else { 1.0 / roi_pos as f64 };
        for (roi, m) in rois.iter().zip(&matches) {
            match m {
                Some(g) => {
                    cls_t.push(1.0);
                    reg_t.extend_from_slice(&encode_offsets(roi, &kept[*g]));
                    reg_w.extend_from_slice(&[roi_unit; 5]);
                    dir_t.push(if kept[*g].forward { 1.0 } else { 0.0 });
                    dir_w.push(roi_unit);
                }
                None => {
                    cls_t.push(0.0);
                    reg_t.extend_from_slice(&[0.0; 5]);
                    reg_w.extend_from_slice(&[0.0; 5]);
                    dir_t.push(0.0);
                    dir_w.push(0.0);
                }
            }
        }
        let (cls, reg, dir) = if rois.is_empty() {
            let zero = tape.leaf(Tensor::scalar(0.0));
            (zero, zero, zero)
        } else {
            let feats = self.roi_features(tape, fw.fused, &rois)?;
            let head = self.second_stage(tape, vars, feats)?;
            (
                tape.bce_loss(head.cls, cls_t)?,
                tape.weighted_l1(head.reg, reg_t, reg_w)?,
                tape.weighted_bce(head.dir, dir_t, dir_w)?,
            )
        };

        let mut total = tape.add(rpn_cls, rpn_loc)?;
        for term in [cls, reg, dir] {
            total = tape.add(total, term)?;
        }
        let v = |x: Var| tape.value(x).item();
        let breakdown = LossBreakdown {
            rpn_cls: v(rpn_cls),
            rpn_loc: v(rpn_loc),
            cls: v(cls),
            reg: v(reg),
            dir: v(dir),
            total: v(total),
        };
        Ok((breakdown, total))
    }

    /// Loss terms for one sample without touching gradients.
    pub fn total_loss(&self, params: &ParamStore, sample: &Sample, cfg: &LossConfig) -> Result<LossBreakdown> {
        self.check_params(params)?;
        let targets = self.targets(sample);
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        Ok(self.loss_on_tape(&mut tape, &vars, sample, &targets, cfg)?.0)
    }

    /// Runs forward and backward for one sample and adds `scale ×` the
    /// gradient into `params`' grad slots.
    pub fn accumulate_gradients(
        &self,
        params: &mut ParamStore,
        sample: &Sample,
        targets: &AnchorTargets,
        cfg: &LossConfig,
        scale: f64,
    ) -> Result<LossBreakdown> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let (breakdown, total) = self.loss_on_tape(&mut tape, &vars, sample, targets, cfg)?;
        let loss = if scale == 1.0 { total } else { tape.scale(total, scale)? };
        let grads = tape.backward(loss)?;
        params.accumulate(&grads, &vars)?;
        Ok(breakdown)
    }

    /// Detections for `sample`, best first. Missing modalities read as zeros.
    pub fn infer(&self, params: &ParamStore, sample: &Sample) -> Result<Vec<Detection>> {
        Ok(self.infer_traced(params, sample)?.0)
    }

    /// As [`Detector::infer`], also returning the multiply-accumulate count.
    pub fn infer_traced(&self, params: &ParamStore, sample: &Sample) -> Result<(Vec<Detection>, u64)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let fw = self.forward(&mut tape, &vars, sample)?;
        let scores = tape.value(fw.objectness).data().to_vec();
        let boxes = self.decode_all(tape.value(fw.offsets).data());
        let c = &self.config;
        let picked = select_proposals(&scores, &boxes, c.pre_nms, c.post_nms, c.train_nms_iou);
        if picked.is_empty() {
            return Ok((Vec::new(), tape.macs()));
        }
        let rois: Vec<RotatedBox> = picked.iter().map(|&i| boxes[i]).collect();
        let feats = self.roi_features(&mut tape, fw.fused, &rois)?;
        let head = self.second_stage(&mut tape, &vars, feats)?;
        let cls = tape.value(head.cls).data();
        let reg = tape.value(head.reg).data();
        let dir = tape.value(head.dir).data();
        let mut refined = Vec::with_capacity(rois.len());
        let mut final_scores = Vec::with_capacity(rois.len());
        for (r, (&anchor, roi)) in picked.iter().zip(&rois).enumerate() {
            let mut b = decode_offsets(roi, &reg[r * 5..r * 5 + 5]);
            b.forward = dir[r] > 0.5;
            refined.push(b);
            final_scores.push(scores[anchor] * cls[r]);
        }
        let order = rank_by_score(&final_scores);
        let keep = nms(&refined, &order, c.test_nms_iou, c.max_dets);
        let dets = keep
            .into_iter()
            .map(|i| Detection {
                bbox: refined[i],
                score: final_scores[i],
            })
            .collect();
        Ok((dets, tape.macs()))
    }
}
