//! Feature encoder: multi-scale CNN backbone, scale unification into a 1/16
//! content feature, depth features, and the supervised foreground depth map.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::tape::{NodeId, Tape};
use crate::nn::{Binding, ParamStore, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("image dims {0}x{1} not divisible by 32")]
    ShapeError(usize, usize),
}

/// The three backbone scales (1/8, 1/16, 1/32), all with channel count C.
#[derive(Debug)]
pub struct FeatureMaps {
    pub f8: NodeId,
    pub f16: NodeId,
    pub f32: NodeId,
}

/// Depth-bin discretization over [d_min, d_max] with linearly increasing bin
/// widths (quadratic edges). Bin D is the background channel.
#[derive(Debug, Clone)]
pub struct DepthBins {
    pub edges: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBins {
    pub fn new(d: usize, d_min: f64, d_max: f64) -> Self {
        let total = (d * (d + 1)) as f64;
        let edges = (0..=d)
            .map(|i| d_min + (d_max - d_min) * (i * (i + 1)) as f64 / total)
            .collect();
        DepthBins { edges, d_min, d_max }
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Foreground bin index for a metric depth inside [d_min, d_max].
    pub fn bin_index(&self, depth: f64) -> usize {
        let d = self.n_bins();
        let clamped = depth.clamp(self.d_min, self.d_max);
        // edges are strictly increasing; linear scan is fine at D ≤ 128
        for i in 0..d {
            if clamped < self.edges[i + 1] {
                return i;
            }
        }
        d - 1
    }

    /// Representative depth of a bin (midpoint).
    pub fn bin_center(&self, i: usize) -> f64 {
        (self.edges[i] + self.edges[i + 1]) / 2.0
    }
}

pub struct Encoder {
    pub channels: usize,
    pub bins: DepthBins,
}

fn conv_init(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    store.init_he(
        &format!("{name}.w"),
        &[cout, cin, k, k],
        cin * k * k,
        rng,
    );
    store.init_zeros(&format!("{name}.b"), &[cout]);
}

impl Encoder {
    /// Registers all encoder parameters. Backbone channels ramp C/4 → C/2 → C.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, depth_bins: usize) -> Self {
        let c = channels;
        let (c1, c2) = ((c / 4).max(1), (c / 2).max(1));
        conv_init(store, rng, "enc.stem", c1, 3, 3);
        conv_init(store, rng, "enc.stage2", c2, c1, 3);
        conv_init(store, rng, "enc.stage3", c, c2, 3);
        conv_init(store, rng, "enc.stage4", c, c, 3);
        conv_init(store, rng, "enc.stage5", c, c, 3);
        conv_init(store, rng, "enc.unify_down", c, c, 3);
        conv_init(store, rng, "enc.depth1", c, c, 3);
        conv_init(store, rng, "enc.depth2", c, c, 3);
        conv_init(store, rng, "enc.depth_head", depth_bins + 1, c, 3);
        Encoder {
            channels: c,
            bins: DepthBins::new(depth_bins, 2.0, 65.0),
        }
    }

    fn conv(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        name: &str,
        x: NodeId,
        stride: usize,
    ) -> NodeId {
        let w = bind.node(tape, &format!("{name}.w"));
        let b = bind.node(tape, &format!("{name}.b"));
        tape.conv2d(x, w, b, stride, 1)
    }

    /// Multi-scale features from a [3,H,W] image (dims divisible by 32).
    pub fn backbone(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        image: &Tensor,
    ) -> Result<FeatureMaps, EncoderError> {
        let (c, h, w) = image.dims3();
        assert_eq!(c, 3, "expected RGB image");
        if h % 32 != 0 || w % 32 != 0 {
            return Err(EncoderError::ShapeError(h, w));
        }
        let x = tape.constant(image.clone());
        let s1 = self.conv(tape, bind, "enc.stem", x, 2);
        let s1 = tape.relu(s1);
        let s2 = self.conv(tape, bind, "enc.stage2", s1, 2);
        let s2 = tape.relu(s2);
        let f8 = self.conv(tape, bind, "enc.stage3", s2, 2);
        let f8 = tape.relu(f8);
        let f16 = self.conv(tape, bind, "enc.stage4", f8, 2);
        let f16 = tape.relu(f16);
        let f32_ = self.conv(tape, bind, "enc.stage5", f16, 2);
        let f32_ = tape.relu(f32_);
        Ok(FeatureMaps { f8, f16, f32: f32_ })
    }

    /// 1/32 up by nearest-neighbor, 1/8 down by a stride-2 conv, then the
    /// elementwise mean of the three 1/16 maps.
    pub fn unify_scales(&self, tape: &mut Tape, bind: &mut Binding, fm: &FeatureMaps) -> NodeId {
        let up = tape.upsample_nearest2(fm.f32);
        let down = self.conv(tape, bind, "enc.unify_down", fm.f8, 2);
        let s = tape.add(up, down);
        let s = tape.add(s, fm.f16);
        tape.scale(s, 1.0 / 3.0)
    }

    /// Two 3×3 same-padding convs with a ReLU between.
    pub fn depth_feature(&self, tape: &mut Tape, bind: &mut Binding, content: NodeId) -> NodeId {
        let a = self.conv(tape, bind, "enc.depth1", content, 1);
        let a = tape.relu(a);
        self.conv(tape, bind, "enc.depth2", a, 1)
    }

    /// Per-cell logits over D foreground bins plus one background channel,
    /// shape [D+1, H/16, W/16].
    pub fn depth_map_head(&self, tape: &mut Tape, bind: &mut Binding, depth_feat: NodeId) -> NodeId {
        self.conv(tape, bind, "enc.depth_head", depth_feat, 1)
    }

    /// Focal-loss targets for a 1/16 ground-truth depth grid. Background
    /// sentinel is any value < 0; depths outside [2, 65] m are masked out.
    pub fn depth_targets(&self, depth_gt: &[f32], supervise_background: bool) -> Vec<Option<usize>> {
        let d = self.bins.n_bins();
        depth_gt
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    if supervise_background {
                        Some(d)
                    } else {
                        None
                    }
                } else if (v as f64) < self.bins.d_min || (v as f64) > self.bins.d_max {
                    None
                } else {
                    Some(self.bins.bin_index(v as f64))
                }
            })
            .collect()
    }

    /// Mean focal loss (γ = 2) of the depth map against a 1/16 depth grid.
    pub fn depth_map_loss(
        &self,
        tape: &mut Tape,
        logits: NodeId,
        depth_gt: &[f32],
        supervise_background: bool,
    ) -> NodeId {
        let (ch, h, w) = {
            let s = tape.shape(logits);
            (s[0], s[1], s[2])
        };
        assert_eq!(ch, self.bins.n_bins() + 1, "depth map channel mismatch");
        assert_eq!(depth_gt.len(), h * w, "depth grid shape mismatch");
        let cells = tape.chw_to_seq(logits);
        let targets = self.depth_targets(depth_gt, supervise_background);
        tape.focal_map(cells, &targets, 2.0)
    }
}
