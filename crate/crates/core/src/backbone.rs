//! Tiny multi-scale 2D convolutional backbone producing per-view feature
//! maps at strides 4/8/16/32 with widths C/2C/4C/8C, with hook points after
//! the last three stages where cross-view 3D fusion can transform the maps.

use crate::nn::{Ctx, Initializer, ParamStore};
use crate::graph::NodeId;
use crate::tensor::Tensor;

/// 3×3 convolution + per-channel affine; normalization uses no spatial
/// statistics so inference equals training-mode forward exactly.
#[derive(Debug, Clone)]
struct ConvBlock {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl ConvBlock {
    fn new(name: String, cin: usize, cout: usize, stride: usize) -> Self {
        ConvBlock { name, cin, cout, stride }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        store.insert(
            &format!("{}.k", self.name),
            init.kaiming(vec![self.cout, self.cin, 3, 3], self.cin * 9),
        );
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.cout]));
        store.insert(&format!("{}.g", self.name), Tensor::full(vec![self.cout], 1.0));
        store.insert(&format!("{}.o", self.name), Tensor::zeros(vec![self.cout]));
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let k = ctx.p(&format!("{}.k", self.name));
        let b = ctx.p(&format!("{}.b", self.name));
        let g = ctx.p(&format!("{}.g", self.name));
        let o = ctx.p(&format!("{}.o", self.name));
        let y = ctx.g.conv2d(x, k, b, self.stride, 1);
        ctx.g.channel_affine(y, g, o)
    }
}

/// One backbone stage: stride-2 downsampling convolution followed by a
/// two-convolution residual block.
#[derive(Debug, Clone)]
struct Stage {
    down: ConvBlock,
    res_a: ConvBlock,
    res_b: ConvBlock,
}

impl Stage {
    fn new(name: &str, cin: usize, cout: usize) -> Self {
        Stage {
            down: ConvBlock::new(format!("{}.down", name), cin, cout, 2),
            res_a: ConvBlock::new(format!("{}.resa", name), cout, cout, 1),
            res_b: ConvBlock::new(format!("{}.resb", name), cout, cout, 1),
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.down.init(store, init);
        self.res_a.init(store, init);
        self.res_b.init(store, init);
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let y = self.down.forward(ctx, x);
        let y = ctx.g.relu(y);
        let r = self.res_a.forward(ctx, y);
        let r = ctx.g.relu(r);
        let r = self.res_b.forward(ctx, r);
        let y = ctx.g.add(y, r);
        ctx.g.relu(y)
    }
}

/// Per-view feature maps at the four pyramid strides; `maps[s][v]` is the
/// [width(s), H/stride, W/stride] map of view `v`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: [Vec<NodeId>; 4],
}

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct Backbone {
    pub c: usize,
    stem: ConvBlock,
    stages: [Stage; 4],
}

impl Backbone {
    pub fn new(c: usize) -> Self {
        Backbone {
            c,
            // the stem takes the input to stride 2 so stage 1 lands on 4
            stem: ConvBlock::new("backbone.stem".into(), 3, c, 2),
            stages: [
                Stage::new("backbone.s1", c, c),
                Stage::new("backbone.s2", c, 2 * c),
                Stage::new("backbone.s3", 2 * c, 4 * c),
                Stage::new("backbone.s4", 4 * c, 8 * c),
            ],
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        [self.c, 2 * self.c, 4 * self.c, 8 * self.c]
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.stem.init(store, init);
        for s in &self.stages {
            s.init(store, init);
        }
    }

    /// Runs all views through the four stages. After stages 2, 3 and 4 the
    /// hook (when given) transforms the per-view maps jointly — this is the
    /// cross-view 3D fusion insertion point; `None` is a pure per-view 2D
    /// pass. The hook receives the pyramid level index (1, 2, 3).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        views: &[NodeId],
        mut hook: Option<&mut dyn FnMut(usize, &mut Ctx, Vec<NodeId>) -> Vec<NodeId>>,
    ) -> FeaturePyramid {
        for &v in views {
            let (c, h, w) = ctx.g.value(v).dims3();
            assert_eq!(c, 3, "backbone expects RGB input");
            assert!(h % 32 == 0 && w % 32 == 0, "input size {}x{} not divisible by 32", h, w);
        }
        let mut cur: Vec<NodeId> = views
            .iter()
            .map(|&v| {
                let y = self.stem.forward(ctx, v);
                ctx.g.relu(y)
            })
            .collect();
        let mut maps: [Vec<NodeId>; 4] = Default::default();
        for (level, stage) in self.stages.iter().enumerate() {
            cur = cur.iter().map(|&m| stage.forward(ctx, m)).collect();
            if level >= 1 {
                if let Some(hook) = hook.as_mut() {
                    cur = hook(level, ctx, cur);
                }
            }
            maps[level] = cur.clone();
        }
        FeaturePyramid { maps }
    }
}
