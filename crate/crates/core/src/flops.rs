//! Operation counting for the backbone.
//!
//! Two modes. `Analytic` sums the three closed forms per block
//! (`32 L D N` for the 2-D scan, `4 H W D^2 + 2 M^2 H W D` for windowed
//! attention, `4 L D^2` for the FFN) and nothing else. `Full` walks every
//! layer of the built architecture and counts one FLOP per multiply-accumulate
//! in linear maps, the 3x3 depthwise conv, the scan recurrence, attention
//! score and value products, merges, expands, the embedding and the head.
//! Normalization, AdaLN modulation and gating are not counted in either mode.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::SsmDims;
use crate::unet::{count_params, ModelConfig, LATENT_CHANNELS, OUTPUT_CHANNELS, STAGES};

/// Spatial downsampling of the (external) image autoencoder.
pub const VAE_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsMode {
    Full,
    Analytic,
}

impl FromStr for FlopsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "analytic" => Ok(Self::Analytic),
            other => Err(Error::Config(format!(
                "unknown FLOPs mode {other:?} (expected full or analytic)"
            ))),
        }
    }
}

pub fn flops_ss2d(l: u64, d: u64, n: u64) -> u64 {
    4 * (3 * l * (2 * d) * n + l * (2 * d) * n)
}

pub fn flops_wmsa(h: u64, w: u64, d: u64, m: u64) -> u64 {
    4 * h * w * d * d + 2 * m * m * h * w * d
}

pub fn flops_ffn(l: u64, d: u64) -> u64 {
    4 * l * d * d
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub vssm: u64,
    pub attention: u64,
    pub ffn: u64,
    pub merge_expand: u64,
    pub embed: u64,
    pub head: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.vssm + self.attention + self.ffn + self.merge_expand + self.embed + self.head
    }

    fn add(&mut self, o: &Self) {
        self.vssm += o.vssm;
        self.attention += o.attention;
        self.ffn += o.ffn;
        self.merge_expand += o.merge_expand;
        self.embed += o.embed;
        self.head += o.head;
    }
}

/// Geometry of one block invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub state: usize,
    pub window: usize,
    pub attention: bool,
}

/// Count for a single block under `mode`.
pub fn block_flops(mode: FlopsMode, g: BlockGeometry) -> ComponentFlops {
    let (h, w, d, n, m) = (g.height as u64, g.width as u64, g.dim as u64, g.state as u64, g.window as u64);
    let l = h * w;
    match mode {
        FlopsMode::Analytic => ComponentFlops {
            vssm: flops_ss2d(l, d, n),
            attention: if g.attention { flops_wmsa(h, w, d, m) } else { 0 },
            ffn: flops_ffn(l, d),
            ..Default::default()
        },
        FlopsMode::Full => {
            let dims = SsmDims::for_width(g.dim, g.state);
            let (e, r) = (dims.inner as u64, dims.dt_rank as u64);
            let dirs = crate::ssm::DIRECTIONS as u64;
            let vssm = l * d * e // in_proj
                + 9 * l * e // depthwise conv
                + dirs * l * e * (r + 2 * n) // x_proj
                + dirs * l * r * e // dt_proj
                + flops_ss2d(l, d, n) // recurrence and readout
                + dirs * l * e // skip term
                + l * e * d; // out_proj
            let attention = if g.attention {
                let padded = h.div_ceil(m) * m * w.div_ceil(m) * m;
                4 * l * d * d + 2 * padded * m * m * d
            } else {
                0
            };
            ComponentFlops {
                vssm,
                attention,
                ffn: 2 * l * d * (crate::block::FFN_RATIO as u64 * d),
                ..Default::default()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub stage: String,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub dim: usize,
    pub blocks: usize,
    pub flops: ComponentFlops,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub mode: FlopsMode,
    pub variant: String,
    pub resolution: usize,
    pub latent: [usize; 2],
    pub params: usize,
    pub stages: Vec<StageFlops>,
    pub totals: ComponentFlops,
    pub total: u64,
    pub gflops: f64,
}

impl FlopsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let g = |v: u64| v as f64 / 1e9;
        let mut out = format!(
            "variant {} @ {}px (latent {}x{}), mode {:?}, params {:.2}M\n",
            self.variant,
            self.resolution,
            self.latent[0],
            self.latent[1],
            self.mode,
            self.params as f64 / 1e6
        );
        let _ = writeln!(
            out,
            "{:<18} {:>7} {:>5} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "stage", "grid", "dim", "blocks", "vssm", "attn", "ffn", "resample", "embed", "head", "GFLOPs"
        );
        for s in &self.stages {
            let f = &s.flops;
            let _ = writeln!(
                out,
                "{:<18} {:>7} {:>5} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                s.stage,
                format!("{}x{}", s.height, s.width),
                s.dim,
                s.blocks,
                g(f.vssm),
                g(f.attention),
                g(f.ffn),
                g(f.merge_expand),
                g(f.embed),
                g(f.head),
                g(s.total)
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<18} {:>7} {:>5} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            "total",
            "",
            "",
            "",
            g(t.vssm),
            g(t.attention),
            g(t.ffn),
            g(t.merge_expand),
            g(t.embed),
            g(t.head),
            self.gflops
        );
        out
    }
}

/// Counts the model of `cfg` on `resolution x resolution` images.
pub fn flops_model(cfg: &ModelConfig, resolution: usize, mode: FlopsMode) -> Result<FlopsReport> {
    cfg.validate()?;
    if resolution == 0 || !resolution.is_multiple_of(VAE_FACTOR) {
        return Err(Error::Config(format!(
            "resolution {resolution} is not a positive multiple of {VAE_FACTOR}"
        )));
    }
    let side = resolution / VAE_FACTOR;
    cfg.check_latent(side, side)?;
    let p = cfg.flags.patch_size;
    let grid = side / p;
    let full = mode == FlopsMode::Full;
    let mut stages = Vec::new();
    let mut push = |name: String, s: usize, blocks: usize, extra: ComponentFlops| {
        let hw = grid / cfg.stage_stride(s);
        let dim = cfg.stage_width(s);
        let mut flops = extra;
        for _ in 0..blocks {
            flops.add(&block_flops(
                mode,
                BlockGeometry {
                    height: hw,
                    width: hw,
                    dim,
                    state: cfg.state_dim,
                    window: cfg.window,
                    attention: !cfg.flags.disable_attention,
                },
            ));
        }
        if blocks > 0 || flops.total() > 0 {
            stages.push(StageFlops {
                stage: name,
                height: hw,
                width: hw,
                tokens: hw * hw,
                dim,
                blocks,
                total: flops.total(),
                flops,
            });
        }
    };
    let tokens = |s: usize| (grid / cfg.stage_stride(s)).pow(2) as u64;
    let d1 = cfg.stage_width(0) as u64;

    let embed = if full {
        tokens(0) * (LATENT_CHANNELS * p * p) as u64 * d1
    } else {
        0
    };
    push(
        "embed".into(),
        0,
        0,
        ComponentFlops {
            embed,
            ..Default::default()
        },
    );
    for s in 0..STAGES {
        let merge = if full && cfg.has_resample(s) {
            let d = cfg.stage_width(s) as u64;
            tokens(s + 1) * 4 * d * 2 * d
        } else {
            0
        };
        push(
            format!("encoder.stage{}", s + 1),
            s,
            cfg.encoder_depths[s],
            ComponentFlops {
                merge_expand: merge,
                ..Default::default()
            },
        );
    }
    push(
        "bottleneck".into(),
        STAGES - 1,
        cfg.bottleneck_depth,
        ComponentFlops::default(),
    );
    for s in (0..STAGES).rev() {
        let expand = if full && cfg.has_resample(s) {
            let d = cfg.stage_width(s + 1) as u64;
            tokens(s + 1) * d * 2 * d
        } else {
            0
        };
        push(
            format!("decoder.stage{}", s + 1),
            s,
            cfg.decoder_depths[s],
            ComponentFlops {
                merge_expand: expand,
                ..Default::default()
            },
        );
    }
    let head = if full {
        tokens(0) * d1 * (OUTPUT_CHANNELS * p * p) as u64
    } else {
        0
    };
    push(
        "head".into(),
        0,
        0,
        ComponentFlops {
            head,
            ..Default::default()
        },
    );

    let mut totals = ComponentFlops::default();
    for s in &stages {
        totals.add(&s.flops);
    }
    let total = totals.total();
    Ok(FlopsReport {
        mode,
        variant: cfg.variant.clone(),
        resolution,
        latent: [side, side],
        params: count_params(cfg)?,
        stages,
        totals,
        total,
        gflops: total as f64 / 1e9,
    })
}
