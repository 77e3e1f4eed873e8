use serde::{Deserialize, Serialize};

use crate::attention::num_heads;
use crate::error::{Error, Result};

/// Channels of the latent the backbone consumes.
pub const LATENT_CHANNELS: usize = 4;
/// Output channels: noise prediction followed by the variance logit.
pub const OUTPUT_CHANNELS: usize = 2 * LATENT_CHANNELS;
/// Stages per side of the U-Net (the fourth runs at the third's resolution).
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelFlags {
    pub disable_attention: bool,
    pub disable_shift: bool,
    /// Keeps every stage at the stem width and resolution.
    pub isotropic_mode: bool,
    pub patch_size: usize,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            disable_attention: false,
            disable_shift: false,
            isotropic_mode: false,
            patch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub stage_dims: [usize; 3],
    pub encoder_depths: [usize; STAGES],
    pub bottleneck_depth: usize,
    pub decoder_depths: [usize; STAGES],
    pub cond_dim: usize,
    pub window: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub flags: ModelFlags,
}

impl ModelConfig {
    /// Named presets: `S`, `B`, `L`, `XL` and the test-sized `T`.
    pub fn preset(name: &str) -> Result<Self> {
        let small = ([2, 2, 2, 0], 1, [3, 3, 3, 0]);
        let large = ([2, 2, 2, 2], 2, [3, 3, 3, 3]);
        let (variant, dims, (enc, mid, dec), cond, window, state) = match name.to_ascii_uppercase().as_str() {
            "S" => ("S", [96, 192, 384], small, 192, 8, 16),
            "B" => ("B", [192, 384, 768], small, 384, 8, 16),
            "L" => ("L", [256, 512, 1024], large, 1024, 8, 16),
            "XL" => ("XL", [320, 640, 1280], large, 1280, 8, 16),
            "T" | "TINY" => ("T", [32, 64, 128], small, 64, 4, 8),
            other => return Err(Error::Config(format!("unknown preset {other:?} (expected S, B, L, XL or T)"))),
        };
        Ok(Self {
            variant: variant.to_string(),
            stage_dims: dims,
            encoder_depths: enc,
            bottleneck_depth: mid,
            decoder_depths: dec,
            cond_dim: cond,
            window,
            state_dim: state,
            num_classes: 1000,
            flags: ModelFlags::default(),
        })
    }

    pub fn presets() -> [&'static str; 5] {
        ["S", "B", "L", "XL", "T"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channel width of stage `s` (0-based, `s < 4`).
    pub fn stage_width(&self, s: usize) -> usize {
        if self.flags.isotropic_mode {
            self.stage_dims[0]
        } else {
            self.stage_dims[s.min(2)]
        }
    }

    /// Spatial downsampling factor of stage `s` relative to the token grid.
    pub fn stage_stride(&self, s: usize) -> usize {
        if self.flags.isotropic_mode {
            1
        } else {
            1 << s.min(2)
        }
    }

    /// Whether a patch merge follows encoder stage `s` (and an expand precedes
    /// decoder stage `s`).
    pub fn has_resample(&self, s: usize) -> bool {
        !self.flags.isotropic_mode && s < 2
    }

    /// Encoder stage `s` feeds decoder stage `s` when both contain blocks.
    pub fn has_skip(&self, s: usize) -> bool {
        self.encoder_depths[s] > 0 && self.decoder_depths[s] > 0
    }

    /// Latent side lengths must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        self.flags.patch_size * self.stage_stride(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_dims.contains(&0) {
            return bad(format!("stage_dims must be positive, got {:?}", self.stage_dims));
        }
        if self.cond_dim == 0 || self.window == 0 || self.state_dim == 0 || self.num_classes == 0 {
            return bad("cond_dim, window, state_dim and num_classes must be positive".into());
        }
        if self.flags.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if !self.flags.isotropic_mode {
            for s in 0..2 {
                let (lo, hi) = (self.stage_dims[s], self.stage_dims[s + 1]);
                if hi != 2 * lo {
                    return bad(format!("stage {} width {hi} must be twice stage {} width {lo}", s + 2, s + 1));
                }
            }
        }
        for s in 0..STAGES {
            let d = self.stage_width(s);
            let heads = num_heads(d);
            if !d.is_multiple_of(heads) {
                return bad(format!("width {d} does not split into {heads} heads"));
            }
        }
        Ok(())
    }

    pub fn check_latent(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "latent {h}x{w} must have non-zero sides divisible by {m} for variant {}",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.encoder_depths.iter().sum::<usize>() + self.bottleneck_depth + self.decoder_depths.iter().sum::<usize>()
    }
}
