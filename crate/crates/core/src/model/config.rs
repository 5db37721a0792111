use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scan::ScanKind;

/// Direction set used by the encoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanMode {
    /// All eight spatio-temporal trajectories.
    Stb8,
    /// The four per-frame image trajectories; blocks become frame-local.
    Spatial4,
    /// Temporal-priority row order, both directions.
    Temporal1,
}

impl ScanMode {
    pub fn kinds(self) -> &'static [ScanKind] {
        match self {
            ScanMode::Stb8 => &ScanKind::STB8,
            ScanMode::Spatial4 => &ScanKind::SPATIAL4,
            ScanMode::Temporal1 => &ScanKind::TEMPORAL1,
        }
    }

    /// Depthwise kernel of a block in this mode; per-frame modes never mix frames.
    pub fn conv_kernel(self) -> [usize; 3] {
        match self {
            ScanMode::Spatial4 => [1, 3, 3],
            ScanMode::Stb8 | ScanMode::Temporal1 => [3, 3, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanMode::Stb8 => "stb8",
            ScanMode::Spatial4 => "spatial4",
            ScanMode::Temporal1 => "temporal1",
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stb8" => Ok(ScanMode::Stb8),
            "spatial4" => Ok(ScanMode::Spatial4),
            "temporal1" => Ok(ScanMode::Temporal1),
            _ => Err(Error::Config(format!("unknown scan_mode '{s}' (expected stb8|spatial4|temporal1)"))),
        }
    }
}

/// Residual block flavour in the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResMode {
    /// Per-frame blocks on the center slice.
    Res2d,
    /// Volumetric blocks on the whole window, sliced afterwards.
    Res3d,
}

impl ResMode {
    pub fn name(self) -> &'static str {
        match self {
            ResMode::Res2d => "res2d",
            ResMode::Res3d => "res3d",
        }
    }
}

impl fmt::Display for ResMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "res2d" => Ok(ResMode::Res2d),
            "res3d" => Ok(ResMode::Res3d),
            _ => Err(Error::Config(format!("unknown decoder_resblocks '{s}' (expected res2d|res3d)"))),
        }
    }
}

/// Architecture knobs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// VSS blocks per encoder and in the decoder.
    pub depth: usize,
    pub state_dim: usize,
    /// Patch extent `(t, h, w)` of the embedding.
    pub tubelet: [usize; 3],
    /// Frames per forward pass; odd.
    pub window: usize,
    pub scan_mode: ScanMode,
    pub decoder_resblocks: ResMode,
    /// Number of residual blocks in the decoder.
    pub res_blocks: usize,
    /// Inner width of a VSS block relative to its input width.
    pub expand: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            depth: 3,
            state_dim: 8,
            tubelet: [1, 2, 2],
            window: 5,
            scan_mode: ScanMode::Stb8,
            decoder_resblocks: ResMode::Res2d,
            res_blocks: 4,
            expand: 1,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

pub const MODEL_KEYS: [&str; 11] = [
    "embed_dim",
    "depth",
    "state_dim",
    "tubelet",
    "window",
    "scan_mode",
    "decoder_resblocks",
    "res_blocks",
    "expand",
    "in_channels",
    "out_channels",
];

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.state_dim == 0 || self.expand == 0 {
            return bad("embed_dim, state_dim and expand must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.tubelet.contains(&0) {
            return bad(format!("tubelet {:?} has a zero extent", self.tubelet));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return bad(format!("window must be odd, got {}", self.window));
        }
        let tokens_t = self.window.div_ceil(self.tubelet[0]);
        if tokens_t % 2 == 0 {
            return bad(format!("window {} with temporal tubelet {} has no center token", self.window, self.tubelet[0]));
        }
        let up = self.tubelet[1] * self.tubelet[2];
        if (2 * self.embed_dim) % up != 0 {
            return bad(format!("fused width {} not divisible by upsampling factor {}", 2 * self.embed_dim, up));
        }
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        self.embed_dim * self.expand
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "embed_dim" => self.embed_dim = parse_usize(key, v)?,
            "depth" => self.depth = parse_usize(key, v)?,
            "state_dim" => self.state_dim = parse_usize(key, v)?,
            "tubelet" => {
                let parts: Vec<_> = v.split(',').map(|p| parse_usize(key, p)).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("tubelet: expected t,h,w, got '{v}'")));
                }
                self.tubelet = [parts[0], parts[1], parts[2]];
            }
            "window" => self.window = parse_usize(key, v)?,
            "scan_mode" => self.scan_mode = v.parse()?,
            "decoder_resblocks" => self.decoder_resblocks = v.parse()?,
            "res_blocks" => self.res_blocks = parse_usize(key, v)?,
            "expand" => self.expand = parse_usize(key, v)?,
            "in_channels" => self.in_channels = parse_usize(key, v)?,
            "out_channels" => self.out_channels = parse_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` list in [`MODEL_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let [t, h, w] = self.tubelet;
        let vals = [
            self.embed_dim.to_string(),
            self.depth.to_string(),
            self.state_dim.to_string(),
            format!("{t},{h},{w}"),
            self.window.to_string(),
            self.scan_mode.to_string(),
            self.decoder_resblocks.to_string(),
            self.res_blocks.to_string(),
            self.expand.to_string(),
            self.in_channels.to_string(),
            self.out_channels.to_string(),
        ];
        MODEL_KEYS.iter().zip(vals).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
