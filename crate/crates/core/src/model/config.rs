//! Detector configuration and legality checks.

use crate::blocks::akat::AkatConfig;
use crate::blocks::cpf::CpfConfig;
use crate::blocks::hsg::HsgConfig;
use crate::blocks::mdfc::MdfcConfig;
use crate::blocks::wave::WaveConfig;
use crate::error::{Error, Result};

/// Which pyramid scales carry a prediction head. D2 through D5 sit at
/// strides 4, 8, 16, and 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectSet {
    D345,
    D234,
    D34,
    D24,
}

impl DetectSet {
    pub const ALL: [DetectSet; 4] = [DetectSet::D345, DetectSet::D234, DetectSet::D34, DetectSet::D24];

    /// Stage levels (2..=5) that get a head.
    pub fn levels(&self) -> &'static [usize] {
        match self {
            DetectSet::D345 => &[3, 4, 5],
            DetectSet::D234 => &[2, 3, 4],
            DetectSet::D34 => &[3, 4],
            DetectSet::D24 => &[2, 4],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DetectSet::D345 => "d3,d4,d5",
            DetectSet::D234 => "d2,d3,d4",
            DetectSet::D34 => "d3,d4",
            DetectSet::D24 => "d2,d4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '[' && *c != ']')
            .collect::<String>()
            .to_ascii_lowercase();
        for set in DetectSet::ALL {
            if norm == set.label() {
                return Ok(set);
            }
        }
        Err(Error::config(
            "detect",
            format!("unknown detect set {s:?}; expected one of d3,d4,d5 | d2,d3,d4 | d3,d4 | d2,d4"),
        ))
    }
}

pub fn stride_of(level: usize) -> usize {
    4 << (level - 2)
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Channel widths for stages S2..S5. The last entry is ignored when the
    /// S5 stage is disabled.
    pub widths: [usize; 4],
    /// Blocks per stage.
    pub blocks: [usize; 4],
    pub include_s5: bool,
    pub detect: DetectSet,
    pub classes: usize,
    pub input_extent: (usize, usize),
    /// Gated wavelet/attention stage kernels; plain convolutions when off.
    pub use_wekat: bool,
    /// Partial reparameterizable fusion blocks in the neck; plain
    /// convolutions when off.
    pub use_cpf: bool,
    /// Dual-domain coordination at the finest merge; plain concatenation
    /// when off.
    pub use_mdfc: bool,
    /// Identity-channel fraction inside each gated block.
    pub alpha: f64,
    pub wave_levels: usize,
    pub akat_heads: usize,
    pub kan_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [32, 64, 128, 256],
            blocks: [1, 1, 2, 1],
            include_s5: true,
            detect: DetectSet::D345,
            classes: 3,
            input_extent: (256, 256),
            use_wekat: true,
            use_cpf: true,
            use_mdfc: true,
            alpha: 0.25,
            wave_levels: 2,
            akat_heads: 2,
            kan_groups: 4,
        }
    }
}

impl ModelConfig {
    /// Smallest practical detector: widths [16,32,64], no S5, heads at
    /// strides 4 and 16.
    pub fn tiny(input_extent: (usize, usize)) -> Self {
        ModelConfig {
            widths: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            include_s5: false,
            detect: DetectSet::D24,
            input_extent,
            ..ModelConfig::default()
        }
    }

    /// Highest stage level present: 4 without S5, 5 with it.
    pub fn top_level(&self) -> usize {
        if self.include_s5 {
            5
        } else {
            4
        }
    }

    /// Stage levels in order, 2..=top.
    pub fn levels(&self) -> Vec<usize> {
        (2..=self.top_level()).collect()
    }

    pub fn width(&self, level: usize) -> usize {
        self.widths[level - 2]
    }

    pub fn depth(&self, level: usize) -> usize {
        self.blocks[level - 2]
    }

    /// Common channel width of every neck feature.
    pub fn neck_width(&self) -> usize {
        self.widths[1]
    }

    /// Extent of a stage or neck feature at `level` for the configured input.
    pub fn extent_at(&self, level: usize) -> (usize, usize) {
        let s = stride_of(level);
        (self.input_extent.0 / s, self.input_extent.1 / s)
    }

    pub fn wave_config(&self, level: usize) -> Result<WaveConfig> {
        let hsg = HsgConfig::new(self.width(level), self.alpha)?;
        WaveConfig::new(hsg.compute, self.wave_levels)
    }

    pub fn akat_config(&self, level: usize) -> Result<AkatConfig> {
        let hsg = HsgConfig::new(self.width(level), self.alpha)?;
        let compute = hsg.compute;
        if compute % 4 != 0 {
            return Err(Error::config(
                "widths",
                format!("stage {level} compute width {compute} must be divisible by 4 for attention"),
            ));
        }
        AkatConfig::with_dims(compute, compute / 4, compute, self.akat_heads, self.kan_groups)
    }

    pub fn cpf_config(&self) -> Result<CpfConfig> {
        CpfConfig::new(self.neck_width())
    }

    pub fn mdfc_config(&self) -> Result<MdfcConfig> {
        MdfcConfig::new(self.neck_width(), self.neck_width(), self.extent_at(3))
    }

    /// Every input extent must be a multiple of this.
    pub fn extent_divisor(&self) -> usize {
        let mut d = stride_of(self.top_level());
        if self.use_wekat {
            // The deepest wavelet stage (S3, stride 8) must still halve
            // cleanly `wave_levels` times.
            d = d.max(8 << self.wave_levels);
        }
        d
    }

    /// Smallest legal extent >= `e`.
    pub fn legalize_extent(&self, e: usize) -> usize {
        let d = self.extent_divisor();
        e.div_ceil(d) * d
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("classes", "need at least one class"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", "identity fraction must lie strictly inside (0,1)"));
        }
        if self.detect.levels().contains(&5) && !self.include_s5 {
            return Err(Error::config("detect", "detect set references S5 but the stage is disabled"));
        }
        for level in self.levels() {
            if self.depth(level) == 0 {
                return Err(Error::config("blocks", format!("stage {level} needs at least one block")));
            }
            HsgConfig::new(self.width(level), self.alpha)
                .map_err(|e| Error::config("widths", format!("stage {level}: {e}")))?;
            if self.use_wekat {
                if level <= 3 {
                    self.wave_config(level)?;
                } else {
                    self.akat_config(level)?;
                }
            }
        }
        if self.use_cpf {
            self.cpf_config()?;
        }
        if self.use_mdfc {
            self.mdfc_config()?;
        }
        let d = self.extent_divisor();
        let (h, w) = self.input_extent;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::config(
                "input_extent",
                format!("{h}x{w} is not a multiple of the required divisor {d}"),
            ));
        }
        if self.use_wekat {
            for level in [2usize, 3] {
                let (eh, ew) = self.extent_at(level);
                let step = 1 << self.wave_levels;
                if eh % step != 0 || ew % step != 0 {
                    return Err(Error::config(
                        "input_extent",
                        format!("stage {level} extent {eh}x{ew} cannot halve {} times", self.wave_levels),
                    ));
                }
            }
        }
        Ok(())
    }
}
