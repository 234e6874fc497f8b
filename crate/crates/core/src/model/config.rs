use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Depthwise-separable dense blocks.
    Effcnet,
    /// Grouped-convolution baseline with a fixed group count.
    CondensenetStatic,
}

/// Whole-network description.
///
/// `stages[d]` is the number of dense blocks in stage `d`; every block of
/// stage `d` adds `base_growth · 2^d` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub stages: Vec<usize>,
    pub base_growth: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    /// Width of the expanding 1×1 convolution as a multiple of the growth.
    pub bottleneck_factor: usize,
    /// Group count `G` (= condensation factor) of the baseline's convolutions.
    pub groups: usize,
    /// Channel-shuffle groups inside an EffCNet block.
    pub permute_groups: usize,
    pub dw_kernel: usize,
    pub dropout_rate: f64,
    /// One pointwise convolution (in → growth) instead of expand → shuffle → project.
    pub single_pointwise: bool,
    pub batch_norm: bool,
    pub leaky_slope: f64,
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::effcnet_cifar(10)
    }
}

impl NetworkConfig {
    /// Reconstructed EffCNet: 3 stages × 10 blocks, growth 6/12/24.
    pub fn effcnet_cifar(num_classes: usize) -> Self {
        Self {
            variant: Variant::Effcnet,
            stages: vec![10, 10, 10],
            base_growth: 6,
            init_channels: 16,
            num_classes,
            bottleneck_factor: 4,
            groups: 4,
            permute_groups: 4,
            dw_kernel: 3,
            dropout_rate: 0.0,
            single_pointwise: false,
            batch_norm: true,
            leaky_slope: crate::nn::LEAKY_SLOPE,
            input_size: 32,
        }
    }

    /// Reconstructed static baseline: 3 stages × 14 blocks, growth 8/16/32, G = 4.
    pub fn condensenet_cifar(num_classes: usize) -> Self {
        Self { variant: Variant::CondensenetStatic, stages: vec![14, 14, 14], base_growth: 8, ..Self::effcnet_cifar(num_classes) }
    }

    /// One stage of four blocks, for desk-scale training runs.
    pub fn effcnet_mini(num_classes: usize) -> Self {
        Self { stages: vec![4], base_growth: 12, ..Self::effcnet_cifar(num_classes) }
    }

    pub fn growth(&self, stage: usize) -> usize {
        growth_channels(stage, self.base_growth)
    }

    /// Channel count leaving the last stage.
    pub fn final_channels(&self) -> usize {
        self.init_channels + self.stages.iter().enumerate().map(|(d, &n)| n * self.growth(d)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "num_classes must be at least 2, got {}", self.num_classes);
        }
        if self.base_growth == 0 || self.init_channels == 0 || self.bottleneck_factor == 0 {
            bail!(Config, "base_growth, init_channels and bottleneck_factor must be positive");
        }
        if self.dw_kernel == 0 || self.dw_kernel.is_multiple_of(2) {
            bail!(Config, "dw_kernel must be a positive odd integer, got {}", self.dw_kernel);
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout_rate must lie in [0, 1), got {}", self.dropout_rate);
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!(Config, "leaky_slope must lie in (0, 1), got {}", self.leaky_slope);
        }
        if self.stages.len() > 1 {
            let shrink = 1usize << (self.stages.len() - 1);
            if !self.input_size.is_multiple_of(shrink) {
                bail!(Config, "input size {} is not divisible by {} for {} stages", self.input_size, shrink, self.stages.len());
            }
        }
        if self.input_size == 0 {
            bail!(Config, "input_size must be positive");
        }
        if self.stages.len() >= usize::BITS as usize - 8 {
            bail!(Config, "too many stages: {}", self.stages.len());
        }
        let mut channels = self.init_channels;
        for (d, &blocks) in self.stages.iter().enumerate() {
            let k = self.growth(d);
            for _ in 0..blocks {
                match self.variant {
                    Variant::Effcnet => {
                        let mid = if self.single_pointwise { k } else { self.bottleneck_factor * k };
                        if self.permute_groups == 0 || mid % self.permute_groups != 0 {
                            bail!(Config, "permute_groups {} does not divide {} channels in stage {}", self.permute_groups, mid, d);
                        }
                    }
                    Variant::CondensenetStatic => {
                        let g = self.groups;
                        let mid = self.bottleneck_factor * k;
                        if g == 0 || !channels.is_multiple_of(g) || !mid.is_multiple_of(g) || !k.is_multiple_of(g) {
                            bail!(Config, "groups {} must divide {}, {} and {} in stage {}", g, channels, mid, k, d);
                        }
                    }
                }
                channels += k;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Channels added per block in stage `d`: `2^d · x0`.
pub fn growth_channels(d: usize, x0: usize) -> usize {
    x0 << d
}
