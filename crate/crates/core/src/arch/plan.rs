use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on trunk depth; keeps plans with large `n` from exploding.
pub const MAX_LAYERS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NestingMode {
    /// Stage widths `w·2^(i−1)`.
    Width,
    /// Interlaced layers; stage depths `k·2^(i−1)`.
    Depth,
    /// Width doubles, then depth doubles, alternating per stage.
    WidthDepthAlternating,
    /// Width and depth double together at every stage.
    WidthDepthSimultaneous,
    /// Equal stripes; stage widths `i·w`.
    EvenWidth,
    /// Single trunk with early-exit heads after layers `k, 2k, 4k, …`.
    EannCascade,
}

impl NestingMode {
    pub const ALL: [NestingMode; 6] = [
        NestingMode::Width,
        NestingMode::Depth,
        NestingMode::WidthDepthAlternating,
        NestingMode::WidthDepthSimultaneous,
        NestingMode::EvenWidth,
        NestingMode::EannCascade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NestingMode::Width => "width",
            NestingMode::Depth => "depth",
            NestingMode::WidthDepthAlternating => "width-depth-alternating",
            NestingMode::WidthDepthSimultaneous => "width-depth-simultaneous",
            NestingMode::EvenWidth => "even-width",
            NestingMode::EannCascade => "eann-cascade",
        }
    }

    /// Modes whose stages select interlaced subsets of the trunk's layers.
    pub fn is_interlaced(self) -> bool {
        matches!(
            self,
            NestingMode::Depth
                | NestingMode::WidthDepthAlternating
                | NestingMode::WidthDepthSimultaneous
        )
    }

    /// Modes whose trunk carries power-of-2 skip connections.
    pub fn has_skips(self) -> bool {
        !matches!(self, NestingMode::Width | NestingMode::EvenWidth)
    }
}

impl fmt::Display for NestingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NestingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "width" => NestingMode::Width,
            "depth" => NestingMode::Depth,
            "width-depth-alternating" | "alternating" => NestingMode::WidthDepthAlternating,
            "width-depth-simultaneous" | "simultaneous" => NestingMode::WidthDepthSimultaneous,
            "even-width" => NestingMode::EvenWidth,
            "eann-cascade" | "eann" => NestingMode::EannCascade,
            other => return Err(Error::Config(format!("unknown nesting mode `{other}`"))),
        };
        Ok(mode)
    }
}

/// Shape of an anytime network: nesting mode plus base sizes.
///
/// Stages are numbered `1..=num_stages` throughout the crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub mode: NestingMode,
    pub num_stages: usize,
    /// Hidden units per layer in stage 1.
    pub base_width: usize,
    /// Hidden layers in stage 1.
    pub base_depth: usize,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan::new(NestingMode::Width, 4, 4, 2, 3, 2)
    }
}

impl StagePlan {
    pub fn new(
        mode: NestingMode,
        num_stages: usize,
        base_width: usize,
        base_depth: usize,
        num_classes: usize,
        input_dim: usize,
    ) -> Self {
        StagePlan { mode, num_stages, base_width, base_depth, num_classes, input_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Plan("need at least one stage".into()));
        }
        if self.base_width == 0 || self.base_depth == 0 {
            return Err(Error::Plan("base width and depth must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Plan("need at least two classes".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Plan("input dimension must be positive".into()));
        }
        let depth_doublings = self.depth_level(self.num_stages) as u32;
        let depth = 1usize
            .checked_shl(depth_doublings)
            .and_then(|f| f.checked_mul(self.base_depth))
            .filter(|&d| d <= MAX_LAYERS);
        if depth.is_none() {
            return Err(Error::Plan(format!(
                "trunk depth {}·2^{depth_doublings} exceeds {MAX_LAYERS} layers",
                self.base_depth
            )));
        }
        let width_levels = self.width_level(self.num_stages) as u32;
        let width = match self.mode {
            NestingMode::EvenWidth => self.base_width.checked_mul(self.num_stages),
            _ => 1usize.checked_shl(width_levels).and_then(|f| f.checked_mul(self.base_width)),
        };
        if width.filter(|&w| w <= 1 << 20).is_none() {
            return Err(Error::Plan("final width too large".into()));
        }
        Ok(())
    }

    pub(crate) fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.num_stages {
            return Err(Error::Input(format!(
                "stage {stage} outside 1..={}",
                self.num_stages
            )));
        }
        Ok(())
    }

    /// Number of width doublings (or even stripes added) reached by `stage`.
    pub fn width_level(&self, stage: usize) -> usize {
        let s = stage - 1;
        match self.mode {
            NestingMode::Width | NestingMode::EvenWidth | NestingMode::WidthDepthSimultaneous => s,
            NestingMode::WidthDepthAlternating => s.div_ceil(2),
            NestingMode::Depth | NestingMode::EannCascade => 0,
        }
    }

    /// Number of depth doublings reached by `stage`.
    pub fn depth_level(&self, stage: usize) -> usize {
        let s = stage - 1;
        match self.mode {
            NestingMode::Depth | NestingMode::WidthDepthSimultaneous | NestingMode::EannCascade => s,
            NestingMode::WidthDepthAlternating => s / 2,
            NestingMode::Width | NestingMode::EvenWidth => 0,
        }
    }

    /// Layers in the full trunk.
    pub fn total_depth(&self) -> usize {
        self.base_depth << self.depth_level(self.num_stages)
    }

    /// Layers on stage `stage`'s forward path.
    pub fn stage_depth(&self, stage: usize) -> usize {
        self.base_depth << self.depth_level(stage)
    }

    /// Hidden units per layer visible to `stage`.
    pub fn stage_width(&self, stage: usize) -> usize {
        self.stripe_end(self.width_level(stage))
    }

    /// Cumulative width covered by stripes `0..=level`.
    pub(crate) fn stripe_end(&self, level: usize) -> usize {
        match self.mode {
            NestingMode::EvenWidth => self.base_width * (level + 1),
            _ => self.base_width << level,
        }
    }

    /// Whether layer `layer` (1-based; 0 is the input) is on `stage`'s path.
    pub fn layer_in_stage(&self, layer: usize, stage: usize) -> bool {
        if layer == 0 {
            return true;
        }
        if self.mode.is_interlaced() {
            let stride = 1usize << (self.depth_level(self.num_stages) - self.depth_level(stage));
            (layer - 1) % stride == 0
        } else {
            layer <= self.stage_depth(stage)
        }
    }

    /// Layers selected by `stage`, ascending.
    pub fn stage_layers(&self, stage: usize) -> Vec<usize> {
        (1..=self.total_depth()).filter(|&l| self.layer_in_stage(l, stage)).collect()
    }

    /// Layer the stage's output head reads from.
    pub fn head_layer(&self, stage: usize) -> usize {
        if self.mode.is_interlaced() {
            let stride = 1usize << (self.depth_level(self.num_stages) - self.depth_level(stage));
            self.total_depth() - stride + 1
        } else {
            self.stage_depth(stage)
        }
    }

    /// First stage whose path includes `layer`.
    pub(crate) fn layer_owner(&self, layer: usize) -> usize {
        (1..=self.num_stages)
            .find(|&s| self.layer_in_stage(layer, s))
            .expect("every trunk layer belongs to the last stage")
    }

    /// First stage that can see stripe `stripe`.
    pub(crate) fn stripe_owner(&self, stripe: usize) -> usize {
        (1..=self.num_stages)
            .find(|&s| self.width_level(s) >= stripe)
            .expect("stripe within the final width")
    }

    /// Plan for an independent network matching stage `stage`'s size.
    pub fn standalone_plan(&self, stage: usize) -> StagePlan {
        let mode = if self.mode.has_skips() { NestingMode::Depth } else { NestingMode::Width };
        StagePlan {
            mode,
            num_stages: 1,
            base_width: self.stage_width(stage),
            base_depth: self.stage_depth(stage),
            num_classes: self.num_classes,
            input_dim: self.input_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(mode: NestingMode, n: usize, w: usize, k: usize) -> StagePlan {
        StagePlan::new(mode, n, w, k, 3, 2)
    }

    #[test]
    fn alternating_stage_sizes() {
        let p = plan(NestingMode::WidthDepthAlternating, 5, 2, 1);
        let sizes: Vec<_> = (1..=5).map(|s| (p.stage_width(s), p.stage_depth(s))).collect();
        assert_eq!(sizes, vec![(2, 1), (4, 1), (4, 2), (8, 2), (8, 4)]);
    }

    #[test]
    fn simultaneous_stage_sizes() {
        let p = plan(NestingMode::WidthDepthSimultaneous, 3, 3, 2);
        let sizes: Vec<_> = (1..=3).map(|s| (p.stage_width(s), p.stage_depth(s))).collect();
        assert_eq!(sizes, vec![(3, 2), (6, 4), (12, 8)]);
    }

    #[test]
    fn interlaced_selection() {
        let p = plan(NestingMode::Depth, 2, 4, 2);
        assert_eq!(p.stage_layers(1), vec![1, 3]);
        assert_eq!(p.stage_layers(2), vec![1, 2, 3, 4]);
        assert_eq!(p.head_layer(1), 3);
        assert_eq!(p.head_layer(2), 4);
    }

    #[test]
    fn eann_branch_points() {
        let p = plan(NestingMode::EannCascade, 4, 4, 2);
        let heads: Vec<_> = (1..=4).map(|s| p.head_layer(s)).collect();
        assert_eq!(heads, vec![2, 4, 8, 16]);
        assert_eq!(p.stage_layers(2), vec![1, 2, 3, 4]);
    }

    #[test]
    fn even_width_levels() {
        let p = plan(NestingMode::EvenWidth, 4, 4, 1);
        let widths: Vec<_> = (1..=4).map(|s| p.stage_width(s)).collect();
        assert_eq!(widths, vec![4, 8, 12, 16]);
    }

    #[test]
    fn rejects_degenerate_plans() {
        assert!(plan(NestingMode::Width, 0, 4, 1).validate().is_err());
        assert!(plan(NestingMode::Width, 2, 0, 1).validate().is_err());
        assert!(plan(NestingMode::Depth, 2, 4, 0).validate().is_err());
        assert!(plan(NestingMode::Depth, 40, 4, 1).validate().is_err());
        assert!(StagePlan::new(NestingMode::Width, 2, 4, 1, 1, 2).validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in NestingMode::ALL {
            assert_eq!(mode.name().parse::<NestingMode>().unwrap(), mode);
        }
        assert!("diagonal".parse::<NestingMode>().is_err());
    }
}
