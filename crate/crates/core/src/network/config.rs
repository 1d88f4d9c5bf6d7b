use serde::{Deserialize, Serialize};

use crate::geometry::{KnnSpace, SamplingStrategy};
use crate::shellconv::PartitionMode;

use super::NetworkError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Segmentation,
}

/// One encoder level: representatives kept, shells per neighborhood, output
/// channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub points: usize,
    pub shells: usize,
    pub channels: usize,
}

/// Neighbor-sampling variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Random representatives, fixed-size shells, coordinate-space neighbors.
    A,
    /// Farthest-point representatives.
    B,
    /// Equidistant shells with dynamic populations.
    C,
    /// Neighbors searched in feature space.
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            other => Err(format!("unknown preset {other:?}, expected A, B, C or D")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub task: Task,
    pub layers: Vec<LayerSpec>,
    /// Points per shell.
    pub shell_size: usize,
    /// Hidden widths of the pointwise lift; ReLU after each.
    pub lift_widths: Vec<usize>,
    /// Hidden widths of the output head, before the final logits map.
    pub head_widths: Vec<usize>,
    /// Classes (classification) or segment labels (segmentation).
    pub num_outputs: usize,
    pub sampling: SamplingStrategy,
    pub knn_space: KnnSpace,
    pub partition: PartitionMode,
    /// Segmentation only: the upsampling decoder with skip connections.
    pub decoder: bool,
    /// Segmentation only: per-point channels of the last decoder layer.
    pub final_channels: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl NetworkConfig {
    /// 512/128/32 representatives, 4/2/1 shells, 128/256/512 channels, shell
    /// size 16, 40 classes.
    pub fn classification() -> Self {
        Self {
            task: Task::Classification,
            layers: vec![
                LayerSpec {
                    points: 512,
                    shells: 4,
                    channels: 128,
                },
                LayerSpec {
                    points: 128,
                    shells: 2,
                    channels: 256,
                },
                LayerSpec {
                    points: 32,
                    shells: 1,
                    channels: 512,
                },
            ],
            shell_size: 16,
            lift_widths: vec![32, 64],
            head_widths: vec![256, 128],
            num_outputs: 40,
            sampling: SamplingStrategy::Random,
            knn_space: KnnSpace::Coordinates,
            partition: PartitionMode::Fixed,
            decoder: false,
            final_channels: 64,
            init_seed: 0,
        }
    }

    /// The classification encoder with shell size 8, a mirrored decoder and a
    /// 64-channel per-point output.
    pub fn segmentation() -> Self {
        Self {
            task: Task::Segmentation,
            shell_size: 8,
            head_widths: Vec::new(),
            num_outputs: 50,
            decoder: true,
            ..Self::classification()
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.sampling = SamplingStrategy::Random;
        self.partition = PartitionMode::Fixed;
        self.knn_space = KnnSpace::Coordinates;
        match preset {
            Preset::A => {}
            Preset::B => self.sampling = SamplingStrategy::Farthest,
            Preset::C => self.partition = PartitionMode::Equidistant,
            Preset::D => self.knn_space = KnnSpace::Features,
        }
        self
    }

    /// Neighbors gathered by encoder layer `i`.
    pub fn neighbors(&self, layer: usize) -> usize {
        self.layers[layer].shells * self.shell_size
    }

    /// Smallest input cloud the network accepts.
    pub fn min_input_points(&self) -> usize {
        match self.layers.first() {
            Some(l) => l.points.max(l.shells * self.shell_size),
            None => 1,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::Config(msg));
        if self.layers.is_empty() {
            return bad("at least one encoder layer is required".into());
        }
        if self.shell_size == 0 {
            return bad("shell_size must be positive".into());
        }
        if self.num_outputs == 0 {
            return bad("num_outputs must be positive".into());
        }
        if self.lift_widths.contains(&0) || self.head_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.points == 0 || l.shells == 0 || l.channels == 0 {
                return bad(format!("layer {i}: points, shells and channels must be positive"));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[1].points >= w[0].points {
                return bad(format!(
                    "representatives must shrink: layer {} has {} >= {}",
                    i + 1,
                    w[1].points,
                    w[0].points
                ));
            }
            if w[1].channels <= w[0].channels {
                return bad(format!(
                    "channels must grow: layer {} has {} <= {}",
                    i + 1,
                    w[1].channels,
                    w[0].channels
                ));
            }
            let k = w[1].shells * self.shell_size;
            if k > w[0].points {
                return bad(format!(
                    "layer {} gathers {k} neighbors from only {} points",
                    i + 1,
                    w[0].points
                ));
            }
        }
        match self.task {
            Task::Classification => {
                if self.decoder {
                    return bad("the decoder is only available for segmentation".into());
                }
            }
            Task::Segmentation => {
                if !self.decoder {
                    return Err(NetworkError::ResolutionMismatch);
                }
                if self.final_channels == 0 {
                    return bad("final_channels must be positive".into());
                }
                // each decoder layer mirrors the shell count of the encoder
                // layer that produced its source level
                for (i, l) in self.layers.iter().enumerate() {
                    let k = l.shells * self.shell_size;
                    if k > l.points {
                        return bad(format!(
                            "decoder querying level {i} needs {k} neighbors from {} points",
                            l.points
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        NetworkConfig::classification().validate().unwrap();
        NetworkConfig::segmentation().validate().unwrap();
        assert_eq!(NetworkConfig::classification().neighbors(0), 64);
        assert_eq!(NetworkConfig::segmentation().neighbors(2), 8);
    }

    #[test]
    fn rejects_non_monotone_plans() {
        let mut c = NetworkConfig::classification();
        c.layers[1].points = 512;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::classification();
        c.layers[2].channels = 256;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::classification();
        c.layers[2].shells = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn segmentation_requires_decoder() {
        let mut c = NetworkConfig::segmentation();
        c.decoder = false;
        assert!(matches!(c.validate(), Err(NetworkError::ResolutionMismatch)));
    }

    #[test]
    fn presets() {
        let d = NetworkConfig::classification().with_preset(Preset::D);
        assert_eq!(d.knn_space, KnnSpace::Features);
        let c = d.with_preset(Preset::C);
        assert_eq!(c.knn_space, KnnSpace::Coordinates);
        assert_eq!(c.partition, PartitionMode::Equidistant);
        assert_eq!("b".parse::<Preset>().unwrap(), Preset::B);
    }

    #[test]
    fn json_roundtrip_rejects_unknown_keys() {
        let c = NetworkConfig::segmentation();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<NetworkConfig>(r#"{"shell_sz": 4}"#).is_err());
    }
}
