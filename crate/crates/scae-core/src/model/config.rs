//! Model hyperparameters and the compact layer-spec string grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and loss hyperparameters for the capsule autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaeConfig {
    /// Square input edge length.
    pub canvas_size: usize,
    /// Number of part capsules M.
    pub num_part_capsules: usize,
    /// Number of object capsules K.
    pub num_object_capsules: usize,
    /// Input channels; only grayscale (1) is supported.
    pub channels: usize,
    /// Square template edge length.
    pub template_size: usize,
    /// Half-width of uniform noise added to part presence logits in training.
    pub part_noise_scale: f64,
    /// Half-width of uniform noise added to object presence logits in training.
    pub object_noise_scale: f64,
    /// Part CNN spec, e.g. `2x(128:2)-2x(128:1)`: repeat×(channels:stride)
    /// groups of 3×3 convolutions, joined by `-`.
    pub part_cnn: String,
    /// Set transformer spec `layers×(heads-hidden)-output`, e.g. `3x(1-16)-256`.
    pub set_transformer: String,
    /// Attribute vector length n per part capsule.
    pub attribute_dim: usize,
    /// Weight of the object→part pose prediction term in the
    /// non-reconstruction loss.
    pub pose_loss_weight: f64,
    /// Weight of the prior-presence sparsity term.
    pub prior_sparsity_weight: f64,
    /// Weight of the posterior-presence sparsity term.
    pub posterior_sparsity_weight: f64,
}

impl Default for ScaeConfig {
    fn default() -> Self {
        ScaeConfig {
            canvas_size: 40,
            num_part_capsules: 24,
            num_object_capsules: 24,
            channels: 1,
            template_size: 11,
            part_noise_scale: 4.0,
            object_noise_scale: 4.0,
            part_cnn: "2x(128:2)-2x(128:1)".to_string(),
            set_transformer: "3x(1-16)-256".to_string(),
            attribute_dim: 16,
            pose_loss_weight: 1.0,
            prior_sparsity_weight: 1.0,
            posterior_sparsity_weight: 1.0,
        }
    }
}

/// Small configuration for fast tests and desk-scale experiments.
impl ScaeConfig {
    pub fn toy() -> Self {
        ScaeConfig {
            canvas_size: 14,
            num_part_capsules: 4,
            num_object_capsules: 4,
            template_size: 5,
            part_cnn: "2x(16:2)-2x(16:1)".to_string(),
            set_transformer: "3x(1-16)-64".to_string(),
            attribute_dim: 8,
            ..ScaeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("canvas_size", self.canvas_size),
            ("num_part_capsules", self.num_part_capsules),
            ("num_object_capsules", self.num_object_capsules),
            ("template_size", self.template_size),
            ("attribute_dim", self.attribute_dim),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.channels != 1 {
            return Err(Error::Config("only single-channel input is supported".into()));
        }
        if self.template_size > self.canvas_size {
            return Err(Error::Config(format!(
                "template_size {} exceeds canvas_size {}",
                self.template_size, self.canvas_size
            )));
        }
        let conv = parse_conv_spec(&self.part_cnn)?;
        if conv.is_empty() {
            return Err(Error::Config("part_cnn spec is empty".into()));
        }
        let st = parse_set_transformer_spec(&self.set_transformer)?;
        if st.hidden % st.heads != 0 {
            return Err(Error::Config(format!(
                "set transformer hidden size {} is not divisible by {} heads",
                st.hidden, st.heads
            )));
        }
        // The CNN must leave at least one spatial cell.
        let mut edge = self.canvas_size;
        for layer in &conv {
            edge = conv_out_size(edge, layer.stride);
            if edge == 0 {
                return Err(Error::Config(format!(
                    "part_cnn strides reduce canvas {} to nothing",
                    self.canvas_size
                )));
            }
        }
        Ok(())
    }

    /// Parsed convolution stack.
    pub fn conv_layers(&self) -> Vec<ConvSpec> {
        parse_conv_spec(&self.part_cnn).expect("validated config")
    }

    /// Parsed set transformer shape.
    pub fn set_transformer_spec(&self) -> StSpec {
        parse_set_transformer_spec(&self.set_transformer).expect("validated config")
    }

    /// Spatial edge of the final CNN feature map.
    pub fn feature_edge(&self) -> usize {
        let mut edge = self.canvas_size;
        for layer in self.conv_layers() {
            edge = conv_out_size(edge, layer.stride);
        }
        edge
    }

    /// Token width consumed by the set transformer: pose + presence + attrs.
    pub fn token_dim(&self) -> usize {
        6 + 1 + self.attribute_dim
    }
}

/// One 3×3 convolution layer: output channels and stride (padding fixed at 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Set transformer shape: attention layers, heads, hidden width, output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StSpec {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Output edge of a 3×3 convolution with padding 1.
pub fn conv_out_size(input: usize, stride: usize) -> usize {
    (input + 2 - 3) / stride + 1
}

/// Normalize unicode multiplication/minus signs so both spellings parse.
fn normalize_spec(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '×' => 'x',
            '−' => '-',
            other => other,
        })
        .collect()
}

/// Parse `2x(128:2)-2x(128:1)` into a flat layer list.
pub fn parse_conv_spec(spec: &str) -> Result<Vec<ConvSpec>> {
    let norm = normalize_spec(spec);
    let mut layers = Vec::new();
    for group in norm.split('-') {
        let (repeat, rest) = group
            .split_once("x(")
            .ok_or_else(|| Error::Config(format!("bad conv group '{group}' in '{spec}'")))?;
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::Config(format!("unclosed conv group '{group}' in '{spec}'")))?;
        let (ch, st) = inner
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("conv group '{group}' needs channels:stride")))?;
        let repeat: usize = repeat
            .parse()
            .map_err(|_| Error::Config(format!("bad repeat count in '{group}'")))?;
        let channels: usize = ch
            .parse()
            .map_err(|_| Error::Config(format!("bad channel count in '{group}'")))?;
        let stride: usize = st
            .parse()
            .map_err(|_| Error::Config(format!("bad stride in '{group}'")))?;
        if repeat == 0 || channels == 0 || stride == 0 {
            return Err(Error::Config(format!("zero value in conv group '{group}'")));
        }
        for _ in 0..repeat {
            layers.push(ConvSpec { channels, stride });
        }
    }
    Ok(layers)
}

/// Parse `3x(1-16)-256` into layer/head/hidden/output counts.
pub fn parse_set_transformer_spec(spec: &str) -> Result<StSpec> {
    let norm = normalize_spec(spec);
    let (layers, rest) = norm
        .split_once("x(")
        .ok_or_else(|| Error::Config(format!("bad set transformer spec '{spec}'")))?;
    let (inner, out) = rest
        .split_once(")-")
        .ok_or_else(|| Error::Config(format!("bad set transformer spec '{spec}'")))?;
    let (heads, hidden) = inner
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("set transformer spec '{spec}' needs heads-hidden")))?;
    let parse = |what: &str, s: &str| -> Result<usize> {
        let v: usize = s
            .parse()
            .map_err(|_| Error::Config(format!("bad {what} '{s}' in '{spec}'")))?;
        if v == 0 {
            return Err(Error::Config(format!("{what} must be nonzero in '{spec}'")));
        }
        Ok(v)
    };
    Ok(StSpec {
        layers: parse("layer count", layers)?,
        heads: parse("head count", heads)?,
        hidden: parse("hidden size", hidden)?,
        output: parse("output size", out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ScaeConfig::default().validate().unwrap();
        ScaeConfig::toy().validate().unwrap();
    }

    #[test]
    fn conv_spec_parses_ascii_and_unicode() {
        let a = parse_conv_spec("2x(128:2)-2x(128:1)").unwrap();
        let b = parse_conv_spec("2×(128:2)−2×(128:1)").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0], ConvSpec { channels: 128, stride: 2 });
        assert_eq!(a[3], ConvSpec { channels: 128, stride: 1 });
    }

    #[test]
    fn set_transformer_spec_parses() {
        let st = parse_set_transformer_spec("3×(1−16)−256").unwrap();
        assert_eq!(st, StSpec { layers: 3, heads: 1, hidden: 16, output: 256 });
    }

    #[test]
    fn malformed_specs_are_rejected() {
        assert!(parse_conv_spec("2(128:2)").is_err());
        assert!(parse_conv_spec("2x(128)").is_err());
        assert!(parse_conv_spec("0x(128:1)").is_err());
        assert!(parse_set_transformer_spec("3x(116)-256").is_err());
        assert!(parse_set_transformer_spec("3x(1-16)").is_err());
    }

    #[test]
    fn feature_edge_follows_strides() {
        // 40 → 20 → 10 → 10 → 10 for the default spec.
        assert_eq!(ScaeConfig::default().feature_edge(), 10);
        // 14 → 7 → 4 → 4 → 4 for the toy spec.
        assert_eq!(ScaeConfig::toy().feature_edge(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ScaeConfig::default();
        c.template_size = 41;
        assert!(c.validate().is_err());
        let mut c = ScaeConfig::default();
        c.channels = 3;
        assert!(c.validate().is_err());
        let mut c = ScaeConfig::default();
        c.num_object_capsules = 0;
        assert!(c.validate().is_err());
        let mut c = ScaeConfig::default();
        c.set_transformer = "3x(5-16)-256".into();
        assert!(c.validate().is_err(), "heads must divide hidden");
    }
}
