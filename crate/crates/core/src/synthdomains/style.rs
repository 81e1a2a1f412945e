use serde::{Deserialize, Serialize};

/// Additive texture pattern laid over the whole canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextureKind {
    None,
    /// Diagonal stripes with the given pixel period and amplitude.
    Stripes { period: u32, amplitude: f64 },
    /// Checkerboard with the given cell size and amplitude.
    Checker { period: u32, amplitude: f64 },
    /// Sparse per-pixel speckle driven by the style/scene noise stream.
    Speckle { density: f64, amplitude: f64 },
}

/// Per-style transform parameters. Every field acts on pixel values only;
/// object geometry is untouched, so labels transfer verbatim across styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    /// 3x3 color mapping applied to the base RGB of every pixel.
    pub channel_mix: [[f64; 3]; 3],
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    /// Base background color before the channel mapping.
    pub background: [f64; 3],
    pub texture: TextureKind,
    /// Uniform per-pixel noise amplitude (seeded by scene and style).
    pub noise_amp: f64,
    /// 0..1 strength of darkening at object borders.
    pub edge_emphasis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: String,
    pub params: StyleParams,
}

impl StyleSpec {
    pub fn new(id: &str, params: StyleParams) -> Self {
        StyleSpec {
            style_id: id.to_string(),
            params,
        }
    }
}

fn identity_mix() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// The four stock domains used by the default experiment configs: a plain
/// photo-like source plus three palette/texture shifts of increasing
/// distance.
pub fn default_styles() -> Vec<StyleSpec> {
    vec![
        StyleSpec::new(
            "plain",
            StyleParams {
                channel_mix: identity_mix(),
                gain: [1.0, 1.0, 1.0],
                bias: [0.0, 0.0, 0.0],
                background: [0.82, 0.81, 0.78],
                texture: TextureKind::None,
                noise_amp: 0.02,
                edge_emphasis: 0.0,
            },
        ),
        StyleSpec::new(
            "inkwash",
            StyleParams {
                channel_mix: [[0.15, 0.65, 0.20], [0.55, 0.20, 0.25], [0.30, 0.25, 0.45]],
                gain: [0.95, 1.05, 1.10],
                bias: [0.02, -0.02, 0.06],
                background: [0.30, 0.33, 0.40],
                texture: TextureKind::Stripes {
                    period: 7,
                    amplitude: 0.06,
                },
                noise_amp: 0.03,
                edge_emphasis: 0.35,
            },
        ),
        StyleSpec::new(
            "negative",
            StyleParams {
                channel_mix: [[-0.85, 0.0, 0.0], [0.0, -0.85, 0.0], [0.0, 0.0, -0.85]],
                gain: [1.0, 1.0, 1.0],
                bias: [0.92, 0.90, 0.88],
                background: [0.42, 0.52, 0.47],
                texture: TextureKind::Checker {
                    period: 9,
                    amplitude: 0.05,
                },
                noise_amp: 0.025,
                edge_emphasis: 0.2,
            },
        ),
        StyleSpec::new(
            "sepia",
            StyleParams {
                channel_mix: [[0.55, 0.35, 0.10], [0.40, 0.45, 0.10], [0.25, 0.30, 0.20]],
                gain: [1.05, 0.95, 0.80],
                bias: [0.08, 0.04, -0.02],
                background: [0.66, 0.56, 0.40],
                texture: TextureKind::Speckle {
                    density: 0.08,
                    amplitude: 0.14,
                },
                noise_amp: 0.05,
                edge_emphasis: 0.1,
            },
        ),
    ]
}
