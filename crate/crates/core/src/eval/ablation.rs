use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    /// Labels predicted by the image network.
    Predicted,
    /// Ground-truth image labels, used at inference only.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationLabel {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o-Attn")]
    WithoutAttention,
    #[serde(rename = "w/o-Seg")]
    WithoutGuidance,
    #[serde(rename = "basic")]
    Basic,
    #[serde(rename = "Seg-GT")]
    SegGt,
}

impl AblationLabel {
    pub const ALL: [AblationLabel; 5] = [
        AblationLabel::Full,
        AblationLabel::WithoutAttention,
        AblationLabel::WithoutGuidance,
        AblationLabel::Basic,
        AblationLabel::SegGt,
    ];

    /// Row label in result tables.
    pub fn row_name(self) -> &'static str {
        match self {
            AblationLabel::Full => "Ours",
            AblationLabel::WithoutAttention => "Ours (w/o-Attn)",
            AblationLabel::WithoutGuidance => "Ours (w/o-Seg)",
            AblationLabel::Basic => "Ours (basic)",
            AblationLabel::SegGt => "Ours (Seg-GT)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|l| serde_json::to_value(l).ok().and_then(|v| v.as_str().map(|x| x == s)) == Some(true))
    }
}

impl fmt::Display for AblationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.row_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub attention: bool,
    pub guidance: bool,
    pub guidance_source: GuidanceSource,
    pub label: AblationLabel,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::preset(AblationLabel::Full)
    }
}

impl AblationConfig {
    pub fn preset(label: AblationLabel) -> Self {
        let (attention, guidance, source) = match label {
            AblationLabel::Full => (true, true, GuidanceSource::Predicted),
            AblationLabel::WithoutAttention => (false, true, GuidanceSource::Predicted),
            AblationLabel::WithoutGuidance => (true, false, GuidanceSource::Predicted),
            AblationLabel::Basic => (false, false, GuidanceSource::Predicted),
            AblationLabel::SegGt => (true, true, GuidanceSource::GroundTruth),
        };
        Self {
            attention,
            guidance,
            guidance_source: source,
            label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = Self::preset(self.label);
        let source_matters = self.guidance;
        ensure!(
            self.attention == expect.attention
                && self.guidance == expect.guidance
                && (!source_matters || self.guidance_source == expect.guidance_source),
            "ablation label {:?} requires attention {}, guidance {}, guidance source {:?}",
            self.label,
            expect.attention,
            expect.guidance,
            expect.guidance_source
        );
        Ok(())
    }

    /// Configuration whose trained model this one evaluates. Ground-truth
    /// guidance only changes inference, so it shares the full model.
    pub fn training_label(&self) -> AblationLabel {
        match self.label {
            AblationLabel::SegGt => AblationLabel::Full,
            l => l,
        }
    }
}
