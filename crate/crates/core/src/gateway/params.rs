use serde::{Deserialize, Serialize};

/// LLM sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.9,
            top_p: 0.9,
            repetition_penalty: 1.1,
            max_tokens: 512,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must be in (0, 1]", self.top_p));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(format!(
                "repetition_penalty {} must be >= 1",
                self.repetition_penalty
            ));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Text-to-image rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub inference_steps: u32,
    pub guidance_scale: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            inference_steps: 35,
            guidance_scale: 7.5,
            width: 1024,
            height: 1024,
            seed: None,
        }
    }
}

impl RenderParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.inference_steps == 0 {
            return Err("inference_steps must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = SamplingParams::default();
        assert_eq!((s.temperature, s.top_p, s.repetition_penalty), (0.9, 0.9, 1.1));
        let r = RenderParams::default();
        assert_eq!((r.inference_steps, r.guidance_scale), (35, 7.5));
        assert!(s.validate().is_ok() && r.validate().is_ok());
    }

    #[test]
    fn invalid_sampling() {
        let s = SamplingParams {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = SamplingParams {
            repetition_penalty: 0.5,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
