use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTokenPosition {
    /// Index `⌊L/2⌋` of the patch sequence.
    Middle,
    Head,
}

impl FromStr for ClassTokenPosition {
    type Err = VimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "middle" => Ok(ClassTokenPosition::Middle),
            "head" => Ok(ClassTokenPosition::Head),
            other => Err(VimError::invalid(format!(
                "unknown class token position `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ClassTokenPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassTokenPosition::Middle => "middle",
            ClassTokenPosition::Head => "head",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VimConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand_ratio: usize,
    pub conv_kernel: usize,
    pub num_classes: usize,
    pub class_token: ClassTokenPosition,
}

impl Default for VimConfig {
    fn default() -> Self {
        VimConfig::toy()
    }
}

impl VimConfig {
    /// Desk-scale model for 32×32 inputs.
    pub fn toy() -> Self {
        VimConfig {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            state_dim: 16,
            expand_ratio: 2,
            conv_kernel: 4,
            num_classes: 6,
            class_token: ClassTokenPosition::Middle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(VimError::invalid(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(VimError::invalid(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.depth < 1 {
            return fail("depth must be at least 1");
        }
        if self.in_channels == 0
            || self.embed_dim == 0
            || self.state_dim == 0
            || self.expand_ratio == 0
            || self.conv_kernel == 0
        {
            return fail("all dimensions must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn inner_dim(&self) -> usize {
        self.expand_ratio * self.embed_dim
    }

    pub fn class_token_index(&self) -> usize {
        match self.class_token {
            ClassTokenPosition::Middle => self.num_patches() / 2,
            ClassTokenPosition::Head => 0,
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("expand_ratio", self.expand_ratio.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("class_token", self.class_token.to_string()),
        ]
    }

    /// Overrides fields from `key=value` pairs; unrelated keys are ignored.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        fn num(k: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| VimError::invalid(format!("{k}: expected an integer, got `{v}`")))
        }
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "image_size" => self.image_size = num(k, v)?,
                "patch_size" => self.patch_size = num(k, v)?,
                "in_channels" => self.in_channels = num(k, v)?,
                "embed_dim" => self.embed_dim = num(k, v)?,
                "depth" => self.depth = num(k, v)?,
                "state_dim" => self.state_dim = num(k, v)?,
                "expand_ratio" => self.expand_ratio = num(k, v)?,
                "conv_kernel" => self.conv_kernel = num(k, v)?,
                "num_classes" => self.num_classes = num(k, v)?,
                "class_token" => self.class_token = v.parse()?,
                _ => {}
            }
        }
        Ok(())
    }
}
