use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsNorm,
    BatchNorm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPosition {
    /// `x + mixer(norm(x))`
    Pre,
    /// `norm(x + mixer(x))`
    PostSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsmKind {
    Lti,
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputKind {
    /// Token ids embedded by lookup.
    Tokens { vocab: usize },
    /// Real-valued features embedded by a linear map.
    Features { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// Pooled sequence to `n_classes` logits.
    Classification { n_classes: usize },
    /// Per-position logits over the token vocabulary.
    NextToken,
}

/// One branch of a block. `kappa = None` marks the uncompressed base branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub kappa: Option<f64>,
    pub ssm: SsmKind,
}

impl BranchConfig {
    pub fn base() -> Self {
        Self { kappa: None, ssm: SsmKind::Lti }
    }

    pub fn compressed(kappa: f64) -> Self {
        Self { kappa: Some(kappa), ssm: SsmKind::Lti }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub branches: Vec<BranchConfig>,
    /// Per-branch channel widths. `None` splits evenly, remainder to the
    /// first branch.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    pub window_k: usize,
    pub basis_g: usize,
    pub norm: NormKind,
    pub norm_position: NormPosition,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: InputKind,
    pub h_dim: usize,
    pub d_state: usize,
    pub depth: usize,
    pub head: HeadKind,
    pub pooling: Pooling,
    pub block: BlockConfig,
}

/// Even split of `h` channels over `branches`, remainder to the first.
pub fn even_widths(h: usize, branches: usize) -> Vec<usize> {
    let base = h / branches;
    let mut widths = vec![base; branches];
    widths[0] += h - base * branches;
    widths
}

impl NetworkConfig {
    /// Classification setup: batch norm after the skip, mean pooling,
    /// branches `{base, 0.5, 0.2}`.
    pub fn classification(vocab: usize, n_classes: usize, h_dim: usize) -> Self {
        Self {
            input: InputKind::Tokens { vocab },
            h_dim,
            d_state: 16,
            depth: 2,
            head: HeadKind::Classification { n_classes },
            pooling: Pooling::Mean,
            block: BlockConfig {
                branches: vec![BranchConfig::base(), BranchConfig::compressed(0.5), BranchConfig::compressed(0.2)],
                widths: None,
                window_k: 3,
                basis_g: 4,
                norm: NormKind::BatchNorm,
                norm_position: NormPosition::PostSkip,
                activation: Activation::Silu,
            },
        }
    }

    /// Language-model setup: RMS norm before each block, depth 8,
    /// branches `{base, 0.5, 0.1}`.
    pub fn language_model(vocab: usize, h_dim: usize) -> Self {
        Self {
            input: InputKind::Tokens { vocab },
            h_dim,
            d_state: 16,
            depth: 8,
            head: HeadKind::NextToken,
            pooling: Pooling::Mean,
            block: BlockConfig {
                branches: vec![BranchConfig::base(), BranchConfig::compressed(0.5), BranchConfig::compressed(0.1)],
                widths: None,
                window_k: 3,
                basis_g: 4,
                norm: NormKind::RmsNorm,
                norm_position: NormPosition::Pre,
                activation: Activation::Silu,
            },
        }
    }

    pub fn branch_widths(&self) -> Vec<usize> {
        self.block
            .widths
            .clone()
            .unwrap_or_else(|| even_widths(self.h_dim, self.block.branches.len().max(1)))
    }

    pub fn n_outputs(&self) -> usize {
        match (self.head, self.input) {
            (HeadKind::Classification { n_classes }, _) => n_classes,
            (HeadKind::NextToken, InputKind::Tokens { vocab }) => vocab,
            (HeadKind::NextToken, InputKind::Features { dim }) => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        if self.h_dim == 0 || self.d_state == 0 {
            return Err(invalid("h_dim and d_state must be at least 1"));
        }
        match self.input {
            InputKind::Tokens { vocab: 0 } | InputKind::Features { dim: 0 } => {
                return Err(invalid("input vocabulary or dimension must be at least 1"))
            }
            InputKind::Features { .. } if self.head == HeadKind::NextToken => {
                return Err(invalid("next-token head requires token input"))
            }
            _ => {}
        }
        if self.head == (HeadKind::Classification { n_classes: 0 }) {
            return Err(invalid("n_classes must be at least 1"));
        }
        let block = &self.block;
        if block.branches.is_empty() {
            return Err(invalid("a block needs at least one branch"));
        }
        if block.window_k == 0 || block.basis_g == 0 {
            return Err(invalid("window_k and basis_g must be at least 1"));
        }
        for b in &block.branches {
            if let Some(k) = b.kappa {
                if !(k > 0.0 && k <= 1.0) {
                    return Err(invalid(format!("branch kappa must lie in (0, 1], got {k}")));
                }
            }
        }
        let widths = self.branch_widths();
        if widths.len() != block.branches.len() {
            return Err(invalid(format!("{} widths for {} branches", widths.len(), block.branches.len())));
        }
        if widths.iter().any(|w| *w == 0) || widths.iter().sum::<usize>() != self.h_dim {
            return Err(invalid(format!("branch widths {widths:?} must be positive and sum to h_dim {}", self.h_dim)));
        }
        Ok(())
    }
}
