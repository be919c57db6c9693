use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CacheError, Result};

/// Where the greedy window is centred.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCenter {
    CurrentD,
    #[default]
    PreviousD,
}

/// Which positions are served from cache. `refresh_interval: None` never
/// refreshes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CacheVariant {
    #[default]
    None,
    Decode {
        #[serde(default)]
        refresh_interval: Option<usize>,
    },
    Greedy {
        #[serde(default)]
        refresh_interval: Option<usize>,
        window_size: usize,
        #[serde(default)]
        window_center: WindowCenter,
    },
    Prefill,
    Pd {
        #[serde(default)]
        refresh_interval: Option<usize>,
    },
}

impl CacheVariant {
    pub fn refresh_interval(&self) -> Option<usize> {
        match *self {
            CacheVariant::Decode { refresh_interval }
            | CacheVariant::Greedy { refresh_interval, .. }
            | CacheVariant::Pd { refresh_interval } => refresh_interval,
            CacheVariant::None | CacheVariant::Prefill => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.refresh_interval() == Some(0) {
            return Err(CacheError::InvalidConfig("refresh_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, CacheVariant::Greedy { .. })
    }
}

fn fmt_interval(n: Option<usize>) -> String {
    n.map_or_else(|| "inf".to_string(), |n| n.to_string())
}

/// Compact label used on the command line and in reports:
/// `none`, `decode:8`, `decode:inf`, `greedy:2:4`, `greedy:2:4:current`,
/// `prefill`, `pd:4`.
impl fmt::Display for CacheVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CacheVariant::None => write!(f, "none"),
            CacheVariant::Decode { refresh_interval } => write!(f, "decode:{}", fmt_interval(refresh_interval)),
            CacheVariant::Greedy {
                refresh_interval,
                window_size,
                window_center,
            } => {
                write!(f, "greedy:{}:{window_size}", fmt_interval(refresh_interval))?;
                if window_center == WindowCenter::CurrentD {
                    write!(f, ":current")?;
                }
                Ok(())
            }
            CacheVariant::Prefill => write!(f, "prefill"),
            CacheVariant::Pd { refresh_interval } => write!(f, "pd:{}", fmt_interval(refresh_interval)),
        }
    }
}

impl FromStr for CacheVariant {
    type Err = CacheError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CacheError::InvalidConfig(format!("cannot parse cache variant `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let interval = |p: Option<&&str>| -> Result<Option<usize>> {
            match p {
                None | Some(&"inf") => Ok(None),
                Some(n) => n.parse().map(Some).map_err(|_| bad()),
            }
        };
        let v = match parts[0].to_ascii_lowercase().as_str() {
            "none" if parts.len() == 1 => CacheVariant::None,
            "prefill" if parts.len() == 1 => CacheVariant::Prefill,
            "decode" if parts.len() <= 2 => CacheVariant::Decode {
                refresh_interval: interval(parts.get(1))?,
            },
            "pd" if parts.len() <= 2 => CacheVariant::Pd {
                refresh_interval: interval(parts.get(1))?,
            },
            "greedy" if (3..=4).contains(&parts.len()) => CacheVariant::Greedy {
                refresh_interval: interval(parts.get(1))?,
                window_size: parts[2].parse().map_err(|_| bad())?,
                window_center: match parts.get(3) {
                    None | Some(&"previous") => WindowCenter::PreviousD,
                    Some(&"current") => WindowCenter::CurrentD,
                    Some(_) => return Err(bad()),
                },
            },
            _ => return Err(bad()),
        };
        v.validate()?;
        Ok(v)
    }
}

/// Which output row a token's K/V is cached from, for models whose outputs are
/// shifted one position to the right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    UnShift,
    RightShift,
    UnAndRightShift,
}

/// How cached rows are stored and consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPath {
    /// Cached rows kept contiguous on the left, fresh rows appended on the
    /// right; one gather per layer per step.
    #[default]
    Reorder,
    /// Natural-order K/V buffers with per-step gather and scatter.
    Naive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default)]
    pub variant: CacheVariant,
    #[serde(default)]
    pub shift: ShiftMode,
    #[serde(default)]
    pub path: ExecPath,
}

impl CacheConfig {
    pub fn new(variant: CacheVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self, shifted_output: bool) -> Result<()> {
        self.variant.validate()?;
        if self.shift != ShiftMode::UnShift && !shifted_output {
            return Err(CacheError::InvalidConfig(format!(
                "shift mode {:?} needs a model with shifted outputs",
                self.shift
            )));
        }
        if self.shift == ShiftMode::UnAndRightShift && self.path != ExecPath::Naive {
            return Err(CacheError::InvalidConfig(
                "un_and_right_shift only works with the naive execution path".into(),
            ));
        }
        if self.variant.is_greedy() && self.shift != ShiftMode::UnShift {
            return Err(CacheError::InvalidConfig("greedy caching supports un_shift only".into()));
        }
        Ok(())
    }
}
