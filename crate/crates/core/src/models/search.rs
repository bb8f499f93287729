//! Width search against a parameter-count target.
//!
//! For fixed stage widths the total is affine in the size of a single hidden
//! head layer, so that size is solved for directly instead of enumerated.

use serde::Serialize;

use super::{build_plan, Architecture, ModelConfig};
use crate::error::{Error, Result};

/// Grid of candidate configurations.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    /// Template for everything the search does not vary.
    pub base: ModelConfig,
    /// Allowed values for each stage width. Width tuples are non-decreasing.
    pub width_choices: Vec<usize>,
    /// Allowed ResNet3D stem widths; ignored elsewhere.
    pub stem_choices: Vec<usize>,
    /// Largest single hidden head layer; 0 disables the hidden layer.
    pub max_head_hidden: usize,
}

impl SearchSpace {
    pub fn default_for(architecture: Architecture) -> Self {
        let base = ModelConfig { head_hidden: Vec::new(), ..ModelConfig::reference(architecture) };
        match architecture {
            Architecture::Convnet3d => SearchSpace {
                base,
                width_choices: (8..=256).step_by(8).collect(),
                stem_choices: Vec::new(),
                max_head_hidden: 2048,
            },
            Architecture::Resnet3d => SearchSpace {
                base,
                width_choices: vec![16, 32, 48, 64, 96, 128, 160, 192, 256, 320, 384, 448, 512],
                stem_choices: vec![16, 24, 32, 48, 64],
                max_head_hidden: 2048,
            },
            Architecture::Convnext3d => SearchSpace {
                base,
                width_choices: (32..=1024).step_by(32).collect(),
                stem_choices: Vec::new(),
                max_head_hidden: 4096,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub config: ModelConfig,
    pub parameters: usize,
    /// `parameters - target`.
    pub gap: i64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchReport {
    pub architecture: Architecture,
    pub target: usize,
    pub evaluated: usize,
    pub exact: Option<Candidate>,
    /// Closest candidates, best first.
    pub nearest: Vec<Candidate>,
}

impl SearchReport {
    pub fn best(&self) -> Option<&Candidate> {
        self.nearest.first()
    }
}

fn non_decreasing(choices: &[usize], len: usize) -> Vec<Vec<usize>> {
    fn rec(choices: &[usize], start: usize, len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in start..choices.len() {
            cur.push(choices[i]);
            rec(choices, i, len, cur, out);
            cur.pop();
        }
    }
    let mut sorted = choices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    rec(&sorted, 0, len, &mut Vec::new(), &mut out);
    out
}

fn count(config: &ModelConfig) -> Option<usize> {
    build_plan(config).ok().map(|p| p.count_parameters())
}

struct Nearest {
    keep: usize,
    items: Vec<Candidate>,
}

impl Nearest {
    fn key(c: &Candidate) -> (u64, usize, Vec<usize>, usize) {
        let hidden = c.config.head_hidden.first().copied().unwrap_or(0);
        (c.gap.unsigned_abs(), c.config.widths.iter().sum(), c.config.widths.clone(), hidden)
    }

    fn offer(&mut self, c: Candidate) {
        let key = Self::key(&c);
        if self.items.len() == self.keep && self.items.last().map(|l| Self::key(l) <= key).unwrap_or(false) {
            return;
        }
        let pos = self.items.partition_point(|x| Self::key(x) <= key);
        self.items.insert(pos, c);
        self.items.truncate(self.keep);
    }
}

/// Searches `space` for configurations whose total equals `target`,
/// reporting the nearest misses with their signed gaps.
pub fn search_widths(space: &SearchSpace, target: usize) -> Result<SearchReport> {
    let arch = space.base.architecture;
    let stages = match arch {
        Architecture::Convnet3d => 2,
        Architecture::Resnet3d => 4,
        Architecture::Convnext3d => 3,
    };
    if space.width_choices.is_empty() {
        return Err(Error::Parameter("width search needs at least one width choice".into()));
    }
    let stems: Vec<Option<usize>> = if arch == Architecture::Resnet3d && !space.stem_choices.is_empty() {
        space.stem_choices.iter().map(|&s| Some(s)).collect()
    } else {
        vec![space.base.stem_width]
    };

    let mut nearest = Nearest { keep: 5, items: Vec::new() };
    let mut evaluated = 0usize;
    let t = target as i64;
    for widths in non_decreasing(&space.width_choices, stages) {
        for &stem in &stems {
            let with_hidden = |h: Vec<usize>| ModelConfig {
                widths: widths.clone(),
                stem_width: stem,
                head_hidden: h,
                ..space.base.clone()
            };
            let base_cfg = with_hidden(Vec::new());
            let Some(c0) = count(&base_cfg) else { continue };
            evaluated += 1;
            nearest.offer(Candidate { parameters: c0, gap: c0 as i64 - t, config: base_cfg });
            if space.max_head_hidden == 0 {
                continue;
            }
            let (Some(c1), Some(c2), Some(c3)) =
                (count(&with_hidden(vec![1])), count(&with_hidden(vec![2])), count(&with_hidden(vec![3])))
            else {
                continue;
            };
            let slope = c2 as i64 - c1 as i64;
            if slope <= 0 || c3 as i64 - c2 as i64 != slope {
                return Err(Error::State("head parameter count is not affine in the hidden size".into()));
            }
            let intercept = c1 as i64 - slope;
            let solved = (t - intercept) as f64 / slope as f64;
            let lo = solved.floor().clamp(1.0, space.max_head_hidden as f64) as i64;
            for h in [lo, lo + 1] {
                if h < 1 || h > space.max_head_hidden as i64 {
                    continue;
                }
                let params = intercept + slope * h;
                evaluated += 1;
                nearest.offer(Candidate {
                    parameters: params as usize,
                    gap: params - t,
                    config: with_hidden(vec![h as usize]),
                });
            }
        }
    }
    let exact = nearest.items.first().filter(|c| c.gap == 0).cloned();
    Ok(SearchReport { architecture: arch, target, evaluated, exact, nearest: nearest.items })
}
