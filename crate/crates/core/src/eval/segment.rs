use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{argmax, text_prototype, EvalError};
use crate::matrix::{dot, Matrix};
use crate::projector::{ProjectorStack, TokenBundle};

pub const DEFAULT_BACKGROUND: u32 = 0;

/// Patch tokens of one image with its ground-truth map.
#[derive(Debug, Clone)]
pub struct SegInput {
    /// `h·w × d_in`, row-major over the patch grid.
    pub patches: Matrix,
    pub grid: (usize, usize),
    pub cls: Matrix,
    /// `H·W` class ids, row-major.
    pub gt: Vec<u32>,
    pub target: (usize, usize),
}

impl SegInput {
    fn validate(&self) -> Result<(), EvalError> {
        let (h, w) = self.grid;
        let (th, tw) = self.target;
        if self.patches.rows() != h * w {
            return Err(EvalError::LengthMismatch {
                what: "patch rows",
                expected: h * w,
                actual: self.patches.rows(),
            });
        }
        if self.gt.len() != th * tw {
            return Err(EvalError::LengthMismatch {
                what: "ground-truth pixels",
                expected: th * tw,
                actual: self.gt.len(),
            });
        }
        if th < h || tw < w {
            return Err(EvalError::TargetTooSmall {
                target: self.target,
                grid: self.grid,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSet {
    /// Foreground classes present in the image's ground truth.
    #[default]
    ImageClasses,
    AllClasses,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    /// Nearest-neighbour on the patch argmax map.
    #[default]
    Nearest,
    /// Bilinear on per-class similarity maps, then argmax per pixel.
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegOptions {
    pub candidates: CandidateSet,
    pub upsample: Upsample,
    pub background: u32,
}

impl Default for SegOptions {
    fn default() -> Self {
        Self {
            candidates: CandidateSet::default(),
            upsample: Upsample::default(),
            background: DEFAULT_BACKGROUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u32,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegResult {
    pub prediction: Vec<u32>,
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
}

/// Unit class prototypes keyed by class id.
#[derive(Debug, Clone)]
pub struct SegClasses {
    prototypes: BTreeMap<u32, Vec<f64>>,
}

impl SegClasses {
    pub fn new(
        class_texts: &[(u32, Vec<TokenBundle>)],
        stack: &ProjectorStack,
    ) -> Result<Self, EvalError> {
        let mut prototypes = BTreeMap::new();
        for (id, prompts) in class_texts {
            if prompts.is_empty() {
                return Err(EvalError::UnknownClass(*id));
            }
            prototypes.insert(*id, text_prototype(prompts, stack)?);
        }
        Ok(Self { prototypes })
    }

    pub fn from_prototypes(prototypes: BTreeMap<u32, Vec<f64>>) -> Self {
        Self { prototypes }
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.prototypes.keys().copied()
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.prototypes.get(&id).map(Vec::as_slice)
    }
}

/// Foreground ids in a class map, ascending.
pub fn foreground_classes(map: &[u32], background: u32) -> Vec<u32> {
    map.iter()
        .copied()
        .filter(|&c| c != background)
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect()
}

// Source index for nearest-neighbour resampling of `src` cells onto `dst`.
fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

pub fn upsample_nearest<T: Copy>(
    map: &[T],
    grid: (usize, usize),
    target: (usize, usize),
) -> Vec<T> {
    let (h, w) = grid;
    let (th, tw) = target;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = nearest(y, h, th);
        for x in 0..tw {
            out.push(map[sy * w + nearest(x, w, tw)]);
        }
    }
    out
}

// Half-pixel-centred sample position with edge clamping.
fn bilinear_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let lo = (libm::floor(pos) as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

pub fn upsample_bilinear(map: &[f64], grid: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    let (h, w) = grid;
    let (th, tw) = target;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = bilinear_axis(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = bilinear_axis(x, w, tw);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// IoU per foreground class of `gt`, and their mean.
pub fn foreground_iou(
    prediction: &[u32],
    gt: &[u32],
    background: u32,
) -> Result<(Vec<ClassIou>, f64), EvalError> {
    let classes = foreground_classes(gt, background);
    if classes.is_empty() {
        return Err(EvalError::NoForegroundClass);
    }
    let per_class: Vec<ClassIou> = classes
        .iter()
        .map(|&c| {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&p, &g) in prediction.iter().zip(gt) {
                let (pc, gc) = (p == c, g == c);
                inter += u64::from(pc && gc);
                union += u64::from(pc || gc);
            }
            ClassIou {
                class_id: c,
                intersection: inter,
                union,
                iou: inter as f64 / union as f64,
            }
        })
        .collect();
    let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
    Ok((per_class, miou))
}

pub fn segment_zero_shot(
    input: &SegInput,
    classes: &SegClasses,
    stack: &ProjectorStack,
    opts: &SegOptions,
) -> Result<SegResult, EvalError> {
    input.validate()?;
    let present = foreground_classes(&input.gt, opts.background);
    if present.is_empty() {
        return Err(EvalError::NoForegroundClass);
    }
    let candidates: Vec<u32> = match opts.candidates {
        CandidateSet::ImageClasses => present,
        CandidateSet::AllClasses => classes.ids().filter(|&c| c != opts.background).collect(),
    };
    let protos: Result<Vec<&[f64]>, EvalError> = candidates
        .iter()
        .map(|&c| classes.get(c).ok_or(EvalError::UnknownClass(c)))
        .collect();
    let protos = protos?;

    let patches = stack.project_patches(&input.patches, &input.cls)?;
    let sims: Vec<Vec<f64>> = protos
        .iter()
        .map(|p| {
            (0..patches.rows())
                .map(|i| dot(patches.row(i), p))
                .collect()
        })
        .collect();

    let prediction: Vec<u32> = match opts.upsample {
        Upsample::Nearest => {
            let patch_map: Vec<u32> = (0..patches.rows())
                .map(|i| candidates[argmax(sims.iter().map(|s| s[i])).unwrap_or(0)])
                .collect();
            upsample_nearest(&patch_map, input.grid, input.target)
        }
        Upsample::Bilinear => {
            let up: Vec<Vec<f64>> = sims
                .iter()
                .map(|s| upsample_bilinear(s, input.grid, input.target))
                .collect();
            (0..input.gt.len())
                .map(|px| candidates[argmax(up.iter().map(|s| s[px])).unwrap_or(0)])
                .collect()
        }
    };
    let (per_class, miou) = foreground_iou(&prediction, &input.gt, opts.background)?;
    Ok(SegResult {
        prediction,
        per_class,
        miou,
    })
}

/// Dataset-level IoU from summed intersection and union counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegAccumulator {
    pub counts: BTreeMap<u32, (u64, u64)>,
    pub images: usize,
}

impl SegAccumulator {
    pub fn add(&mut self, result: &SegResult) {
        self.images += 1;
        for c in &result.per_class {
            let e = self.counts.entry(c.class_id).or_insert((0, 0));
            e.0 += c.intersection;
            e.1 += c.union;
        }
    }

    pub fn per_class(&self) -> Vec<ClassIou> {
        self.counts
            .iter()
            .map(|(&class_id, &(intersection, union))| ClassIou {
                class_id,
                intersection,
                union,
                iou: if union == 0 {
                    0.0
                } else {
                    intersection as f64 / union as f64
                },
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let pc = self.per_class();
        (!pc.is_empty()).then(|| pc.iter().map(|c| c.iou).sum::<f64>() / pc.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{init_stack, StackDims, StackLayout};

    #[test]
    fn perfect_prediction() {
        let gt = vec![0, 1, 1, 2];
        let (pc, m) = foreground_iou(&gt, &gt, 0).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(pc.len(), 2);
    }

    #[test]
    fn background_only_is_an_error() {
        assert_eq!(
            foreground_iou(&[0, 0], &[0, 0], 0),
            Err(EvalError::NoForegroundClass)
        );
    }

    #[test]
    fn nearest_upsampling_blocks() {
        let up = upsample_nearest(&[1, 2, 3, 4], (2, 2), (4, 4));
        assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    #[test]
    fn bilinear_constant_and_midpoint() {
        assert!(upsample_bilinear(&[2.5; 4], (2, 2), (5, 7))
            .iter()
            .all(|&v| v == 2.5));
        let up = upsample_bilinear(&[0.0, 1.0], (1, 2), (1, 4));
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn single_class_everywhere() {
        let stack = init_stack(
            StackDims::new(2, 2, 2),
            StackLayout::all_identity(),
            false,
            0,
        )
        .unwrap();
        let input = SegInput {
            patches: Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.1], &[0.9, 0.0], &[1.0, 0.0]]),
            grid: (2, 2),
            cls: Matrix::from_rows(&[&[0.0, 0.0]]),
            gt: vec![3; 16],
            target: (4, 4),
        };
        let classes = SegClasses::new(
            &[
                (3, vec![TokenBundle::pooled_text(&[1.0, 0.0])]),
                (5, vec![TokenBundle::pooled_text(&[0.0, 1.0])]),
            ],
            &stack,
        )
        .unwrap();
        for candidates in [CandidateSet::ImageClasses, CandidateSet::AllClasses] {
            let opts = SegOptions {
                candidates,
                ..SegOptions::default()
            };
            let r = segment_zero_shot(&input, &classes, &stack, &opts).unwrap();
            assert_eq!(r.miou, 1.0);
            assert_eq!(r.prediction, vec![3; 16]);
        }
    }
}
