use rand::Rng;

use super::plan::PrunePlan;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Scalar;

/// Per prunable site (in site order), which channels survive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_keep<T: Scalar>(model: &Model<T>) -> Self {
        PruneMask {
            keep: model.prunable_sites().map(|s| vec![true; s.channels]).collect(),
        }
    }

    pub fn from_plan<T: Scalar>(model: &Model<T>, plan: &PrunePlan) -> Result<Self> {
        let mut mask = Self::all_keep(model);
        let sites: Vec<_> = model.prunable_sites().collect();
        for r in plan.pruned() {
            let (pos, site) = sites
                .iter()
                .enumerate()
                .find(|(_, s)| s.id == r.site_id)
                .ok_or_else(|| Error::Input(format!("plan names unknown site {}", r.site_id)))?;
            if site.node != r.node || r.channel >= site.channels {
                return Err(Error::Input(format!(
                    "plan entry (site {}, node {}, channel {}) does not match the model",
                    r.site_id, r.node, r.channel
                )));
            }
            mask.keep[pos][r.channel] = false;
        }
        mask.validate(model)?;
        Ok(mask)
    }

    /// Drops each channel with probability one half, always keeping at
    /// least one per site.
    pub fn random<T: Scalar, R: Rng>(model: &Model<T>, rng: &mut R) -> Self {
        let keep = model
            .prunable_sites()
            .map(|s| {
                let mut k: Vec<bool> = (0..s.channels).map(|_| rng.gen_bool(0.5)).collect();
                if !k.contains(&true) {
                    k[rng.gen_range(0..s.channels)] = true;
                }
                k
            })
            .collect();
        PruneMask { keep }
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    pub fn is_identity(&self) -> bool {
        self.keep.iter().flatten().all(|&k| k)
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        let sites: Vec<_> = model.prunable_sites().collect();
        if sites.len() != self.keep.len() {
            return Err(Error::Input(format!(
                "mask covers {} sites, model has {}",
                self.keep.len(),
                sites.len()
            )));
        }
        for (site, keep) in sites.iter().zip(&self.keep) {
            if keep.len() != site.channels {
                return Err(Error::Input(format!(
                    "mask for site {} has {} channels, site has {}",
                    site.id,
                    keep.len(),
                    site.channels
                )));
            }
            if !keep.contains(&true) {
                return Err(Error::Input(format!("mask empties site {}", site.id)));
            }
        }
        Ok(())
    }
}

/// A copy of the model whose pruned channels output exactly zero and pass
/// back no gradient. Shapes are unchanged.
pub fn apply_mask<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    mask.validate(model)?;
    let mut masked = model.clone();
    masked.set_masks(&mask.keep)?;
    Ok(masked)
}
