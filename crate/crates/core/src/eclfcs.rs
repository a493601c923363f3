//! The class-specific variant: latent `[CFVS1, NCFV, CFVS2]`, class-gated decoding
//! and the merged classifier input.

use std::ops::Range;

use eclf_nn::{Real, Tensor};

use crate::error::{EclfError, Result};
use crate::explainer::{explain, ExplainConfig, ExplanationQuery, ExplanationReport, Models, ReferenceSet};
use crate::vae::{LatentLayout, Mode};

fn slices(layout: &LatentLayout) -> Result<(Range<usize>, Range<usize>)> {
    layout
        .cfvs_ranges()
        .ok_or_else(|| EclfError::Invalid("gating needs a class-specific layout".into()))
}

/// The slice that class `class_id` must not see.
pub fn inactive_range(layout: &LatentLayout, class_id: usize) -> Result<Range<usize>> {
    let (s1, s2) = slices(layout)?;
    match class_id {
        0 => Ok(s2),
        1 => Ok(s1),
        c => Err(EclfError::Invalid(format!(
            "class {c} is unknown; the class-specific layout has classes 0 and 1"
        ))),
    }
}

/// Zeroes the other class's slice of one latent vector.
pub fn gate<T: Real>(layout: &LatentLayout, z: &[T], class_id: usize) -> Result<Vec<T>> {
    if z.len() != layout.total_dim() {
        return Err(EclfError::Invalid(format!("latent has {} entries, layout has {}", z.len(), layout.total_dim())));
    }
    let off = inactive_range(layout, class_id)?;
    let mut out = z.to_vec();
    out[off].iter_mut().for_each(|v| *v = T::zero());
    Ok(out)
}

/// Row-wise [`gate`] for a `[N, D]` batch.
pub fn gate_batch<T: Real>(layout: &LatentLayout, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = z.as_matrix("gated latent")?;
    if labels.len() != n {
        return Err(EclfError::Invalid(format!("{} labels for {n} latent rows", labels.len())));
    }
    if d != layout.total_dim() {
        return Err(EclfError::Invalid(format!("latent has {d} columns, layout has {}", layout.total_dim())));
    }
    let mut out = z.clone();
    for (i, &c) in labels.iter().enumerate() {
        let off = inactive_range(layout, c)?;
        out.data_mut()[i * d..(i + 1) * d][off].iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(out)
}

/// `[cfvs1, cfvs2]`, the classifier input.
pub fn merge<T: Copy>(cfvs1: &[T], cfvs2: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(cfvs1.len() + cfvs2.len());
    v.extend_from_slice(cfvs1);
    v.extend_from_slice(cfvs2);
    v
}

/// Which class slice a merged-vector index came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceSlice {
    Cfvs1,
    Cfvs2,
}

impl SourceSlice {
    pub fn name(self) -> &'static str {
        match self {
            SourceSlice::Cfvs1 => "CFVS1",
            SourceSlice::Cfvs2 => "CFVS2",
        }
    }

    /// The class whose images this slice describes.
    pub fn class_id(self) -> usize {
        match self {
            SourceSlice::Cfvs1 => 0,
            SourceSlice::Cfvs2 => 1,
        }
    }
}

pub fn source_of(layout: &LatentLayout, merged_index: usize) -> Result<SourceSlice> {
    let (s1, s2) = slices(layout)?;
    if merged_index < s1.len() {
        Ok(SourceSlice::Cfvs1)
    } else if merged_index < s1.len() + s2.len() {
        Ok(SourceSlice::Cfvs2)
    } else {
        Err(EclfError::Invalid(format!("merged index {merged_index} is out of range")))
    }
}

/// The explanation pipeline on the merged CFVS. Strips are gated with their feature's class.
pub fn explain_cs(query: &ExplanationQuery, models: &Models, reference: &ReferenceSet, cfg: &ExplainConfig) -> Result<ExplanationReport> {
    if models.mode != Mode::EclfCs || !models.vae.layout().is_class_specific() {
        return Err(EclfError::Invalid("explain_cs needs a class-specific model".into()));
    }
    explain(query, models, reference, cfg)
}

/// Source slice of each ranked feature, in rank order.
pub fn ranked_sources(layout: &LatentLayout, report: &ExplanationReport) -> Result<Vec<(usize, SourceSlice)>> {
    report.importance.ranked.iter().map(|&f| Ok((f, source_of(layout, f)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gating_rule() {
        let l = LatentLayout::class_specific(4, 4, 4).unwrap();
        let z: Vec<f64> = (1..=12).map(f64::from).collect();
        let g0 = gate(&l, &z, 0).unwrap();
        assert_eq!(&g0[..8], &z[..8]);
        assert!(g0[8..].iter().all(|&v| v == 0.0));
        let g1 = gate(&l, &z, 1).unwrap();
        assert!(g1[..4].iter().all(|&v| v == 0.0));
        assert_eq!(&g1[4..], &z[4..]);
        assert_eq!(gate(&l, &g1, 1).unwrap(), g1);
        assert!(gate(&l, &z, 2).is_err());
        assert!(gate(&l, &z[..11], 0).is_err());
        assert!(gate(&LatentLayout::split(4, 8).unwrap(), &z, 0).is_err());
    }

    #[test]
    fn merge_order() {
        assert_eq!(merge(&[1, 2], &[3, 4]), vec![1, 2, 3, 4]);
        let l = LatentLayout::class_specific(2, 3, 2).unwrap();
        assert_eq!(source_of(&l, 1).unwrap(), SourceSlice::Cfvs1);
        assert_eq!(source_of(&l, 2).unwrap(), SourceSlice::Cfvs2);
        assert!(source_of(&l, 4).is_err());
    }
}
