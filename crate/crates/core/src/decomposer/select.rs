use crate::error::{Error, Result};
use crate::graph::ChannelSelection;
use crate::sensitivity::IscvMatrix;

/// Per-channel sum of normalized scores over `classes`.
pub fn aggregate_scores(iscv: &IscvMatrix, classes: &[usize]) -> Result<Vec<f64>> {
    let mut agg = vec![0.0; iscv.width()];
    for &c in classes {
        let row = iscv.row(c).ok_or(Error::AbsentClass { class: c, layer: iscv.layer })?;
        for (a, v) in agg.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(agg)
}

/// The `keep` channels with the highest aggregate score over `classes`,
/// returned in ascending index order. Equal scores favor the lower index.
pub fn select_channels(iscv: &IscvMatrix, classes: &[usize], keep: usize) -> Result<ChannelSelection> {
    if keep == 0 || keep > iscv.width() {
        return Err(Error::InvalidTensor(format!(
            "cannot keep {keep} of {} channels at layer {}",
            iscv.width(),
            iscv.layer
        )));
    }
    let agg = aggregate_scores(iscv, classes)?;
    let mut order: Vec<usize> = (0..agg.len()).collect();
    order.sort_by(|&a, &b| agg[b].total_cmp(&agg[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    ChannelSelection::new(kept)
}

/// Number of channels a non-trunk node keeps out of `width`.
pub fn keep_count(width: usize, fraction: f64) -> usize {
    ((width as f64 * fraction).floor() as usize).clamp(1, width.max(1))
}
