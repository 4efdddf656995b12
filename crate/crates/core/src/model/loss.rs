use super::ModelNodes;
use crate::autodiff::{Graph, NodeId, Tensor, LOG_FLOOR};
use crate::error::{MilError, Result};

/// Pseudo labels per side when the caller does not choose.
pub const DEFAULT_PSEUDO_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoLabel {
    pub instance: usize,
    /// 1 for a highly attended instance, 0 for a weakly attended one.
    pub label: usize,
}

/// Top-`B′` attended instances get label 1 and bottom-`B′` get label 0,
/// with `B′ = min(B, ⌊M/2⌋)`. Positives come first in descending
/// attention, then negatives in ascending attention; ties go to the lower
/// index. Negatives are chosen among instances not already positive.
pub fn pseudo_labels(attention_row: &[f64], count: usize) -> Result<Vec<PseudoLabel>> {
    let m = attention_row.len();
    if m < 2 {
        return Err(MilError::TooFewInstances(format!(
            "pseudo labels need at least 2 instances, got {m}"
        )));
    }
    let per_side = count.min(m / 2);
    if per_side == 0 {
        return Err(MilError::InvalidConfig("pseudo-label count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| attention_row[b].total_cmp(&attention_row[a]).then(a.cmp(&b)));
    let top: Vec<usize> = order[..per_side].to_vec();

    let mut rest: Vec<usize> = order[per_side..].to_vec();
    rest.sort_by(|&a, &b| attention_row[a].total_cmp(&attention_row[b]).then(a.cmp(&b)));

    Ok(top
        .into_iter()
        .map(|instance| PseudoLabel { instance, label: 1 })
        .chain(
            rest.into_iter()
                .take(per_side)
                .map(|instance| PseudoLabel { instance, label: 0 }),
        )
        .collect())
}

/// `−ln p[label]` with the same floor as the graph's log.
pub fn bag_cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(LOG_FLOOR).ln()
}

/// Appends the weighted bag + instance loss to a graph holding `nodes`.
///
/// `loss = c_bag · CE(bag) + c_inst · mean_pseudo CE(instance)`. When
/// `c_inst` is zero the instance term is omitted entirely.
#[allow(clippy::too_many_arguments)]
pub fn build_total_loss(
    g: &mut Graph,
    nodes: &ModelNodes,
    bag_label: usize,
    n_classes: usize,
    n_instances: usize,
    pseudo: &[PseudoLabel],
    c_bag: f64,
    c_inst: f64,
) -> Result<NodeId> {
    if c_bag < 0.0 || c_inst < 0.0 || (c_bag + c_inst - 1.0).abs() > 1e-9 {
        return Err(MilError::InvalidConfig(format!(
            "loss weights must be non-negative and sum to 1, got {c_bag} + {c_inst}"
        )));
    }
    if bag_label >= n_classes {
        return Err(MilError::InvalidLabel(format!(
            "label {bag_label} with {n_classes} classes"
        )));
    }
    let mut onehot = Tensor::zeros(1, n_classes);
    onehot.set(0, bag_label, -1.0)?;
    let onehot = g.constant(onehot);
    let log_p = g.log(nodes.probabilities);
    let picked = g.mul(log_p, onehot);
    let bag_ce = g.sum(picked);
    if c_inst == 0.0 {
        return Ok(g.scale(bag_ce, c_bag));
    }
    if pseudo.is_empty() {
        return Err(MilError::InvalidConfig(
            "instance loss weight is positive but no pseudo labels".into(),
        ));
    }
    let mut mask = Tensor::zeros(n_instances, 2);
    let weight = -1.0 / pseudo.len() as f64;
    for p in pseudo {
        if p.instance >= n_instances || p.label > 1 {
            return Err(MilError::InvalidValue(format!("pseudo label {p:?} out of range")));
        }
        mask.set(p.instance, p.label, mask.get(p.instance, p.label) + weight)?;
    }
    let mask = g.constant(mask);
    let inst_p = g.softmax_rows(nodes.instance_logits);
    let inst_log = g.log(inst_p);
    let inst_picked = g.mul(inst_log, mask);
    let inst_ce = g.sum(inst_picked);
    let bag_term = g.scale(bag_ce, c_bag);
    let inst_term = g.scale(inst_ce, c_inst);
    Ok(g.add(bag_term, inst_term))
}
