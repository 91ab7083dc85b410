use super::config::CcraConfig;
use super::params::{CcraParams, Group};

/// Trainable scalar counts per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub groups: Vec<(Group, usize)>,
    pub total: usize,
}

impl ParamReport {
    pub fn group(&self, group: Group) -> usize {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map_or(0, |(_, c)| *c)
    }
}

/// Closed-form count of the trainable parameters. The toy decoder and the
/// fixed text projection are excluded.
pub fn count_parameters(cfg: &CcraConfig) -> ParamReport {
    let (d, dh, d_llm) = (cfg.d, cfg.d_hidden, cfg.d_llm);
    let proj = d * dh;
    let queries = if cfg.tie_queries { 1 } else { 3 };
    let affine = 2 * d;
    let stage_affine = if cfg.tie_layer_norms { 0 } else { affine };
    let groups = vec![
        (Group::Conditioning, 3 * proj + dh + queries * proj),
        (Group::Lpwca, proj + affine),
        (Group::Lwca, proj + stage_affine),
        (Group::Pwca, proj + stage_affine),
        (Group::Projection, 2 * d * d_llm + d_llm),
    ];
    let total = groups.iter().map(|(_, c)| c).sum();
    ParamReport { groups, total }
}

/// Count obtained by walking the parameter list.
pub fn enumerate_parameters(params: &CcraParams) -> ParamReport {
    let mut groups: Vec<(Group, usize)> = Group::ALL.iter().map(|&g| (g, 0)).collect();
    for slot in params.trainable() {
        let entry = groups
            .iter_mut()
            .find(|(g, _)| *g == slot.group())
            .expect("every group listed");
        entry.1 += params.get(slot).len();
    }
    let total = groups.iter().map(|(_, c)| c).sum();
    ParamReport { groups, total }
}
