use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TelemetryError;
use crate::model::{ParamGroup, TaskKind, TrainableEntry};
use crate::tensor::{Gradients, ParamId, Tensor};

/// Placement of one parameter inside a [`FlatGradient`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub id: ParamId,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub offset: usize,
    /// Zero when the parameter had no gradient.
    pub len: usize,
    pub present: bool,
}

/// Gradient over the trainable index as one contiguous vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
    pub task: TaskKind,
    pub step: u64,
}

/// Concatenates `grads` in `index` order. Parameters missing from `grads`
/// are skipped and recorded in the layout as absent.
pub fn flatten(
    grads: &Gradients,
    index: &[TrainableEntry],
    task: TaskKind,
    step: u64,
) -> Result<FlatGradient, TelemetryError> {
    let total = index.iter().map(TrainableEntry::len).sum();
    let mut values = Vec::with_capacity(total);
    let mut layout = Vec::with_capacity(index.len());
    for e in index {
        let offset = values.len();
        let present = match grads.get(&e.id) {
            Some(g) => {
                if g.shape() != e.shape.as_slice() {
                    return Err(TelemetryError::Layout(format!(
                        "{}: gradient shape {:?}, expected {:?}",
                        e.name,
                        g.shape(),
                        e.shape
                    )));
                }
                values.extend_from_slice(g.data());
                true
            }
            None => false,
        };
        layout.push(LayoutEntry {
            id: e.id,
            shape: e.shape.clone(),
            group: e.group,
            offset,
            len: values.len() - offset,
            present,
        });
    }
    if let Some(extra) = grads.keys().find(|k| !index.iter().any(|e| e.id == **k)) {
        return Err(TelemetryError::Layout(format!(
            "gradient for unknown parameter {}",
            extra.0
        )));
    }
    Ok(FlatGradient {
        values,
        layout,
        task,
        step,
    })
}

/// Inverse of [`flatten`]: present entries only.
pub fn unflatten(flat: &FlatGradient) -> Result<Gradients, TelemetryError> {
    flat.layout
        .iter()
        .filter(|e| e.present)
        .map(|e| {
            let data = flat
                .values
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| TelemetryError::Layout("layout exceeds values".into()))?
                .to_vec();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| TelemetryError::Layout(err.to_string()))?;
            Ok((e.id, t))
        })
        .collect()
}

impl FlatGradient {
    pub fn norm(&self) -> f64 {
        crate::theory::stable_norm(&self.values)
    }

    /// Sub-vector per layer group, each in layout order.
    pub fn groups(&self) -> BTreeMap<ParamGroup, Vec<f64>> {
        let mut out: BTreeMap<ParamGroup, Vec<f64>> = BTreeMap::new();
        for e in &self.layout {
            out.entry(e.group)
                .or_default()
                .extend_from_slice(&self.values[e.offset..e.offset + e.len]);
        }
        out
    }

    /// Inverse of [`groups`](Self::groups): walks the layout and takes each
    /// entry's values from its group in order.
    pub fn reassemble(
        &self,
        groups: &BTreeMap<ParamGroup, Vec<f64>>,
    ) -> Result<Vec<f64>, TelemetryError> {
        let mut cursor: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.values.len());
        for e in &self.layout {
            let at = cursor.entry(e.group).or_insert(0);
            let src = groups
                .get(&e.group)
                .and_then(|g| g.get(*at..*at + e.len))
                .ok_or_else(|| {
                    TelemetryError::Layout(format!("group {} too short", e.group.name()))
                })?;
            out.extend_from_slice(src);
            *at += e.len;
        }
        Ok(out)
    }

    fn same_layout(&self, other: &FlatGradient) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }
}

/// `⟨u, v⟩ / (‖u‖‖v‖ + eps)`.
pub fn cosine(u: &FlatGradient, v: &FlatGradient, eps: f64) -> Result<f64, TelemetryError> {
    if !u.same_layout(v) {
        return Err(TelemetryError::Layout(
            "cosine of gradients with different layouts".into(),
        ));
    }
    Ok(raw_cosine(&u.values, &v.values, eps))
}

pub(crate) fn raw_cosine(u: &[f64], v: &[f64], eps: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv + eps)
}

/// Mean of shard gradients, summed in ascending shard order.
pub fn presync_aggregate(shards: &[FlatGradient]) -> Result<FlatGradient, TelemetryError> {
    let first = shards
        .first()
        .ok_or_else(|| TelemetryError::Aggregation("no shards".into()))?;
    for (i, s) in shards.iter().enumerate().skip(1) {
        if s.task != first.task {
            return Err(TelemetryError::Aggregation(format!(
                "shard {i} has a different task tag"
            )));
        }
        if !s.same_layout(first) {
            return Err(TelemetryError::Aggregation(format!(
                "shard {i} has a different layout"
            )));
        }
    }
    let mut sum = vec![0.0; first.values.len()];
    for s in shards {
        for (a, x) in sum.iter_mut().zip(&s.values) {
            *a += x;
        }
    }
    let n = shards.len() as f64;
    Ok(FlatGradient {
        values: sum.into_iter().map(|x| x / n).collect(),
        layout: first.layout.clone(),
        task: first.task,
        step: first.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn grads(seed: u64) -> (Gradients, Vec<TrainableEntry>) {
        let p = init_model(&ModelConfig::default(), 0).unwrap();
        let mut rng = crate::tensor::RngStream::new(seed, 0);
        let g = p
            .trainable_index()
            .iter()
            .map(|e| (e.id, Tensor::randn(e.shape[0], e.shape[1], 1.0, &mut rng)))
            .collect();
        (g, p.trainable_index().to_vec())
    }

    #[test]
    fn round_trip_and_skip() {
        let (g, index) = grads(1);
        let flat = flatten(&g, &index, TaskKind::Identity, 0).unwrap();
        assert_eq!(unflatten(&flat).unwrap(), g);
        assert_eq!(flat, flatten(&g, &index, TaskKind::Identity, 0).unwrap());

        let mut missing = g.clone();
        let gone = missing.remove(&ParamId(2)).unwrap();
        let short = flatten(&missing, &index, TaskKind::Identity, 0).unwrap();
        assert_eq!(short.values.len() + gone.len(), flat.values.len());
        assert!(!short.layout[2].present);
        assert_eq!(unflatten(&short).unwrap(), missing);
    }

    #[test]
    fn shape_mismatch_is_a_layout_error() {
        let (mut g, index) = grads(1);
        g.insert(ParamId(0), Tensor::zeros(&[2, 2]));
        assert!(matches!(
            flatten(&g, &index, TaskKind::Identity, 0),
            Err(TelemetryError::Layout(_))
        ));
    }

    #[test]
    fn cosine_cases() {
        let (g, index) = grads(2);
        let u = flatten(&g, &index, TaskKind::Identity, 0).unwrap();
        assert!((cosine(&u, &u, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        let mut v = u.clone();
        v.values.iter_mut().for_each(|x| *x *= -2.0);
        assert!((cosine(&u, &v, 1e-12).unwrap() + 1.0).abs() < 1e-12);
        let mut e1 = u.clone();
        let mut e2 = u.clone();
        e1.values.iter_mut().for_each(|x| *x = 0.0);
        e2.values.iter_mut().for_each(|x| *x = 0.0);
        e1.values[0] = 1.0;
        e2.values[1] = 1.0;
        assert_eq!(cosine(&e1, &e2, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_rules() {
        let (g, index) = grads(3);
        let u = flatten(&g, &index, TaskKind::Motion, 0).unwrap();
        assert_eq!(presync_aggregate(std::slice::from_ref(&u)).unwrap(), u);
        let mut neg = u.clone();
        neg.values.iter_mut().for_each(|x| *x = -*x);
        assert!(presync_aggregate(&[u.clone(), neg])
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
        let mut other = u.clone();
        other.task = TaskKind::Identity;
        assert!(presync_aggregate(&[u, other]).is_err());
    }

    #[test]
    fn groups_partition_the_vector() {
        let (g, index) = grads(4);
        let flat = flatten(&g, &index, TaskKind::Identity, 0).unwrap();
        let groups = flat.groups();
        let total: usize = groups.values().map(Vec::len).sum();
        assert_eq!(total, flat.values.len());
        assert_eq!(flat.reassemble(&groups).unwrap(), flat.values);
    }
}
