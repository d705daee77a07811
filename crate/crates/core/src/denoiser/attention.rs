//! Single-head scaled dot-product self-attention with operand replacement.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Which operands of the attention product come from another branch.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionOverride {
    /// Query and key replaced; value stays local. Builds the map from the
    /// source layout while mixing local values.
    QueryKey { q: Array2<f32>, k: Array2<f32> },
    /// Key and value replaced; query stays local.
    KeyValue { k: Array2<f32>, v: Array2<f32> },
}

impl AttentionOverride {
    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionOverride::QueryKey { .. } => AttentionKind::QueryKey,
            AttentionOverride::KeyValue { .. } => AttentionKind::KeyValue,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    QueryKey,
    KeyValue,
}

/// Projection weights of one self-attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
}

/// Operands and outputs of one attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Local projections of the input.
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Operands that actually formed the attention map and product.
    pub used_q: Array2<f32>,
    pub used_k: Array2<f32>,
    pub used_v: Array2<f32>,
    pub map: Array2<f32>,
    /// `map · used_v · wo`, before any residual connection.
    pub out: Array2<f32>,
}

/// Row-wise softmax of `logits`.
pub fn softmax_rows(mut logits: Array2<f32>) -> Array2<f32> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// `softmax(q kᵀ / √d) v`, returning the map and the product.
pub fn attend(q: ArrayView2<f32>, k: ArrayView2<f32>, v: ArrayView2<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!("query width {} vs key width {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!("{} keys vs {} values", k.nrows(), v.nrows())));
    }
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let map = softmax_rows(q.dot(&k.t()) * scale);
    let out = map.dot(&v);
    Ok((map, out))
}

/// Self-attention over the rows of `phi` (one row per spatial position).
///
/// With an override, the designated operands replace the local projections
/// before the attention map is formed.
pub fn self_attention(
    phi: ArrayView2<f32>,
    w: &AttentionWeights,
    ov: Option<&AttentionOverride>,
) -> Result<AttentionTrace> {
    let q = phi.dot(&w.wq);
    let k = phi.dot(&w.wk);
    let v = phi.dot(&w.wv);
    let (used_q, used_k, used_v) = match ov {
        None => (q.clone(), k.clone(), v.clone()),
        Some(AttentionOverride::QueryKey { q: sq, k: sk }) => {
            check_operand("query", sq, &q)?;
            check_operand("key", sk, &k)?;
            (sq.clone(), sk.clone(), v.clone())
        }
        Some(AttentionOverride::KeyValue { k: sk, v: sv }) => {
            check_operand("key", sk, &k)?;
            check_operand("value", sv, &v)?;
            (q.clone(), sk.clone(), sv.clone())
        }
    };
    let (map, mixed) = attend(used_q.view(), used_k.view(), used_v.view())?;
    let out = mixed.dot(&w.wo);
    Ok(AttentionTrace { q, k, v, used_q, used_k, used_v, map, out })
}

fn check_operand(name: &str, got: &Array2<f32>, local: &Array2<f32>) -> Result<()> {
    if got.dim() != local.dim() {
        return Err(Error::Shape(format!(
            "{name} override has shape {:?}, layer expects {:?}",
            got.dim(),
            local.dim()
        )));
    }
    Ok(())
}
