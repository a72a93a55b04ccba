use crate::error::TensorError;
use crate::qtensor::FpTensor;

/// Inference-time batch normalization statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

/// Folds `gamma * (conv(x) - mean) / sqrt(var + eps) + beta` into the
/// preceding convolution. Weights are OHWI, so the output channel is the
/// leading axis.
pub fn fold_batchnorm(
    w: &FpTensor,
    bias: &[f32],
    bn: &BatchNormParams,
) -> Result<(FpTensor, Vec<f32>), TensorError> {
    let cout = w.shape().n();
    for (name, len) in [
        ("bias", bias.len()),
        ("gamma", bn.gamma.len()),
        ("beta", bn.beta.len()),
        ("mean", bn.mean.len()),
        ("var", bn.var.len()),
    ] {
        if len != cout {
            return Err(TensorError::Dimension(format!(
                "{name} has {len} entries, expected {cout}"
            )));
        }
    }
    if let Some(v) = bn.var.iter().find(|&&v| !(v > 0.0)) {
        return Err(TensorError::InvalidParameter(format!(
            "batch-norm variance must be positive, got {v}"
        )));
    }
    if !(bn.eps >= 0.0) {
        return Err(TensorError::InvalidParameter(format!(
            "batch-norm eps must be non-negative, got {}",
            bn.eps
        )));
    }
    let factor: Vec<f64> = (0..cout)
        .map(|c| bn.gamma[c] as f64 / (bn.var[c] as f64 + bn.eps as f64).sqrt())
        .collect();
    let per_out = w.shape().len() / cout.max(1);
    let data: Vec<f32> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * factor[i / per_out]) as f32)
        .collect();
    let new_bias = (0..cout)
        .map(|c| ((bias[c] as f64 - bn.mean[c] as f64) * factor[c] + bn.beta[c] as f64) as f32)
        .collect();
    Ok((FpTensor::new(w.shape(), data)?, new_bias))
}
