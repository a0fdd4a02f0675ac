//! Output geometry of convolution layers. Only shapes are computed here; the
//! models in this crate execute dense layers only.

use crate::error::{Error, Result};

/// `floor((len + 2*padding - dilation*(kernel - 1) - 1) / stride + 1)` for one axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Result<usize> {
    if len == 0 || kernel == 0 || stride == 0 || dilation == 0 {
        return Err(Error::Geometry(format!(
            "input, kernel, stride and dilation must be positive (got {len}, {kernel}, {stride}, {dilation})"
        )));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return Err(Error::Geometry(format!(
            "kernel span {span} exceeds padded input {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Output extents for a 1-D (`[L]`) or 2-D (`[H, W]`) convolution. Every parameter
/// slice gives one value per spatial axis.
pub fn conv_output_shape(
    input: &[usize],
    kernel: &[usize],
    stride: &[usize],
    padding: &[usize],
    dilation: &[usize],
) -> Result<Vec<usize>> {
    let axes = input.len();
    if !(1..=2).contains(&axes) {
        return Err(Error::Geometry(format!("expected 1 or 2 spatial axes, got {axes}")));
    }
    if [kernel.len(), stride.len(), padding.len(), dilation.len()]
        .iter()
        .any(|&n| n != axes)
    {
        return Err(Error::Geometry("convolution parameters must give one value per axis".into()));
    }
    (0..axes)
        .map(|a| conv_output_len(input[a], kernel[a], stride[a], padding[a], dilation[a]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts kernel placements directly: a start position in padded coordinates is
    /// valid when every dilated tap stays inside the padded input.
    fn placements(len: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
        let padded = len + 2 * p;
        (0..padded)
            .step_by(s)
            .filter(|&start| (0..k).all(|t| start + t * d < padded))
            .count()
    }

    #[test]
    fn conv1d_examples() {
        assert_eq!(conv_output_len(28, 3, 1, 0, 1).unwrap(), 26);
        assert_eq!(conv_output_len(28, 3, 2, 0, 1).unwrap(), 13);
    }

    #[test]
    fn conv2d_same_padding() {
        assert_eq!(
            conv_output_shape(&[32, 32], &[5, 5], &[1, 1], &[2, 2], &[1, 1]).unwrap(),
            vec![32, 32]
        );
    }

    #[test]
    fn too_small_input_is_geometry_error() {
        assert!(matches!(conv_output_len(2, 5, 1, 0, 1), Err(Error::Geometry(_))));
        assert!(matches!(conv_output_len(3, 2, 1, 0, 3), Err(Error::Geometry(_))));
    }

    #[test]
    fn zero_stride_rejected() {
        assert!(conv_output_len(8, 3, 0, 0, 1).is_err());
    }

    #[test]
    fn matches_placement_enumeration() {
        for len in 1..=16 {
            for k in 1..=5 {
                for s in 1..=3 {
                    for p in 0..=2 {
                        for d in 1..=2 {
                            let brute = placements(len, k, s, p, d);
                            match conv_output_len(len, k, s, p, d) {
                                Ok(n) => assert_eq!(n, brute, "L={len} k={k} s={s} p={p} d={d}"),
                                Err(_) => assert_eq!(brute, 0, "L={len} k={k} s={s} p={p} d={d}"),
                            }
                        }
                    }
                }
            }
        }
    }
}
