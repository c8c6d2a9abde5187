use nalgebra::DMatrix;

use crate::error::{CorssError, Result};

/// A window of multichannel samples: `n_ch` rows, `len` columns, one column
/// per time sample. The unit of streaming work throughout the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelBlock {
    /// Channel-by-sample data, `n_ch x len`.
    pub data: DMatrix<f64>,
    /// Absolute index of the first sample in the parent stream.
    pub start_sample: u64,
    /// Sampling rate in Hz.
    pub sample_rate: f64,
}

impl MultichannelBlock {
    pub fn new(data: DMatrix<f64>, start_sample: u64, sample_rate: f64) -> Result<Self> {
        if sample_rate <= 0.0 || !sample_rate.is_finite() {
            return Err(CorssError::InvalidSpec(format!(
                "sample_rate = {sample_rate} must be positive"
            )));
        }
        Ok(MultichannelBlock {
            data,
            start_sample,
            sample_rate,
        })
    }

    pub fn n_ch(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// Splits a full recording into contiguous blocks of `block_size` samples;
    /// the final block may be shorter.
    pub fn split(recording: &MultichannelBlock, block_size: usize) -> Vec<MultichannelBlock> {
        assert!(block_size >= 1);
        let mut out = Vec::new();
        let n = recording.len();
        let mut start = 0usize;
        while start < n {
            let end = (start + block_size).min(n);
            out.push(MultichannelBlock {
                data: recording.data.columns(start, end - start).into_owned(),
                start_sample: recording.start_sample + start as u64,
                sample_rate: recording.sample_rate,
            });
            start = end;
        }
        out
    }
}
