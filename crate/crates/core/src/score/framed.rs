use super::{Conditioning, ScoreField};
use crate::error::{Error, Result};

/// Applies a fixed-length field to consecutive non-overlapping frames of a
/// longer signal, treating frames as independent.
#[derive(Debug, Clone)]
pub struct FramedScore<F> {
    pub field: F,
    pub frame_len: usize,
}

impl<F: ScoreField> FramedScore<F> {
    pub fn new(field: F, frame_len: usize) -> Result<Self> {
        if frame_len == 0 {
            return Err(Error::invalid("frame length must be positive"));
        }
        Ok(Self { field, frame_len })
    }

    fn frames(&self, len: usize) -> Result<usize> {
        if len == 0 || !len.is_multiple_of(self.frame_len) {
            return Err(Error::invalid(format!(
                "signal length {len} is not a positive multiple of the frame length {}",
                self.frame_len
            )));
        }
        Ok(len / self.frame_len)
    }

    fn frame_ctx<'a>(&self, ctx: Conditioning<'a>, i: usize) -> Conditioning<'a> {
        let r = i * self.frame_len..(i + 1) * self.frame_len;
        Conditioning { y: ctx.y.map(|y| &y[r]), cond: ctx.cond }
    }
}

impl<F: ScoreField> ScoreField for FramedScore<F> {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        let n = self.frames(x.len())?;
        let mut out = Vec::with_capacity(x.len());
        for (i, frame) in x.chunks(self.frame_len).enumerate().take(n) {
            out.extend(self.field.evaluate(frame, tau, self.frame_ctx(ctx, i))?);
        }
        Ok(out)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.frames(x.len())?;
        crate::error::check_len(x.len(), v.len())?;
        let mut out = Vec::with_capacity(x.len());
        for (i, (frame, vf)) in x.chunks(self.frame_len).zip(v.chunks(self.frame_len)).enumerate().take(n) {
            out.extend(self.field.vjp(frame, tau, self.frame_ctx(ctx, i), vf)?);
        }
        Ok(out)
    }
}
