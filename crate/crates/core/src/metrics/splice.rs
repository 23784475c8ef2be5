//! Running the model with a coder spliced into its feed-forward output.

use crate::coders::FeatureCoder;
use crate::error::{Error, Result};
use crate::lm::{ForwardOutput, HookPoint, HookSite, Model};
use crate::numerics::Matrix;

/// How edited activations re-enter the model at `ff_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpliceMode {
    /// `ff_out ← decode(a')`: the coder's reconstruction replaces the sublayer.
    Reconstruct,
    /// `ff_out ← ff_out + decode(a') − decode(a)`: the reconstruction error
    /// is kept, so an unedited run is exactly the original model.
    PreserveError,
}

#[derive(Clone, Copy)]
pub struct Splice<'a> {
    pub model: &'a Model,
    pub coder: &'a FeatureCoder,
}

impl<'a> Splice<'a> {
    pub fn new(model: &'a Model, coder: &'a FeatureCoder) -> Result<Self> {
        let hp = HookPoint::new(coder.layer(), coder.input_site());
        model.validate_hook(hp)?;
        let d = model.config.d_model;
        if coder.d_in() != model.site_width(coder.input_site()) || coder.d_out() != d {
            return Err(Error::shape(format!(
                "coder {}→{} does not fit layer {} of a d_model={d} model",
                coder.d_in(),
                coder.d_out(),
                coder.layer()
            )));
        }
        Ok(Self { model, coder })
    }

    fn input_hook(&self) -> HookPoint {
        HookPoint::new(self.coder.layer(), self.coder.input_site())
    }

    /// Coder activations at every position of `tokens` (BOS row included).
    pub fn features(&self, tokens: &[u32]) -> Result<Matrix> {
        let hp = self.input_hook();
        let out = self.model.forward_with_hooks(tokens, &[hp], None)?;
        self.coder.encode(&out.captures[&hp])
    }

    /// Coder activations plus the `ff_out` tensor of the coder's layer.
    pub fn features_and_output(&self, tokens: &[u32]) -> Result<(Matrix, Matrix)> {
        let hp = self.input_hook();
        let out_hp = HookPoint::new(self.coder.layer(), HookSite::FfOut);
        let mut out = self.model.forward_with_hooks(tokens, &[hp, out_hp], None)?;
        let ff_out = out.captures.remove(&out_hp).expect("captured");
        let x = out.captures.remove(&hp).expect("captured");
        Ok((self.coder.encode(&x)?, ff_out))
    }

    /// Forward pass where `edit(position, activations)` may rewrite the
    /// coder activations of each position before they are decoded back.
    pub fn forward_edited(
        &self,
        tokens: &[u32],
        mode: SpliceMode,
        edit: &mut dyn FnMut(usize, &mut [f32]),
    ) -> Result<ForwardOutput> {
        let layer = self.coder.layer();
        let from_input = self.coder.input_site() == HookSite::FfIn;
        let mut stash: Option<Matrix> = None;
        self.model.forward_with_intervention(tokens, |hp, m| {
            if hp.layer != layer {
                return Ok(());
            }
            match hp.site {
                HookSite::FfIn if from_input => stash = Some(m.clone()),
                HookSite::FfOut => {
                    let a = match stash.take() {
                        Some(x) => self.coder.encode(&x)?,
                        None => self.coder.encode(m)?,
                    };
                    let mut edited = a.clone();
                    for r in 0..edited.rows() {
                        edit(r, edited.row_mut(r));
                    }
                    match mode {
                        SpliceMode::Reconstruct => *m = self.coder.decode(&edited)?,
                        SpliceMode::PreserveError => {
                            if edited != a {
                                let new = self.coder.decode(&edited)?;
                                let old = self.coder.decode(&a)?;
                                for ((o, n), p) in m.data_mut().iter_mut().zip(new.data()).zip(old.data()) {
                                    *o += n - p;
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
            Ok(())
        })
    }

    /// Mean of the final residual over non-BOS positions, with the listed
    /// features zeroed at every position.
    pub fn pooled_residual(&self, tokens: &[u32], mode: SpliceMode, ablate: &[usize]) -> Result<Vec<f32>> {
        let out = self.forward_edited(tokens, mode, &mut |_, a| {
            for &j in ablate {
                a[j] = 0.0;
            }
        })?;
        Ok(mean_rows_after_bos(&out.final_residual))
    }
}

/// Column means over rows `1..`, or over row 0 when it is the only one.
pub(crate) fn mean_rows_after_bos(m: &Matrix) -> Vec<f32> {
    let start = if m.rows() > 1 { 1 } else { 0 };
    let n = (m.rows() - start) as f64;
    let mut acc = vec![0.0f64; m.cols()];
    for r in start..m.rows() {
        for (s, &v) in acc.iter_mut().zip(m.row(r)) {
            *s += v as f64;
        }
    }
    acc.into_iter().map(|s| (s / n) as f32).collect()
}
