//! Adapter-parameter generation from conditioning vectors.
//!
//! One shared generator serves every adapter site: its composed weight (a
//! factorized product, Frobenius-normalized) is reshaped to `[d*r, t]` and
//! contracted with a site's conditioning vector `I ∈ R^t` to yield the up
//! projection `U ∈ R^{d×r}`; the down projection is tied as `D = Uᵀ`. The
//! untied variant keeps separate direct weights for `U` and `D`.
//!
//! Layout contract (checkpoint compatibility): the composed weight is stored
//! row-major with `d` outermost, then `r`, then `t` — so the `[d, r*t]`
//! product and the `[d*r, t]` contraction view share one buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NormMode, Tape, TensorId};

/// Switches distinguishing the main method from its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct C2aVariant {
    /// Compose the generation weight from two low-rank factors.
    pub factorized: bool,
    /// Generate only `U` and tie `D = Uᵀ`.
    pub tied: bool,
    /// Frobenius-normalize the composed weight.
    pub normalized: bool,
    /// Include the label embedding in the conditioning vector.
    pub use_label: bool,
    /// Include the context embedding in the conditioning vector.
    pub use_context: bool,
}

/// Compose the generation weight `σ(factor · scale)` as a `[d, r*t]` tensor.
///
/// `σ` (Frobenius normalization) makes the result invariant to positive
/// rescaling of either factor; pass `normalized = false` for the ablation.
pub fn compose_weight(
    tape: &mut Tape,
    factor: TensorId,
    scale: TensorId,
    normalized: bool,
) -> Result<TensorId> {
    let fs = tape.shape(factor);
    let ss = tape.shape(scale);
    if fs.len() != 2 || ss.len() != 2 || fs[1] != ss[0] {
        return Err(Error::invalid(
            "compose_weight",
            format!("incompatible factor {fs:?} and scale {ss:?}"),
        ));
    }
    let prod = tape.matmul(factor, scale)?;
    Ok(if normalized {
        tape.normalize(prod, NormMode::FrobeniusMatrix)
    } else {
        prod
    })
}

/// Contract a composed `[d, r*t]` weight with a `[1, t]` conditioning vector.
///
/// Returns `(U, D)` with `U ∈ [d, r]` and `D = Uᵀ ∈ [r, d]` (tied).
pub fn generate_adapter(
    tape: &mut Tape,
    composed: TensorId,
    cond: TensorId,
    d: usize,
    r: usize,
    t: usize,
) -> Result<(TensorId, TensorId)> {
    if tape.shape(composed) != [d, r * t] {
        return Err(Error::invalid(
            "generate_adapter",
            format!("composed weight {:?} vs expected [{d}, {}]", tape.shape(composed), r * t),
        ));
    }
    if tape.shape(cond) != [1, t] {
        return Err(Error::invalid(
            "generate_adapter",
            format!("conditioning vector {:?} vs expected [1, {t}]", tape.shape(cond)),
        ));
    }
    // [d, r*t] and [d*r, t] are the same row-major buffer
    let view = tape.reshape(composed, vec![d * r, t])?;
    let cond_col = tape.transpose(cond)?; // [t, 1]
    let flat = tape.matmul(view, cond_col)?; // [d*r, 1]
    let u = tape.reshape(flat, vec![d, r])?;
    let dn = tape.transpose(u)?; // tied: D = Uᵀ
    Ok((u, dn))
}

/// Untied direct generation: `U = reshape(W_U · I)`, `D = reshape(W_D · I)`.
pub fn generate_adapter_untied(
    tape: &mut Tape,
    w_u: TensorId,
    w_d: TensorId,
    cond: TensorId,
    d: usize,
    r: usize,
    t: usize,
) -> Result<(TensorId, TensorId)> {
    if tape.shape(w_u) != [d * r, t] || tape.shape(w_d) != [r * d, t] {
        return Err(Error::invalid(
            "generate_adapter_untied",
            format!(
                "weights {:?}/{:?} vs expected [{}, {t}]",
                tape.shape(w_u),
                tape.shape(w_d),
                d * r
            ),
        ));
    }
    if tape.shape(cond) != [1, t] {
        return Err(Error::invalid("generate_adapter_untied", "conditioning vector must be [1, t]"));
    }
    let cond_col = tape.transpose(cond)?;
    let u_flat = tape.matmul(w_u, cond_col)?;
    let u = tape.reshape(u_flat, vec![d, r])?;
    let d_flat = tape.matmul(w_d, cond_col)?;
    let dn = tape.reshape(d_flat, vec![r, d])?;
    Ok((u, dn))
}
