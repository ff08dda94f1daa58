"""One step of the gated recurrent fusion cell.

Each step fuses the carried hidden state with the current layer's
textual and visual backbone features through three attention branches
(one self, two cross), combines them under learnable sigmoidal forget
and input gates, and finishes with a residual feed-forward block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .errors import EmptyModalityError, ShapeError
from .tensor import AttentionParams, Tensor, init_attention_params, parameter


@dataclass
class CellParams:
    """Learnable weights of one cell plus its fixed constants.

    ``b_forget`` and ``b_input`` are fixed scalars, not trained
    (default 0).  ``pos_enc`` is a fixed sinusoidal table, identical
    across steps, and never receives gradient.
    """

    self_attn: AttentionParams
    cross_attn_text: AttentionParams
    cross_attn_vis: AttentionParams
    ln_in_gain: Tensor
    ln_in_bias: Tensor
    ln_mlp_gain: Tensor
    ln_mlp_bias: Tensor
    w_forget_text: Tensor
    w_forget_vis: Tensor
    w_input_text: Tensor
    w_input_vis: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    pos_enc: Tensor
    b_forget: float = 0.0
    b_input: float = 0.0


@dataclass
class CellStepOutput:
    h_next: Tensor
    c_next: Tensor
    gate_means: tuple[float, float, float]  # (forget, input_text, input_vis)


def init_cell_params(rng: np.random.Generator, k: int, d: int, heads: int,
                     b_forget: float = 0.0, b_input: float = 0.0,
                     std: float = 0.02) -> CellParams:
    def w(shape):
        return parameter(ops.trunc_normal(rng, shape, std))

    return CellParams(
        self_attn=init_attention_params(rng, d, heads, std),
        cross_attn_text=init_attention_params(rng, d, heads, std),
        cross_attn_vis=init_attention_params(rng, d, heads, std),
        ln_in_gain=parameter(np.ones(d)),
        ln_in_bias=parameter(np.zeros(d)),
        ln_mlp_gain=parameter(np.ones(d)),
        ln_mlp_bias=parameter(np.zeros(d)),
        w_forget_text=w((d, d)),
        w_forget_vis=w((d, d)),
        w_input_text=w((d, d)),
        w_input_vis=w((d, d)),
        mlp_w1=w((d, 4 * d)),
        mlp_b1=parameter(np.zeros(4 * d)),
        mlp_w2=w((4 * d, d)),
        mlp_b2=parameter(np.zeros(d)),
        pos_enc=Tensor(ops.sinusoidal_table(k, d)),
        b_forget=b_forget,
        b_input=b_input,
    )


def _normalized_input(h: Tensor, params: CellParams) -> Tensor:
    """Positional encoding added to h, then the shared layer norm."""
    if h.data.shape != params.pos_enc.data.shape:
        raise ShapeError(
            f"hidden state shape {h.data.shape} does not match configured "
            f"{params.pos_enc.data.shape}"
        )
    return ops.layer_norm(h + params.pos_enc, params.ln_in_gain, params.ln_in_bias)


def candidate_state(h: Tensor, params: CellParams) -> Tensor:
    """Self-attention over the normalized hidden state, residual to the
    raw (un-encoded) hidden state."""
    normed = _normalized_input(h, params)
    return ops.attention(normed, normed, params.self_attn) + h


def fuse_modality(h: Tensor, e: Tensor, which: str, params: CellParams) -> Tensor:
    """Cross-attend the normalized hidden state onto one modality's
    layer features.  No residual."""
    if e.data.shape[0] < 1:
        raise EmptyModalityError(
            f"{which} features have zero tokens; use the masked path instead"
        )
    if which == "text":
        attn = params.cross_attn_text
    elif which == "vision":
        attn = params.cross_attn_vis
    else:
        raise ValueError(f"unknown modality {which!r}")
    return ops.attention(_normalized_input(h, params), e, attn)


def gated_update(c: Tensor, z_text: Tensor, z_vis: Tensor, vis_masked: bool,
                 params: CellParams):
    """Combine candidate state and fused features under sigmoidal gates.

    Returns ``(c_next, (forget, input_text, input_vis))``.  When
    ``vis_masked`` is true the visual stream is excluded entirely: its
    term in the forget-gate pre-activation and its gated contribution
    are both dropped, so the result cannot depend on ``z_vis``.
    """
    if z_text.data.shape != c.data.shape:
        raise ShapeError(f"gated_update: z_text shape {z_text.data.shape} differs from {c.data.shape}")

    if vis_masked:
        f_pre = ops.add_scalar(ops.matmul(z_text, params.w_forget_text), params.b_forget)
        i_vis = ops.sigmoid(Tensor(np.full_like(c.data, params.b_input)))
    else:
        if z_vis.data.shape != c.data.shape:
            raise ShapeError(f"gated_update: z_vis shape {z_vis.data.shape} differs from {c.data.shape}")
        f_pre = ops.add_scalar(
            ops.matmul(z_text, params.w_forget_text) + ops.matmul(z_vis, params.w_forget_vis),
            params.b_forget,
        )
        i_vis = ops.sigmoid(ops.add_scalar(ops.matmul(z_vis, params.w_input_vis), params.b_input))

    forget = ops.sigmoid(f_pre)
    i_text = ops.sigmoid(ops.add_scalar(ops.matmul(z_text, params.w_input_text), params.b_input))

    c_next = (c * forget) + (z_text * i_text)
    if not vis_masked:
        c_next = c_next + (z_vis * i_vis)
    return c_next, (forget, i_text, i_vis)


def cell_step(h: Tensor, e_text: Tensor, e_vis: Tensor | None,
              params: CellParams) -> CellStepOutput:
    """Run one full recurrent step.

    ``e_vis`` is None when the item has no image; the visual branch is
    then skipped entirely (masked semantics).  Output shapes are always
    (k, d) regardless of the feature token counts.
    """
    cand = candidate_state(h, params)
    z_text = fuse_modality(h, e_text, "text", params)
    if e_vis is None:
        z_vis = Tensor(np.zeros_like(h.data))
        masked = True
    else:
        z_vis = fuse_modality(h, e_vis, "vision", params)
        masked = False

    c_next, (forget, i_text, i_vis) = gated_update(cand, z_text, z_vis, masked, params)

    normed = ops.layer_norm(c_next, params.ln_mlp_gain, params.ln_mlp_bias)
    mid = ops.gelu(ops.add_rowvec(ops.matmul(normed, params.mlp_w1), params.mlp_b1))
    h_next = c_next + ops.add_rowvec(ops.matmul(mid, params.mlp_w2), params.mlp_b2)

    means = (
        float(forget.data.mean()),
        float(i_text.data.mean()),
        float(i_vis.data.mean()),
    )
    return CellStepOutput(h_next=h_next, c_next=c_next, gate_means=means)
