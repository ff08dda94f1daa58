"""Full fusion encoder: per-layer input projections, recurrent steps
over selected backbone layers, and the final late-interaction projection.

Query and document encoders share this code but hold disjoint parameter
sets; asymmetry is a deliberate property of the retriever.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .cell import CellParams, cell_step, init_cell_params
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .scoring import TokenMatrix
from .tensor import Tensor, parameter


@dataclass
class EncoderConfig:
    num_steps: int
    num_tokens: int
    width: int
    late_width: int
    heads: int
    text_layer_indices: list[int]
    vis_layer_indices: list[int]
    source_dims: tuple[int, int]  # (text feature width, visual feature width)
    normalize_rows: bool = False
    b_forget: float = 0.0
    b_input: float = 0.0

    def validate(self) -> None:
        if self.num_tokens < 1 or self.late_width < 1 or self.num_steps < 1:
            raise ConfigError("num_tokens, late_width and num_steps must all be >= 1")
        if self.width % self.heads != 0:
            raise ConfigError(f"head count {self.heads} does not divide width {self.width}")
        for name, idx in (("text", self.text_layer_indices), ("vision", self.vis_layer_indices)):
            if len(idx) != self.num_steps:
                raise ConfigError(f"{name} layer indices must have length {self.num_steps}")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ConfigError(f"{name} layer indices must be strictly increasing: {idx}")
            if idx and idx[0] < 0:
                raise ConfigError(f"{name} layer indices must be non-negative: {idx}")


@dataclass
class LayerStack:
    """Per-layer activations of one modality: a list of (N, source_dim)
    matrices.  N may vary per layer; the width may not."""

    modality: str  # "text" or "vision"
    layers: list[np.ndarray]

    def validate(self) -> None:
        if not self.layers:
            raise DataError(f"{self.modality} stack has no layers")
        width = self.layers[0].shape[1]
        for i, m in enumerate(self.layers):
            if m.ndim != 2 or m.shape[1] != width:
                raise DataError(
                    f"{self.modality} stack layer {i} has shape {m.shape}, expected (*, {width})"
                )
            if not np.isfinite(m).all():
                raise NonFiniteError(f"{self.modality} stack layer {i} contains non-finite values")

    @property
    def width(self) -> int:
        return self.layers[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass
class EncoderParams:
    h0: Tensor
    text_proj_w: list[Tensor]
    text_proj_b: list[Tensor]
    vis_proj_w: list[Tensor]
    vis_proj_b: list[Tensor]
    cell: CellParams
    w_final: Tensor


@dataclass
class GateTrace:
    """Per-step mean activations of the three gates."""

    forget: np.ndarray
    input_text: np.ndarray
    input_vis: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.forget)


def select_layer_indices(available_depth: int, target: int) -> list[int]:
    """Pick ``target`` strictly increasing layer indices out of
    ``available_depth``.

    When the depth is an exact multiple of the target the result is an
    arithmetic sequence from 0 with stride depth/target; otherwise the
    endpoints are pinned and interior indices are spaced evenly
    (half-up rounding), de-duplicated by forward adjustment.
    """
    if target < 1:
        raise ConfigError(f"target layer count must be >= 1, got {target}")
    if target > available_depth:
        raise ConfigError(
            f"cannot select {target} layers from a backbone of depth {available_depth}"
        )
    if available_depth % target == 0:
        stride = available_depth // target
        return list(range(0, available_depth, stride))
    span = available_depth - 1
    indices = [int(math.floor(j * span / (target - 1) + 0.5)) for j in range(target)]
    for j in range(1, target):
        if indices[j] <= indices[j - 1]:
            indices[j] = indices[j - 1] + 1
    return indices


def init_encoder_params(rng: np.random.Generator, cfg: EncoderConfig,
                        std: float = 0.02) -> EncoderParams:
    cfg.validate()
    text_dim, vis_dim = cfg.source_dims
    return EncoderParams(
        h0=parameter(ops.trunc_normal(rng, (cfg.num_tokens, cfg.width), std)),
        text_proj_w=[parameter(ops.trunc_normal(rng, (text_dim, cfg.width), std))
                     for _ in range(cfg.num_steps)],
        text_proj_b=[parameter(np.zeros(cfg.width)) for _ in range(cfg.num_steps)],
        vis_proj_w=[parameter(ops.trunc_normal(rng, (vis_dim, cfg.width), std))
                    for _ in range(cfg.num_steps)],
        vis_proj_b=[parameter(np.zeros(cfg.width)) for _ in range(cfg.num_steps)],
        cell=init_cell_params(rng, cfg.num_tokens, cfg.width, cfg.heads,
                              b_forget=cfg.b_forget, b_input=cfg.b_input, std=std),
        w_final=parameter(ops.trunc_normal(rng, (cfg.width, cfg.late_width), std)),
    )


def named_parameters(params: EncoderParams, prefix: str = ""):
    """Yield (name, tensor) for every learnable tensor, in a stable order."""
    yield prefix + "h0", params.h0
    for l, (w, b) in enumerate(zip(params.text_proj_w, params.text_proj_b)):
        yield f"{prefix}text_proj_{l}.w", w
        yield f"{prefix}text_proj_{l}.b", b
    for l, (w, b) in enumerate(zip(params.vis_proj_w, params.vis_proj_b)):
        yield f"{prefix}vis_proj_{l}.w", w
        yield f"{prefix}vis_proj_{l}.b", b
    cell = params.cell
    for branch, attn in (("self_attn", cell.self_attn),
                         ("cross_text", cell.cross_attn_text),
                         ("cross_vis", cell.cross_attn_vis)):
        for field_name in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}cell.{branch}.{field_name}", getattr(attn, field_name)
    for field_name in ("ln_in_gain", "ln_in_bias", "ln_mlp_gain", "ln_mlp_bias",
                       "w_forget_text", "w_forget_vis", "w_input_text", "w_input_vis",
                       "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
        yield f"{prefix}cell.{field_name}", getattr(cell, field_name)
    yield prefix + "w_final", params.w_final


def _project(stack: LayerStack, index: int, w: Tensor, b: Tensor) -> Tensor:
    if index >= stack.depth:
        raise DataError(
            f"{stack.modality} stack provides {stack.depth} layers but index "
            f"{index} was requested"
        )
    return ops.add_rowvec(ops.matmul(Tensor(stack.layers[index]), w), b)


def run_encoder(text: LayerStack, vis: LayerStack | None, cfg: EncoderConfig,
                params: EncoderParams, trace: bool = False,
                mask_visual: bool = False):
    """Differentiable encoder forward pass.

    Returns ``(out, gate_trace)`` where ``out`` is a (k, d_bar) tensor.
    ``vis`` may be None (no image); ``mask_visual`` forces the masked
    path even when visual features are supplied.
    """
    text.validate()
    masked = vis is None or mask_visual
    if vis is not None and not masked:
        vis.validate()

    h = params.h0
    step_means = []
    for l in range(cfg.num_steps):
        e_text = _project(text, cfg.text_layer_indices[l], params.text_proj_w[l],
                          params.text_proj_b[l])
        e_vis = None
        if not masked:
            e_vis = _project(vis, cfg.vis_layer_indices[l], params.vis_proj_w[l],
                             params.vis_proj_b[l])
        step = cell_step(h, e_text, e_vis, params.cell)
        h = step.h_next
        step_means.append(step.gate_means)

    out = ops.matmul(h, params.w_final)
    if cfg.normalize_rows:
        out = ops.l2_normalize_rows(out)

    gate_trace = None
    if trace:
        arr = np.array(step_means)
        gate_trace = GateTrace(forget=arr[:, 0], input_text=arr[:, 1], input_vis=arr[:, 2])
    return out, gate_trace


def encode(text: LayerStack, vis: LayerStack | None, cfg: EncoderConfig,
           params: EncoderParams, trace: bool = False,
           mask_visual: bool = False, owner: str = "query", item_id: str = ""):
    """Inference entry point: returns a :class:`TokenMatrix` (and the
    per-step gate trace when requested)."""
    out, gate_trace = run_encoder(text, vis, cfg, params, trace=trace,
                                  mask_visual=mask_visual)
    return TokenMatrix(data=out.data, owner=owner, item_id=item_id), gate_trace


def gate_trace_summary(traces: list[GateTrace]) -> GateTrace:
    """Arithmetic mean of gate activations per step across examples."""
    if not traces:
        raise DataError("gate_trace_summary needs at least one trace")
    steps = traces[0].num_steps
    if any(t.num_steps != steps for t in traces):
        raise DataError("gate traces disagree on the number of steps")
    return GateTrace(
        forget=np.mean([t.forget for t in traces], axis=0),
        input_text=np.mean([t.input_text for t in traces], axis=0),
        input_vis=np.mean([t.input_vis for t in traces], axis=0),
    )
