"""Contrastive training: Adam with a cosine learning-rate schedule over
the full encode -> maxsim -> symmetric InfoNCE pipeline, plus a
finite-difference gradient-check harness."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, LayerStack, run_encoder
from .errors import DataError, NonFiniteError
from .model import RetrievalModel, init_model, model_named_parameters
from .scoring import score_matrix_graph, symmetric_infonce
from .tensor import Tape

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class BatchItem:
    """One training pair; ``doc_vis`` (or ``query_vis``) is None when
    that side has no image, which selects the masked path."""

    query_text: LayerStack
    query_vis: LayerStack | None
    doc_text: LayerStack
    doc_vis: LayerStack | None


@dataclass
class TrainState:
    model: RetrievalModel
    base_lr: float
    total_steps: int
    tau: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_train_state(model: RetrievalModel, base_lr: float, total_steps: int,
                     tau: float) -> TrainState:
    state = TrainState(model=model, base_lr=base_lr, total_steps=total_steps, tau=tau)
    for name, t in model_named_parameters(model):
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 to 0 at the final step."""
    if total_steps <= 1:
        return base
    progress = min(step / (total_steps - 1), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_loss(model: RetrievalModel, batch: list[BatchItem], tau: float):
    """Build the full differentiable loss for one batch."""
    q_outs = [run_encoder(it.query_text, it.query_vis, model.cfg, model.query_params)[0]
              for it in batch]
    d_outs = [run_encoder(it.doc_text, it.doc_vis, model.cfg, model.doc_params)[0]
              for it in batch]
    scores = score_matrix_graph(q_outs, d_outs)
    return symmetric_infonce(scores, tau)


def train_step(state: TrainState, batch: list[BatchItem]) -> float:
    """One optimization step over ``batch``; mutates ``state`` in place
    and returns the loss at the pre-update parameters.

    In-batch negatives require a batch of at least two pairs.  A
    non-finite loss aborts the step before any parameter is touched.
    """
    if len(batch) < 2:
        raise DataError(f"training batch must have >= 2 pairs, got {len(batch)}")

    with Tape() as tape:
        loss = batch_loss(state.model, batch, state.tau)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise NonFiniteError(f"loss is non-finite at step {state.step}; step aborted")
        tape.backward(loss)

    lr = cosine_lr(state.base_lr, state.step, state.total_steps)
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in model_named_parameters(state.model):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.zero_grad()
    state.step = t
    return loss_value


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    group: str
    max_rel_err: float
    samples: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    seconds: float

    @property
    def max_rel_err(self) -> float:
        return max(e.max_rel_err for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def tiny_config() -> EncoderConfig:
    return EncoderConfig(
        num_steps=2, num_tokens=2, width=8, late_width=4, heads=2,
        text_layer_indices=[0, 1], vis_layer_indices=[0, 1],
        source_dims=(5, 7),
    )


def random_batch(cfg: EncoderConfig, rng: np.random.Generator, batch_size: int,
                 with_vis: bool = True) -> list[BatchItem]:
    """Random layer stacks sized for ``cfg``; visual features everywhere
    so that every parameter group is on the gradient path."""
    text_dim, vis_dim = cfg.source_dims
    depth = max(max(cfg.text_layer_indices), max(cfg.vis_layer_indices)) + 1

    def stack(modality, dim, tokens):
        return LayerStack(modality, [rng.normal(size=(tokens, dim)) for _ in range(depth)])

    batch = []
    for _ in range(batch_size):
        batch.append(BatchItem(
            query_text=stack("text", text_dim, 3),
            query_vis=stack("vision", vis_dim, 4) if with_vis else None,
            doc_text=stack("text", text_dim, 5),
            doc_vis=stack("vision", vis_dim, 4) if with_vis else None,
        ))
    return batch


def grad_check(cfg: EncoderConfig | None = None, seed: int = 0,
               batch_size: int = 2, tau: float = 0.05,
               samples_per_group: int = 1, tolerance: float = 1e-3,
               fd_step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of the full training loss against
    central finite differences, one report entry per parameter group.

    Relative error uses a small denominator floor so that pairs of
    near-zero gradients compare by absolute difference.
    """
    start = time.monotonic()
    if cfg is None:
        cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = init_model(cfg, seed=seed)
    batch = random_batch(cfg, rng, batch_size)

    with Tape() as tape:
        loss = batch_loss(model, batch, tau)
        tape.backward(loss)
    autodiff = {name: (np.array(p.grad) if p.grad is not None else np.zeros_like(p.data))
                for name, p in model_named_parameters(model)}
    for _, p in model_named_parameters(model):
        p.zero_grad()

    def loss_at_current_params() -> float:
        return float(batch_loss(model, batch, tau).data)

    entries = []
    for name, p in model_named_parameters(model):
        flat = p.data.reshape(-1)
        n_samples = min(samples_per_group, flat.size)
        picks = rng.choice(flat.size, size=n_samples, replace=False)
        worst = 0.0
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + fd_step
            up = loss_at_current_params()
            flat[idx] = original - fd_step
            down = loss_at_current_params()
            flat[idx] = original
            numeric = (up - down) / (2.0 * fd_step)
            analytic = autodiff[name].reshape(-1)[idx]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
        entries.append(GradCheckEntry(group=name, max_rel_err=worst, samples=n_samples))

    return GradCheckReport(entries=entries, tolerance=tolerance,
                           seconds=time.monotonic() - start)
