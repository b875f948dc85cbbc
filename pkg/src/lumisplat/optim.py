"""Adam updates, parameter-group freezing, and staged optimization.

A "problem" is any object with:

- ``flatten(frozen) -> (vec, layout)`` where the layout exposes
  ``group_slices()`` and ``live_groups()``,
- ``loss_var(vec, layout) -> Var`` building the differentiable loss,
- ``apply(vec, layout) -> None`` writing the vector back into the
  problem state (including any renormalization / rotation rebase).

``run_stage`` re-flattens every iteration so Lie-increment entries are
rebased to zero while Adam's moment accumulators, which live in the
tangent space, persist across the whole stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteLoss, ShapeMismatch

DEFAULT_GROUP_LR = {
    "pose": 1e-3,
    "rid": 1e-3,
    "albedo": 5e-3,
    "tau": 1e-3,
    "ambient": 1e-3,
    "scene-gaussians": 1e-3,
    "scene-scale": 1e-3,
}


@dataclass
class ParamGroup:
    name: str
    frozen: bool = False
    learning_rate: float = 1e-3


@dataclass
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(
    state: AdamState,
    p: np.ndarray,
    g: np.ndarray,
    lr,
    freeze_mask: np.ndarray | None = None,
) -> np.ndarray:
    """One Adam update with bias correction; returns the new vector.

    ``lr`` may be a scalar or a per-element array.  Entries selected by
    ``freeze_mask`` are left bit-identical (their moments are not
    advanced either).
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ShapeMismatch(
            f"parameter {p.shape}, gradient {g.shape}, state {state.m.shape}"
        )
    state.step += 1
    if freeze_mask is None:
        state.m = state.beta1 * state.m + (1 - state.beta1) * g
        state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
        mhat = state.m / (1 - state.beta1**state.step)
        vhat = state.v / (1 - state.beta2**state.step)
        return p - lr * mhat / (np.sqrt(vhat) + state.eps)
    live = ~np.asarray(freeze_mask, dtype=bool)
    out = p.copy()
    state.m[live] = state.beta1 * state.m[live] + (1 - state.beta1) * g[live]
    state.v[live] = state.beta2 * state.v[live] + (1 - state.beta2) * g[live] ** 2
    mhat = state.m[live] / (1 - state.beta1**state.step)
    vhat = state.v[live] / (1 - state.beta2**state.step)
    lr_live = lr[live] if isinstance(lr, np.ndarray) and lr.shape == p.shape else lr
    out[live] = p[live] - lr_live * mhat / (np.sqrt(vhat) + state.eps)
    return out


@dataclass
class LossReport:
    value: float
    terms: dict = field(default_factory=dict)
    grad_norms: dict = field(default_factory=dict)


@dataclass
class StageConfig:
    """One schedule entry: what is frozen, for how long, at which rates.

    ``lr_decay`` is the geometric end-of-stage learning-rate multiplier
    (1.0 keeps the rate constant; 0.01 anneals it to 1% by the last
    iteration), which lets Adam settle instead of hovering at its
    steady-state noise floor.
    """

    name: str = "stage"
    iterations: int = 100
    frozen: frozenset = frozenset()
    learning_rates: dict = field(default_factory=dict)
    lr_decay: float = 1.0
    early_stop_window: int | None = None
    early_stop_rel: float = 1e-5

    def lr_for(self, group: str) -> float:
        if group in self.learning_rates:
            return float(self.learning_rates[group])
        return DEFAULT_GROUP_LR.get(group, 1e-3)

    def lr_factor(self, iteration: int) -> float:
        if self.lr_decay == 1.0 or self.iterations <= 1:
            return 1.0
        return float(self.lr_decay ** (iteration / (self.iterations - 1)))


@dataclass
class StageReport:
    name: str
    losses: list
    final: LossReport | None
    warnings: list = field(default_factory=list)
    aborted: bool = False


def _lr_vector(layout, stage: StageConfig, n: int) -> np.ndarray:
    lr = np.full(n, 1e-3)
    for group, sl in layout.group_slices().items():
        lr[sl] = stage.lr_for(group)
    if hasattr(layout, "entry_lr_scales"):
        for sl, scale in layout.entry_lr_scales():
            lr[sl] *= scale
    return lr


def run_stage(problem, stage: StageConfig, callback=None) -> StageReport:
    """Run one freeze/unfreeze stage of Adam on a problem.

    Returns the per-iteration loss history.  Adam is not monotone; if the
    final loss exceeds the initial one a "non-monotone" warning is
    attached instead of failing.  A non-finite loss aborts the stage and
    the partial history is returned with ``aborted=True``.
    """
    if stage.iterations <= 0:
        raise ValueError("stage must run at least one iteration")
    vec, layout = problem.flatten(stage.frozen)
    state = AdamState.for_size(vec.size)
    lr = _lr_vector(layout, stage, vec.size)
    losses: list[float] = []
    report = None
    warnings: list[str] = []

    for it in range(stage.iterations):
        vec, layout = problem.flatten(stage.frozen)
        try:
            if vec.size == 0:
                # everything frozen: evaluate without a tape
                out = problem.loss_var(ad.Var(vec), layout)
                value = float(ad.value_of(out))
                if not np.isfinite(value):
                    raise NonFiniteLoss(f"loss value is {value}")
                g = np.zeros(0)
            else:
                value, g = ad.grad(lambda v: problem.loss_var(v, layout), vec)
        except NonFiniteLoss as exc:
            warnings.append(f"aborted at iteration {it}: {exc}")
            return StageReport(stage.name, losses, report, warnings, aborted=True)
        losses.append(value)
        report = LossReport(
            value=value,
            grad_norms={
                grp: float(np.linalg.norm(g[sl]))
                for grp, sl in layout.group_slices().items()
            },
        )
        if vec.size:
            vec = adam_step(state, vec, g, lr * stage.lr_factor(it))
            problem.apply(vec, layout)
        if callback is not None and not callback(it, value):
            break
        if (
            stage.early_stop_window
            and len(losses) > stage.early_stop_window
            and losses[-stage.early_stop_window - 1] > 0
        ):
            prev = losses[-stage.early_stop_window - 1]
            if (prev - losses[-1]) / abs(prev) < stage.early_stop_rel:
                break

    if losses and losses[-1] > losses[0]:
        warnings.append("non-monotone: final loss above initial loss")
    return StageReport(stage.name, losses, report, warnings)
