"""Losses, optimizers, the entropy-temperature dual, and training steps.

Objective: treat policy fitting as constrained sequence modeling. The primal
loss is the action negative log likelihood averaged over valid window
positions; the constraint demands the policy's sequence-level entropy stay
at or above a floor beta. The Lagrangian is optimized by alternating single
steps: a primal step on ``NLL - lambda * H_hat`` treating lambda as a
constant, then one dual step on lambda given the just-estimated entropy.

The dual variable is parameterized as ``log_lambda`` and updated with Adam
(fixed lr 1e-4) on the dual objective ``lambda * (H_hat - beta)``, whose
gradient w.r.t. ``log_lambda`` is ``lambda * (H_hat - beta)``. The exp
parameterization keeps lambda positive without projection.

Primal optimizers operate on explicit per-parameter moment dictionaries so
their state can be checkpointed as plain arrays:

- ``Lamb``: Adam moments with bias correction, plus decoupled weight decay
  folded into the update direction and a per-parameter trust ratio
  ``|w| / |update|`` scaling the step (ratio 1 when either norm is zero).
- ``AdamW``: the same moments with decoupled weight decay.

The raw gradient is clipped by global L2 norm *before* the optimizer
transform; both pre- and post-clip norms are reported per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .policy import (
    PolicyModel,
    WindowBatch,
    batch_windows,
    entropy_one_sample,
    log_prob,
)
from .replay import TrajectoryRecord, sample_windows


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; carries the step it happened at."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_nll(
    model: PolicyModel,
    batch: WindowBatch,
    train_mode: bool = False,
    dropout_gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Negative mean log likelihood of the batch actions (scalar)."""
    dist = model.forward(batch, train_mode=train_mode, gen=dropout_gen)
    return -log_prob(dist, batch.actions)


def loss_l2(
    model: PolicyModel,
    batch: WindowBatch,
    train_mode: bool = False,
    dropout_gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Masked mean squared error of the mean head (scalar).

    Squared errors are summed over action dimensions per position and
    averaged over valid positions, mirroring the NLL's conventions so the
    two losses are gradient-comparable at fixed shared sigma.
    """
    pred = model.forward_deterministic(batch, train_mode=train_mode, gen=dropout_gen)
    per_pos = ((batch.actions - pred) ** 2).sum(dim=-1)
    count = batch.mask.sum()
    if count == 0:
        raise ValueError("no valid positions in batch")
    value = (per_pos * batch.mask.to(per_pos.dtype)).sum() / count
    if not torch.isfinite(value):
        raise ValueError(f"non-finite squared-error loss: {value.item()}")
    return value


def primal_loss(
    model: PolicyModel,
    batch: WindowBatch,
    lam: float,
    train_mode: bool = False,
    dropout_gen: torch.Generator | None = None,
    entropy_gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, float, float]:
    """Entropy-regularized loss ``NLL - lam * H_hat``.

    ``lam`` enters as a plain float: the primal step treats the temperature
    as a constant. Returns (loss, nll value, entropy estimate).
    """
    dist = model.forward(batch, train_mode=train_mode, gen=dropout_gen)
    nll = -log_prob(dist, batch.actions)
    if entropy_gen is None:
        raise ValueError("primal loss needs an entropy generator")
    ent = entropy_one_sample(dist, entropy_gen)
    loss = nll - lam * ent
    return loss, float(nll.detach()), float(ent.detach())


def compute_gradient(
    model: PolicyModel,
    batch: WindowBatch,
    loss_spec: str = "nll",
    lam: float = 0.0,
    train_mode: bool = False,
    dropout_gen: torch.Generator | None = None,
    entropy_gen: torch.Generator | None = None,
) -> dict[str, torch.Tensor]:
    """Gradient of a named loss w.r.t. every model parameter.

    ``loss_spec``: "nll", "maxent" (NLL - lam * entropy), or "l2".
    """
    model.zero_grad(set_to_none=True)
    if loss_spec == "nll":
        loss = loss_nll(model, batch, train_mode, dropout_gen)
    elif loss_spec == "maxent":
        loss, _, _ = primal_loss(model, batch, lam, train_mode, dropout_gen, entropy_gen)
    elif loss_spec == "l2":
        loss = loss_l2(model, batch, train_mode, dropout_gen)
    else:
        raise ValueError(f"unknown loss spec {loss_spec!r}")
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def clip_grad_norm(params: list[torch.Tensor], max_norm: float) -> tuple[float, float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns (pre-clip norm, post-clip norm). Applied to the raw gradient
    before any optimizer transform.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    pre = math.sqrt(total)
    if pre > max_norm and pre > 0.0:
        scale = max_norm / pre
        with torch.no_grad():
            for p in params:
                if p.grad is not None:
                    p.grad.mul_(scale)
        return pre, max_norm
    return pre, pre


# ---------------------------------------------------------------------------
# Optimizers with exportable state
# ---------------------------------------------------------------------------


class _MomentOptimizer:
    """Shared Adam-moment machinery over named parameters."""

    def __init__(
        self,
        model: PolicyModel,
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: dict[str, torch.nn.Parameter] = dict(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def _moments(self, name: str, grad: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.m[name].mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
        self.v[name].mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
        m_hat = self.m[name] / (1 - self.beta1**self.t)
        v_hat = self.v[name] / (1 - self.beta2**self.t)
        return m_hat, v_hat

    def state_export(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "m": {n: t.numpy().copy() for n, t in self.m.items()},
            "v": {n: t.numpy().copy() for n, t in self.v.items()},
            "meta": {"t": np.array([self.t])},
        }

    def state_import(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        for n in self.m:
            self.m[n] = torch.tensor(state["m"][n], dtype=torch.float64)
            self.v[n] = torch.tensor(state["v"][n], dtype=torch.float64)
        self.t = int(state["meta"]["t"][0])

    def step(self, lr_scale: float = 1.0) -> None:
        raise NotImplementedError


class Lamb(_MomentOptimizer):
    """Layer-wise adaptive moments: Adam direction plus decoupled weight
    decay, rescaled per parameter tensor by the trust ratio |w|/|u|."""

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                m_hat, v_hat = self._moments(name, p.grad)
                update = m_hat / (v_hat.sqrt() + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p
                w_norm = float(p.norm())
                u_norm = float(update.norm())
                trust = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
                p.add_(update, alpha=-self.lr * lr_scale * trust)


class AdamW(_MomentOptimizer):
    """Adam with decoupled weight decay."""

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                if self.weight_decay:
                    p.mul_(1.0 - lr * self.weight_decay)
                m_hat, v_hat = self._moments(name, p.grad)
                p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-lr)


def make_optimizer(name: str, model: PolicyModel, lr: float, weight_decay: float) -> _MomentOptimizer:
    if name == "lamb":
        return Lamb(model, lr=lr, weight_decay=weight_decay)
    if name == "adamw":
        return AdamW(model, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; known: ['lamb', 'adamw']")


# ---------------------------------------------------------------------------
# Dual (temperature) state
# ---------------------------------------------------------------------------


@dataclass
class DualState:
    """Adam-on-log-lambda state for the entropy constraint multiplier."""

    log_lambda: float
    beta: float
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: float = 0.0
    v: float = 0.0
    step: int = 0

    @property
    def lam(self) -> float:
        return math.exp(self.log_lambda)

    def to_dict(self) -> dict[str, float]:
        return {
            "log_lambda": self.log_lambda,
            "beta": self.beta,
            "lr": self.lr,
            "m": self.m,
            "v": self.v,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DualState":
        return cls(**{k: (int(v) if k == "step" else float(v)) for k, v in d.items()})


def dual_step(dual: DualState, entropy_hat: float) -> DualState:
    """One Adam step on log_lambda for the objective lambda*(H_hat - beta).

    d/d(log_lambda) [exp(log_lambda) * (H_hat - beta)] =
    lambda * (H_hat - beta): entropy above the floor pushes lambda down,
    below the floor pushes it up. lambda > 0 always, by parameterization.
    """
    if not math.isfinite(entropy_hat):
        raise ValueError(f"non-finite entropy estimate: {entropy_hat}")
    grad = dual.lam * (entropy_hat - dual.beta)
    dual.step += 1
    dual.m = dual.beta1 * dual.m + (1 - dual.beta1) * grad
    dual.v = dual.beta2 * dual.v + (1 - dual.beta2) * grad * grad
    m_hat = dual.m / (1 - dual.beta1**dual.step)
    v_hat = dual.v / (1 - dual.beta2**dual.step)
    dual.log_lambda -= dual.lr * m_hat / (math.sqrt(v_hat) + dual.eps)
    return dual


# ---------------------------------------------------------------------------
# Train-step orchestration
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    base_lr: float = 1e-4
    warmup_steps: int = 0
    grad_clip: float = 0.25
    step: int = 0

    def lr_scale(self, step: int) -> float:
        """Linear warmup factor for 1-indexed update ``step``."""
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, step / self.warmup_steps)


@dataclass
class IterationMetrics:
    step: int
    loss: float
    nll: float
    entropy: float
    lam: float
    grad_norm_pre: float
    grad_norm_post: float
    lr: float


def primal_step(
    model: PolicyModel,
    optimizer: _MomentOptimizer,
    dual: DualState | None,
    batch: WindowBatch,
    train_state: TrainState,
    dropout_gen: torch.Generator | None = None,
    entropy_gen: torch.Generator | None = None,
) -> IterationMetrics:
    """One gradient step on the primal objective at the current temperature.

    Stochastic policies use ``NLL - lambda * H_hat`` (NLL alone when no dual
    is supplied); the deterministic variant trains on squared error.
    """
    model.zero_grad(set_to_none=True)
    step = train_state.step + 1
    try:
        if model.config.deterministic:
            loss = loss_l2(model, batch, train_mode=True, dropout_gen=dropout_gen)
            nll_val, ent_val, lam = float("nan"), float("nan"), float("nan")
        elif dual is None:
            loss = loss_nll(model, batch, train_mode=True, dropout_gen=dropout_gen)
            nll_val, ent_val, lam = float(loss.detach()), float("nan"), 0.0
        else:
            lam = dual.lam
            loss, nll_val, ent_val = primal_loss(
                model, batch, lam, train_mode=True,
                dropout_gen=dropout_gen, entropy_gen=entropy_gen,
            )
    except ValueError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, f"loss {float(loss)}")
    loss.backward()
    pre, post = clip_grad_norm(list(model.parameters()), train_state.grad_clip)
    if not math.isfinite(pre):
        raise TrainingDiverged(step, f"gradient norm {pre}")
    scale = train_state.lr_scale(step)
    optimizer.step(lr_scale=scale)
    train_state.step = step
    return IterationMetrics(
        step=step,
        loss=float(loss.detach()),
        nll=nll_val,
        entropy=ent_val,
        lam=lam,
        grad_norm_pre=pre,
        grad_norm_post=post,
        lr=optimizer.lr * scale,
    )


def train_iteration(
    model: PolicyModel,
    optimizer: _MomentOptimizer,
    dual: DualState | None,
    records: list[TrajectoryRecord],
    train_state: TrainState,
    batch_size: int,
    sampler_rng: np.random.Generator,
    dropout_gen: torch.Generator | None = None,
    entropy_gen: torch.Generator | None = None,
    sample_strategy: str = "length",
) -> IterationMetrics:
    """Sample a batch of windows, take one primal step, then one dual step.

    The dual consumes the entropy estimate produced inside the primal loss
    (the pre-update parameters), realizing the alternating one-step scheme:
    each iteration moves theta once and lambda once.
    """
    windows = sample_windows(
        records, B=batch_size, K=model.config.context_len, rng=sampler_rng,
        strategy=sample_strategy,
    )
    batch = batch_windows(windows)
    metrics = primal_step(
        model, optimizer, dual, batch, train_state,
        dropout_gen=dropout_gen, entropy_gen=entropy_gen,
    )
    if dual is not None and not model.config.deterministic:
        dual_step(dual, metrics.entropy)
    return metrics
