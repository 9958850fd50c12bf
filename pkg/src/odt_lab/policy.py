"""Return-conditioned causal-transformer policy with a Gaussian action head.

Sequence layout: each timestep t contributes three tokens, in order
(return-to-go g_t, state s_t, action a_t), interleaved into a length-3K
sequence. A GPT-style causal transformer (pre-LN blocks: ``x += attn(ln1(x))``
then ``x += mlp(ln2(x))``) processes the sequence; the action distribution
for timestep t is read at the *state* token, so it conditions on
(g_1, s_1, a_1, ..., g_t, s_t) but never on a_t or anything later.

The stochastic head outputs a diagonal Gaussian: a mean and a log standard
deviation clamped to configured bounds. There is no tanh squashing; sampled
actions are clamped to the action box only at the environment boundary
(inside :func:`act`), so log-probabilities stay exact. Output heads are
zero-initialized with biases (0, -1): a fresh model proposes
N(0, e^{-1}) for every input, making early training insensitive to
token-embedding scale.

Initialization, dropout, and the one-sample entropy estimator all consume
explicit ``torch.Generator`` streams, never global torch RNG state, so runs
are reproducible under any interleaving of other torch code.

Checkpoints are ``.npz`` archives holding the JSON-encoded config, every
parameter as a named float64 array, the dropout generator state, the step
counter, and optionally optimizer/temperature state. Reloading reconstructs
the model solely from the archive and round-trips evaluation behavior
bit-for-bit on the same machine.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .trajectory import TrainingWindow


@dataclass
class PolicyConfig:
    state_dim: int
    action_dim: int
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context_len: int = 20
    dropout_rate: float = 0.1
    max_timestep: int = 100
    use_positional_embedding: bool = True
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    deterministic: bool = False
    rtg_scale: float = 1.0
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")
        if self.rtg_scale == 0.0:
            raise ValueError("rtg_scale must be nonzero")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PolicyConfig":
        return cls(**d)


@dataclass
class WindowBatch:
    """Stacked training windows as torch tensors."""

    states: torch.Tensor  # (B, K, S) float
    actions: torch.Tensor  # (B, K, A) float
    rtgs: torch.Tensor  # (B, K) float
    timesteps: torch.Tensor  # (B, K) long
    mask: torch.Tensor  # (B, K) bool


@dataclass
class GaussianBatch:
    """Diagonal Gaussian action distributions at every window position."""

    mean: torch.Tensor  # (B, K, A)
    log_std: torch.Tensor  # (B, K, A)
    mask: torch.Tensor  # (B, K) bool


def batch_windows(
    windows: list[TrainingWindow], dtype: torch.dtype = torch.float64
) -> WindowBatch:
    return WindowBatch(
        states=torch.tensor(np.stack([w.states for w in windows]), dtype=dtype),
        actions=torch.tensor(np.stack([w.actions for w in windows]), dtype=dtype),
        rtgs=torch.tensor(np.stack([w.rtgs for w in windows]), dtype=dtype),
        timesteps=torch.tensor(np.stack([w.timesteps for w in windows]), dtype=torch.long),
        mask=torch.tensor(np.stack([w.mask for w in windows]), dtype=torch.bool),
    )


def _dropout(x: torch.Tensor, p: float, train_mode: bool, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator (never global RNG)."""
    if not train_mode or p <= 0.0:
        return x
    if gen is None:
        raise ValueError("train-mode dropout requires an explicit torch.Generator")
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class _Attention(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.n_heads = cfg.n_heads
        self.dropout_rate = cfg.dropout_rate

    def forward(self, x, train_mode, gen):
        B, T, D = x.shape
        hs = D // self.n_heads
        q, k, v = self.qkv(x).split(D, dim=2)
        q = q.view(B, T, self.n_heads, hs).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hs).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hs).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / (hs**0.5)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        att = att.masked_fill(~causal, float("-inf"))
        att = torch.softmax(att, dim=-1)
        att = _dropout(att, self.dropout_rate, train_mode, gen)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return _dropout(self.proj(y), self.dropout_rate, train_mode, gen)


class _Mlp(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.embed_dim, 4 * cfg.embed_dim)
        self.proj = nn.Linear(4 * cfg.embed_dim, cfg.embed_dim)
        self.dropout_rate = cfg.dropout_rate

    def forward(self, x, train_mode, gen):
        return _dropout(
            self.proj(torch.relu(self.fc(x))), self.dropout_rate, train_mode, gen
        )


class _Block(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = _Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = _Mlp(cfg)

    def forward(self, x, train_mode, gen):
        x = x + self.attn(self.ln1(x), train_mode, gen)
        x = x + self.mlp(self.ln2(x), train_mode, gen)
        return x


class PolicyModel(nn.Module):
    def __init__(self, config: PolicyConfig, init_gen: torch.Generator | None = None):
        super().__init__()
        self.config = config
        D = config.embed_dim
        self.embed_state = nn.Linear(config.state_dim, D)
        self.embed_action = nn.Linear(config.action_dim, D)
        self.embed_rtg = nn.Linear(1, D)
        if config.use_positional_embedding:
            self.embed_time = nn.Embedding(config.max_timestep, D)
        self.embed_ln = nn.LayerNorm(D)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(D)
        self.head_mean = nn.Linear(D, config.action_dim)
        self.head_logstd = nn.Linear(D, config.action_dim)
        self.to(torch.float64)
        self._init_weights(init_gen)

    def _init_weights(self, gen: torch.Generator | None) -> None:
        """Documented scheme: N(0, 0.02) weights, zero biases, unit
        LayerNorms, and zero output heads with biases (mean 0, log_std -1).

        Parameters are visited in registration order, each drawn from the
        explicit generator, so a given seed pins every weight.
        """
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith(("head_mean", "head_logstd")):
                    p.zero_()
                elif "ln" in name.split(".")[-2] or name.startswith("embed_ln"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=gen)
            self.head_logstd.bias.fill_(-1.0)

    # -- core forward --------------------------------------------------------

    def forward_hidden(
        self, batch: WindowBatch, train_mode: bool = False, gen: torch.Generator | None = None
    ) -> torch.Tensor:
        """Hidden states at state-token positions, shape (B, K, D)."""
        cfg = self.config
        B, K = batch.rtgs.shape
        if K > cfg.context_len:
            raise ValueError(f"window length {K} exceeds context_len {cfg.context_len}")
        if K == 0:
            raise ValueError("empty window")
        g_tok = self.embed_rtg((batch.rtgs / cfg.rtg_scale).unsqueeze(-1))
        s_tok = self.embed_state(batch.states)
        a_tok = self.embed_action(batch.actions)
        if cfg.use_positional_embedding:
            t_idx = batch.timesteps.clamp(0, cfg.max_timestep - 1)
            pos = self.embed_time(t_idx)
            g_tok = g_tok + pos
            s_tok = s_tok + pos
            a_tok = a_tok + pos
        x = torch.stack([g_tok, s_tok, a_tok], dim=2).reshape(B, 3 * K, cfg.embed_dim)
        x = self.embed_ln(x)
        x = _dropout(x, cfg.dropout_rate, train_mode, gen)
        for block in self.blocks:
            x = block(x, train_mode, gen)
        x = self.ln_f(x)
        return x[:, 1::3]

    def forward(
        self, batch: WindowBatch, train_mode: bool = False, gen: torch.Generator | None = None
    ) -> GaussianBatch:
        """Action distributions at every position (state-token readout)."""
        if self.config.deterministic:
            raise RuntimeError(
                "deterministic policy has no action distribution; "
                "use forward_deterministic"
            )
        h = self.forward_hidden(batch, train_mode, gen)
        mean = self.head_mean(h)
        log_std = self.head_logstd(h).clamp(self.config.log_std_min, self.config.log_std_max)
        return GaussianBatch(mean=mean, log_std=log_std, mask=batch.mask)

    def forward_deterministic(
        self, batch: WindowBatch, train_mode: bool = False, gen: torch.Generator | None = None
    ) -> torch.Tensor:
        """Mean-head actions (B, K, A); the deterministic variant's output.

        On a stochastic model this equals the Gaussian mean, so the two
        variants agree whenever their trunks share weights.
        """
        return self.head_mean(self.forward_hidden(batch, train_mode, gen))


# ---------------------------------------------------------------------------
# Distribution ops
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def _masked_mean(per_position: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count == 0:
        raise ValueError("no valid positions in batch")
    return (per_position * mask.to(per_position.dtype)).sum() / count


def log_prob(dist: GaussianBatch, actions: torch.Tensor) -> torch.Tensor:
    """Mean log-likelihood per valid position (scalar, differentiable).

    Per position, the diagonal-Gaussian log density is summed over action
    dimensions; the batch statistic is the mean over unmasked positions, so
    gradients are insensitive to how much padding a batch happens to carry.
    """
    z = (actions - dist.mean) * torch.exp(-dist.log_std)
    per_pos = (-0.5 * z * z - dist.log_std - 0.5 * _LOG_2PI).sum(dim=-1)
    value = _masked_mean(per_pos, dist.mask)
    if not torch.isfinite(value):
        raise ValueError(f"non-finite log-probability: {value.item()}")
    return value


def entropy_one_sample(dist: GaussianBatch, gen: torch.Generator) -> torch.Tensor:
    """One-sample reparameterized entropy estimate (scalar, differentiable).

    Draws a = mean + std * eps with eps ~ N(0, I) and returns the masked
    mean of -log pi(a). Expectation equals the true entropy; because the
    sample is a pathwise function of the parameters, the estimator's
    gradient reduces analytically to the exact entropy gradient (the
    mean-path terms cancel), so a single sample is low variance.
    """
    eps = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype)
    # -log pi(mean + std*eps) per dimension: 0.5*eps^2 + log_std + 0.5*log(2pi)
    per_pos = (0.5 * eps * eps + dist.log_std + 0.5 * _LOG_2PI).sum(dim=-1)
    return _masked_mean(per_pos, dist.mask)


def act(
    model: PolicyModel,
    states: np.ndarray,
    actions: np.ndarray,
    rtgs: np.ndarray,
    timesteps: np.ndarray,
    mode: str = "mean",
    gen: torch.Generator | None = None,
) -> np.ndarray:
    """Action for the latest state given up to context_len steps of history.

    ``states`` (L, S), ``rtgs`` (L,), ``timesteps`` (L,) cover the current
    step; ``actions`` (L-1, A) are the earlier actions (the current one is
    what we are computing, and its token slot is zero-filled). ``mode`` is
    "mean" or "sample"; sampling draws from the explicit generator. The
    result is clamped to the action box: this is the environment boundary,
    the only place clamping happens.
    """
    cfg = model.config
    states = np.asarray(states, dtype=np.float64)
    L = states.shape[0]
    if L == 0:
        raise ValueError("act needs at least the current state")
    if L > cfg.context_len:
        raise ValueError(f"history length {L} exceeds context_len {cfg.context_len}")
    if np.asarray(actions).shape[0] != L - 1:
        raise ValueError(f"expected {L - 1} past actions, got {np.asarray(actions).shape[0]}")
    padded_actions = np.zeros((L, cfg.action_dim))
    if L > 1:
        padded_actions[: L - 1] = actions
    batch = WindowBatch(
        states=torch.tensor(states[None], dtype=torch.float64),
        actions=torch.tensor(padded_actions[None], dtype=torch.float64),
        rtgs=torch.tensor(np.asarray(rtgs, dtype=np.float64)[None]),
        timesteps=torch.tensor(np.asarray(timesteps, dtype=np.int64)[None]),
        mask=torch.ones(1, L, dtype=torch.bool),
    )
    with torch.no_grad():
        if cfg.deterministic:
            a = model.forward_deterministic(batch)[0, L - 1]
        else:
            dist = model.forward(batch)
            mean = dist.mean[0, L - 1]
            if mode == "mean":
                a = mean
            elif mode == "sample":
                if gen is None:
                    raise ValueError("sample mode requires an explicit torch.Generator")
                std = torch.exp(dist.log_std[0, L - 1])
                a = mean + std * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
            else:
                raise ValueError(f"unknown act mode {mode!r}")
    return np.clip(a.numpy(), cfg.action_low, cfg.action_high)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: PolicyModel,
    step: int = 0,
    dual: dict[str, float] | None = None,
    optimizer_state: dict[str, dict[str, np.ndarray]] | None = None,
    dropout_gen: torch.Generator | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().numpy().astype(np.float64)
    if optimizer_state:
        for slot, tensors in optimizer_state.items():
            for name, arr in tensors.items():
                arrays[f"opt/{slot}/{name}"] = np.asarray(arr, dtype=np.float64)
    if dropout_gen is not None:
        arrays["rng/dropout"] = dropout_gen.get_state().numpy()
    meta = {
        "format": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "dual": dual,
        "extra": extra or {},
        "has_optimizer": bool(optimizer_state),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    model: PolicyModel
    config: PolicyConfig
    step: int
    dual: dict[str, float] | None
    optimizer_state: dict[str, dict[str, np.ndarray]] | None
    dropout_state: np.ndarray | None
    extra: dict[str, Any]


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path)) as data:
        if "meta" not in data:
            raise ValueError(f"{path}: not a policy checkpoint (missing meta)")
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        config = PolicyConfig.from_dict(meta["config"])
        model = PolicyModel(config)
        state = {
            name[len("param/"):]: torch.tensor(data[name], dtype=torch.float64)
            for name in data.files
            if name.startswith("param/")
        }
        model.load_state_dict(state)
        optimizer_state: dict[str, dict[str, np.ndarray]] | None = None
        if meta.get("has_optimizer"):
            optimizer_state = {}
            for name in data.files:
                if name.startswith("opt/"):
                    _, slot, pname = name.split("/", 2)
                    optimizer_state.setdefault(slot, {})[pname] = data[name].copy()
        dropout_state = data["rng/dropout"].copy() if "rng/dropout" in data else None
    return Checkpoint(
        model=model,
        config=config,
        step=meta["step"],
        dual=meta.get("dual"),
        optimizer_state=optimizer_state,
        dropout_state=dropout_state,
        extra=meta.get("extra", {}),
    )


def restore_generator(state: np.ndarray) -> torch.Generator:
    gen = torch.Generator()
    gen.set_state(torch.tensor(state, dtype=torch.uint8))
    return gen
