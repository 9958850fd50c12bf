"""Pretrain / finetune / evaluate orchestration.

A run is described by one flat :class:`RunConfig`. The lifecycle:

1. ``pretrain``: fit the policy to an offline dataset by entropy-regularized
   sequence modeling (iterations of two-stage window sampling + one primal
   and one dual step each).
2. ``finetune``: seed a trajectory replay buffer from the dataset, then
   alternate exploration and training rounds. Each round collects one
   episode by *sampling* from the policy conditioned on an optimistic
   return target ``g_online``, relabels its conditioning stream with the
   returns actually achieved (hindsight, unless ablated), inserts it FIFO,
   and takes ``updates_per_round`` training iterations on the buffer.
3. ``evaluate``: greedy (mean-action) rollouts conditioned on ``g_eval``,
   run in lockstep batches for speed. Evaluation episodes never enter the
   buffer and never count toward online-sample totals.

Return conditioning at rollout time starts at the target and decrements by
the observed reward each step, so the remaining target always states what is
left to collect.

Randomness: every consumer draws from a named substream of the run seed
(see :mod:`odt_lab.rng`), with per-round or per-phase spawn indices, so
reruns are bit-identical and component behavior is independent of unrelated
code consuming randomness.

Run directory layout (all files optional except config.json):

- ``config.json``: the fully resolved config, written before execution.
- ``pretrain_log.csv`` / ``train_log.csv``: per-iteration step, loss, nll,
  entropy, lambda, grad norms (pre/post clip), lr.
- ``metrics.csv``: per-round summary (round, online_samples, eval_mean,
  eval_std, normalized, nll, entropy, lambda); eval columns are filled on
  evaluation rounds, the round-0 row records the pretrained policy.
- ``checkpoints/``: ``pretrained.npz`` and ``final.npz``.
- ``buffer.snapshot``: final replay buffer state.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import rng as rng_mod
from .envs import Env, EnvSpec, env_spec, make_env, normalized_score
from .policy import PolicyConfig, PolicyModel, act, save_checkpoint
from .replay import ReplayBuffer, as_records, init_random, init_top_n
from .train import (
    DualState,
    IterationMetrics,
    TrainState,
    _MomentOptimizer,
    make_optimizer,
    train_iteration,
)
from .trajectory import Trajectory, decrement_rtg


@dataclass
class RunConfig:
    """Flat description of a full run; JSON-serializable field for field.

    ``None`` values marked "resolved" are filled from the environment spec
    by :func:`resolve_config` before anything executes.
    """

    # task
    env: str = "pointctrl"
    dataset_quality: str = "medium"
    dataset_size: int = 200
    dataset_noise: float | None = None  # override the calibrated noise level
    dataset_path: str | None = None  # jsonl to load instead of generating
    seed: int = 0
    # model
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context_len: int = 20
    dropout_rate: float = 0.1
    use_positional_embedding: bool = True
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    deterministic_policy: bool = False
    rtg_scale: float | None = None  # resolved: expert return
    # optimization
    optimizer: str = "lamb"
    lr: float = 1e-4
    weight_decay: float = 5e-4
    warmup_steps: int = 10000
    grad_clip: float = 0.25
    batch_size: int = 64
    pretrain_iterations: int = 5000
    # entropy constraint
    beta: float | None = None  # resolved: -action_dim
    lambda_init: float = 1.0
    reset_dual_on_finetune: bool = False
    # online finetuning
    buffer_capacity: int = 100
    buffer_init: str = "top_n"  # or "random"
    sample_strategy: str = "length"  # or "return"
    rounds: int = 200
    updates_per_round: int = 300
    hindsight_relabel: bool = True
    g_online_mode: str = "fixed_scaled"  # or "curriculum"
    g_online_scale: float = 2.0
    g_online_percentile: float = 90.0
    exploration_context: int = 5
    # evaluation
    eval_interval: int = 10
    eval_episodes: int = 10
    eval_context: int = 5
    g_eval_scale: float = 1.0
    # execution
    strict_determinism: bool = False

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Fill environment-derived defaults and validate cross-field rules."""
    spec = env_spec(cfg.env)  # raises on unknown env name
    out = dataclasses.replace(cfg)
    if out.rtg_scale is None:
        out.rtg_scale = spec.expert_return
    if out.beta is None:
        out.beta = -float(spec.action_dim)
    if out.dataset_quality not in ("medium", "medium-replay"):
        raise ValueError(f"unknown dataset_quality {out.dataset_quality!r}")
    if out.buffer_init not in ("top_n", "random"):
        raise ValueError(f"unknown buffer_init {out.buffer_init!r}")
    if out.sample_strategy not in ("length", "return"):
        raise ValueError(f"unknown sample_strategy {out.sample_strategy!r}")
    if out.g_online_mode not in ("fixed_scaled", "curriculum"):
        raise ValueError(f"unknown g_online_mode {out.g_online_mode!r}")
    if out.optimizer not in ("lamb", "adamw"):
        raise ValueError(f"unknown optimizer {out.optimizer!r}")
    for name in ("batch_size", "buffer_capacity", "rounds", "updates_per_round",
                 "eval_episodes", "eval_context", "exploration_context", "eval_interval"):
        if getattr(out, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if out.eval_context > out.context_len or out.exploration_context > out.context_len:
        raise ValueError("rollout context lengths cannot exceed context_len")
    if not 0 <= out.g_online_percentile <= 100:
        raise ValueError("g_online_percentile must be in [0, 100]")
    if out.pretrain_iterations < 0 or out.dataset_size <= 0:
        raise ValueError("pretrain_iterations must be >= 0 and dataset_size > 0")
    return out


def apply_strict_determinism() -> None:
    """Pin torch to one thread so reductions have a fixed order."""
    torch.set_num_threads(1)


def policy_config(cfg: RunConfig, spec: EnvSpec) -> PolicyConfig:
    return PolicyConfig(
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        embed_dim=cfg.embed_dim,
        context_len=cfg.context_len,
        dropout_rate=cfg.dropout_rate,
        max_timestep=spec.max_episode_len,
        use_positional_embedding=cfg.use_positional_embedding,
        log_std_min=cfg.log_std_min,
        log_std_max=cfg.log_std_max,
        deterministic=cfg.deterministic_policy,
        rtg_scale=float(cfg.rtg_scale),
        action_low=spec.action_low,
        action_high=spec.action_high,
    )


def build_model(cfg: RunConfig, spec: EnvSpec) -> PolicyModel:
    return PolicyModel(
        policy_config(cfg, spec),
        init_gen=rng_mod.torch_generator(cfg.seed, "policy-init"),
    )


# ---------------------------------------------------------------------------
# Rollouts and evaluation
# ---------------------------------------------------------------------------


def rollout(
    env: Env,
    model: PolicyModel,
    g_init: float,
    mode: str,
    context: int,
    env_rng: np.random.Generator,
    action_gen: torch.Generator | None = None,
) -> tuple[Trajectory, np.ndarray]:
    """Play one episode conditioned on ``g_init``.

    Returns the trajectory plus the *intent* conditioning stream that drove
    it (``g`` before each step, decremented by observed rewards).
    """
    states: list[np.ndarray] = [env.reset(env_rng)]
    actions: list[np.ndarray] = []
    rewards: list[float] = []
    intents: list[float] = [float(g_init)]
    done = False
    while not done:
        t = len(actions)
        L = min(t + 1, context)
        a = act(
            model,
            states=np.asarray(states[t - L + 1 : t + 1]),
            actions=np.asarray(actions[t - L + 1 : t] if L > 1 else np.zeros((0, model.config.action_dim))),
            rtgs=np.asarray(intents[t - L + 1 : t + 1]),
            timesteps=np.arange(t - L + 1, t + 1),
            mode=mode,
            gen=action_gen,
        )
        state, reward, done = env.step(a)
        actions.append(a)
        rewards.append(float(reward))
        intents.append(decrement_rtg(intents[-1], reward))
        if not done:
            states.append(state)
    traj = Trajectory(
        states=np.asarray(states), actions=np.asarray(actions), rewards=np.asarray(rewards)
    )
    return traj, np.asarray(intents[: len(traj)])


@dataclass
class EvalReport:
    n_episodes: int
    mean_return: float
    std_return: float
    normalized: float
    mean_length: float
    returns: list[float] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def evaluate(
    model: PolicyModel,
    env_name: str,
    g_eval: float,
    n_episodes: int,
    context: int,
    eval_rng: np.random.Generator,
    spec: EnvSpec | None = None,
) -> EvalReport:
    """Greedy evaluation, ``n_episodes`` run in lockstep with batched forwards.

    All live episodes share the same history length at a given step, so one
    batched forward serves them all; finished episodes drop out.
    """
    spec = spec or env_spec(env_name)
    envs = [make_env(env_name) for _ in range(n_episodes)]
    states = [[env.reset(eval_rng)] for env in envs]
    actions: list[list[np.ndarray]] = [[] for _ in envs]
    rewards: list[list[float]] = [[] for _ in envs]
    intents = [[float(g_eval)] for _ in envs]
    live = list(range(n_episodes))
    t = 0
    A = model.config.action_dim
    while live:
        L = min(t + 1, context)
        lo = t - L + 1
        batch_states = np.stack([states[i][lo : t + 1] for i in live])
        batch_actions = np.zeros((len(live), L, A))
        if L > 1:
            for row, i in enumerate(live):
                batch_actions[row, : L - 1] = actions[i][lo:t]
        batch = _window_batch_from_history(
            batch_states, batch_actions,
            np.stack([intents[i][lo : t + 1] for i in live]),
            np.arange(lo, t + 1),
        )
        with torch.no_grad():
            if model.config.deterministic:
                a_all = model.forward_deterministic(batch)[:, L - 1].numpy()
            else:
                a_all = model.forward(batch).mean[:, L - 1].numpy()
        a_all = np.clip(a_all, model.config.action_low, model.config.action_high)
        next_live = []
        for row, i in enumerate(live):
            state, reward, done = envs[i].step(a_all[row])
            actions[i].append(a_all[row])
            rewards[i].append(float(reward))
            intents[i].append(decrement_rtg(intents[i][-1], reward))
            if not done:
                states[i].append(state)
                next_live.append(i)
        live = next_live
        t += 1
    rets = [float(np.sum(r)) for r in rewards]
    mean = float(np.mean(rets))
    return EvalReport(
        n_episodes=n_episodes,
        mean_return=mean,
        std_return=float(np.std(rets)),
        normalized=normalized_score(spec, mean),
        mean_length=float(np.mean([len(r) for r in rewards])),
        returns=rets,
    )


def _window_batch_from_history(states, actions, rtgs, timesteps):
    from .policy import WindowBatch

    B, L = rtgs.shape
    return WindowBatch(
        states=torch.tensor(states, dtype=torch.float64),
        actions=torch.tensor(actions, dtype=torch.float64),
        rtgs=torch.tensor(rtgs, dtype=torch.float64),
        timesteps=torch.tensor(np.broadcast_to(timesteps, (B, L)).copy(), dtype=torch.long),
        mask=torch.ones(B, L, dtype=torch.bool),
    )


def sweep_rtg(
    model: PolicyModel,
    env_name: str,
    grid: list[float],
    n_episodes: int,
    context: int,
    seed: int,
    spec: EnvSpec | None = None,
) -> list[dict[str, float]]:
    """Evaluate across a grid of return targets.

    Paired design: every grid point replays the same evaluation episodes
    (same reset stream), so differences between rows reflect the
    conditioning value rather than episode-set variation.
    """
    rows = []
    for g in grid:
        report = evaluate(
            model, env_name, float(g), n_episodes, context,
            rng_mod.np_rng(seed, "eval", 1000), spec=spec,
        )
        rows.append(
            {"g_eval": float(g), "mean_return": report.mean_return,
             "std_return": report.std_return, "normalized": report.normalized}
        )
    return rows


def g_online_schedule(cfg: RunConfig, spec: EnvSpec, buffer: ReplayBuffer) -> float:
    """Exploration return target for the next collection round.

    ``fixed_scaled``: a constant multiple of expert return (optimistic
    extrapolation). ``curriculum``: a percentile (linear interpolation) of
    current buffer returns, so the target tracks achieved competence.
    """
    if cfg.g_online_mode == "fixed_scaled":
        return cfg.g_online_scale * spec.expert_return
    if len(buffer) == 0:
        raise ValueError("curriculum schedule needs a non-empty buffer")
    return float(np.percentile(buffer.returns(), cfg.g_online_percentile))


# ---------------------------------------------------------------------------
# CSV / JSON artifacts
# ---------------------------------------------------------------------------

TRAIN_LOG_COLUMNS = ["step", "loss", "nll", "entropy", "lambda",
                     "grad_norm_pre", "grad_norm_post", "lr"]
METRICS_COLUMNS = ["round", "online_samples", "eval_mean", "eval_std",
                   "normalized", "nll", "entropy", "lambda"]


def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


class _CsvLog:
    def __init__(self, path: Path | None, columns: list[str]):
        self.rows: list[dict[str, Any]] = []
        self.columns = columns
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(columns)

    def write(self, row: dict[str, Any]) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row.get(c)) for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _log_iteration(log: _CsvLog, m: IterationMetrics) -> None:
    log.write(
        {
            "step": m.step,
            "loss": m.loss,
            "nll": m.nll,
            "entropy": m.entropy,
            "lambda": m.lam,
            "grad_norm_pre": m.grad_norm_pre,
            "grad_norm_post": m.grad_norm_post,
            "lr": m.lr,
        }
    )


def init_run_dir(cfg: RunConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: PolicyModel
    dual: DualState
    optimizer: _MomentOptimizer
    train_state: TrainState
    report: EvalReport
    log_rows: list[dict[str, Any]]


def pretrain(
    cfg: RunConfig,
    dataset: list[Trajectory],
    run_dir: Path | None = None,
    evaluate_after: bool = True,
) -> PretrainResult:
    """Offline stage: fit the policy to the dataset, then evaluate it."""
    cfg = resolve_config(cfg)
    spec = env_spec(cfg.env)
    model = build_model(cfg, spec)
    dual = DualState(log_lambda=math.log(cfg.lambda_init), beta=float(cfg.beta))
    optimizer = make_optimizer(cfg.optimizer, model, cfg.lr, cfg.weight_decay)
    train_state = TrainState(base_lr=cfg.lr, warmup_steps=cfg.warmup_steps,
                             grad_clip=cfg.grad_clip)
    records = as_records(dataset)
    sampler = rng_mod.np_rng(cfg.seed, "sampler", 0)
    dropout_gen = rng_mod.torch_generator(cfg.seed, "dropout", 0)
    entropy_gen = rng_mod.torch_generator(cfg.seed, "entropy", 0)
    use_dual = not cfg.deterministic_policy

    log = _CsvLog(run_dir / "pretrain_log.csv" if run_dir else None, TRAIN_LOG_COLUMNS)
    try:
        for _ in range(cfg.pretrain_iterations):
            m = train_iteration(
                model, optimizer, dual if use_dual else None, records, train_state,
                cfg.batch_size, sampler, dropout_gen=dropout_gen, entropy_gen=entropy_gen,
            )
            _log_iteration(log, m)
    finally:
        log.close()

    if evaluate_after:
        report = evaluate(
            model, cfg.env, cfg.g_eval_scale * spec.expert_return,
            cfg.eval_episodes, cfg.eval_context, rng_mod.np_rng(cfg.seed, "eval", 0),
            spec=spec,
        )
    else:
        report = EvalReport(0, float("nan"), float("nan"), float("nan"), float("nan"))
    if run_dir is not None:
        save_checkpoint(
            run_dir / "checkpoints" / "pretrained.npz",
            model,
            step=train_state.step,
            dual=dual.to_dict(),
            optimizer_state=optimizer.state_export(),
            dropout_gen=dropout_gen,
            extra={"stage": "pretrain", "env": cfg.env},
        )
        with open(run_dir / "pretrain_eval.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    return PretrainResult(model, dual, optimizer, train_state, report, log.rows)


@dataclass
class FinetuneResult:
    model: PolicyModel
    dual: DualState
    buffer: ReplayBuffer
    report: EvalReport  # final evaluation
    first_report: EvalReport  # round-0 (pre-finetune) evaluation
    metrics_rows: list[dict[str, Any]]
    online_samples: int


def finetune(
    cfg: RunConfig,
    model: PolicyModel,
    dual: DualState,
    optimizer: _MomentOptimizer,
    train_state: TrainState,
    dataset: list[Trajectory],
    run_dir: Path | None = None,
) -> FinetuneResult:
    """Online stage: explore / relabel / replay / update, round by round."""
    cfg = resolve_config(cfg)
    spec = env_spec(cfg.env)
    if cfg.reset_dual_on_finetune:
        dual = DualState(log_lambda=math.log(cfg.lambda_init), beta=float(cfg.beta))
    if cfg.buffer_init == "top_n":
        buffer = init_top_n(dataset, cfg.buffer_capacity)
    else:
        buffer = init_random(dataset, cfg.buffer_capacity, rng_mod.np_rng(cfg.seed, "sampler", 2))
    use_dual = not cfg.deterministic_policy

    sampler = rng_mod.np_rng(cfg.seed, "sampler", 1)
    dropout_gen = rng_mod.torch_generator(cfg.seed, "dropout", 1)
    entropy_gen = rng_mod.torch_generator(cfg.seed, "entropy", 1)
    env = make_env(cfg.env)
    g_eval = cfg.g_eval_scale * spec.expert_return

    metrics = _CsvLog(run_dir / "metrics.csv" if run_dir else None, METRICS_COLUMNS)
    log = _CsvLog(run_dir / "train_log.csv" if run_dir else None, TRAIN_LOG_COLUMNS)
    online_samples = 0

    first_report = evaluate(
        model, cfg.env, g_eval, cfg.eval_episodes, cfg.eval_context,
        rng_mod.np_rng(cfg.seed, "eval", 1, 0), spec=spec,
    )
    metrics.write(
        {
            "round": 0,
            "online_samples": 0,
            "eval_mean": first_report.mean_return,
            "eval_std": first_report.std_return,
            "normalized": first_report.normalized,
        }
    )
    report = first_report
    try:
        for rnd in range(1, cfg.rounds + 1):
            g_online = g_online_schedule(cfg, spec, buffer)
            traj, intent = rollout(
                env, model, g_online, mode="sample", context=cfg.exploration_context,
                env_rng=rng_mod.np_rng(cfg.seed, "env", rnd),
                action_gen=rng_mod.torch_generator(cfg.seed, "exploration", rnd),
            )
            online_samples += len(traj)
            buffer.insert_fifo(traj, rtgs=None if cfg.hindsight_relabel else intent)

            nlls, ents, lam = [], [], float("nan")
            for _ in range(cfg.updates_per_round):
                m = train_iteration(
                    model, optimizer, dual if use_dual else None,
                    buffer.records, train_state, cfg.batch_size, sampler,
                    dropout_gen=dropout_gen, entropy_gen=entropy_gen,
                    sample_strategy=cfg.sample_strategy,
                )
                _log_iteration(log, m)
                nlls.append(m.nll)
                ents.append(m.entropy)
                lam = m.lam
            row: dict[str, Any] = {
                "round": rnd,
                "online_samples": online_samples,
                "nll": float(np.mean(nlls)) if nlls else float("nan"),
                "entropy": float(np.mean(ents)) if ents else float("nan"),
                "lambda": lam,
            }
            if rnd % cfg.eval_interval == 0 or rnd == cfg.rounds:
                report = evaluate(
                    model, cfg.env, g_eval, cfg.eval_episodes, cfg.eval_context,
                    rng_mod.np_rng(cfg.seed, "eval", 1, rnd), spec=spec,
                )
                row.update(
                    eval_mean=report.mean_return,
                    eval_std=report.std_return,
                    normalized=report.normalized,
                )
            metrics.write(row)
    finally:
        metrics.close()
        log.close()

    if run_dir is not None:
        save_checkpoint(
            run_dir / "checkpoints" / "final.npz",
            model,
            step=train_state.step,
            dual=dual.to_dict(),
            optimizer_state=optimizer.state_export(),
            dropout_gen=dropout_gen,
            extra={"stage": "finetune", "env": cfg.env,
                   "online_samples": online_samples},
        )
        buffer.save_snapshot(run_dir / "buffer.snapshot")
    return FinetuneResult(
        model=model,
        dual=dual,
        buffer=buffer,
        report=report,
        first_report=first_report,
        metrics_rows=metrics.rows,
        online_samples=online_samples,
    )


def load_or_generate_dataset(cfg: RunConfig, run_dir: Path | None = None) -> list[Trajectory]:
    """Dataset from ``dataset_path`` if set, else generated from the config."""
    from .trajectory import load_jsonl, save_jsonl

    if cfg.dataset_path:
        path = Path(cfg.dataset_path)
        if not path.exists():
            raise FileNotFoundError(f"dataset_path does not exist: {path}")
        return load_jsonl(path)
    data = generate_dataset(cfg)
    if run_dir is not None:
        save_jsonl(data, run_dir / "dataset.jsonl")
    return data


def generate_dataset(cfg: RunConfig) -> list[Trajectory]:
    from .envs import generate_offline_dataset

    return generate_offline_dataset(
        make_env(cfg.env), cfg.dataset_quality, cfg.dataset_size,
        rng_mod.np_rng(cfg.seed, "data"), noise_scale=cfg.dataset_noise,
    )
