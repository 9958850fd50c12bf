"""Transformer policy: forward oracle, causality, distribution ops, checkpoints."""

import dataclasses

import numpy as np
import pytest
import torch
from scipy import stats

from odt_lab import rng as rng_mod
from odt_lab.policy import (
    GaussianBatch,
    PolicyConfig,
    PolicyModel,
    WindowBatch,
    act,
    batch_windows,
    entropy_one_sample,
    load_checkpoint,
    log_prob,
    restore_generator,
    save_checkpoint,
)
from odt_lab.trajectory import TrainingWindow

from reference_model import reference_forward


def tiny_config(**overrides):
    base = dict(
        state_dim=3,
        action_dim=2,
        n_layers=1,
        n_heads=1,
        embed_dim=8,
        context_len=4,
        dropout_rate=0.0,
        max_timestep=50,
    )
    base.update(overrides)
    return PolicyConfig(**base)


def randomize_weights(model, seed=0, std=0.5):
    """Give every parameter (including the zero-init heads) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, std, generator=gen)
    return model


def random_batch(cfg, B=2, K=None, seed=0, mask_tail=0):
    rng = np.random.default_rng(seed)
    K = K or cfg.context_len
    windows = []
    for _ in range(B):
        mask = np.ones(K, dtype=bool)
        if mask_tail:
            mask[-mask_tail:] = False
        windows.append(
            TrainingWindow(
                states=rng.normal(size=(K, cfg.state_dim)),
                actions=rng.normal(size=(K, cfg.action_dim)),
                rtgs=rng.normal(size=K),
                timesteps=rng.integers(0, cfg.max_timestep, size=K).astype(np.int64),
                mask=mask,
            )
        )
    return batch_windows(windows)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def test_fresh_model_outputs_zero_mean_logstd_minus_one():
    cfg = tiny_config()
    model = PolicyModel(cfg, init_gen=torch.Generator().manual_seed(1))
    batch = random_batch(cfg, B=3, seed=1)
    dist = model.forward(batch)
    assert torch.all(dist.mean == 0.0)
    assert torch.all(dist.log_std == -1.0)


def test_init_is_seed_deterministic():
    cfg = tiny_config()
    m1 = PolicyModel(cfg, init_gen=rng_mod.torch_generator(5, "policy-init"))
    m2 = PolicyModel(cfg, init_gen=rng_mod.torch_generator(5, "policy-init"))
    m3 = PolicyModel(cfg, init_gen=rng_mod.torch_generator(6, "policy-init"))
    for (n1, p1), (_, p2), (_, p3) in zip(
        m1.named_parameters(), m2.named_parameters(), m3.named_parameters()
    ):
        assert torch.equal(p1, p2), n1
        if p1.numel() and "head" not in n1 and "ln" not in n1 and not n1.endswith("bias"):
            assert not torch.equal(p1, p3), n1


def test_layernorms_start_at_identity():
    model = PolicyModel(tiny_config())
    assert torch.all(model.embed_ln.weight == 1.0)
    assert torch.all(model.embed_ln.bias == 0.0)
    assert torch.all(model.blocks[0].ln1.weight == 1.0)


# ---------------------------------------------------------------------------
# Forward oracle
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        tiny_config(context_len=2, embed_dim=8),
        tiny_config(n_layers=2, n_heads=2, embed_dim=16, context_len=3, rtg_scale=7.5),
        tiny_config(use_positional_embedding=False),
    ],
    ids=["1l1h-d8", "2l2h-d16-rtgscale", "no-posemb"],
)
def test_forward_matches_straightline_reference(cfg):
    model = randomize_weights(PolicyModel(cfg), seed=3)
    batch = random_batch(cfg, B=3, seed=4)
    dist = model.forward(batch)
    params = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    for b in range(3):
        means, log_stds = reference_forward(
            params,
            cfg,
            batch.states[b].numpy(),
            batch.actions[b].numpy(),
            batch.rtgs[b].numpy(),
            batch.timesteps[b].numpy(),
        )
        np.testing.assert_allclose(dist.mean[b].detach().numpy(), means, atol=1e-6)
        np.testing.assert_allclose(dist.log_std[b].detach().numpy(), log_stds, atol=1e-6)


def test_logstd_clamped_to_bounds():
    cfg = tiny_config(log_std_min=-1.5, log_std_max=0.5)
    model = randomize_weights(PolicyModel(cfg), seed=5, std=3.0)
    dist = model.forward(random_batch(cfg, B=4, seed=6))
    assert torch.all(dist.log_std >= -1.5)
    assert torch.all(dist.log_std <= 0.5)


# ---------------------------------------------------------------------------
# Causality
# ---------------------------------------------------------------------------


def perturbed(batch, field, pos, delta=1.0):
    tensors = dataclasses.asdict(batch)
    tensors = {k: v.clone() for k, v in tensors.items()}
    tensors[field][0, pos] += delta
    return WindowBatch(**tensors)


def test_future_state_cannot_influence_past():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=7)
    batch = random_batch(cfg, B=1, seed=8)
    t = 2
    base = model.forward(batch).mean
    poked = model.forward(perturbed(batch, "states", t)).mean
    assert torch.equal(base[:, :t], poked[:, :t])
    assert not torch.equal(base[:, t:], poked[:, t:])


def test_same_step_return_conditions_action():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=9)
    batch = random_batch(cfg, B=1, seed=10)
    t = 1
    base = model.forward(batch).mean
    poked = model.forward(perturbed(batch, "rtgs", t)).mean
    # g_t precedes s_t in the token stream: position t sees the change,
    # earlier positions cannot.
    assert torch.equal(base[:, :t], poked[:, :t])
    assert not torch.equal(base[:, t], poked[:, t])


def test_own_action_hidden_from_same_step():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=11)
    batch = random_batch(cfg, B=1, seed=12)
    t = 1
    base = model.forward(batch).mean
    poked = model.forward(perturbed(batch, "actions", t)).mean
    # a_t's token comes after the state-token readout of step t.
    assert torch.equal(base[:, : t + 1], poked[:, : t + 1])
    assert not torch.equal(base[:, t + 1 :], poked[:, t + 1 :])


def test_padded_garbage_cannot_leak_into_real_positions():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=13)
    batch = random_batch(cfg, B=2, seed=14, mask_tail=2)
    poked = WindowBatch(
        states=batch.states.clone(),
        actions=batch.actions.clone(),
        rtgs=batch.rtgs.clone(),
        timesteps=batch.timesteps.clone(),
        mask=batch.mask.clone(),
    )
    poked.states[:, -2:] = 1e6
    poked.actions[:, -2:] = -1e6
    poked.rtgs[:, -2:] = 1e6
    d1 = model.forward(batch)
    d2 = model.forward(poked)
    real = batch.mask
    assert torch.equal(d1.mean[real], d2.mean[real])

    a1 = log_prob(d1, batch.actions)
    a2 = log_prob(d2, poked.actions)
    assert torch.equal(a1, a2)


def test_padded_positions_contribute_zero_gradient():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=15)
    batch = random_batch(cfg, B=2, seed=16, mask_tail=1)
    poked = WindowBatch(
        states=batch.states.clone(),
        actions=batch.actions.clone(),
        rtgs=batch.rtgs.clone(),
        timesteps=batch.timesteps.clone(),
        mask=batch.mask.clone(),
    )
    poked.states[:, -1:] += 123.0

    grads = []
    for b in (batch, poked):
        model.zero_grad()
        (-log_prob(model.forward(b), b.actions)).backward()
        grads.append({n: p.grad.clone() for n, p in model.named_parameters()})
    for name in grads[0]:
        assert torch.equal(grads[0][name], grads[1][name]), name


# ---------------------------------------------------------------------------
# Distribution ops
# ---------------------------------------------------------------------------


def manual_dist(mean, log_std, mask):
    return GaussianBatch(
        mean=torch.tensor(mean, dtype=torch.float64),
        log_std=torch.tensor(log_std, dtype=torch.float64),
        mask=torch.tensor(mask, dtype=torch.bool),
    )


def test_log_prob_matches_scipy():
    rng = np.random.default_rng(17)
    mean = rng.normal(size=(2, 3, 2))
    log_std = rng.normal(size=(2, 3, 2)) * 0.3
    actions = rng.normal(size=(2, 3, 2))
    mask = np.array([[True, True, False], [True, False, False]])
    dist = manual_dist(mean, log_std, mask)
    got = log_prob(dist, torch.tensor(actions, dtype=torch.float64)).item()
    per_pos = stats.norm.logpdf(actions, loc=mean, scale=np.exp(log_std)).sum(axis=-1)
    want = per_pos[mask].mean()
    assert got == pytest.approx(want, rel=1e-12)


def test_log_prob_rejects_nonfinite():
    dist = manual_dist(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)), [[True]])
    with pytest.raises(ValueError, match="non-finite"):
        log_prob(dist, torch.tensor([[[np.inf, 0.0]]], dtype=torch.float64))


def test_log_prob_rejects_fully_masked_batch():
    dist = manual_dist(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), [[False, False]])
    with pytest.raises(ValueError, match="no valid positions"):
        log_prob(dist, torch.zeros(1, 2, 2, dtype=torch.float64))


def test_entropy_estimator_unbiased_for_known_gaussian():
    # Closed form: H = sum_d (log sigma_d + 0.5*(1 + log 2pi)).
    log_std = np.array([[[0.3, -0.7]]])
    dist = manual_dist(np.ones((1, 1, 2)) * 5.0, log_std, [[True]])
    closed = (log_std + 0.5 * (1.0 + np.log(2 * np.pi))).sum()
    gen = torch.Generator().manual_seed(18)
    draws = [entropy_one_sample(dist, gen).item() for _ in range(4000)]
    assert np.mean(draws) == pytest.approx(closed, rel=0.02)


def test_entropy_estimator_independent_of_mean():
    log_std = np.array([[[0.1, 0.2]]])
    d1 = manual_dist(np.zeros((1, 1, 2)), log_std, [[True]])
    d2 = manual_dist(np.full((1, 1, 2), 100.0), log_std, [[True]])
    h1 = entropy_one_sample(d1, torch.Generator().manual_seed(19))
    h2 = entropy_one_sample(d2, torch.Generator().manual_seed(19))
    assert torch.equal(h1, h2)


def test_entropy_gradient_matches_exact_entropy_gradient():
    """The pathwise estimator's gradient w.r.t. log_std is exactly 1 per
    dimension (per valid position), the gradient of the closed-form entropy,
    independent of the drawn noise."""
    log_std = torch.zeros(1, 2, 2, dtype=torch.float64, requires_grad=True)
    mean = torch.zeros(1, 2, 2, dtype=torch.float64, requires_grad=True)
    dist = GaussianBatch(mean=mean, log_std=log_std, mask=torch.ones(1, 2, dtype=torch.bool))
    h = entropy_one_sample(dist, torch.Generator().manual_seed(20))
    h.backward()
    np.testing.assert_allclose(log_std.grad.numpy(), np.ones((1, 2, 2)) / 2, atol=1e-12)
    # The mean-path cancels analytically ((a - mean)/std == eps exactly), so
    # the mean receives no gradient at all.
    assert mean.grad is None or torch.all(mean.grad == 0.0)


def test_entropy_requires_stochastic_model():
    cfg = tiny_config(deterministic=True)
    model = PolicyModel(cfg)
    with pytest.raises(RuntimeError, match="deterministic"):
        model.forward(random_batch(cfg, B=1, seed=21))


# ---------------------------------------------------------------------------
# act()
# ---------------------------------------------------------------------------


def history(cfg, L, seed=0):
    rng = np.random.default_rng(seed)
    return dict(
        states=rng.normal(size=(L, cfg.state_dim)),
        actions=rng.normal(size=(L - 1, cfg.action_dim)),
        rtgs=rng.normal(size=L),
        timesteps=np.arange(L),
    )


def test_act_mean_mode_deterministic():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=22)
    h = history(cfg, 3, seed=23)
    a1 = act(model, **h, mode="mean")
    a2 = act(model, **h, mode="mean")
    np.testing.assert_array_equal(a1, a2)
    assert a1.shape == (cfg.action_dim,)


def test_act_sample_mode_uses_generator():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=24)
    h = history(cfg, 2, seed=25)
    a1 = act(model, **h, mode="sample", gen=torch.Generator().manual_seed(1))
    a2 = act(model, **h, mode="sample", gen=torch.Generator().manual_seed(1))
    a3 = act(model, **h, mode="sample", gen=torch.Generator().manual_seed(2))
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, a3)
    with pytest.raises(ValueError, match="Generator"):
        act(model, **h, mode="sample")


def test_act_clamps_to_action_box():
    cfg = tiny_config()
    model = PolicyModel(cfg)
    with torch.no_grad():
        model.head_mean.bias.fill_(7.0)
    h = history(cfg, 2, seed=26)
    np.testing.assert_array_equal(act(model, **h, mode="mean"), [1.0, 1.0])


def test_act_single_step_context():
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=27)
    rng = np.random.default_rng(28)
    a = act(
        model,
        states=rng.normal(size=(1, cfg.state_dim)),
        actions=np.zeros((0, cfg.action_dim)),
        rtgs=np.array([1.0]),
        timesteps=np.array([0]),
    )
    assert a.shape == (cfg.action_dim,)


def test_act_rejects_bad_history():
    cfg = tiny_config(context_len=3)
    model = PolicyModel(cfg)
    h = history(cfg, 5, seed=29)
    with pytest.raises(ValueError, match="context_len"):
        act(model, **h)
    with pytest.raises(ValueError, match="at least"):
        act(
            model,
            states=np.zeros((0, cfg.state_dim)),
            actions=np.zeros((0, cfg.action_dim)),
            rtgs=np.zeros(0),
            timesteps=np.zeros(0, dtype=int),
        )
    bad = history(cfg, 3, seed=30)
    bad["actions"] = bad["actions"][:-1]
    with pytest.raises(ValueError, match="past actions"):
        act(model, **bad)


def test_act_ignores_current_action_slot():
    """The action being predicted is zero-filled; whatever the caller left in
    the history beyond L-1 actions must not exist at all (shape-checked), and
    the final action token cannot influence the same step's output."""
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=31)
    h = history(cfg, 3, seed=32)
    base = act(model, **h, mode="mean")
    poked = dict(h)
    poked["actions"] = h["actions"].copy()
    poked["actions"][-1] += 50.0  # perturb the most recent *past* action
    assert not np.array_equal(base, act(model, **poked, mode="mean"))


# ---------------------------------------------------------------------------
# Deterministic variant
# ---------------------------------------------------------------------------


def test_deterministic_twin_equals_stochastic_mean():
    cfg = tiny_config()
    stoch = randomize_weights(PolicyModel(cfg), seed=33)
    det = PolicyModel(dataclasses.replace(cfg, deterministic=True))
    det.load_state_dict(stoch.state_dict())
    batch = random_batch(cfg, B=2, seed=34)
    out = det.forward_deterministic(batch)
    assert torch.equal(out, stoch.forward(batch).mean)
    a_det = act(det, **history(cfg, 2, seed=35))
    a_stoch = act(stoch, **history(cfg, 2, seed=35), mode="mean")
    np.testing.assert_array_equal(a_det, a_stoch)


# ---------------------------------------------------------------------------
# Dropout and window-length checks
# ---------------------------------------------------------------------------


def test_dropout_reproducible_and_off_in_eval():
    cfg = tiny_config(dropout_rate=0.3)
    model = randomize_weights(PolicyModel(cfg), seed=36)
    batch = random_batch(cfg, B=2, seed=37)
    g1 = torch.Generator().manual_seed(4)
    g2 = torch.Generator().manual_seed(4)
    d1 = model.forward(batch, train_mode=True, gen=g1)
    d2 = model.forward(batch, train_mode=True, gen=g2)
    assert torch.equal(d1.mean, d2.mean)
    d3 = model.forward(batch, train_mode=True, gen=torch.Generator().manual_seed(5))
    assert not torch.equal(d1.mean, d3.mean)
    e1 = model.forward(batch)
    e2 = model.forward(batch)
    assert torch.equal(e1.mean, e2.mean)


def test_train_mode_dropout_requires_generator():
    cfg = tiny_config(dropout_rate=0.3)
    model = PolicyModel(cfg)
    with pytest.raises(ValueError, match="Generator"):
        model.forward(random_batch(cfg, B=1, seed=38), train_mode=True)


def test_forward_rejects_overlong_window():
    cfg = tiny_config(context_len=3)
    model = PolicyModel(cfg)
    batch = random_batch(dataclasses.replace(cfg, context_len=5), B=1, seed=39)
    with pytest.raises(ValueError, match="context_len"):
        model.forward(batch)


def test_positional_embedding_off_ignores_timesteps():
    cfg = tiny_config(use_positional_embedding=False)
    model = randomize_weights(PolicyModel(cfg), seed=40)
    batch = random_batch(cfg, B=1, seed=41)
    shifted = WindowBatch(
        states=batch.states,
        actions=batch.actions,
        rtgs=batch.rtgs,
        timesteps=batch.timesteps + 7,
        mask=batch.mask,
    )
    assert torch.equal(model.forward(batch).mean, model.forward(shifted).mean)
    on = tiny_config()
    model_on = randomize_weights(PolicyModel(on), seed=40)
    b_on = random_batch(on, B=1, seed=41)
    s_on = WindowBatch(
        states=b_on.states,
        actions=b_on.actions,
        rtgs=b_on.rtgs,
        timesteps=b_on.timesteps + 7,
        mask=b_on.mask,
    )
    assert not torch.equal(model_on.forward(b_on).mean, model_on.forward(s_on).mean)


def test_rtg_scale_divides_inputs():
    cfg1 = tiny_config(rtg_scale=1.0)
    cfg10 = tiny_config(rtg_scale=10.0)
    m1 = randomize_weights(PolicyModel(cfg1), seed=42)
    m10 = PolicyModel(cfg10)
    m10.load_state_dict(m1.state_dict())
    batch = random_batch(cfg1, B=1, seed=43)
    scaled = WindowBatch(
        states=batch.states,
        actions=batch.actions,
        rtgs=batch.rtgs * 10.0,
        timesteps=batch.timesteps,
        mask=batch.mask,
    )
    np.testing.assert_allclose(
        m10.forward(scaled).mean.detach().numpy(),
        m1.forward(batch).mean.detach().numpy(),
        rtol=1e-12,
        atol=1e-12,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitexact(tmp_path):
    cfg = tiny_config(dropout_rate=0.1)
    model = randomize_weights(PolicyModel(cfg), seed=44)
    gen = torch.Generator().manual_seed(6)
    _ = torch.rand(3, generator=gen)  # advance so the state is nontrivial
    path = tmp_path / "model.npz"
    save_checkpoint(
        path,
        model,
        step=123,
        dual={"log_lambda": 0.5, "m": 0.1, "v": 0.2, "step": 9},
        optimizer_state={"m": {"head_mean.weight": np.ones((2, 8))}},
        dropout_gen=gen,
        extra={"note": "unit"},
    )
    ck = load_checkpoint(path)
    assert ck.step == 123
    assert ck.config == cfg
    assert ck.dual["log_lambda"] == 0.5
    assert ck.extra == {"note": "unit"}
    np.testing.assert_array_equal(ck.optimizer_state["m"]["head_mean.weight"], np.ones((2, 8)))
    for (n1, p1), (_, p2) in zip(model.named_parameters(), ck.model.named_parameters()):
        assert torch.equal(p1, p2), n1

    batch = random_batch(cfg, B=2, seed=45)
    assert torch.equal(model.forward(batch).mean, ck.model.forward(batch).mean)

    # The restored dropout generator continues the stream identically.
    g2 = restore_generator(ck.dropout_state)
    assert torch.equal(torch.rand(5, generator=gen), torch.rand(5, generator=g2))


def test_checkpoint_eval_behavior_roundtrip(tmp_path):
    cfg = tiny_config()
    model = randomize_weights(PolicyModel(cfg), seed=46)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model)
    back = load_checkpoint(path).model
    h = history(cfg, 3, seed=47)
    np.testing.assert_array_equal(act(model, **h), act(back, **h))


def test_checkpoint_rejects_non_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    np.savez(path, foo=np.zeros(3))
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(path)
