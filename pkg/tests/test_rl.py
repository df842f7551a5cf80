import numpy as np
import pytest
import torch
from scipy import stats

from gtb import fiscal
from gtb.rl import curriculum
from gtb.rl.config import ConfigError, desk_profile, paper_profile
from gtb.rl.env import Economy, planner_mask
from gtb.rl.gae import gae_advantages
from gtb.rl.policy import AgentPolicy, AllMasked, entropy_from_log_probs, masked_log_probs, sample_action
from gtb.rl.ppo import NonFiniteLoss, SequenceBatch, ppo_loss, ppo_update
from gtb.rl.rollout import ActorTrace, Runner
from gtb.rl.train import Trainer, build_policies, load_checkpoint
from gtb.scenarios import load_scenario

DESK = desk_profile(4)


def brute_force_gae(r, v, gamma, lam):
    """Advantages as the lambda-weighted mix of n-step returns."""
    T = len(r)
    out = []
    for t in range(T):
        n_step = []
        for n in range(1, T - t + 1):
            ret = sum(gamma ** k * r[t + k] for k in range(n)) + gamma ** n * v[t + n]
            n_step.append(ret - v[t])
        # the weights of all n-step returns beyond the end collapse onto the full return
        weights = [(1 - lam) * lam ** (n - 1) for n in range(1, T - t)] + [lam ** (T - t - 1)]
        out.append(sum(w * a for w, a in zip(weights, n_step)))
    return np.array(out)


def test_gae_examples():
    adv, tgt = gae_advantages([1.0], [0.0, 0.0], 0.99, 0.95)
    assert adv[0] == 1.0 and tgt[0] == 1.0
    adv, _ = gae_advantages([0.0, 1.0], [0.0, 0.0, 0.0], 0.5, 1.0)
    np.testing.assert_allclose(adv, [0.5, 1.0])
    r, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -0.4, 0.9])
    adv, _ = gae_advantages(r, v, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * v[1:] - v[:-1])


def test_gae_respects_episode_ends():
    adv, _ = gae_advantages([1.0, 1.0], [0.0, 5.0, 7.0], 1.0, 1.0, dones=[True, False])
    np.testing.assert_allclose(adv, [1.0, 8.0 - 5.0])


def test_gae_matches_brute_force_small():
    rng = np.random.default_rng(0)
    for T in range(1, 8):
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        gamma, lam = rng.uniform(0.5, 1), rng.uniform(0, 1)
        np.testing.assert_allclose(gae_advantages(r, v, gamma, lam)[0], brute_force_gae(r, v, gamma, lam),
                                   atol=1e-10, rtol=0)


def test_masked_probability_is_exactly_zero():
    logits = torch.randn(64, 50)
    mask = torch.rand(64, 50) < 0.3
    mask[:, 0] = True
    logp = masked_log_probs(logits, mask)
    p = logp.exp()
    assert torch.all(p[~mask] == 0)
    torch.testing.assert_close(p.sum(-1), torch.ones(64))
    with pytest.raises(AllMasked):
        masked_log_probs(logits, torch.zeros(64, 50, dtype=torch.bool))


def test_noop_only_mask_always_noop():
    pol = AgentPolicy((8, 11, 11), 10, fc=8, lstm=8)
    mask = torch.zeros(16, 50, dtype=torch.bool)
    mask[:, 0] = True
    hidden = pol.initial_hidden(16)
    s = sample_action(pol, (torch.randn(16, 8, 11, 11), torch.randn(16, 10)), hidden, mask)
    assert torch.all(s.action == 0) and torch.all(s.log_prob == 0)
    assert not torch.equal(s.hidden[0], hidden[0])


def test_uniform_masked_sampling_chi_square():
    k, draws = 7, 100_000
    logits = torch.zeros(1, 50)
    mask = torch.zeros(1, 50, dtype=torch.bool)
    allowed = [0, 3, 9, 17, 22, 31, 49]
    mask[0, allowed] = True
    probs = masked_log_probs(logits, mask).exp()
    sample = torch.multinomial(probs.expand(draws, 50), 1, generator=torch.Generator().manual_seed(1)).squeeze(1)
    counts = np.bincount(sample.numpy(), minlength=50)
    assert counts[~mask[0].numpy()].sum() == 0
    _, p = stats.chisquare(counts[allowed], np.full(k, draws / k))
    assert p > 0.01


def test_planner_mask_cycle_and_cap():
    off = planner_mask(37, 100, 1.0)
    assert off[:, 0].all() and not off[:, 1:].any()
    on = planner_mask(200, 100, 0.10)
    assert not on[:, 0].any()
    # choices 1..3 are rates 0, 0.05, 0.10
    assert on[:, 1:4].all() and not on[:, 4:].any()
    assert planner_mask(0, 100, 1.0)[:, 1:].all()


def test_curriculum_endpoints_and_monotone():
    cfg = paper_profile()
    assert curriculum.advance_curriculum(cfg, 0).labor_multiplier == 0.0
    start = curriculum.advance_curriculum(cfg, cfg.phase_one_steps)
    assert start.phase == "two" and start.tax_cap == pytest.approx(0.10)
    assert curriculum.advance_curriculum(cfg, cfg.phase_one_steps + 27_000_000).tax_cap == 1.0
    assert curriculum.advance_curriculum(cfg, cfg.phase_one_steps + 60_000_000).planner_entropy == pytest.approx(0.0125)
    prev = None
    for s in np.linspace(0, cfg.phase_one_steps + 80_000_000, 200).astype(int):
        cur = curriculum.advance_curriculum(cfg, int(s))
        if prev is not None:
            assert cur.labor_multiplier >= prev.labor_multiplier
            assert cur.tax_cap >= prev.tax_cap
            assert cur.planner_entropy <= prev.planner_entropy
        prev = cur


def test_config_validation():
    assert paper_profile(4).agent_minibatch == 600 and paper_profile(10).agent_minibatch == 1500
    paper_profile(10).validate(10)
    DESK.validate(4)
    with pytest.raises(ConfigError):
        DESK.replace(seq_len=30).validate(4)
    with pytest.raises(ConfigError):
        DESK.replace(not_a_field=1)


# -- PPO -------------------------------------------------------------------


class ToyPolicy(torch.nn.Module):
    """Three-action linear softmax over three features plus a scalar value weight: 10 parameters."""

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.randn(3, 3, dtype=torch.float64) * 0.5)
        self.v = torch.nn.Parameter(torch.tensor([0.3], dtype=torch.float64))

    def forward(self, x):
        logits = x @ self.w.T
        return torch.log_softmax(logits, dim=-1), (x.sum(-1) * self.v)


def toy_loss(policy, x, actions, old_logp, adv, targets):
    logp_all, values = policy(x)
    logp = logp_all.gather(1, actions[:, None]).squeeze(1)
    return ppo_loss(logp, old_logp, adv, entropy_from_log_probs(logp_all), values, targets,
                    clip=0.2, entropy_coef=0.025, value_coef=0.05)[0]


def toy_data(seed=0, n=32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, generator=g, dtype=torch.float64)
    actions = torch.randint(0, 3, (n,), generator=g)
    old = torch.log(torch.rand(n, generator=g, dtype=torch.float64) * 0.5 + 0.2)
    adv = torch.randn(n, generator=g, dtype=torch.float64)
    targets = torch.randn(n, generator=g, dtype=torch.float64)
    return x, actions, old, adv, targets


def finite_difference_check(seed):
    torch.manual_seed(seed)
    pol = ToyPolicy()
    data = toy_data(seed)
    params = [pol.w, pol.v]
    assert sum(p.numel() for p in params) == 10
    loss = toy_loss(pol, *data)
    grads = torch.autograd.grad(loss, params)
    analytic = torch.cat([g.reshape(-1) for g in grads])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = toy_loss(pol, *data).item()
                flat[i] = orig - h
                down = toy_loss(pol, *data).item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return float((analytic - numeric).norm() / numeric.norm())


def test_ppo_gradient_matches_finite_differences():
    assert finite_difference_check(0) <= 1e-4


def test_zero_advantage_has_no_surrogate_gradient():
    pol = ToyPolicy()
    x, actions, old, _, targets = toy_data(1)
    logp_all, values = pol(x)
    logp = logp_all.gather(1, actions[:, None]).squeeze(1)
    _, parts = ppo_loss(logp, old, torch.zeros_like(old), entropy_from_log_probs(logp_all), values, targets)
    g = torch.autograd.grad(parts["policy_loss"], [pol.w], allow_unused=True)[0]
    assert g is None or torch.all(g == 0)


def _bandit_batch(policy, n_seq=8, length=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    obs = (torch.zeros(n_seq, length, 8, 11, 11), torch.zeros(n_seq, length, 4))
    mask = torch.ones(n_seq, length, 50, dtype=torch.bool)
    actions = torch.randint(0, 50, (n_seq, length), generator=g)
    adv = (actions == 7).float() * 2 - 0.04
    starts = torch.zeros(n_seq, length, dtype=torch.bool)
    starts[:, 0] = True
    h0, c0 = policy.initial_hidden(n_seq)
    with torch.no_grad():
        logits, _ = policy.unroll(obs, (h0, c0), starts)
        old = masked_log_probs(logits, mask).gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    return SequenceBatch(obs, mask, actions, old, adv, adv.clone(), starts, h0, c0)


def _bandit_entropy(entropy_coef):
    torch.manual_seed(0)
    pol = AgentPolicy((8, 11, 11), 4, conv=2, fc=8, lstm=8)
    opt = torch.optim.Adam(pol.parameters(), lr=0.01)
    batch = _bandit_batch(pol)
    out = None
    for _ in range(30):
        out = ppo_update(pol, opt, batch, n_updates=2, minibatch_sequences=4, clip=0.2, entropy_coef=entropy_coef,
                         value_coef=0.05, grad_clip=10.0, generator=torch.Generator().manual_seed(0))
    return out["entropy_after"]


def test_entropy_bonus_keeps_policy_broader():
    assert _bandit_entropy(0.125) > _bandit_entropy(0.0)


def test_nonfinite_loss_aborts_with_dump(tmp_path):
    pol = AgentPolicy((8, 11, 11), 4, conv=2, fc=8, lstm=8)
    opt = torch.optim.Adam(pol.parameters())
    batch = _bandit_batch(pol)
    batch.targets[0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        ppo_update(pol, opt, batch, n_updates=1, minibatch_sequences=8, clip=0.2, entropy_coef=0.0,
                   value_coef=0.05, grad_clip=10.0, dump_path=tmp_path / "dump.pt")
    assert (tmp_path / "dump.pt").exists()


# -- environment and rollouts -------------------------------------------------


def make_runner(planner="free", replicas=2, seed=0, cfg=DESK):
    scen = load_scenario("open-quadrant-4-desk")
    envs = [Economy(scen, planner, episode_length=200, tax_period=100) for _ in range(replicas)]
    agent, plan = build_policies(cfg, 4, planner == "learned")
    torch.manual_seed(seed)
    return Runner(envs, agent, plan, seed)


def test_rollout_buffer_sizes():
    runner = make_runner("learned", replicas=3)
    res = runner.collect(50, learn_planner=True, seq_len=25)
    assert len(res.planner.rewards) * len(res.planner.rewards[0]) == 3 * 50
    assert len(res.agent.rewards) * len(res.agent.rewards[0]) == 3 * 50 * 4
    batch, _ = res.agent.to_batch(0.998, 0.98, 25)
    assert batch.n_sequences == 3 * 4 * 2


def test_planner_acts_only_at_year_start_and_taxes_settle_at_year_end():
    runner = make_runner("learned", replicas=1)
    res = runner.collect(200, learn_planner=True, seq_len=25)
    actions = np.stack(res.planner.actions)[:, 0]  # [T, 7]
    acting = np.flatnonzero((actions != 0).any(axis=1))
    assert set(acting.tolist()) <= {0, 100}
    assert {0, 100} <= set(acting.tolist())
    assert len(runner.envs[0].schedules) == 2


def test_free_market_has_no_transfers():
    env = Economy(load_scenario("open-quadrant-4-desk"), "free", episode_length=200)
    env.reset([0, 0, 0])
    rng = np.random.default_rng(0)
    while not env.state.done:
        _, _, masks = env.agent_observations()
        acts = [rng.choice(np.flatnonzero(m)) for m in masks]
        res = env.step(acts, masks)
        if res.year is not None:
            assert np.all(res.year.transfers == 0)


def test_rewards_telescope_to_final_utility():
    env = Economy(load_scenario("open-quadrant-4-desk"), "us-federal", episode_length=300)
    env.reset([1, 0, 0])
    u0 = env.utilities()
    swf0 = env.swf()
    total, ptotal = np.zeros(4), 0.0
    rng = np.random.default_rng(1)
    while not env.state.done:
        _, _, masks = env.agent_observations()
        res = env.step([rng.choice(np.flatnonzero(m)) for m in masks], masks)
        total += res.rewards
        ptotal += res.planner_reward
    np.testing.assert_allclose(u0 + total, env.utilities(), atol=1e-9)
    assert swf0 + ptotal == pytest.approx(env.swf(), abs=1e-9)


def test_us_federal_schedule_never_changes():
    runner = make_runner("us-federal", replicas=1)
    runner.set_tax_phase(True)
    runner.collect(200, store=False)
    assert all(s == fiscal.us_federal_2018() for s in runner.envs[0].schedules)


def test_saez_schedule_recomputed_each_year_from_buffer():
    env = Economy(load_scenario("open-quadrant-4-desk"), "saez", episode_length=200)
    env.saez_incomes = np.array([5.0, 20.0, 50.0, 100.0, 300.0, 700.0])
    env.reset([0, 0, 0])
    rng = np.random.default_rng(0)
    while not env.state.done:
        _, _, masks = env.agent_observations()
        env.step([rng.choice(np.flatnonzero(m)) for m in masks], masks)
    expected = fiscal.saez_rates(env.saez_incomes, env.saez_params)
    assert env.schedules == [expected, expected]
    assert len(env.finished_records[0]) == 2 * 4


def test_masked_actions_never_sampled_in_rollouts():
    runner = make_runner("free", replicas=2)
    res = runner.collect(100, seq_len=25)
    masks = np.stack(res.agent.masks)
    actions = np.stack(res.agent.actions)
    assert np.all(np.take_along_axis(masks, actions[..., None], axis=-1))


def test_shared_agent_parameters_single_module():
    runner = make_runner("free")
    assert len({id(p) for p in runner.agent_policy.parameters()}) == len(list(runner.agent_policy.parameters()))


def test_training_is_deterministic_and_checkpoints(tmp_path):
    cfg = DESK.replace(replicas=2, horizon=50, episode_length=100, agent_minibatch=100, planner_minibatch=50,
                       agent_updates=2, planner_updates=2, phase_one_steps=200, tax_anneal_steps=400,
                       entropy_anneal_steps=400, checkpoint_every=2, log_every_episodes=1)
    scen = load_scenario("open-quadrant-4-desk")
    a = Trainer(cfg, scen, "learned", seed=3, out_dir=tmp_path / "a").train(max_steps=600)
    b = Trainer(cfg, scen, "learned", seed=3, out_dir=tmp_path / "b").train(max_steps=600)
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert a.steps == 600 and len(a.metrics) == 6
    blob = load_checkpoint(tmp_path / "a" / "checkpoint.pt")
    assert blob["version"] == 1 and blob["steps"] == 600
    t = Trainer(cfg, scen, "saez", seed=4)
    t.load_checkpoint(tmp_path / "a" / "checkpoint.pt")
    assert t.steps == 600 and len(t.income_buffer) > 0
    for p, q in zip(t.agent_policy.parameters(), a.agent_policy.parameters()):
        assert torch.equal(p, q)


def test_ppo_learns_rewarded_action():
    # one action pays 1, the rest pay 0; rollouts and updates go through the training path
    torch.manual_seed(0)
    pol = AgentPolicy((3, 5, 5), 4, n_actions=6, conv=4, fc=16, lstm=16)
    opt = torch.optim.Adam(pol.parameters(), lr=3e-3)
    gen = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    actors, horizon = 16, 50
    mask = torch.ones(actors, 6, dtype=torch.bool)
    hit_rate = []
    for _ in range(30):
        tr = ActorTrace()
        hidden = pol.initial_hidden(actors)
        hits = 0.0
        for t in range(horizon):
            spatial = torch.from_numpy(rng.random((actors, 3, 5, 5), dtype=np.float32))
            flat = torch.zeros(actors, 4)
            if t % 25 == 0:
                tr.hidden.append(tuple(x.clone() for x in hidden))
            s = sample_action(pol, (spatial, flat), hidden, mask, gen)
            hidden = s.hidden
            r = (s.action.numpy() == 3).astype(float)
            hits += r.mean()
            tr.obs.append((spatial.numpy(), flat.numpy()))
            tr.masks.append(mask.numpy())
            tr.actions.append(s.action.numpy())
            tr.log_probs.append(s.log_prob.numpy())
            tr.values.append(s.value.numpy())
            tr.rewards.append(r)
            tr.dones.append(np.zeros(actors, dtype=bool))
            tr.starts.append(np.full(actors, t == 0))
        tr.bootstrap = np.zeros(actors, dtype=np.float32)
        batch, _ = tr.to_batch(0.99, 0.95, 25)
        ppo_update(pol, opt, batch, n_updates=4, minibatch_sequences=16, clip=0.2, entropy_coef=0.0,
                   value_coef=0.05, grad_clip=10.0, generator=gen)
        hit_rate.append(hits / horizon)
    assert hit_rate[0] < 0.3
    assert hit_rate[-1] > 0.9
