"""One test per acceptance criterion; each prints a PASS/FAIL line.

The desk-scale learning check (criterion 9) trains three agents and takes
tens of minutes; set DARQN_SKIP_LEARNING=1 to skip it during development.
"""
import itertools
import os
import types

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, numeric_grad
from darqn import checkpoint, cli, config
from darqn import numerics as nx
from darqn.agent import (Architecture, Network, ParameterSet, attention_logits,
                         attention_scores, count_params, soft_context)
from darqn.agent import StepOutput
from darqn.evalviz import evaluate
from darqn.numerics import Tensor
from darqn.training import (Learner, ReplayMemory, SegmentBatch, TargetNetwork, TrainConfig,
                            Transition, compute_target, hard_policy_update_terms, q_loss,
                            schedule, train, transfer_cnn)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def report(n, title, ok, detail=""):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ----------------------------------------------------------------------------- 1

def test_c01_parameter_counts(capsys):
    printed = {}
    for model in ("darqn_soft", "darqn_hard"):
        assert cli.main(["count-params", model, "paper", "18"]) == 0
        printed[model] = int(capsys.readouterr().out.strip())
    soft, hard = printed["darqn_soft"], printed["darqn_hard"]
    ok = soft == 845171 and hard == 845428 and hard - soft == 257
    report(1, "parameter counts", ok, f"soft {soft}, hard {hard}, diff {hard - soft}")


# ----------------------------------------------------------------------------- 2

def _fd_model(model, rng):
    """Max error over every parameter: |analytic - numeric| / max(1, |numeric|)."""
    net = Network(Architecture.from_profile(model, "small", 3))
    p = net.init_params(rng)
    frames = rng.random((2, 4, 24, 24))
    actions = rng.integers(3, size=(2, 4))
    y = rng.normal(size=(2, 4))

    p.zero_grad()
    with nx.Tape() as tape:
        loss = q_loss(net.unroll(p, frames), actions, y)
    nx.backward(tape, loss)
    analytic = {k: t.grad.copy() for k, t in p.items()}

    def full():
        with nx.no_grad():
            return q_loss(net.unroll(p, frames), actions, y).item()

    with nx.no_grad():
        grids = net.encode_sequence(p, frames)

    def from_grid():
        # conv weights are untouched here, so the cached features are exact
        with nx.no_grad():
            state = net.initial_state(2)
            outs = []
            for t in range(4):
                out = net.step(p, None, state, grid=nx.take(grids, t, axis=1))
                outs.append(out)
                state = out.state
            return q_loss(outs, actions, y).item()

    worst, worst_strict = 0.0, 0.0
    for k, t in p.items():
        num = numeric_grad(full if k.startswith("conv") else from_grid, t.data, h=1e-5)
        err = np.abs(analytic[k] - num)
        worst = max(worst, float(np.max(err / np.maximum(1.0, np.abs(num)))))
        big = np.abs(num) > 1e-3
        if big.any():
            worst_strict = max(worst_strict, float(np.max(err[big] / np.abs(num[big]))))
    return worst, worst_strict, p.count()


def test_c02_gradient_check():
    import time
    t0 = time.time()
    rng = np.random.default_rng(2024)
    details, ok = [], True
    for model in ("darqn_soft", "dqn", "drqn"):
        worst, strict, n = _fd_model(model, rng)
        ok &= worst <= 1e-4
        details.append(f"{model}: {n} params, max err {worst:.1e} (pure rel {strict:.1e})")
    minutes = (time.time() - t0) / 60
    details.append(f"{minutes:.1f} min")
    report(2, "finite-difference gradients", ok and minutes < 5, "; ".join(details))


# ----------------------------------------------------------------------------- 3

def test_c03_attention_invariants():
    rng = np.random.default_rng(3)
    worst_sum = worst_hull = worst_flat = 0.0
    for _ in range(1000):
        L, d, h, ha = rng.integers(1, 50), rng.integers(1, 20), rng.integers(1, 16), rng.integers(1, 16)
        scale = 10.0 ** rng.uniform(-1, 1)
        p = {"att.inner.weight": Tensor(rng.normal(size=(ha, d)) * scale),
             "att.inner.bias": Tensor(rng.normal(size=ha)),
             "att.recurrent.weight": Tensor(rng.normal(size=(ha, h)) * scale),
             "att.outer.weight": Tensor(rng.normal(size=(1, ha)) * scale),
             "att.outer.bias": Tensor(rng.normal(size=1))}
        v = rng.normal(size=(L, d)) * scale
        hp = Tensor(rng.normal(size=h))
        w = attention_scores(Tensor(v), hp, p).data
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        z = soft_context(Tensor(v), Tensor(w)).data
        excess = np.maximum(z - v.max(axis=0), v.min(axis=0) - z)
        worst_hull = max(worst_hull, float(np.max(excess)))
        same = np.tile(rng.normal(size=d), (L, 1))
        wf = attention_scores(Tensor(same), hp, p).data
        worst_flat = max(worst_flat, float(np.max(np.abs(wf - 1.0 / L))))
    ok = worst_sum <= 1e-12 and worst_hull <= 1e-12 and worst_flat <= 1e-10
    report(3, "attention invariants", ok,
           f"sum {worst_sum:.1e}, hull {worst_hull:.1e}, uniform {worst_flat:.1e}")


# ----------------------------------------------------------------------------- 4

def _bandit_params(rng):
    return {"att.inner.weight": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
            "att.inner.bias": Tensor(rng.normal(size=3), requires_grad=True),
            "att.recurrent.weight": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
            "att.outer.weight": Tensor(rng.normal(size=(1, 3)), requires_grad=True),
            "att.outer.bias": Tensor(rng.normal(size=1), requires_grad=True)}


def _bandit_grad(p, v, h, n, y_loc, g_fn, rng):
    """Gradient of the policy loss over n sampled steps; also returns the log-prob Jacobian rows."""
    for t in p.values():
        t.grad = None
    grid = Tensor(np.broadcast_to(v, (n,) + v.shape).copy())
    hp = Tensor(np.broadcast_to(h, (n,) + h.shape).copy())
    with nx.Tape() as tape:
        logp = nx.log_softmax(attention_logits(grid, hp, p))
        idx = nx.categorical_sample_rows(np.exp(logp.data), rng)
        y = y_loc[idx]
        out = StepOutput(Tensor(np.zeros((n, 1))), None, index=idx,
                         log_prob=nx.gather_last(logp, idx), baseline=Tensor(g_fn(idx)))
        pg, _, _ = hard_policy_update_terms([out], y[:, None])
    nx.backward(tape, pg)
    return {k: (-t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in p.items()}, idx


def test_c04_reinforce_oracle():
    rng = np.random.default_rng(4)
    p = _bandit_params(rng)
    v = rng.normal(size=(2, 2))
    h = rng.normal(size=2)
    y_loc = np.array([1.0, -0.5])
    g_const = 0.2
    n = 100_000

    def probs():
        with nx.no_grad():
            return attention_scores(Tensor(v), Tensor(h), p).data

    def expected_return():
        return float(probs() @ (y_loc - g_const))

    est, _ = _bandit_grad(p, v, h, n, y_loc, lambda idx: np.full(idx.size, g_const), rng)
    # per-sample gradient takes one of two values; their spread gives the standard error
    pi = probs()
    worst_z = 0.0
    for k, t in p.items():
        exact = numeric_grad(expected_return, t.data, h=1e-6)
        # single-sample gradients for each outcome: (Y_i - G) * d log pi_i
        g_out = []
        for i in (0, 1):
            def logpi(i=i):
                return float(np.log(probs()[i]))
            g_out.append((y_loc[i] - g_const) * numeric_grad(logpi, t.data, h=1e-6))
        se = np.sqrt(pi[0] * pi[1]) * np.abs(g_out[0] - g_out[1]) / np.sqrt(n)
        diff = np.abs(est[k] - exact)
        tight = se < 1e-12
        if tight.any():
            assert np.all(diff[tight] < 1e-8), k
        if (~tight).any():
            worst_z = max(worst_z, float(np.max(diff[~tight] / se[~tight])))
    zero, _ = _bandit_grad(p, v, h, 1000, y_loc, lambda idx: y_loc[idx], rng)
    zero_ok = all(np.all(g == 0.0) for g in zero.values())
    report(4, "policy-gradient estimator", worst_z <= 3.0 and zero_ok,
           f"max |est - exact| = {worst_z:.2f} SE over {n} samples; G = Y gives zero: {zero_ok}")


# ----------------------------------------------------------------------------- 5

class LinearQ:
    """Q(s) = W x_s with one-hot state features; plugs into the Learner."""

    arch = types.SimpleNamespace(hard=False)

    def unroll(self, params, frames, rng=None, policy_terms=False):
        w = params["q.weight"]
        return [StepOutput(nx.affine(Tensor(frames[:, t].reshape(frames.shape[0], -1)), w), None)
                for t in range(frames.shape[1])]


# two states, two actions; action a moves to state a; (1, 1) ends the episode
REWARD = np.array([[0.0, 1.0], [-1.0, 2.0]])


def _tabular_run(gamma, alpha=0.1, steps=100, seed=5):
    rng = np.random.default_rng(seed)
    params = ParameterSet({"q.weight": Tensor(np.zeros((2, 2)), requires_grad=True)})
    cfg = TrainConfig(gamma=gamma, optimizer="sgd", unroll=1, batch_size=1, target_sync=1)
    learner = Learner(LinearQ(), params, cfg, np.random.default_rng(0))
    table = np.zeros((2, 2))      # table[s, a]
    onehot = np.eye(2)
    s, worst = 0, 0.0
    for _ in range(steps):
        a = int(rng.integers(2))
        r, s2 = REWARD[s, a], a
        done = s == 1 and a == 1
        batch = SegmentBatch(np.stack([onehot[s], onehot[s2]])[None, :, None, :],
                             np.array([[a]]), np.array([[r]]), np.array([[done]]),
                             np.zeros(1, np.int64), np.zeros(1, np.int64))
        learner.target.sync(params)
        learner.update(batch, alpha)
        y = r + (0.0 if done else gamma * table[s2].max())
        table[s, a] += 2 * alpha * (y - table[s, a])
        worst = max(worst, float(np.max(np.abs(params["q.weight"].data.T - table))))
        s = 0 if done else s2
    return worst, table


def test_c05_tabular_equivalence():
    out = {g: _tabular_run(g) for g in (0.0, 0.9)}
    ok = all(w <= 1e-10 for w, _ in out.values()) and np.any(out[0.9][1] != 0)
    report(5, "tabular Q-learning equivalence", ok,
           ", ".join(f"gamma {g}: max dev {w:.1e}" for g, (w, _) in out.items()))


# ----------------------------------------------------------------------------- 6

def test_c06_schedules():
    cfg = TrainConfig()
    d_eps, d_lr = cfg.eps_decay_steps, cfg.lr_decay_steps
    eps = lambda t: schedule(t, cfg.eps_start, cfg.eps_end, d_eps)
    lr = lambda t: schedule(t, cfg.lr_start, cfg.lr_end, d_lr)
    ends = (eps(0) == 1.0 and eps(d_eps) == 0.1 and eps(5 * d_eps) == 0.1
            and lr(0) == 0.01 and lr(d_lr) == 0.00025 and lr(3 * d_lr) == 0.00025)
    worst = 0.0
    for t in (1, d_eps // 4, d_eps // 2, 3 * d_eps // 4, d_eps - 1):
        worst = max(worst, abs(eps(t) - (1.0 + (0.1 - 1.0) * t / d_eps)),
                    abs(lr(t) - (0.01 + (0.00025 - 0.01) * t / d_lr)))
    report(6, "exploration and learning-rate schedules", ends and worst <= 1e-15,
           f"endpoints exact: {ends}; max interior error {worst:.1e}")


# ----------------------------------------------------------------------------- 7

def test_c07_mixing_frequency():
    from darqn.envs import Catch
    net = Network(Architecture.from_profile("darqn_hard", "small", 3), mix_prob=0.5)
    p = net.init_params(np.random.default_rng(7))
    env = Catch(24, seed=7)
    rng = np.random.default_rng(7)
    frame, state, soft = env.reset(), net.initial_state(), 0
    n = 10_000
    with nx.no_grad():
        for _ in range(n):
            out = net.step(p, frame, state, rng=rng)
            soft += int(out.index) == -1
            res = env.step(int(np.argmax(out.q.data)))
            frame, state = (env.reset(), net.initial_state()) if res.terminal else (res.frame, out.state)
    freq = soft / n
    report(7, "hard-mode soft-context mixing", abs(freq - 0.5) <= 0.01,
           f"soft fraction {freq:.4f} over {n} steps")


# ----------------------------------------------------------------------------- 8

def _windows(stream, unroll):
    """Brute-force valid (episode, start) windows from a flat transition list."""
    eps, cur = [], []
    for tr in stream:
        cur.append(tr)
        if tr.terminal:
            eps.append((cur, True))
            cur = []
    if cur:
        eps.append((cur, False))
    out = set()
    for e, (items, done) in enumerate(eps):
        for s in range(len(items)):
            if s + unroll > len(items):
                continue
            if not done and s + unroll >= len(items):
                continue
            out.add((e, s))
    return out


def test_c08_target_and_replay():
    # target sync and isolation
    net = Network(Architecture.from_profile("darqn_soft", "small", 3))
    p = net.init_params(np.random.default_rng(8))
    from darqn.envs import Catch
    env = Catch(24, seed=8)
    rng = np.random.default_rng(8)
    mem = ReplayMemory(1000)
    f = env.reset()
    for _ in range(60):
        a = int(rng.integers(3))
        res = env.step(a)
        mem.append(Transition(f, a, res.reward, res.terminal))
        f = env.reset() if res.terminal else res.frame
    learner = Learner(net, p, TrainConfig(batch_size=4, lr_start=0.01), rng)
    sync_exact = learner.target.params.digest() == p.digest()
    probe = mem.sample(4, 4, rng)
    with nx.no_grad():
        before = [o.q.data.copy() for o in net.unroll(learner.target.params, probe.frames)]
    for _ in range(3):
        learner.update(mem.sample(4, 4, rng), 0.01)
    with nx.no_grad():
        after = [o.q.data for o in net.unroll(learner.target.params, probe.frames)]
    frozen = all(np.array_equal(a, b) for a, b in zip(before, after))
    moved = learner.target.params.digest() != p.digest()

    # exhaustive adversarial episode layouts
    checked, crossing = 0, 0
    for unroll in range(1, 5):
        for k in range(1, 4):
            for lengths in itertools.product(range(1, unroll + 3), repeat=k):
                for done_last in (True, False):
                    mem = ReplayMemory(10_000)
                    stream, code = [], 0
                    for e, n in enumerate(lengths):
                        for i in range(n):
                            term = i == n - 1 and (done_last or e < k - 1)
                            tr = Transition(np.full((1, 1), float(code)), 0, 0.0, term)
                            code += 1
                            stream.append(tr)
                            mem.append(tr)
                    expect = _windows(stream, unroll)
                    n_elig = mem.eligible(unroll)
                    if n_elig != len(expect):
                        crossing += 1
                        continue
                    if n_elig == 0:
                        continue
                    batch = mem.gather(np.arange(n_elig), unroll)
                    got = {(int(u), int(s)) for u, s in zip(batch.episode_ids, batch.starts)}
                    for b in range(n_elig):
                        vals = batch.frames[b, :unroll, 0, 0]
                        if np.any(np.diff(vals) != 1) or batch.terminals[b, :-1].any():
                            crossing += 1
                    crossing += got != expect
                    checked += n_elig

    # uniformity
    mem = ReplayMemory(1000)
    for n in (6, 9, 4, 7):
        for i in range(n):
            mem.append(Transition(np.zeros((1, 1)), 0, 0.0, i == n - 1))
    n_elig = mem.eligible(3)
    rng = np.random.default_rng(80)
    draws = 60_000
    picks = mem.sample(draws, 3, rng)
    _, counts = np.unique(picks.episode_ids * 100 + picks.starts, return_counts=True)
    p_cell = 1.0 / n_elig
    z = np.abs(counts - draws * p_cell) / np.sqrt(draws * p_cell * (1 - p_cell))
    uniform = counts.size == n_elig and z.max() <= 3.0

    ok = sync_exact and frozen and moved and crossing == 0 and checked > 0 and uniform
    report(8, "target network and replay", ok,
           f"sync exact {sync_exact}, target frozen {frozen}, {checked} segments checked, "
           f"{crossing} violations, max |z| {z.max():.2f} over {n_elig} cells")


# ----------------------------------------------------------------------------- 9

DESK_CONFIG = os.path.join(ROOT, "configs", "catch_small.conf")


def _desk_run(tmp, model, seed, init=None, **extra):
    cfg = config.load(DESK_CONFIG, [f"model={model}", f"seed={seed}", f"out_dir={tmp}"]
                      + [f"{k}={v}" for k, v in extra.items()])
    net = Network(cfg.architecture(), mix_prob=cfg.mix_prob)
    params = None
    if init is not None:
        params = net.init_params(np.random.default_rng(seed))
        transfer_cnn(init, params)
    res = train(cfg.train_config(), net, cfg.make_env(), cfg.make_env(cfg.seed + 1), seed=seed,
                out_dir=str(tmp), params=params, model_name=model, deterministic=True)
    final = evaluate(net, res.params, cfg.make_env(cfg.seed + 2), episodes=200,
                     epsilon=cfg.eval_epsilon, rng=np.random.default_rng(seed))
    best = max(r["mean_eval_reward"] for r in res.metrics)
    return res, best, final.mean


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("DARQN_SKIP_LEARNING") == "1", reason="learning run skipped")
def test_c09_desk_learning(tmp_path):
    import time
    t0 = time.time()
    soft, soft_best, soft_final = _desk_run(tmp_path / "soft", "darqn_soft", 0)
    dqn, dqn_best, dqn_final = _desk_run(tmp_path / "dqn", "dqn", 0)
    hard, hard_best, hard_final = _desk_run(
        tmp_path / "hard", "darqn_hard", 0, init=soft.params, target_reward=0.8)
    minutes = (time.time() - t0) / 60
    ok = (soft_best >= 0.9 and soft.steps <= 200_000 and dqn_best >= 0.9
          and dqn.steps <= 200_000 and hard_best >= 0.8 and hard.steps <= 200_000)
    report(9, "desk-scale learning on 24x24 Catch", ok,
           f"soft {soft_best:.2f} at {soft.steps} steps (re-eval {soft_final:.2f}); "
           f"dqn {dqn_best:.2f} at {dqn.steps} (re-eval {dqn_final:.2f}); "
           f"hard after transfer {hard_best:.2f} at {hard.steps} (re-eval {hard_final:.2f}); "
           f"{minutes:.1f} min total")


# ----------------------------------------------------------------------------- 10

def test_c10_determinism_and_serialization(tmp_path, capsys):
    from darqn.envs import Catch
    cfg = TrainConfig(lr_start=1e-3, lr_end=1e-3, eps_decay_steps=200, unroll=2, batch_size=4,
                      target_sync=50, total_steps=200, learn_start=40, replay_capacity=1000,
                      eval_period=100, eval_steps=60)
    csvs = []
    for run in ("a", "b"):
        net = Network(Architecture.from_profile("darqn_hard", "small", 3))
        train(cfg, net, Catch(24), Catch(24), seed=11, out_dir=str(tmp_path / run),
              deterministic=True)
        csvs.append((tmp_path / run / "metrics.csv").read_bytes())
    metrics_same = csvs[0] == csvs[1]

    ck = tmp_path / "a" / "checkpoints" / "final.darq"
    model, params = checkpoint.load(ck)
    again = tmp_path / "again.darq"
    checkpoint.save(again, params, model)
    ckpt_same = again.read_bytes() == ck.read_bytes()

    outs = []
    for run in ("va", "vb"):
        code = cli.main(["visualize", str(ck), "--steps", "20", "--out", str(tmp_path / run)])
        capsys.readouterr()
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    viz_same = outs[0] == outs[1] and len(outs[0]) == 21
    report(10, "determinism and serialization", metrics_same and ckpt_same and viz_same,
           f"metrics identical {metrics_same}, checkpoint round-trip identical {ckpt_same}, "
           f"visualize identical {viz_same}")
