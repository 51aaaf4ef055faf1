"""Learning loop: sequence replay, target network, Q loss, hard-attention
policy-gradient terms, schedules and soft-to-hard CNN transfer."""
import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import checkpoint
from . import numerics as nx
from .agent import Network, ParameterSet, select_action
from .numerics import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "steps", "mean_eval_reward", "mean_q", "loss", "epsilon", "alpha")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lr_start: float = 0.01
    lr_end: float = 0.00025
    lr_decay_steps: int = 1_000_000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 1_000_000
    unroll: int = 4
    update_period: int = 4
    batch_size: int = 32
    target_sync: int = 10_000
    total_steps: int = 5_000_000
    learn_start: int = 50_000
    replay_capacity: int = 500_000
    eval_period: int = 50_000
    eval_steps: int = 25_000
    eval_epsilon: float = 0.05
    mix_prob: float = 0.5
    advantage_sign: str = "prose"
    entropy_coef: float = 0.0
    rms_momentum: float = 0.95
    rms_decay: float = 0.95
    rms_eps: float = 0.01
    optimizer: str = "rmsprop"
    target_reward: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("unroll", "batch_size", "update_period", "target_sync",
                     "eval_period", "lr_decay_steps", "eps_decay_steps", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("total_steps", "learn_start", "eval_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("eps_start", "eps_end", "eval_epsilon", "mix_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.rms_momentum < 1.0:
            raise ValueError("rms_momentum must lie in [0, 1)")
        if self.advantage_sign not in ("prose", "as_printed"):
            raise ValueError("advantage_sign must be 'prose' or 'as_printed'")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValueError("optimizer must be 'rmsprop' or 'sgd'")


def schedule(step, start, end, decay_steps):
    """Linear from ``start`` at step 0 to ``end`` at ``decay_steps``, flat afterwards."""
    if decay_steps <= 0:
        raise ValueError("decay_steps must be positive")
    if step >= decay_steps:
        return end
    frac = step / decay_steps
    return start + frac * (end - start)


# ---------------------------------------------------------------------------
# replay

@dataclass
class Transition:
    frame: np.ndarray
    action: int
    reward: float
    terminal: bool


@dataclass
class SegmentBatch:
    frames: np.ndarray       # [B, U+1, H, W]; index U is the bootstrap successor
    actions: np.ndarray      # [B, U]
    rewards: np.ndarray      # [B, U]
    terminals: np.ndarray    # [B, U]
    episode_ids: np.ndarray  # [B]
    starts: np.ndarray       # [B]

    @property
    def size(self):
        return self.actions.shape[0]

    @property
    def unroll(self):
        return self.actions.shape[1]


@dataclass
class _Episode:
    uid: int
    items: list = field(default_factory=list)
    done: bool = False


class ReplayMemory:
    """Episode-structured replay; evicts whole oldest episodes when over capacity."""

    def __init__(self, capacity, rng=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.episodes = []
        self.total = 0
        self._next_uid = 0
        self._cache = None

    def __len__(self):
        return self.total

    def append(self, tr):
        if not np.isfinite(tr.reward):
            raise ValueError("non-finite reward")
        if not self.episodes or self.episodes[-1].done:
            self.episodes.append(_Episode(self._next_uid))
            self._next_uid += 1
        ep = self.episodes[-1]
        ep.items.append(tr)
        ep.done = bool(tr.terminal)
        self.total += 1
        while self.total > self.capacity and len(self.episodes) > 1:
            self.total -= len(self.episodes.pop(0).items)
        if self.total > self.capacity:   # a single episode longer than capacity
            drop = self.total - self.capacity
            del ep.items[:drop]
            self.total -= drop
        self._cache = None

    @staticmethod
    def _starts(ep, unroll):
        n = len(ep.items)
        # an unfinished episode needs a stored successor frame after the segment
        return max(0, n - unroll + 1) if ep.done else max(0, n - unroll)

    def eligible(self, unroll):
        if self._cache is None or self._cache[0] != unroll:
            counts = np.array([self._starts(ep, unroll) for ep in self.episodes], dtype=np.int64)
            self._cache = (unroll, np.cumsum(counts))
        cum = self._cache[1]
        return int(cum[-1]) if cum.size else 0

    def sample(self, batch, unroll, rng=None):
        """``batch`` segments drawn uniformly (with replacement) over all eligible starts."""
        rng = rng if rng is not None else self.rng
        n = self.eligible(unroll)
        if n == 0:
            raise ValueError(f"no eligible segments of length {unroll}")
        return self.gather(rng.integers(n, size=batch), unroll)

    def gather(self, picks, unroll):
        """Segments by flat eligible-start index in ``[0, eligible(unroll))``."""
        picks = np.asarray(picks, dtype=np.int64)
        n = self.eligible(unroll)
        if picks.size and (picks.min() < 0 or picks.max() >= n):
            raise IndexError(f"segment index outside [0, {n})")
        cum = self._cache[1]
        batch = picks.size
        ep_idx = np.searchsorted(cum, picks, side="right")
        first = self.episodes[0].items[0].frame
        frames = np.zeros((batch, unroll + 1) + first.shape)
        actions = np.zeros((batch, unroll), dtype=np.int64)
        rewards = np.zeros((batch, unroll))
        terminals = np.zeros((batch, unroll), dtype=bool)
        uids = np.zeros(batch, dtype=np.int64)
        starts = np.zeros(batch, dtype=np.int64)
        for b, (k, p) in enumerate(zip(ep_idx, picks)):
            ep = self.episodes[k]
            s = int(p - (cum[k - 1] if k else 0))
            for t in range(unroll):
                tr = ep.items[s + t]
                frames[b, t] = tr.frame
                actions[b, t] = tr.action
                rewards[b, t] = tr.reward
                terminals[b, t] = tr.terminal
            if s + unroll < len(ep.items):
                frames[b, unroll] = ep.items[s + unroll].frame
            else:   # segment ends on the terminal step; successor unused
                frames[b, unroll] = ep.items[-1].frame
            uids[b] = ep.uid
            starts[b] = s
        return SegmentBatch(frames, actions, rewards, terminals, uids, starts)


def replay_append(memory, transition):
    memory.append(transition)


def replay_sample(memory, batch, unroll, rng):
    return memory.sample(batch, unroll, rng)


# ---------------------------------------------------------------------------
# targets and losses

class TargetNetwork:
    def __init__(self, params, step=0):
        self.params = params.copy()
        self.last_sync = step

    def sync(self, online, step=0):
        self.params = online.copy()
        self.last_sync = step
        return self


def sync_target(params, target, step=0):
    return target.sync(params, step)


def unroll_online(net, params, batch, rng=None, policy_terms=False):
    """Forward over the U segment frames from a zeroed recurrent state."""
    return net.unroll(params, batch.frames[:, :batch.unroll], rng=rng, policy_terms=policy_terms)


def compute_target(net, target_params, batch, gamma, rng=None):
    """Y[b, t] = r + gamma * max_a Q(s_{t+1}, a; target), or r on terminal steps.

    The target pass re-unrolls from a zeroed state over all U+1 frames and
    runs with recording suspended, so Y is a constant for differentiation.
    """
    with nx.no_grad():
        outs = net.unroll(target_params, batch.frames, rng=rng)
    max_next = np.stack([out.q.data.max(axis=-1) for out in outs[1:]], axis=1)
    return batch.rewards + gamma * np.where(batch.terminals, 0.0, max_next)


def q_loss(outs, actions, targets):
    """Mean over batch x unroll of (Y - Q(s, a))^2; only the taken action's Q carries gradient."""
    total = None
    for t, out in enumerate(outs):
        q_a = nx.gather_last(out.q, actions[:, t])
        err = nx.sum_all(nx.square(nx.sub(Tensor(targets[:, t]), q_a)))
        total = err if total is None else nx.add(total, err)
    return nx.scale(total, 1.0 / targets.size)


def hard_policy_update_terms(outs, targets, advantage_sign="prose", entropy_coef=0.0):
    """Policy-gradient and baseline-regression losses for the hard attention model.

    Returns ``(policy_loss, baseline_loss, sampled_fraction)``. The policy loss
    gradient w.r.t. the attention parameters is ``-(Y - G) grad log pi(i)``
    averaged over batch x unroll (prose orientation), or ``-(G - Y) ...`` with
    ``advantage_sign='as_printed'``. Soft (mixed) steps contribute nothing.
    """
    n = targets.size
    pg = base = None
    sampled = 0
    for t, out in enumerate(outs):
        if out.log_prob is None or out.index is None:
            raise ValueError("no sampled attention index recorded for the policy update")
        y = targets[:, t]
        g = out.baseline
        mask = (np.asarray(out.index) >= 0).astype(np.float64)
        sampled += int(mask.sum())
        adv = (y - g.data) if advantage_sign == "prose" else (g.data - y)
        term = nx.sum_all(nx.mul(out.log_prob, Tensor(adv * mask)))
        if entropy_coef:
            logp_all = out.extra["log_probs_all"]
            ent = nx.sum_all(nx.mul(nx.exp(logp_all), logp_all))   # = -entropy
            term = nx.add(term, nx.scale(ent, -entropy_coef))
        sq = nx.sum_all(nx.square(nx.sub(g, Tensor(y))))
        pg = term if pg is None else nx.add(pg, term)
        base = sq if base is None else nx.add(base, sq)
    return nx.scale(pg, -1.0 / n), nx.scale(base, 1.0 / n), sampled / n


class Learner:
    """Owns the optimizer and target network for one online ParameterSet."""

    def __init__(self, net, params, cfg, rng):
        self.net = net
        self.params = params
        self.cfg = cfg
        self.rng = rng
        self.target = TargetNetwork(params)
        if cfg.optimizer == "sgd":
            self.opt = nx.SGD(params.tensors(), lr=cfg.lr_start)
        else:
            self.opt = nx.RMSProp(params.tensors(), lr=cfg.lr_start, momentum=cfg.rms_momentum,
                                  decay=cfg.rms_decay, eps=cfg.rms_eps)

    def update(self, batch, lr):
        cfg = self.cfg
        hard = self.net.arch.hard
        y = compute_target(self.net, self.target.params, batch, cfg.gamma, self.rng)
        self.params.zero_grad()
        with nx.Tape() as tape:
            outs = unroll_online(self.net, self.params, batch, self.rng, policy_terms=hard)
            lq = q_loss(outs, batch.actions, y)
            loss = lq
            stats = {"q_loss": lq.item()}
            if hard:
                lpg, lb, frac = hard_policy_update_terms(outs, y, cfg.advantage_sign,
                                                         cfg.entropy_coef)
                loss = nx.add(nx.add(lq, lpg), lb)
                stats.update(pg_loss=lpg.item(), baseline_loss=lb.item(), sampled=frac)
        if not np.isfinite(loss.data).all():
            raise TrainingError(f"non-finite loss {loss.item()} (q_loss={stats['q_loss']})")
        nx.backward(tape, loss)
        self.opt.lr = lr
        self.opt.step()
        stats["loss"] = loss.item()
        return stats


def transfer_cnn(soft_checkpoint, hard_params):
    """Copy conv kernels and biases from a trained soft model into ``hard_params``."""
    if isinstance(soft_checkpoint, (str, os.PathLike)):
        if not os.path.exists(soft_checkpoint):
            raise FileNotFoundError(f"missing checkpoint {soft_checkpoint}")
        _, source = checkpoint.load(soft_checkpoint)
    elif soft_checkpoint is None:
        raise FileNotFoundError("missing checkpoint")
    else:
        source = soft_checkpoint
    conv = [k for k in hard_params if k.startswith("conv")]
    src_conv = [k for k in source if k.startswith("conv")]
    if conv != src_conv:
        raise ValueError(f"conv layers differ: {src_conv} vs {conv}")
    for k in conv:
        if source[k].shape != hard_params[k].shape:
            raise ValueError(f"geometry mismatch for {k}: {source[k].shape} vs {hard_params[k].shape}")
        hard_params[k].data[...] = source[k].data
    return hard_params


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainResult:
    metrics: list
    checkpoints: list
    params: ParameterSet
    steps: int


def _fmt(x):
    return "nan" if x is None or not np.isfinite(x) else f"{x:.10g}"


def metrics_csv_row(row):
    return ",".join([str(row["epoch"]), str(row["steps"])] +
                    [_fmt(row[k]) for k in METRICS_HEADER[2:]])


def train(cfg, net, env, eval_env, seed=0, out_dir=None, params=None, model_name=None,
          deterministic=True, progress=None):
    """Act / store / update / sync / evaluate loop.

    Writes ``metrics.csv`` and ``checkpoints/step_XXXXXXXX.darq`` under
    ``out_dir`` when given. ``params`` overrides the fresh initialization (used
    for CNN transfer). Stops early once an evaluation reaches
    ``cfg.target_reward``.
    """
    from .evalviz import evaluate

    seeds = np.random.SeedSequence(seed).spawn(7)
    init_rng, act_rng, replay_rng, learn_rng, eval_rng = (
        np.random.default_rng(seeds[i]) for i in (0, 2, 3, 4, 6))
    env_seed = int(seeds[1].generate_state(1)[0])
    eval_seed = int(seeds[5].generate_state(1)[0])

    if params is None:
        params = net.init_params(init_rng)
    model_name = model_name or net.arch.model
    memory = ReplayMemory(cfg.replay_capacity, replay_rng)
    learner = Learner(net, params, cfg, learn_rng)

    ckpt_dir = metrics_path = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w", newline="") as fh:
            fh.write(",".join(METRICS_HEADER) + "\n")

    checkpoints = []

    def save(tag):
        if ckpt_dir is None:
            return
        path = os.path.join(ckpt_dir, f"{tag}.darq")
        checkpoint.save(path, params, model_name)
        checkpoints.append(path)

    save("step_00000000")
    metrics = []
    limits = _single_thread() if deterministic else None
    try:
        frame = env.reset(env_seed)
        state = net.initial_state()
        losses = []
        best = -np.inf
        epoch = 0
        for step in range(cfg.total_steps):
            if step % cfg.target_sync == 0:
                learner.target.sync(params, step)
            eps = schedule(step, cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
            with nx.no_grad():
                out = net.step(params, frame, state, rng=act_rng)
            action = select_action(out.q.data, eps, act_rng)
            res = env.step(action)
            memory.append(Transition(frame, action, res.reward, res.terminal))
            if res.terminal:
                frame = env.reset()
                state = net.initial_state()
            else:
                frame = res.frame
                state = out.state

            if (step >= cfg.learn_start and step % cfg.update_period == 0
                    and memory.eligible(cfg.unroll) >= cfg.batch_size):
                batch = memory.sample(cfg.batch_size, cfg.unroll)
                lr = schedule(step, cfg.lr_start, cfg.lr_end, cfg.lr_decay_steps)
                losses.append(learner.update(batch, lr)["loss"])

            if (step + 1) % cfg.eval_period == 0 or step + 1 == cfg.total_steps:
                epoch += 1
                report = evaluate(net, params, eval_env, steps=cfg.eval_steps or None,
                                  episodes=None if cfg.eval_steps else 1,
                                  epsilon=cfg.eval_epsilon, rng=eval_rng, seed=eval_seed)
                eval_seed = None   # only the first evaluation reseeds the eval env
                row = dict(epoch=epoch, steps=step + 1, mean_eval_reward=report.mean,
                           mean_q=report.mean_q,
                           loss=float(np.mean(losses)) if losses else None,
                           epsilon=eps,
                           alpha=schedule(step, cfg.lr_start, cfg.lr_end, cfg.lr_decay_steps))
                losses = []
                metrics.append(row)
                if metrics_path is not None:
                    with open(metrics_path, "a", newline="") as fh:
                        fh.write(metrics_csv_row(row) + "\n")
                save(f"step_{step + 1:08d}")
                if report.mean > best and ckpt_dir is not None:
                    best = report.mean
                    checkpoint.save(os.path.join(ckpt_dir, "best.darq"), params, model_name)
                if progress is not None:
                    progress(row)
                log.info("epoch %d steps %d reward %.3f", epoch, step + 1, report.mean)
                if cfg.target_reward is not None and report.mean >= cfg.target_reward:
                    break
    finally:
        if limits is not None:
            limits.restore_original_limits()
    if ckpt_dir is not None:
        checkpoint.save(os.path.join(ckpt_dir, "final.darq"), params, model_name)
    steps = metrics[-1]["steps"] if metrics else 0
    return TrainResult(metrics, checkpoints, params, steps)


def _single_thread():
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metrics_to_csv(metrics):
    buf = io.StringIO()
    buf.write(",".join(METRICS_HEADER) + "\n")
    for row in metrics:
        buf.write(metrics_csv_row(row) + "\n")
    return buf.getvalue()


def train_config_fields():
    return [f.name for f in fields(TrainConfig)]
