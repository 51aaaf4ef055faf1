"""Evaluation rollouts, attention heat maps and trajectory capture."""
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .agent import select_action

INDEX_HEADER = "step,action,reward,max_q,att_index"


@dataclass
class EvalReport:
    episodes: int
    mean: float
    std: float
    steps: int
    mean_q: float
    rewards: tuple = ()

    def __str__(self):
        return (f"mean reward {self.mean:.4f} +/- {self.std:.4f} over {self.episodes} "
                f"episodes ({self.steps} steps, mean max-Q {self.mean_q:.4f})")


@dataclass
class RolloutStep:
    frame: np.ndarray
    action: int
    reward: float
    terminal: bool
    q: np.ndarray
    weights: Optional[np.ndarray]
    index: Optional[int]


def rollout(net, params, env, epsilon, rng, seed=None, policy=None):
    """Endless generator of ε-greedy steps; recurrent state is zeroed per episode.

    ``policy(env, q)`` replaces the greedy choice when given (scripted
    oracles); exploration draws follow the same pattern as ``select_action``.
    """
    frame = env.reset(seed)
    state = net.initial_state()
    while True:
        with nx.no_grad():
            out = net.step(params, frame, state, rng=rng)
        q = out.q.data
        if policy is None:
            action = select_action(q, epsilon, rng)
        elif rng.random() < epsilon:
            action = int(rng.integers(env.action_count))
        else:
            action = policy(env, q)
        res = env.step(action)
        index = None
        if out.index is not None and int(out.index) >= 0:
            index = int(out.index)
        weights = out.weights.data if out.weights is not None else None
        yield RolloutStep(frame, action, res.reward, res.terminal, q, weights, index)
        if res.terminal:
            frame = env.reset()
            state = net.initial_state()
        else:
            frame = res.frame
            state = out.state


def evaluate(net, params, env, steps=None, episodes=None, epsilon=0.05, rng=None, seed=None,
             policy=None):
    """Run for ``steps`` environment steps or ``episodes`` whole episodes.

    With a step budget, only completed episodes are averaged; if none
    completes, the partial episode counts as one.
    """
    if steps is None and episodes is None:
        raise ValueError("give a step budget or an episode count")
    rng = rng if rng is not None else np.random.default_rng(0)
    rewards, current, n, qsum = [], 0.0, 0, 0.0
    for st in rollout(net, params, env, epsilon, rng, seed=seed, policy=policy):
        n += 1
        qsum += float(st.q.max())
        current += st.reward
        if st.terminal:
            rewards.append(current)
            current = 0.0
            if episodes is not None and len(rewards) >= episodes:
                break
        if steps is not None and n >= steps:
            break
    if not rewards:
        rewards.append(current)
    arr = np.array(rewards)
    return EvalReport(len(rewards), float(arr.mean()), float(arr.std()), n,
                      qsum / max(n, 1), tuple(rewards))


# ---------------------------------------------------------------------------
# heat maps

def receptive_boxes(arch):
    """(top, left, size) of every grid cell's receptive field, location-major."""
    size, stride = arch.receptive_fields()
    m = arch.grid_side
    return [(r * stride, c * stride, size) for r in range(m) for c in range(m)]


@dataclass
class AttentionFrame:
    frame: np.ndarray
    weights: np.ndarray
    raw: np.ndarray        # splatted mass, sums to sum(w_i * area_i)
    density: np.ndarray    # raw / raw.sum()
    heat: np.ndarray       # coverage-normalized, scaled to [0, 1]
    composite: np.ndarray  # frame dimmed outside the attended region
    action: Optional[int] = None
    q_values: Optional[np.ndarray] = None


def render_attention(frame, weights, arch, dim=0.4, action=None, q_values=None):
    """Project attention weights back to input pixels through receptive fields.

    Each cell's weight is spread uniformly over its receptive field;
    overlapping fields sum. Dividing by the per-pixel coverage makes uniform
    weights give a flat map. Pixels with heat h keep brightness
    ``dim + (1 - dim) * h``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != arch.locations:
        raise ValueError(f"{w.size} weights for a {arch.locations}-location grid")
    if frame.shape != (arch.input_size, arch.input_size):
        raise ValueError(f"frame {frame.shape} does not match the architecture input")
    raw = np.zeros_like(frame)
    cover = np.zeros_like(frame)
    for wi, (top, left, size) in zip(w, receptive_boxes(arch)):
        raw[top:top + size, left:left + size] += wi
        cover[top:top + size, left:left + size] += 1.0
    total = raw.sum()
    density = raw / total if total > 0 else raw
    level = np.divide(raw, cover, out=np.zeros_like(raw), where=cover > 0)
    peak = level.max()
    heat = level / peak if peak > 0 else level
    composite = frame * (dim + (1.0 - dim) * heat)
    return AttentionFrame(frame, w, raw, density, heat, composite, action, q_values)


def to_ppm(att):
    """P6 bytes: grayscale composite with the heat map tinted into red."""
    g = np.clip(att.composite, 0.0, 1.0)
    heat = att.heat
    red = g + (1.0 - g) * 0.6 * heat
    rgb = np.stack([red, g * (1.0 - 0.3 * heat), g * (1.0 - 0.3 * heat)], axis=-1)
    pix = np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = g.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def capture_trajectory(net, params, env, steps, out_dir, rng=None, epsilon=0.05, seed=None):
    """Write ``frame_XXXXX.ppm`` per step and an ``index.csv`` summary.

    Models without attention get a flat heat map. Returns the list of written
    paths (index.csv last).
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = rng if rng is not None else np.random.default_rng(0)
    arch = net.arch
    lines = [INDEX_HEADER]
    written = []
    if steps > 0:
        flat = np.full(arch.locations, 1.0 / arch.locations)
        for t, st in enumerate(rollout(net, params, env, epsilon, rng, seed=seed)):
            w = st.weights if st.weights is not None else flat
            att = render_attention(st.frame, w, arch, action=st.action, q_values=st.q)
            path = os.path.join(out_dir, f"frame_{t:05d}.ppm")
            with open(path, "wb") as fh:
                fh.write(to_ppm(att))
            written.append(path)
            idx = "" if st.index is None else str(st.index)
            lines.append(f"{t},{st.action},{st.reward:.10g},{float(st.q.max()):.10g},{idx}")
            if t + 1 >= steps:
                break
    index_path = os.path.join(out_dir, "index.csv")
    with open(index_path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(index_path)
    return written
