"""Network architectures: DQN, DRQN and the soft / hard attention recurrent Q-networks.

All forward functions work on a single example or a leading batch axis.
Feature grids are location-major: ``grid[..., i, :]`` is the D-channel vector
at spatial cell ``i = row * m + col`` of the last conv layer.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MODELS = ("dqn", "drqn", "darqn_soft", "darqn_hard")

PROFILES = {
    "paper": dict(input_size=84, convs=((32, 8, 4), (64, 4, 2), (256, 3, 1)),
                  hidden=256, attention_hidden=256),
    "small": dict(input_size=24, convs=((8, 4, 2), (16, 3, 2)),
                  hidden=64, attention_hidden=64),
}


@dataclass(frozen=True)
class Architecture:
    model: str
    actions: int
    input_size: int
    convs: tuple
    hidden: int
    attention_hidden: int
    profile: str = "custom"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.actions < 1:
            raise ValueError("need at least one action")
        self.grid_side  # validates the conv geometry

    @classmethod
    def from_profile(cls, model, profile, actions):
        try:
            geo = PROFILES[profile]
        except KeyError:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(model=model, actions=actions, profile=profile, **geo)

    @property
    def grid_side(self):
        size = self.input_size
        for _, k, s in self.convs:
            size = nx.conv_output_size(size, k, s)
        return size

    @property
    def features(self):
        return self.convs[-1][0]

    @property
    def locations(self):
        return self.grid_side ** 2

    @property
    def recurrent(self):
        return self.model != "dqn"

    @property
    def attention(self):
        return self.model.startswith("darqn")

    @property
    def hard(self):
        return self.model == "darqn_hard"

    def receptive_fields(self):
        """(size, stride) of one last-layer cell in input pixels."""
        size, stride = 1, 1
        for _, k, s in self.convs:
            size += (k - 1) * stride
            stride *= s
        return size, stride


def param_shapes(arch):
    """Ordered (name, shape, fan_in) triples for every trainable array."""
    out = []
    cin = 1
    for n, (cout, k, _) in enumerate(arch.convs, start=1):
        fan = cin * k * k
        out.append((f"conv{n}.weight", (cout, cin, k, k), fan))
        out.append((f"conv{n}.bias", (cout,), fan))
        cin = cout
    d, h, ha = arch.features, arch.hidden, arch.attention_hidden
    flat = d * arch.locations
    if arch.model == "dqn":
        out += [("fc.weight", (h, flat), flat), ("fc.bias", (h,), flat)]
    else:
        x_dim = d if arch.attention else flat
        if arch.attention:
            out += [("att.inner.weight", (ha, d), d), ("att.inner.bias", (ha,), d),
                    ("att.recurrent.weight", (ha, h), h),
                    ("att.outer.weight", (1, ha), ha), ("att.outer.bias", (1,), ha)]
        out += [("lstm.w_ih", (4 * h, x_dim), x_dim), ("lstm.b_ih", (4 * h,), x_dim),
                ("lstm.w_hh", (4 * h, h), h), ("lstm.b_hh", (4 * h,), h)]
    out += [("q.weight", (arch.actions, h), h), ("q.bias", (arch.actions,), h)]
    if arch.hard:
        out += [("baseline.weight", (1, h), h), ("baseline.bias", (1,), h)]
    return out


def count_params(arch):
    return int(sum(np.prod(shape) for _, shape, _ in param_shapes(arch)))


class ParameterSet:
    """Named, ordered trainable arrays."""

    def __init__(self, tensors):
        self._t = OrderedDict(tensors)

    @classmethod
    def initialize(cls, arch, rng):
        tensors = OrderedDict()
        for name, shape, fan_in in param_shapes(arch):
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                   requires_grad=True, name=name)
        return cls(tensors)

    @classmethod
    def zeros(cls, arch):
        return cls((name, Tensor(np.zeros(shape), requires_grad=True, name=name))
                   for name, shape, _ in param_shapes(arch))

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self):
        return list(self._t)

    def items(self):
        return self._t.items()

    def tensors(self):
        return list(self._t.values())

    def count(self):
        return int(sum(t.size for t in self._t.values()))

    def copy(self):
        return ParameterSet((k, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k))
                            for k, t in self._t.items())

    def assign(self, other):
        """Overwrite every array in place with ``other``'s values (bit-exact)."""
        if other.names() != self.names():
            raise ValueError("parameter sets have different names")
        for k, t in self._t.items():
            src = other[k].data
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {t.data.shape}")
            t.data[...] = src

    def zero_grad(self):
        for t in self._t.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0.0

    def grads(self):
        return OrderedDict((k, t.grad) for k, t in self._t.items())

    def equal(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self[k].data, other[k].data) for k in self))

    def digest(self):
        import hashlib
        h = hashlib.sha256()
        for k, t in self._t.items():
            h.update(k.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass
class HiddenState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden, batch=None):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class AttentionOutput:
    weights: Tensor
    context: Tensor
    index: Optional[np.ndarray] = None     # -1 marks soft (mixed) rows


@dataclass
class StepOutput:
    q: Tensor
    state: Optional[HiddenState]
    weights: Optional[Tensor] = None
    index: Optional[np.ndarray] = None
    log_prob: Optional[Tensor] = None
    baseline: Optional[Tensor] = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# building blocks

def encode(frames, params, arch):
    """Conv stack with rectifiers -> feature grid [..., L, D]."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    single = x.data.ndim == 2
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    elif x.data.ndim == 3:
        x = nx.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.shape[-2:] != (arch.input_size, arch.input_size):
        raise ValueError(f"frame shape {x.shape[-2:]} does not match "
                         f"{arch.input_size}x{arch.input_size} input")
    for n, (_, _, stride) in enumerate(arch.convs, start=1):
        x = nx.relu(nx.conv2d(x, params[f"conv{n}.weight"], params[f"conv{n}.bias"], stride))
    # [.., D, m, m] -> [.., m, m, D] -> [.., L, D]
    if x.data.ndim == 3:
        x = nx.transpose(x, (1, 2, 0))
        return nx.reshape(x, (arch.locations, arch.features))
    x = nx.transpose(x, (0, 2, 3, 1))
    return nx.reshape(x, (x.shape[0], arch.locations, arch.features))


def attention_logits(grid, h_prev, params):
    """Pre-softmax score per location; the W h_prev term is computed once."""
    inner = nx.affine(grid, params["att.inner.weight"], params["att.inner.bias"])
    rec = nx.affine(h_prev, params["att.recurrent.weight"])
    rec = nx.reshape(rec, rec.shape[:-1] + (1, rec.shape[-1]))
    act = nx.tanh(nx.add(inner, rec))
    s = nx.affine(act, params["att.outer.weight"], params["att.outer.bias"])
    return nx.reshape(s, s.shape[:-1])


def attention_scores(grid, h_prev, params):
    """Attention weights over the L locations (softmax of the per-location scores)."""
    return nx.softmax(attention_logits(grid, h_prev, params))


def soft_context(grid, weights):
    return nx.weighted_sum(grid, weights)


def hard_context(grid, weights, rng, mix_soft):
    """Soft context when ``mix_soft``; otherwise sample one location per row.

    ``mix_soft`` may be a bool or a per-row boolean array. Sampled rows get a
    constant one-hot selector, so no Q-loss gradient reaches the weights there.
    """
    w = weights.data
    single = w.ndim == 1
    w2 = w[None] if single else w
    mix = np.broadcast_to(np.asarray(mix_soft, dtype=bool), (w2.shape[0],))
    if single:
        idx = np.array([nx.categorical_sample(w, rng)])
    else:
        idx = nx.categorical_sample_rows(w2, rng)
    if mix.all():
        return AttentionOutput(weights, soft_context(grid, weights),
                               np.full(w2.shape[0], -1) if not single else None)
    onehot = np.zeros_like(w2)
    onehot[np.arange(w2.shape[0]), idx] = 1.0
    keep = mix.astype(np.float64)[:, None]
    if single:
        onehot, keep = onehot[0], keep[0]
    if mix.any():
        eff = nx.add(nx.mul(weights, keep), onehot * (1.0 - keep))
    else:
        eff = Tensor(onehot)
    index = np.where(mix, -1, idx)
    return AttentionOutput(weights, nx.weighted_sum(grid, eff),
                           index[0] if single else index)


def lstm_params(params):
    return (params["lstm.w_ih"], params["lstm.b_ih"], params["lstm.w_hh"], params["lstm.b_hh"])


def q_step(z, state, params):
    h, c = nx.lstm_step(z, state.h, state.c, *lstm_params(params))
    q = nx.affine(h, params["q.weight"], params["q.bias"])
    return q, HiddenState(h, c)


def baseline(h, params):
    """Scalar value estimate G = Linear(h) used by the hard-attention update."""
    if "baseline.weight" not in params:
        raise ValueError("baseline head only exists in the hard-attention model")
    g = nx.affine(h, params["baseline.weight"], params["baseline.bias"])
    return nx.reshape(g, g.shape[:-1])


def select_action(q_values, epsilon, rng):
    """Epsilon-greedy; argmax ties go to the lowest index.

    One uniform is always drawn so the RNG stream does not depend on Q.
    """
    q = np.asarray(q_values, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ValueError("empty Q-value vector")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


# ---------------------------------------------------------------------------

class Network:
    """Stateless forward pass for one architecture; parameters are passed in."""

    def __init__(self, arch, mix_prob=0.5):
        self.arch = arch
        self.mix_prob = mix_prob

    def init_params(self, rng):
        return ParameterSet.initialize(self.arch, rng)

    def initial_state(self, batch=None):
        if not self.arch.recurrent:
            return None
        return HiddenState.zeros(self.arch.hidden, batch)

    def encode_sequence(self, params, frames):
        """CNN over a [B, T, H, W] block in one pass -> grid [B, T, L, D]."""
        b, t = frames.shape[:2]
        grid = encode(frames.reshape((b * t,) + frames.shape[2:]), params, self.arch)
        return nx.reshape(grid, (b, t) + grid.shape[1:])

    def step(self, params, frames, state, rng=None, policy_terms=False, grid=None):
        """Advance one timestep on a frame (``[H,W]``) or batch (``[N,H,W]``).

        A precomputed feature ``grid`` skips the CNN. Hard mode draws, in
        order, one mixing uniform per row and then one sampling uniform per
        row from ``rng``.
        """
        arch = self.arch
        if grid is None:
            grid = encode(frames, params, arch)
        if arch.model == "dqn":
            flat = nx.reshape(grid, grid.shape[:-2] + (arch.locations * arch.features,))
            hid = nx.relu(nx.affine(flat, params["fc.weight"], params["fc.bias"]))
            q = nx.affine(hid, params["q.weight"], params["q.bias"])
            return StepOutput(q, None)
        if arch.model == "drqn":
            flat = nx.reshape(grid, grid.shape[:-2] + (arch.locations * arch.features,))
            q, new = q_step(flat, state, params)
            return StepOutput(q, new)

        weights = attention_scores(grid, state.h, params)
        if not arch.hard:
            q, new = q_step(soft_context(grid, weights), state, params)
            return StepOutput(q, new, weights=weights)

        if rng is None:
            raise ValueError("hard attention needs an rng to sample locations")
        rows = 1 if weights.data.ndim == 1 else weights.shape[0]
        mix = rng.random(rows) < self.mix_prob
        if weights.data.ndim == 1:
            mix = bool(mix[0])
        att = hard_context(grid, weights, rng, mix)
        q, new = q_step(att.context, state, params)
        out = StepOutput(q, new, weights=weights, index=np.asarray(att.index)
                         if att.index is not None else np.asarray(-1))
        out.baseline = baseline(nx.detach(new.h), params)
        if policy_terms:
            # score path with h_{t-1} held constant: no credit flows to earlier steps
            logp = nx.log_softmax(attention_logits(grid, nx.detach(state.h), params))
            out.log_prob = nx.gather_last(logp, np.maximum(out.index, 0))
            out.extra["log_probs_all"] = logp
        return out

    def unroll(self, params, frames, rng=None, policy_terms=False):
        """Run a [B, T, H, W] block from a zeroed state; returns per-step outputs."""
        grids = self.encode_sequence(params, frames)
        state = self.initial_state(frames.shape[0])
        outs = []
        for t in range(frames.shape[1]):
            out = self.step(params, None, state, rng=rng, policy_terms=policy_terms,
                            grid=nx.take(grids, t, axis=1))
            state = out.state
            outs.append(out)
        return outs
