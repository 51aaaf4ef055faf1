"""Small deterministic pixel games and frame preprocessing.

Frames are float64 arrays in [0, 1], row 0 at the top. Every environment owns
a ``numpy.random.Generator``; ``reset(seed)`` reseeds it, ``reset()`` keeps
drawing from the current stream.
"""
from dataclasses import dataclass

import numpy as np


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    action_count: int
    height: int
    width: int
    seed: int = 0

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("an environment needs at least two actions")


@dataclass
class StepResult:
    frame: np.ndarray
    reward: float
    terminal: bool


class _PixelEnv:
    action_count = 2
    reward_range = (-1.0, 1.0)

    def __init__(self, size=24, seed=0, clip_rewards=False):
        self.size = int(size)
        self.seed = seed
        self.clip_rewards = clip_rewards
        self.rng = np.random.default_rng(seed)
        self.terminal = True
        self.steps = 0

    @property
    def spec(self):
        return EnvSpec(self.action_count, self.size, self.size, self.seed)

    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed
            self.rng = np.random.default_rng(seed)
        self.terminal = False
        self.steps = 0
        self._new_state()
        return self.render()

    def step(self, action):
        if self.terminal:
            raise EnvError("step() on a terminal environment; call reset() first")
        action = int(action)
        if not 0 <= action < self.action_count:
            raise EnvError(f"action {action} outside [0, {self.action_count})")
        self.steps += 1
        reward, terminal = self._transition(action)
        if self.clip_rewards:
            reward = float(np.clip(reward, -1.0, 1.0))
        self.terminal = terminal
        return StepResult(self.render(), float(reward), terminal)

    def state_key(self):
        """Hashable snapshot of the full dynamic state (used by read-only checks)."""
        raise NotImplementedError


class Catch(_PixelEnv):
    """A one-pixel ball falls one row per step; a 3-pixel paddle on the bottom
    row moves left / stays / moves right. Reaching the bottom row ends the
    episode with +1 if the paddle is under the ball, otherwise -1. An episode
    on an H-row board always lasts H - 1 steps.
    """

    action_count = 3
    paddle_width = 3

    def _new_state(self):
        n = self.size
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(n))
        self.paddle = int(self.rng.integers(1, n - 1))   # paddle centre

    def _transition(self, action):
        n = self.size
        self.paddle = min(max(self.paddle + action - 1, 1), n - 2)
        self.ball_row += 1
        if self.ball_row == n - 1:
            caught = abs(self.ball_col - self.paddle) <= 1
            return (1.0 if caught else -1.0), True
        return 0.0, False

    def render(self):
        n = self.size
        frame = np.zeros((n, n))
        frame[n - 1, self.paddle - 1:self.paddle + 2] = 1.0
        frame[self.ball_row, self.ball_col] = 1.0
        return frame

    def optimal_action(self):
        """Scripted policy that always catches: move the paddle toward the ball column."""
        target = min(max(self.ball_col, 1), self.size - 2)
        return 1 + int(np.sign(target - self.paddle))

    def state_key(self):
        return (self.ball_row, self.ball_col, self.paddle, self.terminal, self.steps,
                repr(self.rng.bit_generator.state))


class SeekAvoid(_PixelEnv):
    """Agent on a coarse grid with one goal (+1) and one hazard (-1).

    The layout is visible only during the first ``reveal_steps`` frames of an
    episode (``None`` keeps it visible throughout), so acting well later on
    needs memory. Episodes stop at the goal, at the hazard, or after
    ``max_steps`` steps with reward 0.
    """

    action_count = 4
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))   # up, down, left, right

    def __init__(self, size=24, seed=0, clip_rewards=False, cells=6, reveal_steps=4,
                 max_steps=100):
        if size % cells:
            raise ValueError(f"frame size {size} not divisible into {cells} cells")
        super().__init__(size, seed, clip_rewards)
        self.cells = cells
        self.cell_px = size // cells
        self.reveal_steps = reveal_steps
        self.max_steps = max_steps

    def _new_state(self):
        picks = self.rng.choice(self.cells * self.cells, size=3, replace=False)
        self.agent, self.goal, self.hazard = (divmod(int(p), self.cells) for p in picks)

    def _transition(self, action):
        dr, dc = self.moves[action]
        r = min(max(self.agent[0] + dr, 0), self.cells - 1)
        c = min(max(self.agent[1] + dc, 0), self.cells - 1)
        self.agent = (r, c)
        if self.agent == self.goal:
            return 1.0, True
        if self.agent == self.hazard:
            return -1.0, True
        return 0.0, self.steps >= self.max_steps

    def _paint(self, frame, cell, value):
        p = self.cell_px
        frame[cell[0] * p:(cell[0] + 1) * p, cell[1] * p:(cell[1] + 1) * p] = value

    def render(self):
        frame = np.zeros((self.size, self.size))
        if self.reveal_steps is None or self.steps < self.reveal_steps:
            self._paint(frame, self.goal, 0.7)
            self._paint(frame, self.hazard, 0.35)
        self._paint(frame, self.agent, 1.0)
        return frame

    def state_key(self):
        return (self.agent, self.goal, self.hazard, self.terminal, self.steps,
                repr(self.rng.bit_generator.state))


ENVIRONMENTS = {"catch": Catch, "seek_avoid": SeekAvoid}


def make_env(name, size=24, seed=0, clip_rewards=False):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    if cls is SeekAvoid and size % 6:
        return cls(size=size, seed=seed, clip_rewards=clip_rewards, cells=_cells_for(size))
    return cls(size=size, seed=seed, clip_rewards=clip_rewards)


def _cells_for(size):
    for cells in (6, 7, 4, 3, 2):
        if size % cells == 0:
            return cells
    return 1


def env_reset(env, seed=None):
    return env.reset(seed)


def env_step(env, action):
    return env.step(action)


def _area_matrix(src, dst):
    """Rows give each output pixel's overlap fractions with the source pixels."""
    m = np.zeros((dst, src))
    ratio = src / dst
    for o in range(dst):
        lo, hi = o * ratio, (o + 1) * ratio
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for s in range(first, min(last, src)):
            m[o, s] = min(hi, s + 1) - max(lo, s)
        m[o] /= ratio
    return m


def preprocess(raw, target_h, target_w):
    """Area-averaged resize to a single grayscale frame in [0, 1].

    RGB input ([H, W, 3]) is reduced to luminance first.
    """
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target frame size must be positive")
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return np.clip(img, 0.0, 1.0)
    out = _area_matrix(h, target_h) @ img @ _area_matrix(w, target_w).T
    return np.clip(out, 0.0, 1.0)


def to_pgm(frame):
    """Binary PGM (P5, maxval 255) bytes for a [0, 1] frame."""
    img = np.asarray(frame, dtype=np.float64)
    h, w = img.shape
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path, frame):
    with open(path, "wb") as fh:
        fh.write(to_pgm(frame))


def read_pnm(path_or_bytes):
    """Parse P5/P6 bytes (or a path) into (magic, width, height, pixels)."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    magic = fields[0].decode()
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValueError(f"unsupported PNM header {magic} maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    pix = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    if pix.size != w * h * channels:
        raise ValueError("truncated PNM payload")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return magic, w, h, pix.reshape(shape)
