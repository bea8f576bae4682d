"""Toy environments, scripted multimodal behavior policies and the dataset file format.

bandit2goal
    One-step bandit. Reward is a sum of two Gaussian bumps, a tall one at
    (0.6, 0.6) and a half-height one at (-0.6, -0.6). The behavior policy
    samples around either bump with equal probability.

reach2goal
    Point mass in [-1, 1]^2 with steps of at most 0.2 per axis. Reaching
    (0.7, 0.7) pays 1 and ends the episode. The scripted behavior heads for
    the goal or for a decoy at (-0.7, -0.7), chosen once per episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shortcut import NoiseSource

HEADER_PREFIX = "# sorl-dataset v1"


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    action_bound: float
    horizon: int
    gamma: float
    goal: tuple[float, ...]
    decoy: tuple[float, ...]
    # bandit: bump width; reach: goal radius
    scale: float
    # reward threshold that counts as success
    success_threshold: float

    def __post_init__(self):
        if self.horizon < 1 or not self.action_bound > 0:
            raise ValueError("invalid EnvSpec")


BANDIT2GOAL = EnvSpec("bandit2goal", 2, 2, 1.0, 1, 0.99, (0.6, 0.6), (-0.6, -0.6), 0.15, 0.75)
REACH2GOAL = EnvSpec("reach2goal", 2, 2, 0.2, 50, 0.99, (0.7, 0.7), (-0.7, -0.7), 0.1, 0.5)

ENVS = {e.name: e for e in (BANDIT2GOAL, REACH2GOAL)}


def get_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise KeyError(f"unknown env {name!r}; valid envs: {', '.join(sorted(ENVS))}") from None


def bandit_reward(spec: EnvSpec, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    s2 = 2.0 * spec.scale ** 2
    d1 = np.sum((a - np.asarray(spec.goal)) ** 2, axis=-1)
    d2 = np.sum((a - np.asarray(spec.decoy)) ** 2, axis=-1)
    return np.exp(-d1 / s2) + 0.5 * np.exp(-d2 / s2)


def optimal_reward(spec: EnvSpec, resolution: int = 2001) -> float:
    """Best achievable one-step reward, by grid search plus local refinement."""
    if spec.name != "bandit2goal":
        raise ValueError("analytic optimum only defined for bandit2goal")
    b = spec.action_bound
    g = np.linspace(-b, b, resolution)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    r = bandit_reward(spec, np.stack([xx, yy], axis=-1))
    i, j = np.unravel_index(np.argmax(r), r.shape)
    step = g[1] - g[0]
    fine = np.linspace(-step, step, 401)
    fx, fy = np.meshgrid(g[i] + fine, g[j] + fine, indexing="ij")
    return float(bandit_reward(spec, np.stack([fx, fy], axis=-1)).max())


def env_reset(spec: EnvSpec, rng: NoiseSource, n: int | None = None) -> np.ndarray:
    shape = (spec.obs_dim,) if n is None else (n, spec.obs_dim)
    if spec.name == "bandit2goal":
        return np.zeros(shape)
    return rng.uniform(shape, -0.1, 0.1)


def env_step(spec: EnvSpec, x, a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pure dynamics; works on a single state or a batch along the leading axis."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if np.any(np.abs(a) > spec.action_bound + 1e-12):
        raise ValueError(f"action outside [-{spec.action_bound}, {spec.action_bound}]")
    if spec.name == "bandit2goal":
        r = bandit_reward(spec, a)
        return np.zeros_like(x), r, np.ones_like(r)
    x_next = np.clip(x + a, -1.0, 1.0)
    hit = np.linalg.norm(x_next - np.asarray(spec.goal), axis=-1) < spec.scale
    r = hit.astype(np.float64)
    return x_next, r, r.copy()


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    a: np.ndarray
    r: float
    x_next: np.ndarray
    done: int


@dataclass
class Dataset:
    env: str
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    obs_mean: np.ndarray = field(init=False)
    obs_std: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.rewards)
        if n == 0:
            raise ValueError("dataset must not be empty")
        for name in ("obs", "actions", "next_obs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"{name} must be [n, dim] with n={n}")
            setattr(self, name, arr)
        if self.obs.shape[1] != self.next_obs.shape[1]:
            raise ValueError("obs and next_obs dimension mismatch")
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        self.dones = np.asarray(self.dones, dtype=np.float64).reshape(n)
        self.obs_mean = self.obs.mean(axis=0)
        self.obs_std = self.obs.std(axis=0)

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]), self.next_obs[i], int(self.dones[i]))

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def sample(self, rng: NoiseSource, batch_size: int) -> dict[str, np.ndarray]:
        idx = rng.integers(0, len(self), batch_size)
        return {
            "x": self.obs[idx],
            "a": self.actions[idx],
            "r": self.rewards[idx],
            "x_next": self.next_obs[idx],
            "done": self.dones[idx],
        }

    def equals(self, other: "Dataset") -> bool:
        return self.env == other.env and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("obs", "actions", "rewards", "next_obs", "dones")
        )


def behavior_action(spec: EnvSpec, x: np.ndarray, mode_goal: np.ndarray, rng: NoiseSource) -> np.ndarray:
    """Scripted controller toward ``mode_goal``: 0.15 * unit direction + N(0, 0.05^2)."""
    d = mode_goal - x
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    unit = np.divide(d, norm, out=np.zeros_like(d), where=norm > 0)
    a = 0.15 * unit + 0.05 * rng.normal(x.shape)
    return np.clip(a, -spec.action_bound, spec.action_bound)


@dataclass
class GenerationStats:
    episodes: int
    goal_episodes: int

    @property
    def success_fraction(self) -> float:
        return self.goal_episodes / self.episodes if self.episodes else float("nan")


def generate_dataset(spec: EnvSpec, n_transitions: int, rng: NoiseSource,
                     return_stats: bool = False):
    """Roll out the scripted behavior policy for ``n_transitions`` steps.

    For reach2goal the goal/decoy mode is drawn once per episode. Episodes
    cut at the horizon keep done = 0 (time limit, not a terminal state).
    Only complete episodes enter the returned success statistics.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if spec.name == "bandit2goal":
        n = n_transitions
        pick = rng.uniform(n) < 0.5
        centers = np.where(pick[:, None], np.asarray(spec.goal), np.asarray(spec.decoy))
        a = np.clip(centers + 0.2 * rng.normal((n, 2)), -spec.action_bound, spec.action_bound)
        x = np.zeros((n, spec.obs_dim))
        x_next, r, done = env_step(spec, x, a)
        ds = Dataset(spec.name, x, a, r, x_next, done)
        stats = GenerationStats(n, int(np.sum(r >= spec.success_threshold)))
        return (ds, stats) if return_stats else ds

    rows: list[tuple] = []
    episodes = goal_hits = 0
    while len(rows) < n_transitions:
        x = env_reset(spec, rng)
        mode = np.asarray(spec.goal if rng.uniform() < 0.5 else spec.decoy)
        finished = False
        for _ in range(spec.horizon):
            a = behavior_action(spec, x, mode, rng)
            x_next, r, done = env_step(spec, x, a)
            rows.append((x, a, float(r), x_next, float(done)))
            x = x_next
            if done or len(rows) >= n_transitions:
                finished = bool(done)
                break
        else:
            finished = True
        if finished:
            episodes += 1
            goal_hits += int(rows[-1][2] > 0)
    xs, as_, rs, xns, ds_ = zip(*rows)
    ds = Dataset(spec.name, np.array(xs), np.array(as_), np.array(rs), np.array(xns), np.array(ds_))
    stats = GenerationStats(episodes, goal_hits)
    return (ds, stats) if return_stats else ds


# ---------------------------------------------------------------- file format


class DatasetFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"{HEADER_PREFIX} obs_dim={ds.obs_dim} action_dim={ds.action_dim} env={ds.env}"]
    for i in range(len(ds)):
        vals = [*ds.obs[i], *ds.actions[i], ds.rewards[i], *ds.next_obs[i], ds.dones[i]]
        lines.append(",".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> tuple[int, int, str]:
    if not line.startswith(HEADER_PREFIX + " "):
        raise DatasetFormatError(f"bad header: {line!r}")
    fields = dict(kv.split("=", 1) for kv in line[len(HEADER_PREFIX) + 1:].split() if "=" in kv)
    try:
        o, a, env = int(fields["obs_dim"]), int(fields["action_dim"]), fields["env"]
    except (KeyError, ValueError) as e:
        raise DatasetFormatError(f"malformed header: {line!r}") from e
    if o < 1 or a < 1:
        raise DatasetFormatError("header dimensions must be positive")
    return o, a, env


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    if not text.endswith("\n"):
        raise DatasetFormatError("file is truncated (no trailing newline)")
    lines = text.split("\n")[:-1]
    if not lines:
        raise DatasetFormatError("empty file")
    o, a, env = _parse_header(lines[0])
    width = 2 * o + a + 2
    body = lines[1:]
    if not body:
        raise DatasetFormatError("dataset has no transitions")
    data = np.empty((len(body), width))
    for i, line in enumerate(body, start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(f"line {i}: expected {width} columns, got {len(parts)}")
        try:
            data[i - 2] = [float(p) for p in parts]
        except ValueError as e:
            raise DatasetFormatError(f"line {i}: {e}") from e
    if not np.isfinite(data).all():
        raise DatasetFormatError("non-finite value in dataset")
    x = data[:, :o]
    act = data[:, o:o + a]
    r = data[:, o + a]
    xn = data[:, o + a + 1:2 * o + a + 1]
    done = data[:, -1]
    return Dataset(env, x, act, r, xn, done)
