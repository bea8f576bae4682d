"""Inference-time scaling: step budget (sequential) and best-of-N with the critic as verifier (parallel)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envworld import EnvSpec, env_reset, env_step
from .shortcut import NoiseSource, clip_action, euler_sample, is_power_of_two
from .trainer import step_code

# substream tags, disjoint from the training streams (0 = init, 1 = steps)
_EVAL_RESET, _EVAL_NOISE = 2, 3

SWEEP_COLUMNS = ("m_inf", "n", "mean_return", "success_rate", "stderr", "episodes")


@dataclass
class InferenceConfig:
    M_inf: int = 1
    N: int = 1
    episodes: int = 50
    seed: int = 0

    def validate(self, M_disc: int | None = None) -> None:
        if not is_power_of_two(self.M_inf):
            raise ValueError(f"M_inf must be a power of two, got {self.M_inf}")
        if M_disc is not None and self.M_inf > M_disc:
            raise ValueError(f"M_inf={self.M_inf} exceeds M_disc={M_disc}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


def candidate_noise(seed: int, episode: int, t: int, N: int, action_dim: int, rows: int = 1) -> np.ndarray:
    """Noise for N candidates at (episode, t), shape [rows, N, action_dim].

    One counter-keyed stream per (episode, t) filled in C order, so the
    candidates for N = k are exactly the first k of those for N = k + 1.
    """
    rng = NoiseSource(seed, _EVAL_NOISE, episode, t)
    return rng.normal((N, rows, action_dim)).transpose(1, 0, 2)


def best_of_n(policy, critic, x, config: InferenceConfig, rng: NoiseSource | None = None,
              noise=None, return_scores: bool = False):
    """Sample N actions per state with M_inf Euler steps and keep the one the critic rates highest.

    ``x`` is [batch, obs_dim] or a single observation. ``noise`` may be given
    as [batch, N, action_dim]; otherwise it is drawn from ``rng``. Ties go to
    the lowest candidate index. N = 1 skips the critic entirely.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if config.N < 1:
        raise ValueError("N must be >= 1")
    B, A, N = x.shape[0], policy.action_dim, config.N
    if noise is None:
        noise = rng.normal((B, N, A))
    noise = np.asarray(noise, dtype=np.float64).reshape(B, N, A)
    xs = np.repeat(x, N, axis=0)
    cand = euler_sample(policy, xs, config.M_inf, noise=noise.reshape(B * N, A), frozen=True).data.reshape(B, N, A)
    if N == 1:
        scores = None
        best = np.zeros(B, dtype=np.int64)
    else:
        code = step_code(config.M_inf, policy.M_disc)
        scores = critic.mean_q(xs, cand.reshape(B * N, A), code, frozen=True).data.reshape(B, N)
        best = np.argmax(scores, axis=1)  # first maximum wins
    act = cand[np.arange(B), best]
    if single:
        act = act[0]
    if return_scores:
        return act, best, scores, cand
    return act


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    length: int
    success: bool


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    stderr: float
    records: list[EpisodeRecord] = field(default_factory=list)


def _stderr(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def evaluate(policy, critic, spec: EnvSpec, config: InferenceConfig) -> EvalResult:
    """Roll out ``config.episodes`` episodes with best-of-N at every decision.

    Episodes run in lockstep as one batch. Return is the undiscounted reward
    sum. Success means any reward event for reach2goal and a terminal reward
    of at least ``spec.success_threshold`` for bandit2goal.
    """
    config.validate(policy.M_disc)
    E = config.episodes
    x = np.stack([env_reset(spec, NoiseSource(config.seed, _EVAL_RESET, e)) for e in range(E)])
    alive = np.ones(E, dtype=bool)
    returns = np.zeros(E)
    lengths = np.zeros(E, dtype=np.int64)
    success = np.zeros(E, dtype=bool)
    for t in range(spec.horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        noise = np.stack([candidate_noise(config.seed, int(e), t, config.N, policy.action_dim)[0] for e in idx])
        a = best_of_n(policy, critic, x[idx], config, noise=noise)
        x_next, r, done = env_step(spec, x[idx], clip_action(a, spec.action_bound))
        returns[idx] += r
        lengths[idx] += 1
        if spec.name == "bandit2goal":
            success[idx] |= r >= spec.success_threshold
        else:
            success[idx] |= r > 0
        x[idx] = x_next
        alive[idx[done > 0]] = False
    records = [EpisodeRecord(e, float(returns[e]), int(lengths[e]), bool(success[e])) for e in range(E)]
    return EvalResult(float(returns.mean()), float(success.mean()), _stderr(returns), records)


@dataclass
class SweepRow:
    m_inf: int
    n: int
    mean_return: float
    success_rate: float
    stderr: float
    episodes: int

    def as_list(self) -> list:
        return [getattr(self, c) for c in SWEEP_COLUMNS]


def scaling_sweep(policy, critic, spec: EnvSpec, m_list, n_list, episodes: int, seed: int = 0) -> list[SweepRow]:
    """Evaluate every (M_inf, N) cell, M_inf-major. All budgets are checked before any rollout."""
    m_list = [int(m) for m in m_list]
    n_list = [int(n) for n in n_list]
    for m in m_list:
        InferenceConfig(m, 1, max(episodes, 1), seed).validate(policy.M_disc)
    for n in n_list:
        if n < 1:
            raise ValueError("N must be >= 1")
    rows = []
    for m in m_list:
        for n in n_list:
            res = evaluate(policy, critic, spec, InferenceConfig(m, n, episodes, seed))
            rows.append(SweepRow(m, n, res.mean_return, res.success_rate, res.stderr, episodes))
    return rows


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_num(v) for v in r.as_list()])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != SWEEP_COLUMNS:
            raise ValueError(f"unexpected sweep header {header}")
        return [SweepRow(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5])) for r in reader]


def plot_sweep(rows: list[SweepRow], path) -> None:
    """Success rate against M_inf, one line per N. Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for n in sorted({r.n for r in rows}):
        pts = sorted((r.m_inf, r.success_rate, r.stderr) for r in rows if r.n == n)
        m, s, e = zip(*pts)
        ax.errorbar(m, s, yerr=e, marker="o", capsize=2, label=f"N={n}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("inference steps M_inf")
    ax.set_ylabel("success rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
