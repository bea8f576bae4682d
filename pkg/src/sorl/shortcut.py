"""Shortcut velocity model s(a_t, t, h | x), its training losses and the Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import (
    MlpSpec,
    NonFiniteError,
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    init_mlp,
    slice_rows,
    take_rows,
    mlp_forward,
    square,
    stopgrad,
)


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


class NoiseSource:
    """Seeded random stream; ``fork`` derives independent, reproducible substreams."""

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.rng = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *keys: int) -> "NoiseSource":
        return NoiseSource(self.seed, *self.stream, *keys)

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.rng.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.rng.integers(low, high, size)


def _column(v, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return np.full((n, 1), float(v))
    return v.reshape(n, 1)


@dataclass
class ShortcutPolicy:
    params: ParamStore
    spec: MlpSpec
    M_disc: int
    action_dim: int
    obs_dim: int

    def __post_init__(self):
        if not is_power_of_two(self.M_disc):
            raise ValueError(f"M_disc must be a power of two, got {self.M_disc}")
        if self.spec.input_dim != self.action_dim + self.obs_dim + 2:
            raise ValueError("policy input must be action + obs + (t, h)")
        if self.spec.output_dim != self.action_dim:
            raise ValueError("policy output must match action_dim")

    @classmethod
    def create(cls, action_dim: int, obs_dim: int, M_disc: int = 8,
               hidden_dims=(64, 64), seed: int | NoiseSource = 0) -> "ShortcutPolicy":
        rng = seed.rng if isinstance(seed, NoiseSource) else np.random.default_rng(seed)
        spec = MlpSpec(action_dim + obs_dim + 2, action_dim, tuple(hidden_dims), False)
        store = ParamStore()
        init_mlp(store, spec, rng)
        return cls(store, spec, M_disc, action_dim, obs_dim)

    def velocity(self, a, t, h, x, frozen: bool = False) -> Tensor:
        a = as_tensor(a)
        n = a.shape[0]
        x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(n, self.obs_dim)
        inp = concat([a, x, _column(t, n), _column(h, n)], axis=1)
        return mlp_forward(self.params, self.spec, inp, frozen=frozen)

    def clone(self) -> "ShortcutPolicy":
        return ShortcutPolicy(self.params.clone(), self.spec, self.M_disc, self.action_dim, self.obs_dim)


class AnalyticField:
    """A parameter-free velocity field given by a numpy function fn(a, t, h, x).

    Handy as a test double for a policy and as the ground-truth drift in
    verification experiments. ``t`` and ``h`` arrive as [batch, 1] columns.
    """

    def __init__(self, fn: Callable, action_dim: int, obs_dim: int = 0, M_disc: int = 8):
        self.fn = fn
        self.action_dim = action_dim
        self.obs_dim = obs_dim
        self.M_disc = M_disc

    def velocity(self, a, t, h, x, frozen: bool = False) -> Tensor:
        ad = as_tensor(a).data
        n = ad.shape[0]
        out = np.broadcast_to(np.asarray(self.fn(ad, _column(t, n), _column(h, n), x), dtype=np.float64), ad.shape)
        return Tensor(out.copy())

    def clone(self) -> "AnalyticField":
        return self


def interpolate(a0, a1, t) -> np.ndarray:
    """(1 - t) a0 + t a1 row-wise."""
    a0 = np.asarray(a0, dtype=np.float64)
    a1 = np.asarray(a1, dtype=np.float64)
    if a0.shape != a1.shape:
        raise ValueError(f"shape mismatch {a0.shape} vs {a1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * a0 + t * a1


def predict_velocity(policy, a_t, t, h, x, frozen: bool = False) -> Tensor:
    t_arr = np.asarray(t, dtype=np.float64)
    h_arr = np.asarray(h, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    if np.any(h_arr <= 0) or np.any(h_arr > 1):
        raise ValueError("h must lie in (0, 1]")
    return policy.velocity(a_t, t_arr, h_arr, x, frozen=frozen)


@dataclass(frozen=True)
class StepPair:
    t: float
    h: float


def sample_step_pairs(M_disc: int, rng: NoiseSource, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised draw of n (t, h) pairs for the self-consistency branch.

    h = d / M_disc with d uniform over {1, 2, 4, ..., M_disc / 2}; t uniform
    over the multiples of h with t + 2h <= 1.
    """
    if not is_power_of_two(M_disc):
        raise ValueError(f"M_disc must be a power of two, got {M_disc}")
    if M_disc < 2:
        raise ValueError("M_disc = 1 admits no self-consistency pairs")
    n_levels = int(np.log2(M_disc))
    d = 2 ** rng.integers(0, n_levels, n)
    h = d / M_disc
    n_slots = M_disc // d - 1  # multiples k*h with k*h + 2h <= 1
    k = np.floor(rng.uniform(size=n) * n_slots).astype(np.int64)
    return k * h, h


def sample_step_pair(M_disc: int, rng: NoiseSource) -> StepPair:
    t, h = sample_step_pairs(M_disc, rng, 1)
    return StepPair(float(t[0]), float(h[0]))


def flow_matching_terms(policy, x, a0, a1, t, h_query: float) -> Tensor:
    a_t = interpolate(a0, a1, t)
    pred = policy.velocity(a_t, t, h_query, x)
    return square(pred - (np.asarray(a1) - np.asarray(a0))).sum(axis=1).mean()


def flow_matching_loss(policy, x, a1, rng: NoiseSource, h_query: float | None = None) -> Tensor:
    """Mean ||s(a_t, t, h_query | x) - (a1 - a0)||^2 with t ~ U(0, 1), a0 ~ N(0, I).

    ``h_query`` defaults to the smallest step 1 / M_disc.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    if a1.shape[0] == 0:
        raise ValueError("empty batch")
    n = a1.shape[0]
    a0 = rng.normal(a1.shape)
    t = rng.uniform(n)
    if h_query is None:
        h_query = 1.0 / policy.M_disc
    return flow_matching_terms(policy, x, a0, a1, t, h_query)


def self_consistency_target(target_policy, a_t, t, h, x) -> np.ndarray:
    """Average of two chained h-steps of the (frozen) target model."""
    n = np.asarray(a_t).shape[0]
    t = _column(t, n)
    h = _column(h, n)
    s_t = target_policy.velocity(a_t, t, h, x, frozen=True).data
    a_next = a_t + s_t * h
    s_next = target_policy.velocity(a_next, t + h, h, x, frozen=True).data
    return 0.5 * (s_t + s_next)


def self_consistency_terms(policy, target_policy, a_t, t, h, x) -> Tensor:
    n = np.asarray(a_t).shape[0]
    t = _column(t, n)
    h = _column(h, n)
    target = stopgrad(self_consistency_target(target_policy, a_t, t, h, x))
    pred = policy.velocity(a_t, t, 2.0 * h, x)
    return square(pred - target).sum(axis=1).mean()


def self_consistency_loss(policy, target_policy, x, a1, rng: NoiseSource) -> Tensor:
    """Mean ||s(a_t, t, 2h | x) - stopgrad(target two-step average)||^2."""
    a1 = np.asarray(a1, dtype=np.float64)
    n = a1.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t, h = sample_step_pairs(policy.M_disc, rng, n)
    a0 = rng.normal(a1.shape)
    a_t = interpolate(a0, a1, t)
    return self_consistency_terms(policy, target_policy, a_t, t, h, x)


def euler_sample(policy, x, m: int, rng: NoiseSource | None = None, noise=None,
                 frozen: bool = False, n: int | None = None) -> Tensor:
    """Forward Euler with m equal steps of size 1/m from a ~ N(0, I).

    The chain stays on the autodiff tape unless ``frozen`` is set, so the
    returned action can be differentiated through every step.
    """
    if not is_power_of_two(m) or m > policy.M_disc:
        raise ValueError(f"step budget must be a power of two <= {policy.M_disc}, got {m}")
    if noise is None:
        if n is None:
            n = np.asarray(x).shape[0]
        noise = rng.normal((n, policy.action_dim))
    a = Tensor(np.asarray(noise, dtype=np.float64))
    n = a.shape[0]
    h = 1.0 / m
    h_col = np.full((n, 1), h)
    for k in range(m):
        v = policy.velocity(a, np.full((n, 1), k * h), h_col, x, frozen=frozen)
        a = a + v * h
    if not np.isfinite(a.data).all():
        raise NonFiniteError("non-finite sampled action")
    return a


def euler_sample_budgets(policy, x, ms, noise, frozen: bool = False, restore_order: bool = True):
    """Euler chains with a per-row step budget, run in lockstep.

    Rows are sorted by budget (largest first) so that at iteration k the rows
    still stepping form a prefix; one network call per iteration serves all of
    them. Each row follows exactly the chain ``euler_sample`` would produce.
    Returns (actions, order) where ``order`` is the row permutation applied
    when ``restore_order`` is False (identity otherwise).
    """
    ms = np.asarray(ms, dtype=np.int64)
    if not all(is_power_of_two(int(m)) and m <= policy.M_disc for m in np.unique(ms)):
        raise ValueError(f"step budgets must be powers of two <= {policy.M_disc}")
    n = ms.shape[0]
    order = np.argsort(-ms, kind="stable")
    ms_s = ms[order]
    x_s = None if x is None else np.asarray(x, dtype=np.float64)[order]
    h_s = (1.0 / ms_s)[:, None]
    a = Tensor(np.asarray(noise, dtype=np.float64)[order])
    for k in range(int(ms_s[0])):
        n_k = int(np.count_nonzero(ms_s > k))
        head = a if n_k == n else slice_rows(a, 0, n_k)
        h_k = h_s[:n_k]
        v = policy.velocity(head, k * h_k, h_k, None if x_s is None else x_s[:n_k], frozen=frozen)
        head = head + v * h_k
        a = head if n_k == n else concat([head, slice_rows(a, n_k, n)], axis=0)
    if not np.isfinite(a.data).all():
        raise NonFiniteError("non-finite sampled action")
    if restore_order:
        inv = np.empty_like(order)
        inv[order] = np.arange(n)
        return take_rows(a, inv), np.arange(n)
    return a, order


def clip_action(a, bound: float) -> np.ndarray:
    if not bound > 0:
        raise ValueError("bound must be positive")
    return np.clip(np.asarray(a, dtype=np.float64), -bound, bound)
