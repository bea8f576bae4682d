"""Actor-critic training with a shortcut policy.

One iteration: sample a batch, take a critic step on the Bellman error,
take an actor step on alpha_q * Q-loss + alpha_bc * FM + alpha_sc * SC,
then move the critic and policy targets toward the online weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .diffcore import (
    MlpSpec,
    NonFiniteError,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    clip_global_norm,
    concat,
    init_mlp,
    mlp_forward,
    stopgrad,
)
from .envworld import Dataset
from .shortcut import (
    NoiseSource,
    ShortcutPolicy,
    euler_sample_budgets,
    flow_matching_loss,
    is_power_of_two,
    self_consistency_loss,
)

# substream tags for NoiseSource.fork
_INIT, _STEP = 0, 1


@dataclass
class TrainConfig:
    alpha_q: float = 10.0
    alpha_bc: float = 10.0
    alpha_sc: float = 10.0
    gamma: float = 0.99
    tau: float = 0.005
    M_disc: int = 8
    M_BTT: int = 8
    batch_size: int = 256
    grad_steps: int = 20000
    lr: float = 1e-4
    grad_clip: float = 1.0
    clipped_double_q: bool = False
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    # "normalized": -mean(Q) / stopgrad(mean|Q|); "raw": -mean(Q)
    q_normalization: str = "normalized"
    # FM query step: "min" -> 1/M_disc, "double" -> 2/M_disc
    fm_step: str = "min"
    # policy target smoothing; None reuses tau
    policy_tau: float | None = None
    # code of the regressed dataset action: "matched" -> the row's StepCode(m),
    # i.e. Q(x, a, m) is the value of a followed by the m-step policy;
    # "dataset" -> always 1.0
    critic_code: str = "matched"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if not (is_power_of_two(self.M_disc) and is_power_of_two(self.M_BTT)):
            raise ValueError("M_disc and M_BTT must be powers of two")
        if self.M_BTT > self.M_disc:
            raise ValueError("M_BTT must not exceed M_disc")
        if min(self.alpha_q, self.alpha_bc, self.alpha_sc) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.batch_size < 1 or self.grad_steps < 0:
            raise ValueError("batch_size >= 1 and grad_steps >= 0 required")
        if self.q_normalization not in ("normalized", "raw"):
            raise ValueError(f"unknown q_normalization {self.q_normalization!r}")
        if self.fm_step not in ("min", "double"):
            raise ValueError(f"unknown fm_step {self.fm_step!r}")
        if self.critic_code not in ("matched", "dataset"):
            raise ValueError(f"unknown critic_code {self.critic_code!r}")

    @property
    def fm_query_step(self) -> float:
        return (1.0 if self.fm_step == "min" else 2.0) / self.M_disc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def step_code(m, M_disc: int) -> np.ndarray:
    """log2(m) / log2(M_disc) in [0, 1]; dataset actions use 1.0."""
    m = np.asarray(m, dtype=np.float64)
    if M_disc == 1:
        return np.ones_like(m)
    return np.log2(m) / math.log2(M_disc)


def sample_btt_steps(M_BTT: int, rng: NoiseSource, size=None):
    """m uniform over {1, 2, 4, ..., M_BTT}."""
    if not is_power_of_two(M_BTT):
        raise ValueError(f"M_BTT must be a power of two, got {M_BTT}")
    k = rng.integers(0, int(math.log2(M_BTT)) + 1, size)
    return 2 ** k


class Critic:
    """Two Q networks in one parameter store (prefixes q0., q1.) plus target copies."""

    def __init__(self, params: ParamStore, target: ParamStore, spec: MlpSpec, aggregation: str = "mean"):
        if aggregation not in ("mean", "min"):
            raise ValueError("aggregation must be 'mean' or 'min'")
        if set(params.names()) != set(target.names()):
            raise ValueError("target must shape-match the online critic")
        self.params = params
        self.target = target
        self.spec = spec
        self.aggregation = aggregation

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden_dims=(64, 64), seed: int | NoiseSource = 0,
               aggregation: str = "mean") -> "Critic":
        rng = seed.rng if isinstance(seed, NoiseSource) else np.random.default_rng(seed)
        spec = MlpSpec(obs_dim + action_dim + 1, 1, tuple(hidden_dims), True)
        store = ParamStore()
        for i in range(2):
            init_mlp(store, spec, rng, prefix=f"q{i}.")
        return cls(store, store.clone(), spec, aggregation)

    def q_values(self, x, a, code, target: bool = False, frozen: bool = False) -> list[Tensor]:
        n = np.asarray(x).shape[0]
        code = np.broadcast_to(np.asarray(code, dtype=np.float64), (n,)).reshape(n, 1)
        inp = concat([np.asarray(x, dtype=np.float64), a, code], axis=1)
        store = self.target if target else self.params
        frozen = frozen or target
        return [mlp_forward(store, self.spec, inp, prefix=f"q{i}.", frozen=frozen).reshape(n) for i in range(2)]

    def mean_q(self, x, a, code, target: bool = False, frozen: bool = False) -> Tensor:
        q0, q1 = self.q_values(x, a, code, target=target, frozen=frozen)
        return (q0 + q1) * 0.5

    def target_value(self, x, a, code) -> np.ndarray:
        q0, q1 = (q.data for q in self.q_values(x, a, code, target=True))
        if self.aggregation == "min":
            return np.minimum(q0, q1)
        return 0.5 * (q0 + q1)

    def clone(self) -> "Critic":
        return Critic(self.params.clone(), self.target.clone(), self.spec, self.aggregation)


@dataclass
class LossBreakdown:
    q_loss: float = 0.0
    fm_loss: float = 0.0
    sc_loss: float = 0.0
    critic_loss: float = 0.0
    q_mean_abs: float = 0.0
    total: float = 0.0

    def check_finite(self) -> None:
        bad = {k: v for k, v in asdict(self).items() if not math.isfinite(v)}
        if bad:
            raise NonFiniteError(f"non-finite losses: {bad}")


@dataclass
class TrainState:
    policy: ShortcutPolicy
    target_policy: ShortcutPolicy
    critic: Critic
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, obs_dim: int, action_dim: int) -> "TrainState":
        root = NoiseSource(config.seed, _INIT)
        policy = ShortcutPolicy.create(action_dim, obs_dim, config.M_disc, config.hidden_dims, root.fork(0))
        critic = Critic.create(obs_dim, action_dim, config.hidden_dims, root.fork(1),
                               "min" if config.clipped_double_q else "mean")
        return cls(policy, policy.clone(), critic)


# ---------------------------------------------------------------- losses


def q_loss(policy: ShortcutPolicy, critic: Critic, x, config: TrainConfig,
           rng: NoiseSource) -> tuple[Tensor, float]:
    """Negative critic value of actions sampled by backprop-through-time Euler chains.

    Each row draws its own step budget m and the chains run in lockstep.
    Critic weights enter as constants.
    Returns the loss and mean |Q|.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ms = sample_btt_steps(config.M_BTT, rng, n)
    noise = rng.normal((n, policy.action_dim))
    a_pi, order = euler_sample_budgets(policy, x, ms, noise, restore_order=False)
    q = critic.mean_q(x[order], a_pi, step_code(ms[order], config.M_disc), frozen=True)
    if not np.isfinite(q.data).all():
        raise NonFiniteError("non-finite Q values")
    q_abs = float(np.abs(q.data).mean())
    loss = -q.mean()
    if config.q_normalization == "normalized":
        loss = loss / stopgrad(Tensor(q_abs + 1e-6))
    return loss, q_abs


def policy_actions(policy: ShortcutPolicy, x, config: TrainConfig, rng: NoiseSource) -> tuple[np.ndarray, np.ndarray]:
    """Frozen per-row-budget samples a ~ pi(.|x, m); returns (actions, m)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ms = sample_btt_steps(config.M_BTT, rng, n)
    noise = rng.normal((n, policy.action_dim))
    a, _ = euler_sample_budgets(policy, x, ms, noise, frozen=True)
    return a.data, ms


def bellman_target(critic: Critic, r, done, gamma: float, x_next, a_next, codes) -> np.ndarray:
    return np.asarray(r) + gamma * (1.0 - np.asarray(done)) * critic.target_value(x_next, a_next, codes)


def critic_loss(policy: ShortcutPolicy, critic: Critic, batch: dict, config: TrainConfig,
                rng: NoiseSource) -> Tensor:
    """Mean over rows and both online critics of (Q_i(x, a, code) - y)^2.

    The bootstrap action at x' comes from the row's m-step policy. The
    regressed code is that row's StepCode(m) ("matched") or 1.0 ("dataset").
    """
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    a_next, ms = policy_actions(policy, batch["x_next"], config, rng)
    codes = step_code(ms, config.M_disc)
    y = bellman_target(critic, batch["r"], batch["done"], config.gamma, batch["x_next"], a_next, codes)
    code = codes if config.critic_code == "matched" else 1.0
    return critic_regression_loss(critic, batch["x"], batch["a"], y, code)


def critic_regression_loss(critic: Critic, x, a, y, code=1.0) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    q0, q1 = critic.q_values(x, a, code)
    return (((q0 - y).square()).mean() + ((q1 - y).square()).mean()) * 0.5


def actor_loss(policy: ShortcutPolicy, target_policy: ShortcutPolicy, critic: Critic, batch: dict,
               config: TrainConfig, rng: NoiseSource) -> tuple[Tensor, LossBreakdown]:
    x, a1 = batch["x"], batch["a"]
    parts = LossBreakdown()
    total = None

    def acc(term, coef):
        nonlocal total
        scaled = term * coef
        total = scaled if total is None else total + scaled

    if config.alpha_q > 0:
        ql, q_abs = q_loss(policy, critic, x, config, rng.fork(0))
        parts.q_loss, parts.q_mean_abs = ql.item(), q_abs
        acc(ql, config.alpha_q)
    if config.alpha_bc > 0:
        fm = flow_matching_loss(policy, x, a1, rng.fork(1), config.fm_query_step)
        parts.fm_loss = fm.item()
        acc(fm, config.alpha_bc)
    if config.alpha_sc > 0 and policy.M_disc >= 2:
        sc = self_consistency_loss(policy, target_policy, x, a1, rng.fork(2))
        parts.sc_loss = sc.item()
        acc(sc, config.alpha_sc)
    if total is None:
        raise ValueError("all actor loss coefficients are zero")
    parts.total = total.item()
    return total, parts


def polyak_update(online: ParamStore, target: ParamStore, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online."""
    for name, t in target.params.items():
        src = online.params[name].data
        if src.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data = (1.0 - tau) * t.data + tau * src


# ---------------------------------------------------------------- loop


def train_step(state: TrainState, dataset: Dataset, config: TrainConfig) -> LossBreakdown:
    """One full iteration; randomness is keyed on (seed, step index)."""
    rng = NoiseSource(config.seed, _STEP, state.step)
    batch = dataset.sample(rng.fork(0), config.batch_size)
    critic = state.critic

    critic.params.zero_grad()
    closs = critic_loss(state.policy, critic, batch, config, rng.fork(1))
    backward(closs)
    clip_global_norm(critic.params, config.grad_clip)
    adam_step(critic.params, config.lr)

    state.policy.params.zero_grad()
    aloss, parts = actor_loss(state.policy, state.target_policy, critic, batch, config, rng.fork(2))
    backward(aloss)
    clip_global_norm(state.policy.params, config.grad_clip)
    adam_step(state.policy.params, config.lr)

    polyak_update(critic.params, critic.target, config.tau)
    ptau = config.tau if config.policy_tau is None else config.policy_tau
    polyak_update(state.policy.params, state.target_policy.params, ptau)

    parts.critic_loss = closs.item()
    parts.check_finite()
    state.step += 1
    return parts


@dataclass
class MetricsRow:
    step: int
    q_loss: float | None = None
    fm_loss: float | None = None
    sc_loss: float | None = None
    critic_loss: float | None = None
    eval_return: float | None = None
    success_rate: float | None = None

    COLUMNS = ("step", "q_loss", "fm_loss", "sc_loss", "critic_loss", "eval_return", "success_rate")


@dataclass
class TrainResult:
    state: TrainState
    rows: list[MetricsRow] = field(default_factory=list)
    history: list[LossBreakdown] = field(default_factory=list)

    def eval_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.eval_return is not None]


EvalHook = Callable[[TrainState], tuple[float, float]]


def train(config: TrainConfig, dataset: Dataset, eval_hook: EvalHook | None = None,
          eval_every: int = 0, log_every: int | None = None, state: TrainState | None = None,
          keep_history: bool = False, progress: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Run ``config.grad_steps`` iterations.

    Metric rows are emitted every ``log_every`` steps (default: the eval
    cadence) with losses averaged over the window; the eval hook runs at step
    0 and then every ``eval_every`` steps, filling the eval columns.
    """
    if state is None:
        state = TrainState.create(config, dataset.obs_dim, dataset.action_dim)
    if log_every is None:
        log_every = eval_every
    result = TrainResult(state)
    if eval_hook is not None:
        ret, succ = eval_hook(state)
        result.rows.append(MetricsRow(state.step, eval_return=ret, success_rate=succ))

    window: list[LossBreakdown] = []
    for _ in range(config.grad_steps):
        parts = train_step(state, dataset, config)
        window.append(parts)
        if keep_history:
            result.history.append(parts)
        if progress is not None:
            progress(state.step, parts)
        do_eval = eval_hook is not None and eval_every > 0 and state.step % eval_every == 0
        do_log = log_every and state.step % log_every == 0
        if do_eval or do_log:
            row = MetricsRow(
                state.step,
                q_loss=float(np.mean([w.q_loss for w in window])),
                fm_loss=float(np.mean([w.fm_loss for w in window])),
                sc_loss=float(np.mean([w.sc_loss for w in window])),
                critic_loss=float(np.mean([w.critic_loss for w in window])),
            )
            if do_eval:
                row.eval_return, row.success_rate = eval_hook(state)
            result.rows.append(row)
            window = []
    return result


# ---------------------------------------------------------------- generative only


def generative_step(policy: ShortcutPolicy, target_policy: ShortcutPolicy, sampler, config: TrainConfig,
                    step: int) -> LossBreakdown:
    """One actor update on FM + SC alone (no critic), with fresh data from ``sampler(rng, n)``."""
    rng = NoiseSource(config.seed, _STEP, step)
    a1 = np.asarray(sampler(rng.fork(0), config.batch_size), dtype=np.float64)
    batch = {"x": None, "a": a1}
    cfg = config if config.alpha_q == 0 else TrainConfig(**{**config.to_dict(), "alpha_q": 0.0})
    policy.params.zero_grad()
    loss, parts = actor_loss(policy, target_policy, None, batch, cfg, rng.fork(2))
    backward(loss)
    clip_global_norm(policy.params, config.grad_clip)
    adam_step(policy.params, config.lr)
    ptau = config.tau if config.policy_tau is None else config.policy_tau
    polyak_update(policy.params, target_policy.params, ptau)
    parts.check_finite()
    return parts


def train_generative(config: TrainConfig, sampler, dim: int,
                     progress: Callable[[int, LossBreakdown], None] | None = None) -> tuple[ShortcutPolicy, list[LossBreakdown]]:
    """Fit an unconditional shortcut model to samples of a target law for ``config.grad_steps`` steps."""
    root = NoiseSource(config.seed, _INIT)
    policy = ShortcutPolicy.create(dim, 0, config.M_disc, config.hidden_dims, root.fork(0))
    target = policy.clone()
    history = []
    for step in range(config.grad_steps):
        parts = generative_step(policy, target, sampler, config, step)
        history.append(parts)
        if progress is not None:
            progress(step + 1, parts)
    return policy, history
