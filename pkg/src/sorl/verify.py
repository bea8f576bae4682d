"""Checks of the Wasserstein guarantees for shortcut models.

Exact W2 between equal-size samples, Monte-Carlo estimators of the
flow-matching and self-consistency errors, the error bounds themselves and
a few fully synthetic problems where every constant is known.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtr, ndtri

from .shortcut import AnalyticField, NoiseSource, euler_sample, interpolate

MAX_EXACT_N = 512
REPORT_COLUMNS = ("h", "w2", "eps_fm", "eps_sc", "L_est", "bound", "satisfied")


# ---------------------------------------------------------------- optimal transport


@dataclass
class EmpiricalDist:
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must be a non-empty [n, d] array")
        if not np.isfinite(s).all():
            raise ValueError("samples must be finite")
        self.samples = s

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass
class OTPlan:
    perm: np.ndarray  # P[i] is matched with Q[perm[i]]
    cost: float  # total squared cost


def _as_dist(p) -> EmpiricalDist:
    return p if isinstance(p, EmpiricalDist) else EmpiricalDist(p)


def _check_pair(P: EmpiricalDist, Q: EmpiricalDist, max_n: int) -> None:
    if P.n != Q.n:
        raise ValueError(f"sample counts differ: {P.n} vs {Q.n}")
    if P.dim != Q.dim:
        raise ValueError(f"dimensions differ: {P.dim} vs {Q.dim}")
    if P.n > max_n:
        raise ValueError(f"n={P.n} exceeds the exact-assignment limit {max_n}")


def sq_cost_matrix(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    d = P[:, None, :] - Q[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def ot_plan(P, Q, max_n: int = MAX_EXACT_N) -> OTPlan:
    """Optimal assignment under squared Euclidean cost."""
    P, Q = _as_dist(P), _as_dist(Q)
    _check_pair(P, Q, max_n)
    C = sq_cost_matrix(P.samples, Q.samples)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(P.n, dtype=np.int64)
    perm[rows] = cols
    # fsum is order independent, so w2_exact(P, Q) == w2_exact(Q, P) exactly
    return OTPlan(perm, math.fsum(C[rows, cols].tolist()))


def w2_exact(P, Q, max_n: int = MAX_EXACT_N) -> float:
    """sqrt(min over permutations of the mean squared matching distance)."""
    plan = ot_plan(P, Q, max_n)
    return math.sqrt(max(plan.cost, 0.0) / _as_dist(P).n)


def w2_bruteforce(P, Q) -> float:
    """Enumerates all n! matchings; only for tiny n."""
    P, Q = _as_dist(P), _as_dist(Q)
    _check_pair(P, Q, 9)
    C = sq_cost_matrix(P.samples, Q.samples)
    idx = np.arange(P.n)
    best = min(C[idx, list(p)].sum() for p in itertools.permutations(range(P.n)))
    return math.sqrt(best / P.n)


def sampling_floor(sampler, n: int, rng: NoiseSource) -> float:
    """W2 between two independent n-sample draws of the same law."""
    return w2_exact(sampler(rng.fork(0), n), sampler(rng.fork(1), n))


# ---------------------------------------------------------------- known flows


class PointTarget:
    """p* = delta at ``a1``; drift (a1 - z) / (1 - t)."""

    def __init__(self, a1):
        self.a1 = np.atleast_1d(np.asarray(a1, dtype=np.float64))
        self.dim = self.a1.size

    def sample(self, rng: NoiseSource, n: int) -> np.ndarray:
        return np.tile(self.a1, (n, 1))

    def drift(self, z, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t >= 1.0):
            raise ValueError("point-target drift is singular at t = 1")
        if t.ndim:
            t = t.reshape(-1, 1)
        return (self.a1 - np.asarray(z, dtype=np.float64)) / (1.0 - t)


class GaussianMixture:
    """Equal-weight isotropic mixture with a closed-form flow-matching drift.

    With z_t = (1 - t) z0 + t z1, z0 ~ N(0, I): given component k,
    z_t ~ N(t mu_k, s_t^2 I) with s_t^2 = (1 - t)^2 + t^2 sigma^2, and
    E[z1 - z0 | z_t, k] = mu_k + c_t (z_t - t mu_k), c_t = (t sigma^2 - (1 - t)) / s_t^2.
    The drift averages this over the component posterior.
    """

    def __init__(self, means, sigma: float):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.sigma = float(sigma)
        self.k, self.dim = self.means.shape

    @classmethod
    def four_corners(cls, offset: float = 0.5, sigma: float = 0.05) -> "GaussianMixture":
        o = offset
        return cls([(o, o), (o, -o), (-o, o), (-o, -o)], sigma)

    def sample(self, rng: NoiseSource, n: int) -> np.ndarray:
        comp = rng.integers(0, self.k, n)
        return self.means[comp] + self.sigma * rng.normal((n, self.dim))

    def _coeffs(self, t):
        s2 = (1.0 - t) ** 2 + t * t * self.sigma ** 2
        return s2, (t * self.sigma ** 2 - (1.0 - t)) / s2

    def drift(self, z, t) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (z.shape[0],))[:, None]
        s2, c = self._coeffs(t)
        diff = z[:, None, :] - t[:, :, None] * self.means[None]  # [n, k, d]
        logw = -0.5 * np.einsum("nkd,nkd->nk", diff, diff) / s2
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        v = self.means[None] + c[:, :, None] * diff
        return np.einsum("nk,nkd->nd", w, v)

    def flow_map(self, z, t0: float, t1: float) -> np.ndarray:
        """Exact ODE map for a single component; mixtures have no closed form."""
        if self.k != 1:
            raise ValueError("closed-form flow map needs a single component")
        mu = self.means[0]
        s0 = math.sqrt((1 - t0) ** 2 + t0 * t0 * self.sigma ** 2)
        s1 = math.sqrt((1 - t1) ** 2 + t1 * t1 * self.sigma ** 2)
        return t1 * mu + (s1 / s0) * (np.asarray(z) - t0 * mu)

    def drift_lipschitz(self, n_grid: int = 2001) -> float:
        """sup_t |c_t|, the z-Lipschitz constant of the single-component drift."""
        if self.k != 1:
            raise ValueError("analytic Lipschitz constant needs a single component")
        t = np.linspace(0.0, 1.0, n_grid)
        return float(np.abs(self._coeffs(t)[1]).max())

    def passthrough(self, M_disc: int = 8) -> AnalyticField:
        """A field whose Euler sampler returns exact p* samples for every step budget.

        The first step maps the noise to a sample (component from Phi(z_1),
        the rest from within-component quantiles); later steps do nothing.
        """
        if self.dim != 2:
            raise ValueError("passthrough is built for 2D mixtures")

        def fn(a, t, h, x):
            u = ndtr(a[:, 0]) * self.k
            comp = np.minimum(np.floor(u).astype(np.int64), self.k - 1)
            frac = np.clip(u - comp, 1e-12, 1 - 1e-12)
            target = self.means[comp] + self.sigma * np.stack([ndtri(frac), a[:, 1]], axis=1)
            return np.where(t == 0.0, (target - a) / h, 0.0)

        return AnalyticField(fn, self.dim, 0, M_disc)


def second_moment_bound(problem, t_grid, n: int, rng: NoiseSource) -> float:
    """M_v = sqrt(sup_t E||v_t(z_t)||^2) by Monte Carlo."""
    worst = 0.0
    for i, t in enumerate(t_grid):
        z_t = _interp_samples(problem, float(t), n, rng.fork(i))
        v = problem.drift(z_t, np.full(n, t))
        worst = max(worst, float(np.mean(np.sum(v * v, axis=1))))
    return math.sqrt(worst)


def _interp_samples(problem, t: float, n: int, rng: NoiseSource) -> np.ndarray:
    z1 = problem.sample(rng.fork(0), n)
    z0 = rng.fork(1).normal(z1.shape)
    return interpolate(z0, z1, np.full(n, t))


# ---------------------------------------------------------------- loss estimators


def fm_grid(M: int) -> np.ndarray:
    return np.arange(M) / M


def sc_grid(M: int) -> list[tuple[float, float]]:
    """(t, h) pairs with h = 2^k / M up to 1/2 and t on multiples of h, t + 2h <= 1."""
    pairs = []
    d = 1
    while 2 * d <= M:
        h = d / M
        for j in range(M // d - 1):
            pairs.append((j * h, h))
        d *= 2
    return pairs


def estimate_fm_error(policy, problem, M: int, n_samples: int, rng: NoiseSource,
                      t_grid=None) -> tuple[float, dict[float, float]]:
    """max over t of E||s(z_t, t, 1/M) - v_t(z_t)||^2; also the per-t values."""
    t_grid = fm_grid(M) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    per_t = {}
    for i, t in enumerate(t_grid):
        z_t = _interp_samples(problem, float(t), n_samples, rng.fork(i))
        tt = np.full(n_samples, float(t))
        s = policy.velocity(z_t, tt, 1.0 / M, None, frozen=True).data
        err = s - problem.drift(z_t, tt)
        per_t[float(t)] = float(np.mean(np.sum(err * err, axis=1)))
    return max(per_t.values()), per_t


def consistency_error_samples(policy, z_t, t, h, x=None) -> np.ndarray:
    """Per-sample ||s(z_t,t,h)/2 + s(z',t+h,h)/2 - s(z_t,t,2h)||^2 with z' = z_t + h s(z_t,t,h)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    n = z_t.shape[0]
    t = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    s1 = policy.velocity(z_t, t, h, x, frozen=True).data
    z_next = z_t + h * s1
    s2 = policy.velocity(z_next, t + h, h, x, frozen=True).data
    big = policy.velocity(z_t, t, 2.0 * h, x, frozen=True).data
    d = 0.5 * (s1 + s2) - big
    return np.sum(d * d, axis=1)


def estimate_consistency_error(policy, problem, M: int, n_samples: int, rng: NoiseSource,
                               x=None) -> tuple[float, dict[tuple[float, float], float]]:
    """max over the (t, h) grid of the mean squared self-consistency gap; also per cell."""
    per = {}
    for i, (t, h) in enumerate(sc_grid(M)):
        z_t = _interp_samples(problem, t, n_samples, rng.fork(i))
        per[(t, h)] = float(np.mean(consistency_error_samples(policy, z_t, t, h, x)))
    if not per:
        return 0.0, per
    return max(per.values()), per


def estimate_lipschitz(policy, dim: int, t_h_pairs, rng: NoiseSource, n_pairs: int = 10_000,
                       scale: float = 1.5, radius: float = 0.1) -> float:
    """Lower estimate of sup_z ||s(z)-s(z')|| / ||z-z'|| from sampled nearby pairs."""
    best = 0.0
    per_cell = max(1, n_pairs // max(1, len(t_h_pairs)))
    for i, (t, h) in enumerate(t_h_pairs):
        r = rng.fork(i)
        z1 = scale * r.normal((per_cell, dim))
        z2 = z1 + radius * r.normal((per_cell, dim))
        tt = np.full(per_cell, float(t))
        d_out = policy.velocity(z1, tt, h, None, frozen=True).data - policy.velocity(z2, tt, h, None, frozen=True).data
        d_in = np.linalg.norm(z1 - z2, axis=1)
        ok = d_in > 0
        if ok.any():
            best = max(best, float(np.max(np.linalg.norm(d_out, axis=1)[ok] / d_in[ok])))
    return best


# ---------------------------------------------------------------- bounds


def lemma3_bound(L: float, h: float, eps: float) -> float:
    """((1 + L h)^(1/h) - 1) eps / L, with the L -> 0 limit eps / h * h."""
    k = round(1.0 / h)
    if L == 0.0:
        return k * h * eps
    return ((1.0 + L * h) ** k - 1.0) * eps / L


def lemma1_bound(L_v: float, M_v: float, h0: float, eps_fm: float) -> float:
    return h0 * (L_v * math.exp(L_v * h0) * h0 * (M_v + 1.0) + eps_fm)


def theorem2_bound(L: float, L_v: float, M_v: float, M: int, h: float, eps_fm: float, eps_sc: float) -> float:
    """(1/L) ((1+Lh)^(1/h) - 1) exp(Lh/2) (e L_v (M_v+1) / M + eps_FM + eps_SC log2(M h))."""
    inner = math.e * L_v * (M_v + 1.0) / M + eps_fm + eps_sc * math.log2(M * h)
    return lemma3_bound(L, h, 1.0) * math.exp(0.5 * L * h) * inner


# ---------------------------------------------------------------- reports


@dataclass
class BoundRow:
    h: float
    w2: float
    eps_fm: float
    eps_sc: float
    L_est: float
    bound: float
    satisfied: bool

    def as_list(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class BoundReport:
    rows: list[BoundRow] = field(default_factory=list)
    L_v: float = float("nan")
    M_v: float = float("nan")
    M: int = 0
    floor: float = float("nan")

    @property
    def all_satisfied(self) -> bool:
        return all(r.satisfied for r in self.rows)

    def row(self, h: float) -> BoundRow:
        for r in self.rows:
            if math.isclose(r.h, h):
                return r
        raise KeyError(h)


def write_report_csv(report: BoundReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else int(v) for v in r.as_list()])


class ContractionFlow:
    """dz/dt = -z. Exact step z -> z + (e^-h - 1) z; the shortcut adds eps * u to the velocity.

    The perturbed model's one-step error is exactly h * eps and its
    Lipschitz constant in z is (1 - e^-h) / h.
    """

    def __init__(self, dim: int = 2):
        self.dim = dim
        u = np.ones(dim)
        self.u = u / np.linalg.norm(u)

    def exact_step(self, z, h: float) -> np.ndarray:
        return z + math.expm1(-h) * z

    def model(self, eps: float) -> AnalyticField:
        u = self.u

        def fn(a, t, h, x):
            return (np.expm1(-h) / h) * a + eps * u

        return AnalyticField(fn, self.dim)

    @staticmethod
    def model_lipschitz(h: float) -> float:
        return -math.expm1(-h) / h


@dataclass
class Lemma3Row:
    h: float
    eps: float
    L: float
    L_est: float
    step_rmse: float
    rmse: float
    bound: float
    satisfied: bool


def check_lemma3(h: float, eps: float, n: int = 4096, seed: int = 0, flow: ContractionFlow | None = None,
                 L: float | None = None, rtol: float = 1e-9, atol: float = 1e-15) -> Lemma3Row:
    """Run 1/h model steps and 1/h exact steps from shared noise; compare RMSE with the bound.

    ``L`` defaults to the larger of the sampled difference-quotient estimate
    and the analytic constant. At h = 1 the bound is attained with equality,
    hence the floating-point slack ``rtol``.
    """
    flow = flow or ContractionFlow()
    model = flow.model(eps)
    rng = NoiseSource(seed, 7)
    L_est = estimate_lipschitz(model, flow.dim, [(0.0, h)], rng.fork(0), n_pairs=2000)
    L_use = max(L_est, flow.model_lipschitz(h)) if L is None else L
    k = round(1.0 / h)
    z = rng.fork(1).normal((n, flow.dim))
    z_hat = z.copy()
    step_sq = []
    for j in range(k):
        t = np.full(n, j * h)
        s = model.velocity(z_hat, t, h, None).data
        # single-step error measured from the true state
        s_true = model.velocity(z, t, h, None).data
        step_sq.append(float(np.mean(np.sum((z + s_true * h - flow.exact_step(z, h)) ** 2, axis=1))))
        z_hat = z_hat + s * h
        z = flow.exact_step(z, h)
    rmse = math.sqrt(float(np.mean(np.sum((z_hat - z) ** 2, axis=1))))
    bound = lemma3_bound(L_use, h, eps)
    return Lemma3Row(h, eps, L_use, L_est, math.sqrt(max(step_sq)), rmse, bound, rmse <= bound * (1 + rtol) + atol)


def lemma3_grid(hs=(1 / 8, 1 / 4, 1 / 2, 1.0), epss=(0.0, 0.005, 0.01, 0.02), n: int = 4096, seed: int = 0) -> list[Lemma3Row]:
    return [check_lemma3(h, e, n=n, seed=seed) for h in hs for e in epss]


@dataclass
class Lemma1Row:
    t: float
    step_error: float
    eps_fm: float
    bound: float
    satisfied: bool


def check_lemma1(problem: GaussianMixture, model, M: int, n: int = 4096, seed: int = 0) -> list[Lemma1Row]:
    """Single minimum-size step error against the closed-form flow, per grid time."""
    rng = NoiseSource(seed, 9)
    h0 = 1.0 / M
    L_v = problem.drift_lipschitz()
    M_v = second_moment_bound(problem, np.linspace(0, 1, 33), n, rng.fork(0))
    eps_fm = math.sqrt(estimate_fm_error(model, problem, M, n, rng.fork(1))[0])
    bound = lemma1_bound(L_v, M_v, h0, eps_fm)
    rows = []
    for i, t in enumerate(fm_grid(M)):
        z_t = _interp_samples(problem, float(t), n, rng.fork(2, i))
        s = model.velocity(z_t, np.full(n, t), h0, None, frozen=True).data
        d = z_t + s * h0 - problem.flow_map(z_t, float(t), float(t) + h0)
        err = math.sqrt(float(np.mean(np.sum(d * d, axis=1))))
        rows.append(Lemma1Row(float(t), err, eps_fm, bound, err <= bound))
    return rows


def generation_w2(policy, problem, m: int, n: int, rng: NoiseSource) -> float:
    """W2 between n samples of the m-step sampler and n fresh samples of p*."""
    gen = euler_sample(policy, None, m, noise=rng.fork(0).normal((n, problem.dim)), frozen=True).data
    return w2_exact(gen, problem.sample(rng.fork(1), n))


def theorem1_report(policy, problem, M_disc: int, n: int = 256, seed: int = 0,
                    n_est: int = 2048) -> BoundReport:
    """Measured W2 per step size next to the explicit-h bound with estimated constants.

    eps_FM and eps_SC are root-mean-square values (the assumption bounds
    their squares). L is a sampled lower estimate, so ``satisfied`` is a
    diagnostic, not a guarantee.
    """
    rng = NoiseSource(seed, 11)
    eps_fm = math.sqrt(estimate_fm_error(policy, problem, M_disc, n_est, rng.fork(0))[0])
    eps_sc = math.sqrt(estimate_consistency_error(policy, problem, M_disc, n_est, rng.fork(1))[0]) if M_disc >= 2 else 0.0
    hs = [2 ** k / M_disc for k in range(int(math.log2(M_disc)) + 1)]
    pairs = [(t, h) for h in hs for t in np.arange(0.0, 1.0, h)]
    L_est = estimate_lipschitz(policy, problem.dim, pairs, rng.fork(2))
    M_v = second_moment_bound(problem, np.linspace(0, 1, 33)[:-1], n_est, rng.fork(3))
    L_v = _drift_lipschitz_estimate(problem, rng.fork(4))
    report = BoundReport(L_v=L_v, M_v=M_v, M=M_disc)
    report.floor = sampling_floor(problem.sample, n, rng.fork(5))
    for i, h in enumerate(hs):
        w2 = generation_w2(policy, problem, round(1.0 / h), n, rng.fork(6, i))
        bound = theorem2_bound(max(L_est, 1e-12), L_v, M_v, M_disc, h, eps_fm, eps_sc)
        report.rows.append(BoundRow(h, w2, eps_fm, eps_sc, L_est, bound, w2 <= bound))
    return report


def _drift_lipschitz_estimate(problem, rng: NoiseSource, n: int = 2000) -> float:
    if isinstance(problem, GaussianMixture) and problem.k == 1:
        return problem.drift_lipschitz()
    best = 0.0
    for i, t in enumerate(np.linspace(0, 1, 17)[:-1]):
        z1 = _interp_samples(problem, float(t), n, rng.fork(i))
        z2 = z1 + 0.01 * rng.fork(i, 1).normal(z1.shape)
        tt = np.full(n, t)
        num = np.linalg.norm(problem.drift(z1, tt) - problem.drift(z2, tt), axis=1)
        best = max(best, float(np.max(num / np.linalg.norm(z1 - z2, axis=1))))
    return best


# ---------------------------------------------------------------- suites
# each returns (columns, rows, passed)


def suite_gradcheck(seed: int = 0, n_specs: int = 20) -> tuple[tuple, list, bool]:
    """Random small MLPs against finite differences, then BTT gradients of the Euler sampler."""
    from .diffcore import MlpSpec, backward, block_rel_error, finite_difference, grad_check
    from .shortcut import ShortcutPolicy

    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_specs):
        depth = int(rng.integers(1, 3))
        spec = MlpSpec(int(rng.integers(1, 7)), int(rng.integers(1, 5)),
                       tuple(int(w) for w in rng.integers(1, 33, depth)), bool(rng.integers(0, 2)))
        rep = grad_check(spec, seed=seed * 1000 + i)
        rows.append((f"mlp{i}:{spec.input_dim}-{'x'.join(map(str, spec.hidden_dims))}-{spec.output_dim}"
                     f"{'-ln' if spec.use_layer_norm else ''}", rep.max_rel_error, 1e-4, rep.passed(1e-4)))
    policy = ShortcutPolicy.create(2, 3, 8, (16, 16), seed)
    x = rng.standard_normal((6, 3))
    z = rng.standard_normal((6, 2))
    names = policy.params.names()
    for m in (1, 2, 4):
        policy.params.zero_grad()
        backward(euler_sample(policy, x, m, noise=z).mean())
        analytic = [policy.params[k].grad for k in names]
        numeric = finite_difference(lambda: euler_sample(policy, x, m, noise=z).mean().item(),
                                    [policy.params[k].data for k in names])
        err = max(block_rel_error(a, b) for a, b in zip(analytic, numeric))
        rows.append((f"euler_btt_m{m}", err, 1e-3, err < 1e-3))
    policy.params.zero_grad()
    return ("case", "max_rel_error", "tolerance", "passed"), rows, all(r[-1] for r in rows)


def suite_ot(seed: int = 0, n_instances: int = 200, n_triples: int = 200) -> tuple[tuple, list, bool]:
    """Exact assignment against enumeration, plus symmetry and the triangle inequality."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        n = int(rng.integers(1, 8))
        d = int(rng.integers(1, 4))
        P, Q = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        a, b = w2_exact(P, Q), w2_bruteforce(P, Q)
        rows.append((f"enum{i}", n, a, b, abs(a - b) <= 1e-12 * max(1.0, b)))
    for i in range(n_triples):
        n = int(rng.integers(2, 40))
        P, Q, R = (rng.standard_normal((n, 2)) for _ in range(3))
        pq, qp = w2_exact(P, Q), w2_exact(Q, P)
        qr, pr = w2_exact(Q, R), w2_exact(P, R)
        rows.append((f"metric{i}", n, pq, qp, pq == qp and pr <= pq + qr + 1e-9))
    return ("case", "n", "value", "reference", "passed"), rows, all(r[-1] for r in rows)


def suite_lemma3(seed: int = 0) -> tuple[tuple, list, bool]:
    rows = [(r.h, r.eps, r.L, r.L_est, r.step_rmse, r.rmse, r.bound, r.satisfied) for r in lemma3_grid(seed=seed)]
    cols = ("h", "eps", "L", "L_est", "step_rmse", "rmse", "bound", "satisfied")
    return cols, rows, all(r[-1] for r in rows)


def suite_theorem1(seed: int = 0, steps: int = 20000, n: int = 256) -> tuple[tuple, list, bool]:
    """Train on the four-corner mixture and tabulate measured W2 against the bound (diagnostic only)."""
    from .trainer import TrainConfig, train_generative

    problem = GaussianMixture.four_corners()
    cfg = TrainConfig(alpha_q=0.0, M_disc=8, M_BTT=8, grad_steps=steps, seed=seed)
    policy, _ = train_generative(cfg, problem.sample, problem.dim)
    report = theorem1_report(policy, problem, cfg.M_disc, n=n, seed=seed)
    return REPORT_COLUMNS, [tuple(r.as_list()) for r in report.rows], True


SUITES = {"gradcheck": suite_gradcheck, "ot": suite_ot, "lemma3": suite_lemma3, "theorem1": suite_theorem1}


def write_rows_csv(columns, rows, path) -> None:
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])
