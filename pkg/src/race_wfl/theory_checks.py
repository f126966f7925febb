"""Numeric verification of the convergence theory on small instances.

Everything runs on instrumented quadratic (or quadratic-plus-cosine)
multi-device problems where the smoothness and gradient-dominance
constants are certified eigenvalue computations, optima are solvable in
closed form (or by dense grid plus descent polish), and expectations over
random device subsets are exhaustive enumerations over all k-subsets.

Conventions: the sampled-gradient estimator is (1/k) sum_{n in S} w_n
grad f_n and the full-set reference gradient is (1/N) sum_n w_n grad f_n, with
w_n the per-device sample counts; the default instances use unit
counts, for which the deviation bound holds with equality.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RaceError

log = logging.getLogger(__name__)


@dataclass
class QuadraticTestProblem:
    """Per-device losses f_n(w) = 0.5 (w - c_n)^T A_n (w - c_n)."""

    matrices: np.ndarray      # (N, d, d), symmetric positive definite
    centers: np.ndarray       # (N, d)
    counts: np.ndarray        # (N,) device sample counts

    def __post_init__(self):
        hess = self.mean_hessian()
        eigs = np.linalg.eigvalsh(hess)
        if eigs.min() <= 0:
            raise RaceError("average Hessian must be positive definite")
        self.smoothness = float(eigs.max())        # L
        self.pl_constant = float(eigs.min())       # gradient dominance
        rhs = np.einsum("n,nij,nj->i", self.counts, self.matrices,
                        self.centers) / len(self.counts)
        self.w_star = np.linalg.solve(hess, rhs)

    @property
    def n_devices(self):
        return len(self.counts)

    @property
    def dim(self):
        return self.centers.shape[1]

    def mean_hessian(self):
        return np.einsum("n,nij->ij", self.counts,
                         self.matrices) / len(self.counts)

    def device_gradients(self, w):
        """Raw per-device gradients at w (or a batch of w)."""
        w = np.asarray(w)
        diff = w[None, ...] - (self.centers[:, None, :] if w.ndim == 2
                               else self.centers)
        return np.einsum("nij,n...j->n...i", self.matrices, diff)

    def global_gradient(self, w):
        g = self.device_gradients(w)
        return np.einsum("n,n...i->...i", self.counts, g) / self.n_devices

    def global_loss(self, w):
        w = np.asarray(w)
        diff = w[None, ...] - (self.centers[:, None, :] if w.ndim == 2
                               else self.centers)
        quad = np.einsum("n...i,nij,n...j->n...", diff, self.matrices, diff)
        return np.einsum("n,n...->...", self.counts, quad) \
            / (2.0 * self.n_devices)


def random_quadratic_problem(rng, n_devices=6, dim=4, counts=None,
                             eig_range=(0.5, 3.0),
                             center_spread=2.0) -> QuadraticTestProblem:
    mats = np.empty((n_devices, dim, dim))
    for n in range(n_devices):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(*eig_range, size=dim)
        mats[n] = (q * eigs) @ q.T
    centers = center_spread * rng.standard_normal((n_devices, dim))
    if counts is None:
        counts = np.ones(n_devices)
    return QuadraticTestProblem(matrices=mats, centers=centers,
                                counts=np.asarray(counts, dtype=np.float64))


def _subset_matrix(n, k):
    subsets = list(itertools.combinations(range(n), k))
    m = np.zeros((len(subsets), n))
    for row, s in enumerate(subsets):
        m[row, list(s)] = 1.0 / k
    return m


def deviation_bound(problem: QuadraticTestProblem, w, k: int) -> float:
    """Closed-form bound on E|e|^2 at model(s) w for k-subsets."""
    n = problem.n_devices
    grads = problem.device_gradients(w)
    ref = problem.global_gradient(w)
    sq = ((grads - ref) ** 2).sum(axis=-1)
    weighted = np.einsum("n,n...->...", problem.counts ** 2, sq)
    zbar = problem.counts.mean()
    if k == n:
        return np.zeros_like(weighted) if np.ndim(weighted) else 0.0
    return (1.0 - k / n) * weighted / (k * (n - 1) * zbar ** 2)


def deviation_exact(problem: QuadraticTestProblem, w, k: int) -> float:
    """Exact E|e|^2 by enumerating every k-subset at model(s) w."""
    grads = problem.device_gradients(w)          # (N, ..., d)
    y = problem.counts.reshape(-1, *([1] * (grads.ndim - 1))) * grads
    ybar = y.mean(axis=0)
    m = _subset_matrix(problem.n_devices, k)     # (S, N)
    est = np.tensordot(m, y, axes=(1, 0))        # (S, ..., d)
    dev = ((est - ybar[None]) ** 2).sum(axis=-1)
    return dev.mean(axis=0)


def deviation_monte_carlo(problem, w, k, n_draws, rng) -> tuple:
    """(mean, standard error) of |e|^2 over sampled k-subsets."""
    grads = problem.device_gradients(w)
    y = problem.counts[:, None] * grads
    ybar = y.mean(axis=0)
    picks = np.argsort(rng.random((n_draws, problem.n_devices)),
                       axis=1)[:, :k]
    est = y[picks].mean(axis=1)
    sq = ((est - ybar) ** 2).sum(axis=-1)
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_draws))


@dataclass
class Lemma3Result:
    empirical: float
    bound: float
    holds: bool


def verify_lemma3(problem: QuadraticTestProblem, k: int,
                  w: np.ndarray) -> Lemma3Result:
    """Exhaustive deviation second moment against the closed-form bound."""
    emp = float(deviation_exact(problem, w, k))
    bnd = float(deviation_bound(problem, w, k))
    holds = emp <= bnd * (1.0 + 1e-9) + 1e-15
    return Lemma3Result(empirical=emp, bound=bnd, holds=holds)


def _sample_subsets(rng, n_traj, n, k):
    return np.argsort(rng.random((n_traj, n)), axis=1)[:, :k]


@dataclass
class BoundTrace:
    rounds: np.ndarray
    empirical: np.ndarray
    bound: np.ndarray
    holds: bool
    extra: dict = field(default_factory=dict)


def verify_theorem4(problem: QuadraticTestProblem, k: int, rounds: int = 200,
                    n_traj: int = 1000, rng=None, w0=None) -> BoundTrace:
    """Partial-participation descent against the contraction-plus-noise
    bound, with the per-round deviation moment enumerated exactly."""
    rng = rng or np.random.default_rng(0)
    n = problem.n_devices
    lr = 1.0 / problem.smoothness
    contraction = 1.0 - problem.pl_constant / problem.smoothness
    if w0 is None:
        w0 = problem.w_star + rng.standard_normal(problem.dim)
    w = np.tile(np.asarray(w0, dtype=np.float64), (n_traj, 1))
    f_star = float(problem.global_loss(problem.w_star))
    gap0 = float(problem.global_loss(np.asarray(w0))) - f_star

    emp = np.empty(rounds)
    bnd = np.empty(rounds)
    noise_sum = 0.0
    for t in range(rounds):
        dev_sq = float(np.mean(deviation_exact(problem, w, k)))
        noise_sum = contraction * noise_sum + dev_sq
        bnd[t] = (contraction ** (t + 1) * gap0
                  + noise_sum / (2.0 * problem.smoothness))
        grads = problem.device_gradients(w)          # (N, B, d)
        y = problem.counts[:, None, None] * grads
        picks = _sample_subsets(rng, n_traj, n, k)   # (B, k)
        step = y[picks, np.arange(n_traj)[:, None], :].mean(axis=1)
        w = w - lr * step
        emp[t] = float(problem.global_loss(w).mean()) - f_star
    holds = bool((emp <= bnd * (1.0 + 1e-9) + 1e-12).all())
    return BoundTrace(rounds=np.arange(1, rounds + 1), empirical=emp,
                      bound=bnd, holds=holds)


def verify_theorem5(problem: QuadraticTestProblem, k: int, rounds: int = 100,
                    n_traj: int = 500, rng=None, w0=None) -> BoundTrace:
    """Heterogeneity-form bound: validity and ordering against the
    enumerated-deviation bound of the convergence theorem."""
    rng = rng or np.random.default_rng(0)
    n = problem.n_devices
    lr = 1.0 / problem.smoothness
    contraction = 1.0 - problem.pl_constant / problem.smoothness
    if w0 is None:
        w0 = problem.w_star + rng.standard_normal(problem.dim)
    w = np.tile(np.asarray(w0, dtype=np.float64), (n_traj, 1))
    f_star = float(problem.global_loss(problem.w_star))
    gap0 = float(problem.global_loss(np.asarray(w0))) - f_star
    zbar = problem.counts.mean()

    emp = np.empty(rounds)
    bnd4 = np.empty(rounds)
    bnd5 = np.empty(rounds)
    noise4 = 0.0
    noise5 = 0.0
    for t in range(rounds):
        dev_sq = float(np.mean(deviation_exact(problem, w, k)))
        grads = problem.device_gradients(w)
        ref = problem.global_gradient(w)
        sq = ((grads - ref) ** 2).sum(axis=-1)
        # worst-case divergence, averaged over the trajectory ensemble
        gamma_sq = float((problem.counts[:, None] ** 2 * sq).max(axis=0)
                         .mean())
        noise4 = contraction * noise4 + dev_sq
        term5 = ((1.0 - k / n) * gamma_sq / (k * zbar ** 2)) if k < n else 0.0
        noise5 = contraction * noise5 + term5
        bnd4[t] = contraction ** (t + 1) * gap0 + noise4 / (2 * problem.smoothness)
        bnd5[t] = contraction ** (t + 1) * gap0 + noise5 / (2 * problem.smoothness)
        y = problem.counts[:, None, None] * grads
        picks = _sample_subsets(rng, n_traj, n, k)
        step = y[picks, np.arange(n_traj)[:, None], :].mean(axis=1)
        w = w - lr * step
        emp[t] = float(problem.global_loss(w).mean()) - f_star
    valid = bool((emp <= bnd5 * (1.0 + 1e-9) + 1e-12).all())
    ordered = bool((bnd5 >= bnd4 * (1.0 - 1e-12) - 1e-15).all())
    return BoundTrace(rounds=np.arange(1, rounds + 1), empirical=emp,
                      bound=bnd5, holds=valid and ordered,
                      extra={"bound4": bnd4, "ordered": ordered})


@dataclass
class NonconvexProblem:
    """Per-device smooth nonconvex losses: quadratic plus cosine ripple.

    f_n(w) = 0.5 w^T A_n w + amp_n * cos(b_n . w + phase_n); globally
    L-smooth with L <= lam_max(mean A) + mean(amp |b|^2).
    """

    matrices: np.ndarray        # (N, d, d)
    ripple_dirs: np.ndarray     # (N, d)
    ripple_amps: np.ndarray     # (N,)
    phases: np.ndarray          # (N,)
    counts: np.ndarray          # (N,)

    def __post_init__(self):
        mean_a = np.einsum("n,nij->ij", self.counts,
                           self.matrices) / len(self.counts)
        ripple = float(np.mean(self.counts * np.abs(self.ripple_amps)
                               * (self.ripple_dirs ** 2).sum(axis=1)))
        self.smoothness = float(np.linalg.eigvalsh(mean_a).max()) + ripple

    @property
    def n_devices(self):
        return len(self.counts)

    def device_gradients(self, w):
        w = np.asarray(w)
        lin = np.einsum("nij,...j->n...i", self.matrices, w)
        phase = np.einsum("ni,...i->n...", self.ripple_dirs, w)
        phase = phase + self.phases.reshape(-1, *([1] * (w.ndim - 1)))
        amp = self.ripple_amps.reshape(-1, *([1] * (w.ndim - 1)))
        return lin - (amp * np.sin(phase))[..., None] * \
            self.ripple_dirs.reshape(self.n_devices,
                                     *([1] * (w.ndim - 1)), -1)

    def global_gradient(self, w):
        g = self.device_gradients(w)
        return np.einsum("n,n...i->...i", self.counts, g) / self.n_devices

    def global_loss(self, w):
        w = np.asarray(w)
        quad = 0.5 * np.einsum("...i,nij,...j->n...", w, self.matrices, w)
        phase = np.einsum("ni,...i->n...", self.ripple_dirs, w)
        phase = phase + self.phases.reshape(-1, *([1] * (w.ndim - 1)))
        amp = self.ripple_amps.reshape(-1, *([1] * (w.ndim - 1)))
        vals = quad + amp * np.cos(phase)
        return np.einsum("n,n...->...", self.counts, vals) / self.n_devices


def random_nonconvex_problem(rng, n_devices=4, dim=2) -> NonconvexProblem:
    mats = np.empty((n_devices, dim, dim))
    for n in range(n_devices):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(0.8, 2.0, size=dim)
        mats[n] = (q * eigs) @ q.T
    return NonconvexProblem(
        matrices=mats,
        ripple_dirs=rng.uniform(-1.5, 1.5, size=(n_devices, dim)),
        ripple_amps=rng.uniform(0.2, 0.8, size=n_devices),
        phases=rng.uniform(0, 2 * np.pi, size=n_devices),
        counts=np.ones(n_devices),
    )


def certified_minimum(problem: NonconvexProblem, span: float = 4.0,
                      grid: int = 801, polish_steps: int = 2000) -> float:
    """Global minimum value via dense 2-D grid plus descent polish."""
    if problem.matrices.shape[-1] != 2:
        raise RaceError("grid search implemented for 2-D problems")
    xs = np.linspace(-span, span, grid)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    vals = problem.global_loss(pts)
    best = pts[np.argmin(vals)]
    lr = 0.5 / problem.smoothness
    w = best.copy()
    for _ in range(polish_steps):
        w = w - lr * problem.global_gradient(w)
    return float(min(vals.min(), problem.global_loss(w)))


def verify_theorem9(problem: NonconvexProblem, k: int, rounds: int = 100,
                    n_traj: int = 400, rng=None, w0=None) -> BoundTrace:
    """Stationary-point bound without gradient dominance."""
    rng = rng or np.random.default_rng(0)
    n = problem.n_devices
    lr = 1.0 / problem.smoothness
    if w0 is None:
        w0 = rng.standard_normal(problem.matrices.shape[-1])
    f_star = certified_minimum(problem)
    f0 = float(problem.global_loss(np.asarray(w0)))
    w = np.tile(np.asarray(w0, dtype=np.float64), (n_traj, 1))

    grad_sq = np.empty(rounds)
    noise = np.empty(rounds)
    for t in range(rounds):
        ref = problem.global_gradient(w)
        grad_sq[t] = float((ref ** 2).sum(axis=-1).mean())
        grads = problem.device_gradients(w)
        y = problem.counts[:, None, None] * grads
        ybar = y.mean(axis=0)
        m = _subset_matrix(n, k)
        est = np.tensordot(m, y, axes=(1, 0))
        noise[t] = float(((est - ybar[None]) ** 2).sum(axis=-1)
                         .mean(axis=0).mean())
        picks = _sample_subsets(rng, n_traj, n, k)
        step = y[picks, np.arange(n_traj)[:, None], :].mean(axis=1)
        w = w - lr * step
    lhs = grad_sq.min()
    rhs = (2.0 * problem.smoothness * (f0 - f_star) + noise.sum()) / rounds
    holds = lhs <= rhs * (1.0 + 1e-9) + 1e-12
    return BoundTrace(rounds=np.arange(1, rounds + 1), empirical=grad_sq,
                      bound=np.full(rounds, rhs), holds=bool(holds),
                      extra={"min_grad_sq": float(lhs), "rhs": float(rhs)})


@dataclass
class AdaptiveThresholdResult:
    rounds_checked: int
    rounds_skipped: int
    ratios: np.ndarray
    holds: bool


def verify_theorem7(problem: QuadraticTestProblem, k: int, rounds: int = 50,
                    lam_min: float = None, lam_max: float = None,
                    adapt_rate: float = 1.0, rng=None,
                    w0=None) -> AdaptiveThresholdResult:
    """Adaptive-threshold eligibility: set inclusion, participation ratio,
    and the enumerated deviation inequality, on one shared trajectory."""
    rng = rng or np.random.default_rng(0)
    n = problem.n_devices
    lr = 1.0 / problem.smoothness
    if w0 is None:
        w0 = problem.w_star + rng.standard_normal(problem.dim)
    w = np.asarray(w0, dtype=np.float64).copy()
    g0 = float(np.linalg.norm(problem.global_gradient(w)))
    if g0 == 0:
        raise RaceError("degenerate start: zero initial gradient")

    # calibrate thresholds to the observed drift scale when not given
    drift0 = lr * np.linalg.norm(problem.device_gradients(w), axis=-1) \
        / np.linalg.norm(w)
    if lam_min is None:
        lam_min = float(np.median(drift0))
    if lam_max is None:
        lam_max = float(drift0.max() * 2.0)

    ratios = []
    skipped = 0
    holds = True
    for t in range(rounds):
        wnorm = np.linalg.norm(w)
        grads = problem.device_gradients(w)
        drift = lr * np.linalg.norm(grads, axis=-1) / wnorm
        gnorm = float(np.linalg.norm(problem.global_gradient(w)))
        lam_t = lam_min + (lam_max - lam_min) * math.exp(
            -adapt_rate * (gnorm / g0) ** 2)
        fixed_set = np.flatnonzero(drift <= lam_min)
        adapt_set = np.flatnonzero(drift <= lam_t)
        if len(fixed_set) == 0 or len(fixed_set) < k or len(adapt_set) < k:
            skipped += 1
            log.info("round %d skipped: eligible sets too small for "
                     "enumeration", t)
        else:
            assert set(fixed_set) <= set(adapt_set)
            rho = len(adapt_set) / len(fixed_set)
            ratios.append(rho)
            if rho < 1.0:
                holds = False
            e_a = _restricted_deviation(problem, w, adapt_set, k)
            e_f = _restricted_deviation(problem, w, fixed_set, k)
            if e_a > rho * e_f * (1.0 + 1e-9) + 1e-15:
                holds = False
        # advance by aggregating the adaptive eligible set (all members)
        agg = adapt_set if len(adapt_set) else np.arange(n)
        step = (problem.counts[agg, None] * grads[agg]).mean(axis=0)
        w = w - lr * step
    return AdaptiveThresholdResult(
        rounds_checked=rounds - skipped, rounds_skipped=skipped,
        ratios=np.asarray(ratios), holds=holds)


def _restricted_deviation(problem, w, pool, k):
    """Exact E|e|^2 over k-subsets drawn from ``pool`` against the
    full-set reference gradient."""
    grads = problem.device_gradients(w)
    y = problem.counts[:, None] * grads
    ybar = y.mean(axis=0)
    total = 0.0
    count = 0
    for s in itertools.combinations(pool, k):
        e = y[list(s)].mean(axis=0) - ybar
        total += float((e ** 2).sum())
        count += 1
    return total / count


def verify_local_smoothness_containment(problem: NonconvexProblem,
                                        k: int, radius: float = 1.5,
                                        margin: float = 0.5,
                                        rounds: int = 100,
                                        seeds: int = 100) -> bool:
    """Qualitative check: with a small prescribed step size and
    initialization inside the ball, iterates never exit it."""
    f_star_w = _argmin_nonconvex(problem)
    lr = margin / (2.0 * problem.smoothness * rounds
                   * math.sqrt(math.log(100.0)))
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(2)
        direction /= np.linalg.norm(direction)
        w = f_star_w + (radius - margin) * rng.uniform(0, 1) * direction
        for _ in range(rounds):
            picks = rng.permutation(problem.n_devices)[:k]
            grads = problem.device_gradients(w)
            step = (problem.counts[picks, None] * grads[picks]).mean(axis=0)
            w = w - lr * step
            if np.linalg.norm(w - f_star_w) > radius:
                return False
    return True


def _argmin_nonconvex(problem: NonconvexProblem) -> np.ndarray:
    xs = np.linspace(-4, 4, 801)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    vals = problem.global_loss(pts)
    w = pts[np.argmin(vals)].copy()
    lr = 0.5 / problem.smoothness
    for _ in range(2000):
        w = w - lr * problem.global_gradient(w)
    return w
