"""Estimators and statistical tests for loop-soup path and chain properties.

Every estimator returns a standard error next to its point estimate, and
every test returns a :class:`Verdict` whose ``stats`` hold the numbers the
decision was made from.  Thresholds default to 1% for distributional tests
and 3 standard errors for mean comparisons.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .configuration import Configuration, N_obs, S_obs
from .interaction import hamiltonian, self_W_batch
from .kernels import GibbsChain, MCMCConfig, centered_cube
from .measures import LoopMeasureSpec, expected_particles, sample_PH
from .paths import Domain, TimeGrid, _point_diameter, sample_bridge_batch
from .potentials import ModelParams

__all__ = [
    "Verdict",
    "DecayFit",
    "TemperedSpec",
    "batch_means_se",
    "compound_poisson_pmf",
    "chi2_pmf_test",
    "sequential_bridge",
    "containment_oracle",
    "single_loop_weight",
    "decay_fit",
    "estimate_cphi_bound",
    "diameter_tail_test",
    "tail_collapse_test",
    "tempered_membership",
    "calibrate_tempered",
    "poisson_exp_moment",
    "mh_exp_moment_bound",
    "exp_moment_test",
    "consistency_test",
    "fkg_test",
    "free_gas_test",
    "chain_N_samples",
    "kernel_equivalence_test",
    "containment_profile",
]

Z_MEAN = 3.0
ALPHA = 0.01


@dataclass
class Verdict:
    name: str
    passed: bool
    stats: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {"test": self.name, "pass": bool(self.passed), "stats": _plain(self.stats)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


# -- generic statistics ------------------------------------------------------


def batch_means_se(x: Sequence[float], n_batches: int = 20) -> float:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return math.inf
    b = min(n_batches, n)
    size = n // b
    if size < 1:
        return float(x.std(ddof=1) / math.sqrt(n))
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(b))


def _iid_se(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf


def compound_poisson_pmf(rates: Sequence[float], n_max: int) -> np.ndarray:
    """pmf of ``sum_j j * Poisson(rates[j-1])`` on ``0..n_max`` (Panjer recursion)."""
    rates = np.asarray(rates, dtype=float)
    lam = float(rates.sum())
    g = np.zeros(n_max + 1)
    g[0] = math.exp(-lam)
    jj = np.arange(1, rates.size + 1)
    for n in range(1, n_max + 1):
        k = jj[jj <= n]
        g[n] = float((k * rates[k - 1] * g[n - k]).sum()) / n
    return g


def chi2_pmf_test(samples: Sequence[int], pmf: np.ndarray, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Pearson chi-square of integer samples against a pmf, pooling sparse cells; returns ``(stat, p, dof)``."""
    samples = np.asarray(samples, dtype=int)
    n = samples.size
    pmf = np.asarray(pmf, dtype=float)
    edges: list[int] = []
    acc = 0.0
    for k in range(pmf.size):
        acc += pmf[k] * n
        if acc >= min_expected:
            edges.append(k)
            acc = 0.0
    if not edges:
        return 0.0, 1.0, 0
    edges[-1] = pmf.size - 1
    bins = np.searchsorted(np.asarray(edges), np.minimum(samples, pmf.size - 1))
    obs = np.bincount(bins, minlength=len(edges)).astype(float)
    cdf = np.cumsum(pmf)
    exp_p = np.diff(np.concatenate([[0.0], cdf[edges]]))
    exp_p[-1] += max(0.0, 1.0 - cdf[-1])
    expct = exp_p * n
    dof = len(edges) - 1
    if dof < 1:
        return 0.0, 1.0, 0
    stat = float(((obs - expct) ** 2 / expct).sum())
    return stat, float(stats.chi2.sf(stat, dof)), dof


def _two_sample(a, b, alpha=ALPHA, z=Z_MEAN) -> dict:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.ptp(np.concatenate([a, b])) == 0:
        ks_p = 1.0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ks_p = float(stats.ks_2samp(a, b).pvalue)
    se = math.sqrt(_iid_se(a) ** 2 + _iid_se(b) ** 2)
    diff = float(a.mean() - b.mean())
    mean_ok = abs(diff) <= z * se if se > 0 else diff == 0
    return {
        "mean_a": float(a.mean()),
        "mean_b": float(b.mean()),
        "diff": diff,
        "se": se,
        "ks_p": ks_p,
        "pass": bool(ks_p >= alpha and mean_ok),
    }


# -- independent path oracles --------------------------------------------------


def sequential_bridge(x, y, steps: int, dt: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Bridge built point by point from the conditional law given the current point and the pin.

    Returns ``(size, steps + 1, d)``.  Used as an oracle independent of the
    random-walk-minus-line construction in the main sampler.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.size
    out = np.empty((size, steps + 1, d))
    out[:, 0] = x
    cur = np.broadcast_to(x, (size, d)).copy()
    T = steps * dt
    for k in range(steps - 1):
        rem = T - k * dt
        mean = cur + (y - cur) * (dt / rem)
        var = dt * (rem - dt) / rem
        cur = mean + math.sqrt(var) * rng.standard_normal((size, d))
        out[:, k + 1] = cur
    out[:, steps] = y
    return out


def containment_oracle(
    domain: Domain, j: int, grid: TimeGrid, n: int, rng: np.random.Generator, refine: int = 4
) -> tuple[float, float]:
    """Probability that a loop of length ``j`` from a uniform start stays in the box at the grid times.

    The path is drawn on a grid ``refine`` times finer with the sequential
    construction and read off at the coarse grid times, which has the same
    law as the coarse-grid loop but shares no code with it.
    """
    steps = j * grid.m
    hits = np.empty(n, dtype=bool)
    o = np.zeros(domain.d)
    chunk = 2000
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        xs = domain.uniform(rng, e - s)
        paths = sequential_bridge(o, o, steps * refine, grid.dt / refine, rng, e - s)[:, :-1:refine] + xs[:, None]
        hits[s:e] = np.all((paths > domain.lo) & (paths < domain.hi), axis=(1, 2))
    p = float(hits.mean())
    return p, math.sqrt(max(p * (1 - p), 1e-300) / n)


# -- single-loop estimates ---------------------------------------------------


def _bridge_loops(j: int, grid: TimeGrid, d: int, rng, size: int) -> np.ndarray:
    o = np.zeros(d)
    return sample_bridge_batch(o, o, j * grid.m, grid.dt, rng, size)[:, :-1]


def single_loop_weight(
    j: int, params: ModelParams, grid: TimeGrid, n_samples: int, rng: np.random.Generator, batch: int = 4000
) -> tuple[float, float]:
    """Monte Carlo mean of ``exp(-beta W)`` over bridge loops of length ``j`` from the origin, with SE."""
    if j < 1:
        raise ValueError("j must be >= 1")
    pot = params.potential
    if j == 1 or pot.is_zero:
        return 1.0, 0.0
    vals = []
    left = n_samples
    while left > 0:
        k = min(batch, left)
        P = _bridge_loops(j, grid, params.d, rng, k)
        W = self_W_batch(P, j, grid.m, pot, grid.dt)
        vals.append(np.exp(-params.beta * W))
        left -= k
    y = np.concatenate(vals)
    return float(y.mean()), _iid_se(y)


@dataclass
class DecayFit:
    js: np.ndarray
    estimates: np.ndarray
    ses: np.ndarray
    slope: float
    slope_se: float
    intercept: float

    @property
    def rate(self) -> float:
        return -self.slope

    def ci(self, z: float = Z_MEAN) -> tuple[float, float]:
        """Confidence interval for the rate ``-slope``."""
        return self.rate - z * self.slope_se, self.rate + z * self.slope_se

    def as_dict(self) -> dict:
        lo, hi = self.ci()
        return {
            "j": self.js.tolist(),
            "weight": self.estimates.tolist(),
            "se": self.ses.tolist(),
            "rate": self.rate,
            "rate_se": self.slope_se,
            "rate_ci": [lo, hi],
            "intercept": self.intercept,
        }


def _wls(x, y, sig) -> tuple[float, float, float, float]:
    """Weighted straight-line fit; returns ``(slope, slope_se, intercept, chi2/dof)``."""
    w = 1.0 / np.asarray(sig) ** 2
    X = np.column_stack([np.ones_like(x), x])
    A = X.T @ (X * w[:, None])
    coef = np.linalg.solve(A, X.T @ (w * y))
    cov = np.linalg.inv(A)
    resid = y - X @ coef
    dof = max(1, x.size - 2)
    red = float((w * resid**2).sum() / dof)
    return float(coef[1]), float(math.sqrt(cov[1, 1] * max(1.0, red))), float(coef[0]), red


def decay_fit(
    js: Sequence[int], params: ModelParams, grid: TimeGrid, n_samples: int, rng: np.random.Generator
) -> DecayFit:
    """Fit ``log E[exp(-beta W)]`` against ``j`` by inverse-variance weighted least squares.

    The standard error of each log-estimate is the delta-method ``se/mean``;
    the slope SE is inflated by the reduced chi-square when that exceeds 1.
    """
    js = np.asarray(js, dtype=int)
    est = np.empty(js.size)
    ses = np.empty(js.size)
    for i, j in enumerate(js):
        est[i], ses[i] = single_loop_weight(int(j), params, grid, n_samples, rng)
    pos = est > 0
    if pos.sum() < 2 or np.any(ses[pos] == 0):
        return DecayFit(js, est, ses, 0.0, 0.0, 0.0)
    y = np.log(est[pos])
    sig = ses[pos] / est[pos]
    slope, slope_se, icept, _ = _wls(js[pos].astype(float), y, sig)
    return DecayFit(js, est, ses, slope, slope_se, icept)


def estimate_cphi_bound(
    params: ModelParams, grid: TimeGrid, n_samples: int, rng: np.random.Generator, batch: int = 20000
) -> tuple[float, float]:
    """One third of ``-log E exp(-beta^2 int_0^1 Phi(sqrt(beta)|B_s - B_1 - B'_s|) ds)``, with delta-method SE.

    ``B`` and ``B'`` are independent standard Brownian motions from the
    origin sampled on ``grid.m`` steps of the unit interval.
    """
    pot = params.potential
    if pot.is_zero:
        return 0.0, 0.0
    beta, d, m = params.beta, params.d, grid.m
    vals = []
    left = n_samples
    while left > 0:
        k = min(batch, left)
        inc = rng.standard_normal((2, k, m, d)) * math.sqrt(1.0 / m)
        B = np.concatenate([np.zeros((2, k, 1, d)), np.cumsum(inc, axis=2)], axis=2)
        diff = B[0, :, :m] - B[0, :, m : m + 1] - B[1, :, :m]
        r = math.sqrt(beta) * np.linalg.norm(diff, axis=-1)
        integral = pot.phi(r).mean(axis=1)
        vals.append(np.exp(-(beta**2) * integral))
        left -= k
    y = np.concatenate(vals)
    mean, se = float(y.mean()), _iid_se(y)
    if mean <= 0:
        return math.inf, math.inf
    return -math.log(mean) / 3.0, se / (3.0 * mean)


# -- diameter tails -----------------------------------------------------------


def _diameters(P: np.ndarray) -> np.ndarray:
    """Grid diameters of a batch ``(n, k, d)`` of paths."""
    n, k, _ = P.shape
    out = np.empty(n)
    if k <= 64:
        iu, ju = np.triu_indices(k, 1)
        per = max(1, 2_000_000 // max(1, iu.size))
        for s in range(0, n, per):
            Q = P[s : s + per]
            diff = Q[:, iu] - Q[:, ju]
            out[s : s + per] = np.sqrt(np.einsum("npi,npi->np", diff, diff).max(axis=1))
        return out
    for i in range(n):
        out[i] = _point_diameter(P[i])
    return out


def _tail_curve(ds: np.ndarray, ts: np.ndarray):
    n = ds.size
    p = np.array([(ds > t).mean() for t in ts])
    se = np.sqrt(np.maximum(p * (1 - p), 1e-300) / n)
    return p, se


def diameter_tail_test(
    j: int,
    params: ModelParams,
    grid: TimeGrid,
    n_samples: int,
    rng: np.random.Generator,
    min_exceed: int = 30,
    n_points: int = 12,
    z: float = Z_MEAN,
) -> Verdict:
    """Check ``log P(diam > t) <= -t^2 / (8 beta j) + const`` on bridge loops of length ``j``.

    The empirical tail is evaluated on evenly spaced ``t`` from the median
    up to the largest level with at least ``min_exceed`` exceedances;
    ``log P`` is regressed on ``x = t^2 / (8 beta j)`` with a free
    intercept, and the bound holds if the slope is at most ``-1 + z SE``.
    """
    beta = params.beta
    ds = _diameters(_bridge_loops(j, grid, params.d, rng, n_samples))
    srt = np.sort(ds)
    t_lo = float(np.median(ds))
    t_hi = float(srt[-min_exceed])
    ts = np.linspace(t_lo, t_hi, n_points)
    p, se = _tail_curve(ds, ts)
    monotone = bool(np.all(np.diff(p) <= 0))
    x = ts**2 / (8 * beta * j)
    slope, slope_se, icept, red = _wls(x, np.log(p), se / p)
    ok = monotone and slope <= -1.0 + z * slope_se
    return Verdict(
        f"diameter_tail_j{j}",
        bool(ok),
        {
            "j": j,
            "n": n_samples,
            "t": ts,
            "tail": p,
            "tail_se": se,
            "slope": slope,
            "slope_se": slope_se,
            "intercept": icept,
            "monotone": monotone,
        },
    )


def tail_collapse_test(
    j: int,
    params: ModelParams,
    grid: TimeGrid,
    n_samples: int,
    rng: np.random.Generator,
    n_points: int = 8,
    z: float = Z_MEAN,
) -> Verdict:
    """Diffusive scaling: ``P_j(diam > t)`` against ``P_{4j}(diam > 2t)``.

    The ``4j`` loop is read at every fourth grid point so both curves come
    from the same number of sample times; otherwise the finer relative
    resolution of the longer loop biases its grid diameter upward.
    """
    d1 = _diameters(_bridge_loops(j, grid, params.d, rng, n_samples))
    d4 = _diameters(_bridge_loops(4 * j, grid, params.d, rng, n_samples)[:, ::4])
    ts = np.quantile(d1, np.linspace(0.2, 0.95, n_points))
    p1, s1 = _tail_curve(d1, ts)
    p4, s4 = _tail_curve(d4, 2 * ts)
    gap = np.abs(p1 - p4) / np.sqrt(s1**2 + s4**2)
    return Verdict(
        f"tail_collapse_j{j}",
        bool(np.all(gap <= z)),
        {"t": ts, "tail_j": p1, "tail_4j": p4, "max_z": float(gap.max())},
    )


# -- tempered configurations -------------------------------------------------


@dataclass(frozen=True)
class TemperedSpec:
    alpha: float
    K: float
    L: float
    n_max: int

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.K <= 0 or self.L <= 0 or self.n_max < 1:
            raise ValueError("K, L must be positive and n_max >= 1")


def tempered_membership(eta: Configuration, spec: TemperedSpec, d: int | None = None) -> tuple[bool, dict]:
    """Test ``N(cube_n) <= K |cube_n|`` and ``S(cube_n) <= n^alpha + L`` for ``n = 1..n_max``.

    Cubes are centered at the origin with side ``n`` and restrictions use
    loops started inside.  Margins are slack ratios ``bound / value``
    (infinite when the value is 0); membership holds iff every ratio is at
    least 1.  The tightest ratio of each family is reported.
    """
    if d is None:
        d = eta[0].points.shape[1] if len(eta) else 3
    n_ratio, s_ratio = [], []
    for n in range(1, spec.n_max + 1):
        cube = centered_cube(n, d)
        N = N_obs(eta, cube)
        S = S_obs(eta, cube)
        n_ratio.append(math.inf if N == 0 else spec.K * cube.volume / N)
        s_ratio.append(math.inf if S == 0 else (n**spec.alpha + spec.L) / S)
    ok = min(n_ratio) >= 1 and min(s_ratio) >= 1
    return bool(ok), {"N_margin": min(n_ratio), "S_margin": min(s_ratio), "N_by_n": n_ratio, "S_by_n": s_ratio}


def _per_j_moments(params, grid, j_max, n_samples, rng, theta):
    """Per-j MC estimates of ``E[e^{-beta W}]`` and ``E[e^{-beta W} diam^theta]`` for bridge loops."""
    q = np.ones(j_max)
    qd = np.empty(j_max)
    for j in range(1, j_max + 1):
        P = _bridge_loops(j, grid, params.d, rng, n_samples)
        W = self_W_batch(P, j, grid.m, params.potential, grid.dt)
        e = np.exp(-params.beta * W)
        q[j - 1] = e.mean()
        qd[j - 1] = (e * _diameters(P) ** theta).mean()
    return q, qd


def calibrate_tempered(
    spec: LoopMeasureSpec,
    alpha: float,
    eps: float,
    n_max: int,
    rng: np.random.Generator,
    c: float = 0.25,
    theta: float = 2.0,
    n_samples: int = 2000,
) -> tuple[TemperedSpec, dict]:
    """Choose ``(K, L)`` so that the union bound on violations over ``n <= n_max`` is at most ``eps``.

    The particle family uses the exponential Markov bound with the Campbell
    moment of the self-interaction-weighted intensity, which dominates any
    Dirichlet-kernel sample by FKG:
    ``P(N_n > K|n|) <= exp((C_c - c K) |n|)`` with
    ``C_c = sum_j w_j e^{beta mu j} q_j (e^{c j} - 1)``.  The diameter
    family uses the Markov bound on the largest diameter,
    ``P(S_n > n^alpha + L) <= |n| M_theta / (n^alpha + L)^theta`` with
    ``M_theta = sum_j w_j e^{beta mu j} E_j[e^{-beta W} diam^theta]``.
    Each family gets ``eps / 2``.
    """
    p = spec.params
    ws = spec.weighted(True).weights
    js = np.arange(1, spec.j_max + 1)
    q, qd = _per_j_moments(p, spec.grid, spec.j_max, n_samples, rng, theta)
    C = float((ws * q * np.expm1(c * js)).sum())
    M = float((ws * qd).sum())
    vols = np.array([float(n) ** p.d for n in range(1, n_max + 1)])
    ns = np.arange(1, n_max + 1, dtype=float)

    def n_fail(K):
        return float(np.exp((C - c * K) * vols).sum())

    def s_fail(L):
        return float((vols * M / (ns**alpha + L) ** theta).sum())

    K = _bisect_up(n_fail, eps / 2, max(C / c, 1e-6))
    L = _bisect_up(s_fail, eps / 2, 1e-6)
    return TemperedSpec(alpha, K, L, n_max), {"C_c": C, "M_theta": M, "c": c, "theta": theta, "eps": eps}


def _bisect_up(fail: Callable[[float], float], target: float, start: float) -> float:
    hi = max(start, 1e-6)
    while fail(hi) > target:
        hi *= 2
    lo = hi / 2 if fail(hi / 2) > target else 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if fail(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


# -- exponential moments -------------------------------------------------------


def poisson_exp_moment(spec: LoopMeasureSpec, c: float, p_j: np.ndarray | None = None) -> float:
    """``E[e^{cN}]`` for a Poisson soup with intensity ``|box| w_j p_j`` per length ``j``."""
    js = np.arange(1, spec.j_max + 1)
    w = spec.weights if p_j is None else spec.weights * np.asarray(p_j)
    return math.exp(spec.domain.volume * float((w * np.expm1(c * js)).sum()))


def mh_exp_moment_bound(spec: LoopMeasureSpec, c: float, q_j: np.ndarray) -> float:
    """``exp(M^H[e^{c l}])`` with the self-interaction weighted intensity, started-in restriction.

    ``q_j`` are single-loop weights ``E_j[e^{-beta W}]``; the Dirichlet
    containment factor is bounded by 1, so the result is an upper bound.
    """
    ws = spec.weighted(True).weights
    js = np.arange(1, spec.j_max + 1)
    return math.exp(spec.domain.volume * float((ws * np.asarray(q_j) * np.exp(c * js)).sum()))


def exp_moment_test(N: Sequence[float], c: float, bound: float, z: float = Z_MEAN, name: str = "exp_moment") -> Verdict:
    """Empirical ``E[e^{cN}]`` (batch-means SE) must not exceed ``bound + z SE``."""
    N = np.asarray(N, dtype=float)
    y = np.exp(c * N)
    mean, se = float(y.mean()), batch_means_se(y)
    return Verdict(name, bool(mean <= bound + z * se), {"c": c, "mean": mean, "se": se, "bound": bound})


# -- chain-based tests ---------------------------------------------------------


def chain_N_samples(
    spec: LoopMeasureSpec, kind: str, mcmc: MCMCConfig, rng: np.random.Generator, boundary=None
) -> tuple[np.ndarray, GibbsChain]:
    chain = GibbsChain(spec, kind, boundary, mcmc, rng)
    for _ in chain.samples():
        pass
    return np.asarray(chain.report.traces["N"], dtype=float), chain


def free_gas_test(
    spec: LoopMeasureSpec,
    kind: str,
    mcmc: MCMCConfig,
    rng: np.random.Generator,
    p_j: np.ndarray | None = None,
    target_mean: float | None = None,
) -> Verdict:
    """Chain mean and histogram of ``N`` against the Poisson reference with per-length survival ``p_j``.

    ``p_j`` defaults to 1 (free kernel).  ``target_mean`` overrides the
    mean taken from the truncated weights.
    """
    N, chain = chain_N_samples(spec, kind, mcmc, rng)
    js = np.arange(1, spec.j_max + 1)
    p_j = np.ones(spec.j_max) if p_j is None else np.asarray(p_j)
    rates = spec.domain.volume * spec.weights * p_j
    mean_ref = float((js * rates).sum()) if target_mean is None else target_mean
    se = batch_means_se(N)
    mean_ok = abs(N.mean() - mean_ref) <= Z_MEAN * se
    pmf = compound_poisson_pmf(rates, int(max(N.max(), 1)) + 40)
    # Thinned, roughly independent subsample for the histogram test.
    lag = _decorrelation_lag(N)
    sub = N[::lag].astype(int)
    chi2, p, dof = chi2_pmf_test(sub, pmf)
    return Verdict(
        f"free_gas_{kind}",
        bool(mean_ok and p >= ALPHA),
        {
            "mean": float(N.mean()),
            "se": se,
            "reference": mean_ref,
            "chi2": chi2,
            "chi2_p": p,
            "dof": dof,
            "hist_lag": lag,
            "hist_n": int(sub.size),
            "acceptance": chain.report.acceptance_rates(),
        },
    )


def _decorrelation_lag(x: np.ndarray, max_lag: int = 200) -> int:
    """First lag where the sample autocorrelation falls below ``exp(-2)``; at least 1."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    v = float((x * x).mean())
    if v == 0:
        return 1
    for k in range(1, min(max_lag, x.size // 4)):
        if float((x[:-k] * x[k:]).mean()) / v < math.exp(-2):
            return 2 * k
    return max_lag


def fkg_test(spec: LoopMeasureSpec, mcmc: MCMCConfig, n_ph: int, rng: np.random.Generator) -> Verdict:
    """Mean ``N`` under the Dirichlet kernel with empty boundary against i.i.d. ``P^H`` samples, one-sided."""
    N, chain = chain_N_samples(spec, "dirichlet", mcmc, rng)
    ph = np.array([sample_PH(spec, rng).particles for _ in range(n_ph)], dtype=float)
    se_d, se_h = batch_means_se(N), _iid_se(ph)
    se = math.sqrt(se_d**2 + se_h**2)
    ok = N.mean() <= ph.mean() + Z_MEAN * se
    return Verdict(
        f"fkg_{spec.params.potential.family}",
        bool(ok),
        {"mean_dir": float(N.mean()), "se_dir": se_d, "mean_PH": float(ph.mean()), "se_PH": se_h},
    )


def _window_observables(eta: Configuration, delta: Domain, pot) -> tuple[float, ...]:
    return (
        float(N_obs(eta, delta)),
        float(N_obs(eta, delta, "contained_in")),
        float(S_obs(eta, delta)),
        float(hamiltonian(eta, delta, pot).total),
    )


def consistency_test(
    spec: LoopMeasureSpec,
    delta: Domain,
    outer: MCMCConfig,
    inner_steps: int,
    rng_a: np.random.Generator,
    rng_b: np.random.Generator,
    kernel: str = "dirichlet",
    alpha: float = ALPHA,
    drop_crossing: bool = False,
) -> Verdict:
    """Resampling the window of an outer-kernel sample must not change the window's law.

    The A-ensemble is the retained stream of the Dirichlet chain on
    ``spec.domain`` with empty boundary.  Each B-sample reruns the
    ``kernel`` chain on ``delta`` for ``inner_steps`` steps, conditioned on
    the corresponding A-sample.  ``N`` (started in and contained in the
    window), ``S`` and the window energy are
    compared by two-sample KS at ``alpha`` and by means at 3 SE.
    With ``drop_crossing``, outer samples having a loop that crosses the
    window boundary are left out of both ensembles.
    """
    if not spec.domain.contains_box(delta):
        raise ValueError("window must lie inside the outer box")
    pot = spec.params.potential
    chain = GibbsChain(spec, "dirichlet", None, outer, rng_a)
    A, B = [], []
    inner_spec = spec.on(delta)
    inner_cfg = MCMCConfig(steps=inner_steps, burn_in=inner_steps, thin=1)
    skipped = dropped = 0
    for eta in chain.samples():
        if drop_crossing and len(eta.crossing(delta)):
            dropped += 1
            continue
        A.append(_window_observables(eta, delta, pot))
        sub = GibbsChain(inner_spec, kernel, eta, inner_cfg, rng_b)
        B.append(_window_observables(sub.advance(inner_steps), delta, pot))
        skipped += sub.report.skipped_bridges
    res: dict = {"samples": len(A), "dropped_crossing": dropped}
    if not A:
        return Verdict(f"consistency_{kernel}", False, {**res, "reason": "no usable samples"})
    A_arr, B_arr = np.asarray(A), np.asarray(B)
    ok = True
    for k, name in enumerate(("N", "N_dir", "S", "energy")):
        r = _two_sample(A_arr[:, k], B_arr[:, k], alpha)
        res[name] = r
        ok &= r["pass"]
    res["kernel"] = kernel
    res["skipped_bridges"] = skipped
    return Verdict(f"consistency_{kernel}", bool(ok), res)


def expected_free_N(spec: LoopMeasureSpec) -> float:
    return expected_particles(spec, check=False)


def kernel_equivalence_test(
    spec: LoopMeasureSpec,
    delta: Domain,
    outer: MCMCConfig,
    inner_steps: int,
    rng_a: np.random.Generator,
    rng_b: np.random.Generator,
    rng_c: np.random.Generator,
    alpha: float = ALPHA,
) -> Verdict:
    """On conditioning data with no loop crossing the window, the excursion and Dirichlet kernels agree.

    Outer samples come from the Dirichlet chain on ``spec.domain``; those
    with a loop crossing ``delta`` are dropped.  Each kept sample is
    resampled by both window kernels with independent streams and the
    window observables of the two ensembles are compared.
    """
    pot = spec.params.potential
    chain = GibbsChain(spec, "dirichlet", None, outer, rng_a)
    inner_spec = spec.on(delta)
    inner_cfg = MCMCConfig(steps=inner_steps, burn_in=inner_steps, thin=1)
    D, X = [], []
    dropped = 0
    for eta in chain.samples():
        if len(eta.crossing(delta)):
            dropped += 1
            continue
        d_chain = GibbsChain(inner_spec, "dirichlet", eta, inner_cfg, rng_b)
        x_chain = GibbsChain(inner_spec, "excursion", eta, inner_cfg, rng_c)
        D.append(_window_observables(d_chain.advance(inner_steps), delta, pot))
        X.append(_window_observables(x_chain.advance(inner_steps), delta, pot))
    res: dict = {"samples": len(D), "dropped_crossing": dropped}
    if not D:
        return Verdict("kernel_equivalence", False, {**res, "reason": "no non-crossing samples"})
    A_arr, B_arr = np.asarray(D), np.asarray(X)
    ok = True
    for k, name in enumerate(("N", "N_dir", "S", "energy")):
        r = _two_sample(A_arr[:, k], B_arr[:, k], alpha)
        res[name] = r
        ok &= r["pass"]
    return Verdict("kernel_equivalence", bool(ok), res)


def containment_profile(
    domain: Domain, grid: TimeGrid, j_max: int, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-length survival probabilities from :func:`containment_oracle`.

    Stops at the first length with no surviving sample and sets every
    longer length to 0 (survival is decreasing in ``j``).
    """
    p = np.zeros(j_max)
    se = np.zeros(j_max)
    for j in range(1, j_max + 1):
        p[j - 1], se[j - 1] = containment_oracle(domain, j, grid, n, rng)
        if p[j - 1] == 0:
            break
    return p, se
