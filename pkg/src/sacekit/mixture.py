"""Normal-mixture EM per arm and cross-arm matching of component weights.

Each observed survivor cell mixes at most two strata, so a two-component fit
per arm exposes the stratum sizes as ``weight * survival_rate``. LL is the only
stratum present in both survivor cells, which pins it down: its size must be
a candidate in both arms. When two candidates in one arm tie, the data cannot
say which component is LL and both labelings are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import IdentificationError, InfeasibleError, UndefinedEstimateError
from .strata import PrincipalStratum

_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class NormalComponent:
    weight: float
    mean: float
    sd: float


@dataclass(frozen=True)
class MixtureFit:
    components: tuple[NormalComponent, ...]
    loglik: float
    iterations: int
    converged: bool
    restarts_used: int
    trace: tuple[float, ...] = field(default=(), repr=False)
    n: int = 0

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def to_dict(self) -> dict:
        return {
            "components": [
                {"weight": c.weight, "mean": c.mean, "sd": c.sd} for c in self.components
            ],
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "restarts_used": self.restarts_used,
            "n": self.n,
        }


@dataclass(frozen=True)
class EmOptions:
    restarts: int = 10
    tol: float = 1e-8
    max_iter: int = 2000
    var_floor: float = 1e-6  # relative to the sample variance
    seed: int = 0


def _log_terms(y, w, mu, var):
    # log w_j + log N(y | mu_j, var_j), shape (k, n)
    return (
        np.log(w)[:, None]
        - 0.5 * (_LOG_2PI + np.log(var))[:, None]
        - 0.5 * (y[None, :] - mu[:, None]) ** 2 / var[:, None]
    )


def _e_step(y, w, mu, var):
    """Log-likelihood and responsibilities at the given parameters."""
    logp = _log_terms(y, w, mu, var)
    norm = logsumexp(logp, axis=0)
    return float(norm.sum()), np.exp(logp - norm)


def _stats(y, y2, w, mu, var):
    """Log-likelihood plus per-component (sum r, sum r*y, sum r*y^2)."""
    if len(w) != 2:
        ll, resp = _e_step(y, w, mu, var)
        return ll, resp.sum(axis=1), resp @ y, resp @ y2
    # two components: log p_j(y) is quadratic in y, so work with the log-ratio
    lin = mu / var
    quad = -0.5 / var
    const = np.log(w) - 0.5 * (_LOG_2PI + np.log(var)) - 0.5 * mu * lin
    d = (const[1] - const[0]) + (lin[1] - lin[0]) * y + (quad[1] - quad[0]) * y2
    n, sy, sy2 = len(y), float(y.sum()), float(y2.sum())
    # softplus(d) and sigmoid(d) from one exp; np.logaddexp is several times slower
    e = np.exp(-np.abs(d))
    inv = 1.0 / (1.0 + e)
    softplus = np.maximum(d, 0.0) + np.log1p(e)
    ll = n * const[0] + lin[0] * sy + quad[0] * sy2 + float(softplus.sum())
    r1 = np.where(d >= 0, inv, e * inv)
    n1, s1, q1 = float(r1.sum()), float(r1 @ y), float(r1 @ y2)
    return (
        float(ll),
        np.array([n - n1, n1]),
        np.array([sy - s1, s1]),
        np.array([sy2 - q1, q1]),
    )


def _run_em(y, w, mu, var, floor, opts: EmOptions):
    n = len(y)
    y2 = y * y
    trace = []
    prev = -math.inf
    converged = False
    it = 0
    while True:
        ll, nk, sk, qk = _stats(y, y2, w, mu, var)
        trace.append(ll)
        if it > 0 and abs(ll - prev) < opts.tol * abs(prev):
            converged = True
            break
        if it >= opts.max_iter or np.any(nk <= 0):
            break
        prev = ll
        w = nk / n
        mu = sk / nk
        # floored to block collapsing spikes
        var = np.maximum(qk / nk - mu * mu, floor)
        it += 1
    return w, mu, var, trace, it, converged


def _initial_states(y, k, opts: EmOptions):
    n = len(y)
    var0 = float(np.var(y))
    qs = (np.arange(k) + 0.5) / k
    yield np.full(k, 1.0 / k), np.quantile(y, qs), np.full(k, var0 / k)
    for r in range(1, opts.restarts):
        rng = np.random.default_rng([opts.seed, r])
        picks = np.sort(rng.choice(n, size=k, replace=False))
        w = rng.dirichlet(np.full(k, 5.0))
        yield w, y[picks], np.full(k, var0)


def em_fit(samples: Sequence[float], k: int = 2, opts: EmOptions = EmOptions()) -> MixtureFit:
    """Maximum-likelihood k-component univariate normal mixture with restarts.

    EM runs on standardized samples, so the fit (stopping rule included) is
    equivariant under y -> a*y + b for a > 0. The best log-likelihood over
    restarts wins, ties going to the earlier restart. Components come back
    sorted by mean.
    """
    y = np.asarray(samples, dtype=float)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(y) < 10 * k:
        raise ValueError(f"need at least {10 * k} samples for k={k}, got {len(y)}")
    center = float(y.mean())
    scale = float(y.std())
    if not scale > 0:
        raise ValueError("samples are all identical; a normal mixture is degenerate")
    z = (y - center) / scale
    # log-likelihood of y = log-likelihood of z - n log(scale)
    shift = len(y) * math.log(scale)

    if k == 1:
        ll = _stats(z, z * z, np.ones(1), np.zeros(1), np.ones(1))[0] - shift
        return MixtureFit((NormalComponent(1.0, center, scale),), ll, 1, True, 1, (ll,), len(y))

    best = None
    used = 0
    for w, mu, var in _initial_states(z, k, opts):
        used += 1
        w, mu, var, trace, it, conv = _run_em(z, w, mu, var, opts.var_floor, opts)
        ll = trace[-1]
        if best is None or ll > best[0]:
            best = (ll, w, mu, var, trace, it, conv)
    ll, w, mu, var, trace, it, conv = best
    order = np.argsort(mu, kind="stable")
    comps = tuple(
        NormalComponent(float(w[i]), center + scale * float(mu[i]), scale * math.sqrt(var[i]))
        for i in order
    )
    return MixtureFit(comps, ll - shift, it, conv, used, tuple(t - shift for t in trace), len(y))


def effective_components(fit: MixtureFit, collapse_weight: float = 0.01) -> tuple[NormalComponent, ...]:
    """Components after folding a near-empty component into the rest.

    If any weight is below ``collapse_weight`` the cell is treated as a single
    stratum: one component with the fit's overall mean and variance.
    """
    if len(fit.components) == 1 or min(c.weight for c in fit.components) >= collapse_weight:
        return fit.components
    w = np.array([c.weight for c in fit.components])
    mu = np.array([c.mean for c in fit.components])
    var = np.array([c.sd**2 for c in fit.components])
    w = w / w.sum()
    m = float(w @ mu)
    v = float(w @ (var + (mu - m) ** 2))
    return (NormalComponent(1.0, m, math.sqrt(v)),)


@dataclass(frozen=True)
class StrataSolution:
    proportions: dict  # PrincipalStratum -> fraction
    t_ll: int  # index into the treated effective components
    c_ll: int


@dataclass(frozen=True)
class StrataIdentification:
    solutions: tuple[StrataSolution, ...]
    ambiguous: bool
    p_t: float
    p_c: float

    def to_dict(self) -> dict:
        return {
            "ambiguous": self.ambiguous,
            "p_t": self.p_t,
            "p_c": self.p_c,
            "solutions": [
                {
                    "proportions": {k.value: v for k, v in s.proportions.items()},
                    "treated_ll_component": s.t_ll,
                    "control_ll_component": s.c_ll,
                }
                for s in self.solutions
            ],
        }


def _proportions(pi: float, p_t: float, p_c: float) -> dict:
    ld = p_t - pi
    dl = p_c - pi
    dd = 1.0 - pi - ld - dl
    return {
        PrincipalStratum.LL: pi,
        PrincipalStratum.LD: ld,
        PrincipalStratum.DL: dl,
        PrincipalStratum.DD: dd,
    }


def identify_strata(
    fit_t: MixtureFit,
    fit_c: MixtureFit,
    p_t: float,
    p_c: float,
    tol: float = 0.05,
    collapse_weight: float = 0.01,
) -> StrataIdentification:
    """Match LL-size candidates across arms.

    A treated candidate ``w_i * p_t`` and a control candidate ``w_j * p_c``
    match when they agree within relative ``tol``; the LL proportion is their
    average. ``tol=0`` still allows 1e-12 relative slack for rounding.
    """
    if not (0 < p_t <= 1 and 0 < p_c <= 1):
        raise UndefinedEstimateError("both arms need survivors to identify LL")
    rel = max(tol, 1e-12)
    comps_t = effective_components(fit_t, collapse_weight)
    comps_c = effective_components(fit_c, collapse_weight)
    lo, hi = max(0.0, p_t + p_c - 1.0), min(p_t, p_c)

    matched = False
    solutions = []
    for i, ct in enumerate(comps_t):
        a = ct.weight * p_t
        for j, cc in enumerate(comps_c):
            b = cc.weight * p_c
            if abs(a - b) > rel * max(a, b):
                continue
            matched = True
            pi = 0.5 * (a + b)
            # rounding slack only; a real overshoot means a negative stratum
            slack = 1e-9 * pi
            if pi < lo - slack or pi > hi + slack:
                continue
            pi = min(max(pi, lo), hi)
            solutions.append(StrataSolution(_proportions(pi, p_t, p_c), i, j))
    if not matched:
        raise IdentificationError(
            f"no treated candidate {[c.weight * p_t for c in comps_t]} matches a control "
            f"candidate {[c.weight * p_c for c in comps_c]} within relative tolerance {tol}"
        )
    if not solutions:
        raise InfeasibleError("every matched LL size implies a negative stratum proportion")
    return StrataIdentification(tuple(solutions), len(solutions) > 1, p_t, p_c)


def sace_candidates(
    ident: StrataIdentification,
    fit_t: MixtureFit,
    fit_c: MixtureFit,
    collapse_weight: float = 0.01,
) -> list[float]:
    """Distinct LL mean differences, one per identification solution."""
    if not ident.solutions:
        raise ValueError("identification has no solutions")
    comps_t = effective_components(fit_t, collapse_weight)
    comps_c = effective_components(fit_c, collapse_weight)
    out: list[float] = []
    for s in ident.solutions:
        d = comps_t[s.t_ll].mean - comps_c[s.c_ll].mean
        if not any(math.isclose(d, e, rel_tol=1e-9, abs_tol=1e-9) for e in out):
            out.append(d)
    return sorted(out)


def expected_fit(components: Sequence[tuple[float, float, float]]) -> MixtureFit:
    """A MixtureFit built from known (weight, mean, sd) triples, for exact inputs."""
    comps = tuple(
        sorted((NormalComponent(float(w), float(m), float(s)) for w, m, s in components),
               key=lambda c: c.mean)
    )
    return MixtureFit(comps, math.nan, 0, True, 0)


@dataclass(frozen=True)
class ArmMixtureAnalysis:
    fit_t: MixtureFit
    fit_c: MixtureFit
    identification: Optional[StrataIdentification]
    sace: Optional[list]
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "fit_t": self.fit_t.to_dict(),
            "fit_c": self.fit_c.to_dict(),
            "identification": None if self.identification is None else self.identification.to_dict(),
            "sace_candidates": self.sace,
            "error": self.error,
        }


def analyze_arms(
    y_t: Sequence[float],
    y_c: Sequence[float],
    p_t: float,
    p_c: float,
    opts: EmOptions = EmOptions(),
    tol: float = 0.05,
) -> ArmMixtureAnalysis:
    """Fit both survivor cells and identify strata; identification failures are reported, not raised."""
    fit_t = em_fit(y_t, 2, opts)
    fit_c = em_fit(y_c, 2, opts)
    try:
        ident = identify_strata(fit_t, fit_c, p_t, p_c, tol)
    except (IdentificationError, InfeasibleError) as exc:
        return ArmMixtureAnalysis(fit_t, fit_c, None, None, str(exc))
    return ArmMixtureAnalysis(fit_t, fit_c, ident, sace_candidates(ident, fit_t, fit_c))
