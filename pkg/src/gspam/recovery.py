"""Sampling parameters and the two-stage support recovery procedure.

Stage 2 finds the interaction pairs by estimating Hessian rows on the hash
grids; stage 1 then finds the remaining univariate variables from gradients on
the diagonal grid, restricted to the variables not already explained by pairs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .hashing import HashFamily, build_hash_family, combined_hessian_grid, diagonal_grid, family_size
from .model import ProblemParams, QueryOracle
from .sensing import (
    BernoulliEnsemble,
    draw_ensemble,
    gradient_measurements_batch,
    hessian_measurement_matrix,
    sparse_recover_batch,
)

__all__ = [
    "InfeasibleParameters",
    "NoiseTooLarge",
    "SolverConstants",
    "RecoveryParams",
    "RecoveryConfig",
    "SupportEstimate",
    "Ensembles",
    "derive_params_noiseless",
    "derive_params_bounded",
    "derive_stage1_params",
    "derive_resampling",
    "noise_bound_from_resamples",
    "expected_query_count",
    "estimate_interactions",
    "estimate_univariates",
    "recover_supports",
]


class InfeasibleParameters(ValueError):
    pass


class NoiseTooLarge(InfeasibleParameters):
    def __init__(self, message, ceiling):
        super().__init__(message)
        self.ceiling = ceiling


@dataclass(frozen=True)
class SolverConstants:
    """Constants of the sparse decoder error bound, one per recovery problem."""

    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0

    def __post_init__(self):
        for name in ("C1", "C2", "C3"):
            if not getattr(self, name) > 0:
                raise InfeasibleParameters(f"{name} must be positive")


@dataclass(frozen=True)
class RecoveryParams:
    d: int
    k: int
    rho: int
    C_tilde: float
    constants: SolverConstants
    m_v: int
    m_v_prime: int
    m_x: int
    m_x_prime: int
    a: float
    b: float
    a_prime: float
    mu: float
    mu1: float
    tau_prime: float
    mu_window: tuple
    mu1_window: tuple
    eps: float = 0.0
    eps1: float = math.inf
    b_prime: float = 0.0
    theta1: float = math.pi / 2
    regime: str = "noiseless"
    # stage 1, filled once the interaction variables are known
    s: Optional[int] = None
    P_size: Optional[int] = None
    m_v_dprime: Optional[int] = None
    mu_prime: Optional[float] = None
    tau_dprime: Optional[float] = None
    mu_prime_window: Optional[tuple] = None
    a1: Optional[float] = None
    b1: Optional[float] = None
    eps_prime: float = 0.0
    eps2: Optional[float] = None
    theta2: Optional[float] = None
    stage1_regime: Optional[str] = None
    N1: int = 1
    N2: int = 1
    p1: float = 0.01
    p2: float = 0.01

    def snapshot(self) -> dict:
        """Plain-JSON view (infinities become None)."""
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, float) and not math.isfinite(value):
                value = None
            elif isinstance(value, tuple):
                value = list(value)
            out[key] = value
        return out


def _positive(**values):
    for name, v in values.items():
        if not v > 0:
            raise InfeasibleParameters(f"{name} must be positive, got {v}")


def _stage2_counts(d, k, rho, C_tilde):
    if not d > k:
        raise InfeasibleParameters(f"need d > k, got d={d}, k={k}")
    rho_eff = max(int(rho), 1)
    if not d > rho_eff:
        raise InfeasibleParameters(f"need d > rho, got d={d}, rho={rho}")
    m_v = math.ceil(C_tilde * k * math.log(d / k))
    m_v_prime = math.ceil(C_tilde * rho_eff * math.log(d / rho_eff))
    return max(m_v, 1), max(m_v_prime, 1), rho_eff


def derive_params_noiseless(
    problem: ProblemParams,
    d: int,
    k: Optional[int] = None,
    rho: Optional[int] = None,
    C_tilde: float = 5.6,
    constants: SolverConstants = SolverConstants(),
) -> RecoveryParams:
    """Stage-2 parameters for exact queries.

    ``mu`` sits at 0.9 of its admissible supremum and ``mu1`` at the centre of
    its window, which makes ``tau_prime < D2 / 2`` hold by construction.
    """
    k = problem.k if k is None else k
    rho = problem.rho if rho is None else rho
    _positive(C_tilde=C_tilde, k=k)
    m_v, m_vp, rho_eff = _stage2_counts(d, k, rho, C_tilde)
    C1, C2 = constants.C1, constants.C2
    B3, D2 = problem.B3, problem.D2
    a = (4 * rho_eff + 1) * B3 / (2 * math.sqrt(m_vp))
    b = C1 * math.sqrt(m_vp) * (4 * rho_eff + 1) * k * B3 / (3 * m_v)
    a_p = D2 / (4 * a * C2)
    mu_sup = a_p * math.sqrt(a / b)
    mu = 0.9 * mu_sup
    half = math.sqrt(a_p**2 - b * mu**2 / a)
    mu1 = a_p
    tau = C2 * (a * mu1 + b * mu**2 / mu1)
    return RecoveryParams(
        d=d,
        k=k,
        rho=rho,
        C_tilde=C_tilde,
        constants=constants,
        m_v=m_v,
        m_v_prime=m_vp,
        m_x=math.ceil(1.0 / problem.lambda2 - 1e-12),
        m_x_prime=math.ceil(1.0 / problem.lambda1 - 1e-12),
        a=a,
        b=b,
        a_prime=a_p,
        mu=mu,
        mu1=mu1,
        tau_prime=tau,
        mu_window=(0.0, mu_sup),
        mu1_window=(a_p - half, a_p + half),
    )


def derive_params_bounded(
    problem: ProblemParams,
    d: int,
    eps: float,
    k: Optional[int] = None,
    rho: Optional[int] = None,
    C_tilde: float = 5.6,
    constants: SolverConstants = SolverConstants(),
) -> RecoveryParams:
    """Stage-2 parameters when every query carries noise of magnitude below ``eps``.

    The step ``mu`` must lie between the two positive roots of a cubic; both are
    written through the angle ``theta1``.  ``mu`` is placed at 0.9 of the way
    across that window and ``mu1`` at the centre of its own window.
    """
    if eps < 0:
        raise InfeasibleParameters(f"noise bound must be >= 0, got {eps}")
    base = derive_params_noiseless(problem, d, k, rho, C_tilde, constants)
    a, b, a_p = base.a, base.b, base.a_prime
    m_v, m_vp = base.m_v, base.m_v_prime
    C1, C2 = constants.C1, constants.C2
    eps1 = problem.D2**3 / (192 * math.sqrt(3) * C1 * C2**3 * math.sqrt(a**3 * b * m_vp * m_v))
    if eps >= eps1:
        raise NoiseTooLarge(f"noise bound {eps:.4g} is not below the interaction-stage ceiling {eps1:.4g}", eps1)
    b_p = 2 * C1 * math.sqrt(m_v * m_vp)
    theta1 = math.acos(-eps / eps1)
    R = math.sqrt(4 * a_p**2 * a / (3 * b))
    lo, hi = R * math.cos(theta1 / 3 - 2 * math.pi / 3), R * math.cos(theta1 / 3)
    lo = max(lo, 0.0)
    mu = lo + 0.9 * (hi - lo)
    disc = a_p**2 - (b * mu**2 + b_p * eps / mu) / a
    if disc <= 0:
        raise InfeasibleParameters("the mu1 window is empty at the chosen mu")
    half = math.sqrt(disc)
    mu1 = a_p
    tau = C2 * (a * mu1 + b * mu**2 / mu1 + b_p * eps / (mu * mu1))
    return replace(
        base,
        mu=mu,
        mu1=mu1,
        tau_prime=tau,
        mu_window=(lo, hi),
        mu1_window=(a_p - half, a_p + half),
        eps=eps,
        eps1=eps1,
        b_prime=b_p,
        theta1=theta1,
        regime="bounded" if eps > 0 else "noiseless",
    )


def derive_stage1_params(
    params: RecoveryParams,
    problem: ProblemParams,
    n_interaction_vars: int,
    eps: float = 0.0,
    r: Optional[float] = None,
    allow_fallback: bool = False,
) -> RecoveryParams:
    """Fill in the univariate-stage quantities once ``|S2var_hat|`` is known.

    ``r`` caps ``mu_prime`` so that probes around diagonal points stay inside
    the enlarged box.  Returns ``params`` unchanged apart from ``s = 0`` when no
    univariate variables can remain.
    """
    s = params.k - n_interaction_vars
    P_size = params.d - n_interaction_vars
    if s <= 0:
        return replace(params, s=0, P_size=P_size, stage1_regime="skipped")
    if not P_size > s:
        raise InfeasibleParameters(f"need |P| > k - |S2var|, got {P_size} <= {s}")
    C3, B3, D1 = params.constants.C3, problem.B3, problem.D1
    m_vpp = max(1, math.ceil(params.C_tilde * s * math.log(P_size / s)))
    a1 = s * B3 / (6 * m_vpp)
    b1 = math.sqrt(m_vpp)
    eps2 = D1**1.5 / (3 * math.sqrt(6 * a1 * C3**3 * b1**2))
    regime = "noiseless"
    theta2 = math.pi / 2
    lo, hi = 0.0, math.sqrt(3 * m_vpp * D1 / (C3 * s * B3))
    cap = math.inf if r is None else r * math.sqrt(m_vpp)
    if eps > 0 and eps < eps2:
        theta2 = math.acos(-eps / eps2)
        R = 2 * math.sqrt(D1 / (6 * a1 * C3))
        lo, hi = max(0.0, R * math.cos(theta2 / 3 - 2 * math.pi / 3)), R * math.cos(theta2 / 3)
        regime = "bounded"
    elif eps > 0:
        if not allow_fallback:
            raise NoiseTooLarge(f"noise bound {eps:.4g} is not below the univariate-stage ceiling {eps2:.4g}", eps2)
        regime = "beyond-ceiling"
    if regime == "beyond-ceiling":
        # no step meets the detection condition; take the step minimising the
        # error bound and split the difference between 0 and D1
        theta2 = None
        mu_p = min((b1 * eps / (2 * a1)) ** (1 / 3), cap)
        tau = D1 / 2
    else:
        mu_p = lo + 0.9 * (hi - lo)
        if mu_p > cap:
            if cap <= lo:
                raise InfeasibleParameters(
                    f"domain margin r={r} forces mu_prime <= {cap:.4g}, below the window's lower edge {lo:.4g}"
                )
            mu_p = cap
        eps_used = eps if regime == "bounded" else 0.0
        tau = C3 * (a1 * mu_p**2 + b1 * eps_used / mu_p)
    return replace(
        params,
        s=s,
        P_size=P_size,
        m_v_dprime=m_vpp,
        mu_prime=mu_p,
        tau_dprime=tau,
        mu_prime_window=(lo, hi),
        a1=a1,
        b1=b1,
        eps_prime=eps,
        eps2=eps2,
        theta2=theta2,
        stage1_regime=regime,
    )


def _beyond_ceiling_stage2(params, problem, eps, eps1, r, n_grid=400):
    """Stage-2 steps when the averaged Gaussian noise exceeds the guarantee's ceiling.

    No step pair satisfies the detection condition, so the steps minimise the
    Hessian-row error bound inside the domain budget and the threshold is D2/2.
    """
    a, b = params.a, params.b
    b_p = 2 * params.constants.C1 * math.sqrt(params.m_v * params.m_v_prime)
    sv, svp = math.sqrt(params.m_v), math.sqrt(params.m_v_prime)
    mus = np.linspace(1e-3, 0.999, n_grid)[:, None] * (r * sv)
    cap1 = (r - mus / sv) * svp
    best1 = np.sqrt((b * mus**2 + b_p * eps / mus) / a)
    mu1s = np.minimum(best1, cap1)
    bound = a * mu1s + b * mus**2 / mu1s + b_p * eps / (mus * mu1s)
    j = int(np.argmin(bound))
    return replace(
        params,
        mu=float(mus[j, 0]),
        mu1=float(mu1s[j, 0]),
        tau_prime=problem.D2 / 2,
        eps=eps,
        eps1=eps1,
        b_prime=b_p,
        theta1=math.nan,
        regime="gaussian-beyond-ceiling",
    )


def _fit_stage2_domain(params: RecoveryParams, r: float) -> RecoveryParams:
    """Shrink the stage-2 steps if probes would leave the enlarged box.

    Probes sit at ``x + mu1 v' +- mu v`` with ``|x_q| <= 1``, and every entry of
    ``v`` (resp. ``v'``) has magnitude ``1/sqrt(m_v)`` (resp. ``1/sqrt(m_v')``).
    """
    reach = params.mu / math.sqrt(params.m_v) + params.mu1 / math.sqrt(params.m_v_prime)
    if reach <= r * (1 + 1e-12) or params.regime == "gaussian-beyond-ceiling":
        return params
    mu = min(params.mu, 0.5 * r * math.sqrt(params.m_v))
    mu1 = min(params.mu1, 0.5 * r * math.sqrt(params.m_v_prime))
    lo_mu = params.mu_window[0]
    if mu <= lo_mu:
        raise InfeasibleParameters(f"domain margin r={r} forces mu <= {mu:.4g}, below the window's lower edge {lo_mu:.4g}")
    a, b, a_p = params.a, params.b, params.a_prime
    noise_term = params.b_prime * params.eps / mu
    disc = a_p**2 - (b * mu**2 + noise_term) / a
    if disc <= 0 or mu1 <= a_p - math.sqrt(disc):
        raise InfeasibleParameters(f"domain margin r={r} pushes mu1 = {mu1:.4g} below its admissible window")
    half = math.sqrt(disc)
    tau = params.constants.C2 * (a * mu1 + b * mu**2 / mu1 + params.b_prime * params.eps / (mu * mu1))
    return replace(params, mu=mu, mu1=mu1, tau_prime=tau, mu1_window=(a_p - half, a_p + half))


# ---------------------------------------------------------------------------
# resampling


def _resample_count(sigma, eps, p, multiplicity):
    if sigma <= 0:
        return 1
    val = sigma**2 / eps**2 * math.log(math.sqrt(2) * sigma * multiplicity / (eps * p))
    return max(1, math.floor(val) + 1)


def derive_resampling(
    sigma: float,
    eps: float,
    eps_prime: float,
    p1: float,
    p2: float,
    m_v: int,
    m_v_prime: int,
    m_v_dprime: int,
    m_x: int,
    m_x_prime: int,
    hash_size: int,
) -> tuple[int, int]:
    """Smallest repetition counts that push averaged Gaussian noise below ``eps`` / ``eps_prime``."""
    if not (0 < p1 < 1 and 0 < p2 < 1):
        raise ValueError("failure probabilities must lie in (0, 1)")
    _positive(eps=eps, eps_prime=eps_prime)
    N1 = _resample_count(sigma, eps, p1, m_v * (m_v_prime + 1) * (2 * m_x + 1) ** 2 * hash_size)
    N2 = _resample_count(sigma, eps_prime, p2, (2 * m_x_prime + 1) * m_v_dprime)
    return N1, N2


def noise_bound_from_resamples(sigma: float, N: int, p: float, multiplicity: float) -> float:
    """The ``eps`` at which ``N`` repetitions are exactly enough (inverse of the count formula)."""
    if sigma <= 0:
        return 0.0
    if N < 1:
        raise ValueError("N must be >= 1")
    top = math.sqrt(2) * sigma * multiplicity / (p * math.e)

    def gap(log_eps):
        e = math.exp(log_eps)
        return sigma**2 / e**2 * math.log(math.sqrt(2) * sigma * multiplicity / (e * p)) - N

    if gap(math.log(top)) >= 0:
        return top
    return math.exp(brentq(gap, math.log(top) - 60, math.log(top), xtol=1e-14, rtol=1e-12))


def expected_query_count(n_grid_points: int, params: RecoveryParams) -> int:
    stage2 = n_grid_points * 2 * params.m_v * (params.m_v_prime + 1) * params.N1
    stage1 = 0
    if params.s:
        stage1 = (2 * params.m_x_prime + 1) * 2 * params.m_v_dprime * params.N2
    return stage2 + stage1


# ---------------------------------------------------------------------------
# the procedure


@dataclass(frozen=True)
class Ensembles:
    V: BernoulliEnsemble
    V_prime: BernoulliEnsemble


@dataclass(frozen=True)
class RecoveryConfig:
    """What the learner is told: problem constants, noise knowledge and solver choices.

    ``noise_bound`` is the known bound for bounded noise; ``noise_sigma`` the
    known standard deviation for Gaussian noise, in which case ``N1``/``N2`` are
    the repetition counts applied to every query of each stage.
    """

    problem: ProblemParams
    C_tilde: float = 5.6
    constants: SolverConstants = SolverConstants()
    c_prime: float = 1.7
    hash_size: Optional[int] = None
    hash_method: str = "distinct"
    solver: str = "hard_threshold"
    seed: int = 0
    noise_bound: float = 0.0
    noise_sigma: float = 0.0
    N1: int = 1
    N2: int = 1
    p1: float = 0.01
    p2: float = 0.01


@dataclass
class SupportEstimate:
    S1_hat: frozenset
    S2_hat: frozenset
    witnesses: dict = field(default_factory=dict)
    query_total: int = 0
    params: Optional[RecoveryParams] = None
    grid_size: int = 0
    hash_size: int = 0

    @property
    def S2var_hat(self) -> frozenset:
        return frozenset(v for pair in self.S2_hat for v in pair)


def estimate_interactions(
    oracle: QueryOracle,
    family: HashFamily,
    params: RecoveryParams,
    ensembles: Ensembles,
    solver: str = "hard_threshold",
    resamples: int = 1,
) -> SupportEstimate:
    """Detect interaction pairs from estimated Hessian rows on every hash grid point."""
    grid = combined_hessian_grid(family, params.m_x)
    V, Vp = ensembles.V, ensembles.V_prime
    d = params.d
    offsets = params.mu1 * Vp.matrix
    row_budget = max(params.rho, 1) + 1
    upper = np.triu(np.ones((d, d), dtype=bool), k=1)
    witnesses: dict = {}
    start = oracle.count
    for i, x in enumerate(grid.points):
        bases = np.vstack([x, x + offsets])
        streams = [(1, i, p) for p in range(bases.shape[0])]
        try:
            Y = gradient_measurements_batch(oracle, bases, V, params.mu, None, resamples, streams)
            G = sparse_recover_batch(V, Y, params.k, solver)
            H = hessian_measurement_matrix(G[:, 0], G[:, 1:].T, params.mu1)
            rows = sparse_recover_batch(Vp, H, row_budget, solver)
        except Exception as exc:
            _annotate(exc, f"interaction stage, grid point {i}")
            raise
        # rows[:, q] estimates Hessian row q; the pair (q, q') with q' > q is read from rows[q', q]
        stat = np.abs(rows.T)
        hits = np.argwhere((stat > params.tau_prime) & upper)
        for q, qp in hits:
            pair = (int(q) + 1, int(qp) + 1)
            value = float(stat[q, qp])
            if pair not in witnesses or value > witnesses[pair]["statistic"]:
                witnesses[pair] = {"point": i, "statistic": value}
    return SupportEstimate(
        S1_hat=frozenset(),
        S2_hat=frozenset(witnesses),
        witnesses={"S2": witnesses},
        query_total=oracle.count - start,
        params=params,
        grid_size=len(grid),
        hash_size=len(family),
    )


def estimate_univariates(
    oracle: QueryOracle,
    params: RecoveryParams,
    S2var_hat,
    V_dprime: Optional[BernoulliEnsemble] = None,
    solver: str = "hard_threshold",
    resamples: int = 1,
    rng=None,
) -> SupportEstimate:
    """Detect univariate variables among ``P = [d] minus S2var_hat`` on the diagonal grid."""
    if params.s is None:
        raise InfeasibleParameters("stage-1 parameters have not been derived")
    S2var_hat = frozenset(S2var_hat)
    start = oracle.count
    if params.s == 0:
        return SupportEstimate(frozenset(), frozenset(), {"S1": {}}, 0, params)
    P = np.array([q for q in range(params.d) if q + 1 not in S2var_hat])
    if V_dprime is None:
        V_dprime = draw_ensemble(params.m_v_dprime, P.size, rng)
    if V_dprime.matrix.shape != (params.m_v_dprime, P.size):
        raise ValueError(f"restricted ensemble must be {params.m_v_dprime} x {P.size}")
    grid = diagonal_grid(params.m_x_prime, params.d)
    streams = [(2, i) for i in range(len(grid))]
    try:
        Y = gradient_measurements_batch(oracle, grid.points, V_dprime, params.mu_prime, P, resamples, streams)
        Z = sparse_recover_batch(V_dprime, Y, params.s, solver)
    except Exception as exc:
        _annotate(exc, "univariate stage")
        raise
    witnesses: dict = {}
    stat = np.abs(Z)
    for j, i in np.argwhere(stat > params.tau_dprime):
        q = int(P[j]) + 1
        value = float(stat[j, i])
        if q not in witnesses or value > witnesses[q]["statistic"]:
            witnesses[q] = {"point": int(i), "statistic": value}
    return SupportEstimate(
        S1_hat=frozenset(witnesses),
        S2_hat=frozenset(),
        witnesses={"S1": witnesses},
        query_total=oracle.count - start,
        params=params,
        grid_size=len(grid),
    )


def _annotate(exc, where):
    if hasattr(exc, "add_note"):
        exc.add_note(f"while running the {where}")


def _stage_multiplicities(params, hash_size):
    stage2 = params.m_v * (params.m_v_prime + 1) * (2 * params.m_x + 1) ** 2 * hash_size
    return stage2


def recover_supports(oracle: QueryOracle, config: RecoveryConfig) -> SupportEstimate:
    """Run both stages with shared query accounting."""
    problem = config.problem
    d = oracle.d
    r = oracle.model.r
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    size = config.hash_size or family_size(d, config.c_prime)
    family = build_hash_family(d, size, np.random.default_rng(seeds[0]), method=config.hash_method)

    base = derive_params_noiseless(problem, d, C_tilde=config.C_tilde, constants=config.constants)
    N1, N2 = (config.N1, config.N2) if config.noise_sigma > 0 else (1, 1)
    eps = 0.0
    regime = "noiseless"
    if config.noise_sigma > 0:
        eps = noise_bound_from_resamples(config.noise_sigma, N1, config.p1, _stage_multiplicities(base, len(family)))
        regime = "gaussian"
    elif config.noise_bound > 0:
        eps = config.noise_bound
        regime = "bounded"
    if eps > 0:
        try:
            params = derive_params_bounded(problem, d, eps, C_tilde=config.C_tilde, constants=config.constants)
            params = replace(params, regime=regime)
        except NoiseTooLarge as exc:
            if regime == "bounded":
                raise
            params = _beyond_ceiling_stage2(base, problem, eps, exc.ceiling, r)
    else:
        params = base
    params = replace(params, N1=N1, N2=N2, p1=config.p1, p2=config.p2)
    params = _fit_stage2_domain(params, r)

    ensembles = Ensembles(
        draw_ensemble(params.m_v, d, np.random.default_rng(seeds[1])),
        draw_ensemble(params.m_v_prime, d, np.random.default_rng(seeds[2])),
    )
    start = oracle.count
    stage2 = estimate_interactions(oracle, family, params, ensembles, config.solver, N1)
    n_vars = len(stage2.S2var_hat)

    eps_prime = 0.0
    if config.noise_sigma > 0:
        probe = derive_stage1_params(params, problem, n_vars, 0.0, r)
        if probe.s:
            mult = (2 * probe.m_x_prime + 1) * probe.m_v_dprime
            eps_prime = noise_bound_from_resamples(config.noise_sigma, N2, config.p2, mult)
    elif config.noise_bound > 0:
        eps_prime = config.noise_bound
    params = derive_stage1_params(
        params, problem, n_vars, eps_prime, r, allow_fallback=config.noise_sigma > 0
    )
    stage1 = estimate_univariates(
        oracle, params, stage2.S2var_hat, None, config.solver, N2, np.random.default_rng(seeds[3])
    )
    return SupportEstimate(
        S1_hat=stage1.S1_hat,
        S2_hat=stage2.S2_hat,
        witnesses={**stage2.witnesses, **stage1.witnesses},
        query_total=oracle.count - start,
        params=params,
        grid_size=stage2.grid_size,
        hash_size=len(family),
    )
