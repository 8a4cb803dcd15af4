"""Monte-Carlo bias-variance-covariance decomposition of head ensembles.

Estimator conventions
---------------------
For R replicate datasets and Q fixed quadrature queries, let E[r, h, q] be
head h's estimate on replicate r at query q and Y[r, q] the weighted
ensemble.  All second moments use unbiased sample forms with R - 1
denominators, and the squared ensemble bias is debiased by the Monte-Carlo
variance of the replicate mean:

    bias_sq(q)   = (Ybar_q - m_q)^2 - S2_Y(q) / R
    var_term(q)  = sum_h alpha_h^2 S2_h(q)
    cov_term(q)  = sum_{h != h'} alpha_h alpha_h' S_{hh'}(q)

With these forms the decomposition identity

    mean_{r,q} (Y - m)^2 = bias_sq + var_term + cov_term

holds exactly in the estimates (not merely in expectation), so the reported
identity residual is pure floating-point noise.  Standard errors come from
the replicate-level influence statistics; the residual's standard error is
propagated conservatively as the quadrature sum of the component errors.

Parallelism: replicates are independent; MHA_NW_LAB_THREADS caps the worker
pool (0 = auto).  Results are written into preallocated slots by replicate
index, so the outputs are bit-identical for every thread count.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diversity import hdi as hdi_indices
from .diversity import make_projection_family
from .errors import LabError, NeedsTwoHeads, ReplicateFailure, DensityTooSmall, ShapeMismatch
from .mha import ProjectionSet, WeightScheme, make_weights
from .nw_attention import HeadConfig, attend_many
from .synthetic import RegressionTask, derive_seed, sample_dataset, sample_queries
from .tensor_core import Matrix, qr_orthonormalize

__all__ = [
    "FamilySpec",
    "ExperimentPlan",
    "DecompositionReport",
    "mc_decompose",
    "theoretical_bias_variance",
    "check_cov_bound",
    "CovBoundRow",
    "hdi_sweep",
    "HdiSweepResult",
    "weighting_compare",
    "WeightingCompareResult",
    "spearman",
    "bootstrap_stderr",
]

#: softmax weight vectors with entropy below this many nats count as degenerate
DEGENERATE_ENTROPY_NATS = 1e-6


def worker_count() -> int:
    """Worker pool size from MHA_NW_LAB_THREADS (0 or unset = auto)."""
    raw = os.environ.get("MHA_NW_LAB_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value <= 0:
        return min(8, os.cpu_count() or 1)
    return value


@dataclass(frozen=True)
class FamilySpec:
    """Recipe for a seeded projection family (resolved per experiment)."""

    p: int
    d_k: int
    H: int
    mix: float = 1.0
    query_gain: float = 1.0
    value_mode: str = "balanced"          # "balanced" | "skeleton"
    noise_scales: tuple[float, ...] | None = None

    def resolve(self, task: RegressionTask, seed: int,
                mix: float | None = None) -> ProjectionSet:
        wv = None
        if self.value_mode == "skeleton":
            wv = task.linear_skeleton()
            norm = np.linalg.norm(wv)
            if norm < 1e-12:
                raise ShapeMismatch(
                    f"value_mode 'skeleton': task family {task.family!r} has a "
                    f"vanishing linear component; use 'balanced'"
                )
            wv = wv / norm
        elif self.value_mode != "balanced":
            raise ShapeMismatch(f"unknown value_mode {self.value_mode!r}")
        return make_projection_family(
            p=self.p, d_k=self.d_k, H=self.H,
            mix=self.mix if mix is None else mix,
            seed=seed, query_gain=self.query_gain, wv=wv,
            noise_scales=self.noise_scales,
        )


@dataclass(frozen=True)
class ExperimentPlan:
    """Fully seeded specification of one decomposition experiment."""

    task: RegressionTask
    projection: ProjectionSet | FamilySpec
    weights: WeightScheme
    n: int
    R: int
    Q: int
    master_seed: int

    def __post_init__(self):
        if self.R < 2:
            raise ShapeMismatch(f"covariance estimation needs R >= 2 replicates, got {self.R}")
        if self.Q < 1:
            raise ShapeMismatch(f"need Q >= 1 quadrature queries, got {self.Q}")
        if self.n < 1:
            raise ShapeMismatch(f"need n >= 1 data points, got {self.n}")
        proj_p = self.projection.p
        if proj_p != self.task.p:
            raise ShapeMismatch(
                f"projection dimension p = {proj_p} != task dimension {self.task.p}"
            )
        H = self.projection.H
        if self.weights.H != H:
            raise ShapeMismatch(f"{self.weights.H} weights for {H} heads")

    def resolve_projection(self, mix: float | None = None) -> ProjectionSet:
        if isinstance(self.projection, ProjectionSet):
            if mix is not None:
                raise LabError("plan carries an explicit projection set; cannot vary mix")
            return self.projection
        return self.projection.resolve(
            self.task, seed=derive_seed(self.master_seed, "proj"), mix=mix
        )


@dataclass(frozen=True)
class DecompositionReport:
    """Integrated decomposition estimates with per-query and per-head detail."""

    per_head_bias: np.ndarray            # (H,) integrated
    per_head_var: np.ndarray             # (H,)
    per_head_mse: np.ndarray             # (H,)
    cross_cov: np.ndarray                # (H, H), diagonal = per_head_var
    per_head_bias_q: np.ndarray          # (H, Q)
    ensemble_bias_sq: float
    variance_term: float
    covariance_term: float
    mse_direct: float
    identity_residual: float
    mse_replicates: np.ndarray           # (R,)
    stderr: dict                          # statistic name -> stderr
    cov_stderr: np.ndarray               # (H, H) pairwise stderrs
    degenerate_weights: int
    queries: np.ndarray                  # (Q, p)
    alphas: np.ndarray                   # (H,)
    n: int
    R: int
    Q: int
    master_seed: int

    @property
    def decomposed_mse(self) -> float:
        return self.ensemble_bias_sq + self.variance_term + self.covariance_term


def _head_tensor(task, heads, n, R, Q, master_seed):
    """E[r, h, q] head-estimate tensor plus the degenerate-weight count."""
    queries = sample_queries(task, Q, derive_seed(master_seed, "query"))
    H = len(heads)
    E = np.empty((R, H, Q))
    degenerate = np.zeros(R, dtype=np.int64)

    def run_replicate(r: int) -> None:
        data = sample_dataset(task, n, derive_seed(master_seed, "data", r))
        bad = 0
        for h, head in enumerate(heads):
            est, w = attend_many(head, queries, data, return_weights=True)
            if not np.all(np.isfinite(est)):
                q_bad = int(np.flatnonzero(~np.isfinite(est))[0])
                raise ReplicateFailure(
                    f"non-finite head estimate at replicate {r}, head {h}, query {q_bad}",
                    replicate=r, head=h, query=q_bad,
                )
            entropy = -(w * np.log(np.maximum(w, 1e-300))).sum(axis=1)
            bad += int(np.count_nonzero(entropy < DEGENERATE_ENTROPY_NATS))
            E[r, h] = est
        degenerate[r] = bad

    workers = worker_count()
    if workers > 1 and R > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_replicate, range(R)))
    else:
        for r in range(R):
            run_replicate(r)
    return E, queries, int(degenerate.sum())


def _decompose_tensor(E: np.ndarray, m_q: np.ndarray, alphas: np.ndarray,
                      queries: np.ndarray, degenerate: int, n: int,
                      master_seed: int) -> DecompositionReport:
    R, H, Q = E.shape
    Ebar = E.mean(axis=0)                                    # (H, Q)
    Ec = E - Ebar
    # per-query sample covariance between heads, R-1 denominator
    Cq = np.einsum("rhq,rgq->hgq", Ec, Ec) / (R - 1)         # (H, H, Q)

    per_head_bias_q = Ebar - m_q
    per_head_bias = per_head_bias_q.mean(axis=1)
    per_head_var = np.einsum("hhq->hq", Cq).mean(axis=1)
    per_head_mse = ((E - m_q) ** 2).mean(axis=(0, 2))
    cross_cov = Cq.mean(axis=2)

    Y = np.einsum("h,rhq->rq", alphas, E)
    Ybar = Y.mean(axis=0)
    S2Y_q = np.einsum("h,g,hgq->q", alphas, alphas, Cq)
    bias_ens_q = Ybar - m_q
    ensemble_bias_sq = float(np.mean(bias_ens_q**2 - S2Y_q / R))
    variance_term = float(np.mean(np.einsum("h,hhq->q", alphas**2, Cq)))
    covariance_term = float(np.mean(S2Y_q) - variance_term)

    mse_replicates = ((Y - m_q) ** 2).mean(axis=1)
    mse_direct = float(mse_replicates.mean())
    identity_residual = abs(mse_direct - (ensemble_bias_sq + variance_term + covariance_term))

    # replicate-level influence statistics for the standard errors
    sqrt_R = np.sqrt(R)
    t_var = np.einsum("h,rhq->r", alphas**2, Ec**2 * (R / (R - 1))) / Q
    Yc = Y - Ybar
    t_s2y = (Yc**2 * (R / (R - 1))).mean(axis=1)
    t_cov = t_s2y - t_var
    t_b2 = 2.0 * (Yc * bias_ens_q).mean(axis=1)
    t_head_bias = Ec.mean(axis=2)                            # (R, H)
    t_head_mse = ((E - m_q) ** 2).mean(axis=2)               # (R, H)
    se = {
        "mse_direct": float(mse_replicates.std(ddof=1) / sqrt_R),
        "variance_term": float(t_var.std(ddof=1) / sqrt_R),
        "covariance_term": float(t_cov.std(ddof=1) / sqrt_R),
        "ensemble_bias_sq": float(t_b2.std(ddof=1) / sqrt_R),
        "per_head_bias": t_head_bias.std(axis=0, ddof=1) / sqrt_R,
        "per_head_mse": t_head_mse.std(axis=0, ddof=1) / sqrt_R,
    }
    se["identity_residual"] = float(np.sqrt(
        se["mse_direct"]**2 + se["variance_term"]**2
        + se["covariance_term"]**2 + se["ensemble_bias_sq"]**2
    ))

    pair_t = np.einsum("rhq,rgq->rhg", Ec, Ec) / Q * (R / (R - 1))
    cov_stderr = pair_t.std(axis=0, ddof=1) / sqrt_R

    return DecompositionReport(
        per_head_bias=per_head_bias,
        per_head_var=per_head_var,
        per_head_mse=per_head_mse,
        cross_cov=cross_cov,
        per_head_bias_q=per_head_bias_q,
        ensemble_bias_sq=ensemble_bias_sq,
        variance_term=variance_term,
        covariance_term=covariance_term,
        mse_direct=mse_direct,
        identity_residual=identity_residual,
        mse_replicates=mse_replicates,
        stderr=se,
        cov_stderr=cov_stderr,
        degenerate_weights=degenerate,
        queries=queries,
        alphas=alphas.copy(),
        n=n,
        R=R,
        Q=Q,
        master_seed=master_seed,
    )


def mc_decompose(plan: ExperimentPlan, proj: ProjectionSet | None = None) -> DecompositionReport:
    """Monte-Carlo decomposition of the plan's ensemble.

    Each replicate draws an independent dataset (seed domain "data"),
    evaluates every head at the shared quadrature queries (domain "query"),
    and the cross-replicate moments estimate bias against the known mean
    function, per-head variances and the cross-head covariance matrix.
    """
    proj = plan.resolve_projection() if proj is None else proj
    E, queries, degenerate = _head_tensor(
        plan.task, proj.heads, plan.n, plan.R, plan.Q, plan.master_seed
    )
    if degenerate:
        warnings.warn(
            f"{degenerate} softmax weight vectors were degenerate "
            f"(entropy < {DEGENERATE_ENTROPY_NATS} nats)",
            RuntimeWarning, stacklevel=2,
        )
    m_q = plan.task.mean(queries)
    return _decompose_tensor(E, m_q, plan.weights.alphas, queries,
                             degenerate, plan.n, plan.master_seed)


# ---------------------------------------------------------------------------
# theoretical leading-order bias and variance


def _projected_density(task: RegressionTask, wk: Matrix, k: np.ndarray):
    """Density of the projected key wk^T X at k, and grad log density.

    Gaussian input law: closed form N(0, wk^T wk).  Uniform law: seeded
    Gaussian-product KDE over 4096 projected samples (approximate, flagged
    by the "kde" method tag in the return).
    """
    d_k = wk.cols
    if task.input_law == "gaussian":
        cov = wk.a.T @ wk.a
        inv = np.linalg.inv(cov)
        det = np.linalg.det(cov)
        quad = float(k @ inv @ k)
        dens = np.exp(-0.5 * quad) / np.sqrt((2.0 * np.pi) ** d_k * det)
        grad_log = -inv @ k
        return dens, grad_log, "gaussian"
    rng = np.random.default_rng(derive_seed(task.param_seed, "kde"))
    samples = rng.uniform(-1.0, 1.0, size=(4096, task.p)) @ wk.a
    bw = samples.std(axis=0).mean() * samples.shape[0] ** (-1.0 / (d_k + 4))
    diff = samples - k
    weights = np.exp(-0.5 * (diff * diff).sum(axis=1) / bw**2)
    norm = (2.0 * np.pi * bw**2) ** (d_k / 2.0)
    dens = float(weights.mean() / norm)
    total = weights.sum()
    if total <= 0.0:
        return 0.0, np.zeros(d_k), "kde"
    grad_log = (weights @ diff) / total / bw**2
    return dens, grad_log, "kde"


def theoretical_bias_variance(task: RegressionTask, head: HeadConfig,
                              query_x: np.ndarray, n: int) -> tuple[float, float]:
    """Leading-order kernel-regression bias and variance at one query.

    With bandwidth h = 1/sqrt(d_k) and projected-key density p_K:

        B1 = (h^2 / 2) [tr(hess m(x)) + 2 (wk^T grad m(x)) . grad log p_K(k)]
        V1 = sigma^2(x) / (n h^{d_k} p_K(k))

    The mean-function gradient is mapped into the key space through wk so
    the density-gradient product is dimensionally consistent.  These are
    asymptotic orders intended for trend checks, not exact finite-n truth.
    """
    query_x = np.asarray(query_x, dtype=np.float64).reshape(task.p)
    k = head.wk.a.T @ query_x
    dens, grad_log, _ = _projected_density(task, head.wk, k)
    if dens < 1e-8:
        raise DensityTooSmall(
            f"projected density {dens:.3e} < 1e-8 at the query; the variance "
            f"formula is unusable there"
        )
    h = head.bandwidth
    trace = task.hessian_trace(query_x)
    grad_k = head.wk.a.T @ task.gradient(query_x)[0]
    bias = 0.5 * h**2 * (trace + 2.0 * float(grad_k @ grad_log))
    sigma2 = float(task.noise_sd(query_x)[0] ** 2)
    variance = sigma2 / (n * h**head.d_k * dens)
    return float(bias), float(variance)


@dataclass(frozen=True)
class CovBoundRow:
    """One pair's covariance against its spectral bound."""

    h: int
    h2: int
    abs_cov: float
    bound: float
    stderr: float
    satisfied: bool


def check_cov_bound(report: DecompositionReport, proj: ProjectionSet,
                    task: RegressionTask) -> list[CovBoundRow]:
    """Per-pair |covariance| against L^2 ||G~||_F^2 / (n h^{d_k} p_K,min).

    Uses the orthonormalized Gram mass (the literal scaled Gram makes the
    bound's constant depend on the frame normalization) and the minimum
    projected density over the report's quadrature queries.  A pair is
    "satisfied" when |C| <= bound + 4 stderr(C); the slack recognises that
    C is itself a Monte-Carlo estimate.
    """
    rows = []
    h_band = proj.heads[0].bandwidth
    d_k = proj.d_k
    for h in range(proj.H):
        dens_min = np.inf
        u_h = qr_orthonormalize(proj.heads[h].wk)
        for q in range(report.Q):
            dens, _, _ = _projected_density(task, proj.heads[h].wk,
                                            proj.heads[h].wk.a.T @ report.queries[q])
            dens_min = min(dens_min, dens)
        if dens_min < 1e-12:
            raise DensityTooSmall(
                f"head {h}: projected density {dens_min:.3e} vanishes on the query set"
            )
        for h2 in range(proj.H):
            if h2 == h:
                continue
            u_h2 = qr_orthonormalize(proj.heads[h2].wk)
            gram = u_h.a.T @ u_h2.a
            gram_sq = float((gram * gram).sum())
            bound = float(task.lipschitz_L**2 * gram_sq / (report.n * h_band**d_k * dens_min))
            abs_cov = float(abs(report.cross_cov[h, h2]))
            se = float(report.cov_stderr[h, h2])
            rows.append(CovBoundRow(
                h=h, h2=h2, abs_cov=abs_cov, bound=bound, stderr=se,
                satisfied=bool(abs_cov <= bound + 4.0 * se),
            ))
    return rows


# ---------------------------------------------------------------------------
# sweep drivers


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks on ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ShapeMismatch(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")

    def ranks(a: np.ndarray) -> np.ndarray:
        order = np.argsort(a, kind="stable")
        r = np.empty(a.shape[0])
        r[order] = np.arange(1, a.shape[0] + 1, dtype=np.float64)
        for value in np.unique(a):
            mask = a == value
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return float("nan")
    return float((rx * ry).sum() / denom)


def bootstrap_stderr(values: np.ndarray, seed: int, resamples: int = 200) -> float:
    """Bootstrap stderr of the mean of replicate-level statistics.

    Cross-checks the influence-function standard errors on small runs.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(int(seed))
    idx = rng.integers(0, values.shape[0], size=(resamples, values.shape[0]))
    return float(values[idx].mean(axis=1).std(ddof=1))


@dataclass(frozen=True)
class HdiSweepResult:
    """Diversity sweep rows plus the monotonicity statistics."""

    rows: list                           # (mix, hdi, hdi_normalized, mse, stderr)
    spearman: float
    endpoint_diff: float | None          # mse(mix=0) - mse(mix=1)
    endpoint_diff_stderr: float | None
    reports: dict = field(repr=False)    # mix -> DecompositionReport


def hdi_sweep(plan: ExperimentPlan, mix_grid) -> HdiSweepResult:
    """Run the decomposition across a mix grid with common random numbers.

    Every mix shares the replicate and query seeds, so differences between
    rows reflect the projection geometry rather than sampling noise; the
    paired endpoint contrast uses the per-replicate MSE difference.
    """
    mix_grid = [float(m) for m in mix_grid]
    if not mix_grid or any(not 0.0 <= m <= 1.0 for m in mix_grid):
        raise ShapeMismatch(f"mix grid must lie in [0, 1], got {mix_grid}")
    if not isinstance(plan.projection, FamilySpec):
        raise LabError("hdi_sweep needs a plan built on a projection family")
    if plan.projection.H < 2:
        raise NeedsTwoHeads(f"hdi_sweep needs H >= 2 heads, got {plan.projection.H}")

    rows = []
    reports = {}
    for mix in mix_grid:
        proj = plan.resolve_projection(mix=mix)
        report = mc_decompose(plan, proj=proj)
        literal, normalized = hdi_indices(proj)
        rows.append((mix, literal, normalized, report.mse_direct,
                     report.stderr["mse_direct"]))
        reports[mix] = report

    rho = spearman([r[2] for r in rows], [r[3] for r in rows])
    diff = diff_se = None
    if 0.0 in reports and 1.0 in reports:
        paired = reports[0.0].mse_replicates - reports[1.0].mse_replicates
        diff = float(paired.mean())
        diff_se = float(paired.std(ddof=1) / np.sqrt(paired.shape[0]))
    return HdiSweepResult(rows=rows, spearman=rho, endpoint_diff=diff,
                          endpoint_diff_stderr=diff_se, reports=reports)


@dataclass(frozen=True)
class WeightingCompareResult:
    """Scheme comparison rows plus the dominance verdict."""

    rows: list            # (scheme, rho, mse, stderr, diff_vs_uniform, diff_stderr)
    head_order: np.ndarray
    variance_spread: float
    best_scheme: str
    best_rho: float | None
    geometric_beats_uniform: bool
    best_margin_sigmas: float


def weighting_compare(plan: ExperimentPlan, rho_grid) -> WeightingCompareResult:
    """Uniform vs Fibonacci vs geometric weighting under shared randomness.

    Heads are pre-ordered best first by per-head integrated MSE from a
    pilot run on an independent seed domain; every scheme then reweights
    the same head-estimate tensor, so scheme contrasts are paired.
    """
    rho_grid = [float(r) for r in rho_grid]
    if any(not 0.0 < r <= 1.0 for r in rho_grid):
        raise ShapeMismatch(f"rho grid must lie in (0, 1], got {rho_grid}")
    proj = plan.resolve_projection()
    H = proj.H

    pilot_R = max(2, plan.R // 2)
    pilot_E, pilot_queries, _ = _head_tensor(
        plan.task, proj.heads, plan.n, pilot_R, plan.Q,
        derive_seed(plan.master_seed, "pilot"),
    )
    pilot_m = plan.task.mean(pilot_queries)
    pilot_mse = ((pilot_E - pilot_m) ** 2).mean(axis=(0, 2))
    order = np.argsort(pilot_mse, kind="stable")

    E, queries, _ = _head_tensor(
        plan.task, proj.heads, plan.n, plan.R, plan.Q, plan.master_seed
    )
    E = E[:, order, :]
    m_q = plan.task.mean(queries)

    def evaluate(alphas: np.ndarray):
        Y = np.einsum("h,rhq->rq", alphas, E)
        per_rep = ((Y - m_q) ** 2).mean(axis=1)
        return float(per_rep.mean()), per_rep

    schemes: list[tuple[str, float | None, np.ndarray]] = [
        ("uniform", None, make_weights("uniform", H).alphas),
        ("fibonacci", None, make_weights("fibonacci", H).alphas),
    ]
    for rho in rho_grid:
        schemes.append(("geometric", rho, make_weights("geometric", H, rho=rho).alphas))

    base_mse, base_rep = evaluate(schemes[0][2])
    tie_floor = 1e-12 * max(1.0, abs(base_mse))
    rows = []
    best = ("uniform", None, base_mse, 0.0, 0.0)
    for name, rho, alphas in schemes:
        mse, per_rep = evaluate(alphas)
        se = float(per_rep.std(ddof=1) / np.sqrt(plan.R))
        paired = per_rep - base_rep
        diff = float(paired.mean())
        diff_sd = float(paired.std(ddof=1))
        diff_se = diff_sd / np.sqrt(plan.R)
        rows.append((name, rho, mse, se, diff, diff_se))
        if mse < best[2] - tie_floor:
            best = (name, rho, mse, diff, diff_se)

    # per-head variance spread on the main tensor (ordered heads)
    Ec = E - E.mean(axis=0)
    head_var = (Ec**2).sum(axis=0).mean(axis=1) / (plan.R - 1)
    spread = float(head_var.max() - head_var.min())

    beats = False
    margin = 0.0
    # float-noise floor: identical heads give diffs of order eps * mse
    floor = 1e-12 * max(1.0, abs(base_mse))
    for name, rho, mse, se, diff, diff_se in rows:
        if name != "geometric":
            continue
        if diff < -max(2.0 * diff_se, floor):
            beats = True
            margin = max(margin, -diff / diff_se if diff_se > 0.0 else float("inf"))
    return WeightingCompareResult(
        rows=rows, head_order=order, variance_spread=spread,
        best_scheme=best[0], best_rho=best[1],
        geometric_beats_uniform=beats, best_margin_sigmas=margin,
    )
