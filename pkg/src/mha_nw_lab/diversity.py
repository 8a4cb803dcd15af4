"""Spectral geometry of head projections.

Pairwise overlap between key-projection subspaces is measured through the
cross-Gram matrix G = wk_h^T wk_h' / d_k and through principal angles
computed on orthonormalized bases.  Two diversity indices are exposed:

  * ``hdi``            - literal index 1 - mean_pairs ||G||_F^2 (scaled
                         pairwise Gram mass subtracted from one);
  * ``hdi_normalized`` - 1 - mean_pairs ||U_h^T U_h'||_F^2 / d_k on
                         orthonormalized bases, which is exactly 0 for
                         identical subspaces and 1 for orthogonal ones.

The literal index does not reach 0 for identical heads when d_k > 1
(identical orthonormal frames give ||G||_F^2 = 1/d_k), so reports always
carry both values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, NeedsTwoHeads, OptimizationStalled, ShapeMismatch, WeightFileError
from .mha import ProjectionSet
from .nw_attention import HeadConfig
from .tensor_core import Matrix, qr_orthonormalize, singular_values

__all__ = [
    "DiversityReport",
    "cross_gram",
    "principal_angles",
    "hdi",
    "make_diversity_report",
    "make_projection_family",
    "projection_objective",
    "projection_gradient",
    "optimize_projections",
    "load_weight_file",
]


def _check_pair(proj: ProjectionSet, h: int, h2: int) -> None:
    if not (0 <= h < proj.H and 0 <= h2 < proj.H):
        raise IndexError(f"head index out of range: ({h}, {h2}) with H = {proj.H}")
    if h == h2:
        raise ShapeMismatch(f"cross-head quantities need distinct heads, got ({h}, {h2})")


def cross_gram(proj: ProjectionSet, h: int, h2: int) -> Matrix:
    """Cross-Gram matrix (wk_h^T wk_h2) / d_k of shape d_k x d_k."""
    _check_pair(proj, h, h2)
    wk_h = proj.heads[h].wk.a
    wk_h2 = proj.heads[h2].wk.a
    return Matrix((wk_h.T @ wk_h2) / proj.d_k)


def principal_angles(proj: ProjectionSet, h: int, h2: int) -> np.ndarray:
    """Principal angles between the two key subspaces, ascending, in [0, pi/2].

    Computed as arccos of the singular values of U_h^T U_h2 with U the
    orthonormalized key frames; raw frames can have singular values above
    one, which would break arccos.
    """
    _check_pair(proj, h, h2)
    u_h = qr_orthonormalize(proj.heads[h].wk)
    u_h2 = qr_orthonormalize(proj.heads[h2].wk)
    cosines = singular_values(Matrix(u_h.a.T @ u_h2.a))
    cosines = np.clip(cosines, -1.0, 1.0)
    return np.sort(np.arccos(cosines))


def _orthonormal_gram_sq(proj: ProjectionSet, h: int, h2: int) -> float:
    u_h = qr_orthonormalize(proj.heads[h].wk).a
    u_h2 = qr_orthonormalize(proj.heads[h2].wk).a
    m = u_h.T @ u_h2
    return float((m * m).sum())


def hdi(proj: ProjectionSet) -> tuple[float, float]:
    """(literal index, normalized index) for the projection set."""
    if proj.H < 2:
        raise NeedsTwoHeads(f"hdi needs H >= 2 heads, got {proj.H}")
    pairs = [(h, h2) for h in range(proj.H) for h2 in range(h + 1, proj.H)]
    literal_mass = 0.0
    normalized_mass = 0.0
    for h, h2 in pairs:
        g = cross_gram(proj, h, h2).a
        literal_mass += float((g * g).sum())
        normalized_mass += _orthonormal_gram_sq(proj, h, h2) / proj.d_k
    n_pairs = len(pairs)
    normalized = min(1.0, max(0.0, 1.0 - normalized_mass / n_pairs))
    return 1.0 - literal_mass / n_pairs, normalized


@dataclass(frozen=True)
class DiversityReport:
    """Pairwise Gram masses, angle spectra and both diversity indices."""

    gram_frobsq: np.ndarray          # H x H, ||G_hh'||_F^2, diagonal zero
    principal_angles: dict           # (h, h2) with h < h2 -> ascending angles
    hdi: float
    hdi_normalized: float


def make_diversity_report(proj: ProjectionSet) -> DiversityReport:
    if proj.H < 2:
        raise NeedsTwoHeads(f"diversity report needs H >= 2 heads, got {proj.H}")
    H = proj.H
    gram = np.zeros((H, H))
    angles = {}
    for h in range(H):
        for h2 in range(h + 1, H):
            g = cross_gram(proj, h, h2).a
            gram[h, h2] = gram[h2, h] = float((g * g).sum())
            angles[(h, h2)] = principal_angles(proj, h, h2)
    literal, normalized = hdi(proj)
    return DiversityReport(gram_frobsq=gram, principal_angles=angles,
                           hdi=literal, hdi_normalized=normalized)


# ---------------------------------------------------------------------------
# constructive projection families


def _random_orthonormal(p: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((p, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


def derive_child(seed: int) -> int:
    # separate stream for spare-direction draws, keeps the frame/wv draws
    # identical whether or not heterogeneity is requested
    return (int(seed) ^ 0x9E3779B97F4A7C15) & ((1 << 63) - 1)


def make_projection_family(
    p: int,
    d_k: int,
    H: int,
    mix: float,
    seed: int,
    query_gain: float = 1.0,
    wv: np.ndarray | None = None,
    noise_scales: tuple[float, ...] | None = None,
) -> ProjectionSet:
    """Family of H heads whose key subspaces interpolate shared -> orthogonal.

    mix = 0 gives identical heads on one shared orthonormal frame; mix = 1
    gives mutually orthogonal block frames; intermediate values blend each
    head linearly between the two and re-orthonormalize, which makes the
    normalized diversity index strictly increasing in mix.

    The shared frame is the balanced combination of the orthogonal blocks
    and, unless ``wv`` overrides it, the value vector carries equal mass in
    every block, so the family's endpoints are symmetric across heads.
    ``query_gain`` scales wq relative to wk (query_gain = 1 ties wq = wk);
    larger gains sharpen the softmax without touching the key geometry.

    ``noise_scales`` (one entry per head) builds a heterogeneous-quality
    ensemble: head h's value vector gains scale_h times a unit direction
    orthogonal to every key subspace, which inflates that head's variance
    without moving its bias.  Requires p >= H * d_k + H spare dimensions.
    """
    if not (0.0 <= mix <= 1.0):
        raise ShapeMismatch(f"mix must lie in [0, 1], got {mix}")
    if H < 1 or d_k < 1:
        raise ShapeMismatch(f"need H >= 1 and d_k >= 1, got H={H}, d_k={d_k}")
    if noise_scales is not None and len(noise_scales) != H:
        raise ShapeMismatch(
            f"noise_scales has {len(noise_scales)} entries for H = {H} heads"
        )
    rng = np.random.default_rng(int(seed))

    if H * d_k > p:
        if mix > 0.0:
            raise Infeasible(
                f"orthogonal construction needs H*d_k <= p, got {H}*{d_k} > {p}"
            )
        if noise_scales is not None:
            raise Infeasible("noise_scales needs spare dimensions, but H*d_k > p")
        shared = _random_orthonormal(p, d_k, rng)
        if wv is None:
            wv = rng.standard_normal(p)
            wv /= np.linalg.norm(wv)
        head = HeadConfig(wq=Matrix(query_gain * shared), wk=Matrix(shared), wv=wv)
        return ProjectionSet(heads=(head,) * H)

    frame = _random_orthonormal(p, H * d_k, rng)
    blocks = [frame[:, h * d_k:(h + 1) * d_k] for h in range(H)]
    shared = sum(blocks) / np.sqrt(H)
    if wv is None:
        coeff = rng.standard_normal(d_k)
        coeff /= np.linalg.norm(coeff)
        wv = sum(block @ coeff for block in blocks) / np.sqrt(H)
    else:
        wv = np.asarray(wv, dtype=np.float64).reshape(p)

    extras = [np.zeros(p)] * H
    if noise_scales is not None:
        if p < H * d_k + H:
            raise Infeasible(
                f"noise_scales needs p >= H*d_k + H = {H * d_k + H}, got p = {p}"
            )
        # spare directions: orthonormal complement of the key frame
        residual = np.eye(p) - frame @ frame.T
        spare = _random_orthonormal(p, H, np.random.default_rng(derive_child(seed)))
        spare = residual @ spare
        q, r = np.linalg.qr(spare)
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        spare = q * signs
        extras = [float(noise_scales[h]) * spare[:, h] for h in range(H)]

    heads = []
    for h in range(H):
        blend = (1.0 - mix) * shared + mix * blocks[h]
        wk = qr_orthonormalize(Matrix(blend))
        heads.append(
            HeadConfig(wq=Matrix(query_gain * wk.a), wk=wk, wv=wv + extras[h])
        )
    return ProjectionSet(heads=tuple(heads))


# ---------------------------------------------------------------------------
# orthogonality optimizer: minimize the pairwise Gram mass on the
# product of Frobenius spheres ||wk_h||_F = 1


def projection_objective(wks: list[np.ndarray], d_k: int) -> float:
    """J = sum_{h<h'} ||wk_h^T wk_h'||_F^2 / d_k^2."""
    total = 0.0
    for h in range(len(wks)):
        for h2 in range(h + 1, len(wks)):
            m = wks[h].T @ wks[h2]
            total += float((m * m).sum())
    return total / d_k**2


def projection_gradient(wks: list[np.ndarray], d_k: int) -> list[np.ndarray]:
    """Analytic gradient of ``projection_objective`` in each wk_h."""
    grads = []
    for h in range(len(wks)):
        g = np.zeros_like(wks[h])
        for h2 in range(len(wks)):
            if h2 == h:
                continue
            g += wks[h2] @ (wks[h2].T @ wks[h])
        grads.append((2.0 / d_k**2) * g)
    return grads


def optimize_projections(
    p: int,
    d_k: int,
    H: int,
    seed: int,
    steps: int = 5000,
    step_size: float = 1.0,
    tol: float = 1e-12,
    initial: ProjectionSet | None = None,
) -> tuple[ProjectionSet, list[float]]:
    """Projected gradient descent toward mutually orthogonal key frames.

    Each accepted step moves along the sphere-tangent component of the
    analytic gradient and renormalizes to unit Frobenius norm; rejected
    steps halve the step size.  The returned trace is the accepted-step
    objective sequence (non-increasing).  Ten consecutive rejections with
    the objective still above 1e-10 raise OptimizationStalled.
    """
    if H * d_k > p:
        raise Infeasible(f"optimize_projections needs H*d_k <= p, got {H}*{d_k} > {p}")
    rng = np.random.default_rng(int(seed))
    if initial is not None:
        if initial.H != H or initial.p != p or initial.d_k != d_k:
            raise ShapeMismatch(
                f"initial set is {initial.H} heads of {initial.p}x{initial.d_k}, "
                f"expected {H} of {p}x{d_k}"
            )
        wks = [head.wk.a / np.linalg.norm(head.wk.a) for head in initial.heads]
    else:
        wks = []
        for _ in range(H):
            w = rng.standard_normal((p, d_k))
            wks.append(w / np.linalg.norm(w))

    trace = [projection_objective(wks, d_k)]
    lr = float(step_size)
    consecutive_rejects = 0
    for _ in range(steps):
        current = trace[-1]
        if current <= tol:
            break
        grads = projection_gradient(wks, d_k)
        candidate = []
        for w, g in zip(wks, grads):
            tangent = g - float(np.vdot(g, w)) * w
            moved = w - lr * tangent
            candidate.append(moved / np.linalg.norm(moved))
        value = projection_objective(candidate, d_k)
        if value <= current:
            wks = candidate
            trace.append(value)
            lr *= 1.1
            consecutive_rejects = 0
        else:
            lr *= 0.5
            consecutive_rejects += 1
            if consecutive_rejects >= 10:
                if current > 1e-10:
                    raise OptimizationStalled(
                        f"objective stuck at {current:.3e} after 10 consecutive "
                        f"step rejections", trace=trace,
                    )
                break

    wv = rng.standard_normal(p)
    wv /= np.linalg.norm(wv)
    heads = tuple(
        HeadConfig(wq=Matrix(w), wk=Matrix(w), wv=wv) for w in wks
    )
    return ProjectionSet(heads=heads, normalized=True), trace


# ---------------------------------------------------------------------------
# weight-file import for HDI diagnostics of externally trained projections


def load_weight_file(path) -> ProjectionSet:
    """Read a JSON head-weight document and return a ProjectionSet.

    Expected form: {"heads": [{"p": int, "d_k": int, "data": [row-major
    floats]}, ...]}.  Shapes and finiteness are validated; parse errors
    carry the byte offset.  The imported heads tie wq = wk and use a zero
    value vector, which is all the diversity diagnostics need.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WeightFileError(
            f"weight file {path}: parse error at byte offset {exc.pos}: {exc.msg}"
        ) from exc
    except OSError as exc:
        raise WeightFileError(f"weight file {path}: {exc}") from exc

    if not isinstance(doc, dict) or "heads" not in doc:
        raise WeightFileError(f"weight file {path}: missing top-level 'heads' array")
    entries = doc["heads"]
    if not isinstance(entries, list) or len(entries) < 1:
        raise WeightFileError(f"weight file {path}: 'heads' must be a nonempty array")

    heads = []
    shape = None
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise WeightFileError(f"weight file {path}: head {i} is not an object")
        missing = {"p", "d_k", "data"} - set(entry)
        if missing:
            raise WeightFileError(
                f"weight file {path}: head {i} is missing fields {sorted(missing)}"
            )
        p, d_k = entry["p"], entry["d_k"]
        if not (isinstance(p, int) and isinstance(d_k, int) and p >= 1 and d_k >= 1):
            raise WeightFileError(
                f"weight file {path}: head {i} has invalid shape fields p={p!r}, d_k={d_k!r}"
            )
        data = np.asarray(entry["data"], dtype=np.float64).reshape(-1)
        if data.shape[0] != p * d_k:
            raise WeightFileError(
                f"weight file {path}: head {i} declares {p}x{d_k} = {p * d_k} "
                f"entries but carries {data.shape[0]}"
            )
        if not np.all(np.isfinite(data)):
            raise WeightFileError(f"weight file {path}: head {i} has non-finite entries")
        if shape is None:
            shape = (p, d_k)
        elif shape != (p, d_k):
            raise WeightFileError(
                f"weight file {path}: head {i} shape {p}x{d_k} differs from "
                f"head 0 shape {shape[0]}x{shape[1]}"
            )
        wk = Matrix(data.reshape(p, d_k))
        heads.append(HeadConfig(wq=wk, wk=wk, wv=np.zeros(p)))
    return ProjectionSet(heads=tuple(heads))
