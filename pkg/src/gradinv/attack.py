"""Reconstruction of a training batch from one gradient response.

Pipeline: a gradient-weighted second-moment operator gives the sample
span by block power iteration; the gradient-weighted third moment,
projected into that span, is decomposed into rank-one components by
joint diagonalization of random slices; finally the component weights
are snapped onto the discrete grid that +-1 labels induce, which fixes
signs and labels exactly when the estimate is clean enough.

Activations whose relevant derivative moments vanish switch estimator
variants: odd activations (tanh, sigmoid) use a third-order contraction
to form the operator; piecewise-linear ones (ReLU family) replace the
third-order tensor with a contracted fourth-order one, whose missing
sign information is restored from the first-moment estimate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
from scipy.optimize import least_squares

from . import rng
from .activations import Activation
from .errors import (
    AmbiguousRecoveryError,
    AttackStageError,
    ContractViolationError,
    DegenerateInputError,
    GradinvError,
    InvalidDesignError,
    UnsupportedError,
)
from .tensors import (
    LinearOperator,
    SymTensor3,
    joint_diagonalize,
    orthonormalize,
)
from .victim import GradientResponse, ModelParams, designed_z_rows

VARIANT_STANDARD = "standard"
VARIANT_TANH3 = "tanh_third_order"
VARIANT_RELU4 = "relu_fourth_order"
VARIANT_ALT = "first_layer_alt"
VARIANT_GRAM = "first_layer_gram"

_SIGN_SEARCH_MAX = 12  # exhaustive +-1 pattern search bound


@dataclass(frozen=True)
class AttackConfig:
    """Tuning knobs of the reconstruction pipeline.

    ``estimator`` picks the gradient block feeding the estimates:
    "gradient_output" uses only the output-layer gradient (the basic
    algorithm), "first_layer" uses the first-layer gradient block for
    both span and tensor (lower variance; two-layer victims only), and
    "auto" takes the first-layer route whenever that block is present.
    ``strict_labels=False`` downgrades off-grid component weights from an
    error to a diagnostics flag; reconstructions are then best-effort.
    """

    batch_size: int
    seed: int = 0
    projections: int = 100
    power_tol: float = 1e-10
    power_max_iters: int = 200
    joint_tol: float = 1e-12
    joint_max_sweeps: int = 100
    estimator: str = "auto"              # auto | gradient_output | first_layer
    subspace_estimator: str | None = None  # override span source independently
    variant_override: str | None = None
    mode: str = "classification"         # or "regression"
    refine: bool = True
    refine_weights: bool = True
    center: bool = True
    n_probes: int = 8
    rescale_designed_input: bool = True
    strict_labels: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolationError("batch_size must be >= 1")
        if self.projections < 2:
            raise ContractViolationError("need at least 2 slice projections")
        if self.estimator not in ("auto", "gradient_output", "first_layer"):
            raise ContractViolationError(f"unknown estimator '{self.estimator}'")
        if self.subspace_estimator not in (None, "gradient_output", "first_layer"):
            raise ContractViolationError(
                f"unknown subspace estimator '{self.subspace_estimator}'"
            )
        if self.mode not in ("classification", "regression"):
            raise ContractViolationError(f"unknown mode '{self.mode}'")


@dataclass(frozen=True)
class MomentEstimates:
    """Intermediate estimates: operator, span, projected tensor."""

    p_op: LinearOperator
    v: np.ndarray                 # (d, B) orthonormal
    t_proj: SymTensor3            # (B, B, B)
    variant: str
    probe_a: np.ndarray | None    # d-dim unit probe of the contracted variants
    probe_proj: np.ndarray | None = None   # its normalized span projection
    first_moment: np.ndarray | None = None # (1/m) sum_j g_j w_j
    t_extra: tuple = ()           # further probe contractions, same components


@dataclass(frozen=True)
class ReconstructionResult:
    """Recovered inputs, labels, component weights, and diagnostics."""

    x_hat: np.ndarray             # (d, B)
    y_hat: np.ndarray             # (B,)
    lambda_hat: np.ndarray        # (B,)
    signs: np.ndarray             # (B,) of +-1
    diagnostics: dict


@dataclass(frozen=True)
class SubspaceEstimate:
    v: np.ndarray
    iterations: int
    residual: float
    stagnated: bool


def build_P_operator(
    g: GradientResponse | np.ndarray,
    w1: np.ndarray,
    act: Activation,
    variant: str = VARIANT_STANDARD,
    probe_a: np.ndarray | None = None,
    center: bool = False,
) -> LinearOperator:
    """Matrix-free gradient-weighted second-moment operator.

    standard:  v -> (1/m) sum_j g_j ((w_j.v) w_j - v)
    third-order contraction (odd activations): v ->
        (1/m) sum_j g_j ((w_j.v)(w_j.a) w_j - (v.a) w_j - (w_j.v) a - (w_j.a) v)
    first-layer Gram: v -> (1/m) g_W^T (g_W v); every first-layer
    gradient row lies in the sample span, so the top eigenspace is exact
    up to the reported noise.
    All are symmetric maps whose top-B eigenspace approximates the
    sample span.  ``center=True`` subtracts the mean gradient entry
    before weighting; the Hermite factors are mean-zero, so this leaves
    the expectation untouched and only removes the common-mode variance
    (the pipeline enables it).
    """
    if variant == VARIANT_GRAM:
        if not isinstance(g, GradientResponse) or g.g_w is None:
            raise ContractViolationError("first-layer Gram operator needs the g_W block")
        gw = g.g_w
        m, d = gw.shape
        inv_m = 1.0 / m

        def apply_block_gram(block: np.ndarray) -> np.ndarray:
            return inv_m * (gw.T @ (gw @ block))

        def apply_gram(v: np.ndarray) -> np.ndarray:
            return apply_block_gram(v[:, None])[:, 0]

        return LinearOperator(dim=d, apply=apply_gram, symmetric=True, apply_block=apply_block_gram)

    ga = g.g_a if isinstance(g, GradientResponse) else np.asarray(g, dtype=np.float64)
    w1 = np.asarray(w1, dtype=np.float64)
    m, d = w1.shape
    if ga.shape != (m,):
        raise ContractViolationError("gradient length must match row count of W")
    if center:
        ga = ga - ga.mean()
    inv_m = 1.0 / m

    if variant == VARIANT_STANDARD:
        sum_g = float(ga.sum())

        def apply_block(block: np.ndarray) -> np.ndarray:
            t = w1 @ block                      # (m, k)
            return inv_m * (w1.T @ (ga[:, None] * t) - sum_g * block)

        def apply(v: np.ndarray) -> np.ndarray:
            return apply_block(v[:, None])[:, 0]

        return LinearOperator(dim=d, apply=apply, symmetric=True, apply_block=apply_block)

    if variant == VARIANT_TANH3:
        if probe_a is None:
            raise ContractViolationError("third-order contraction requires a probe vector")
        a = np.asarray(probe_a, dtype=np.float64)
        if a.shape != (d,):
            raise ContractViolationError("probe vector dimension mismatch")
        ta = w1 @ a                              # (m,)
        g_ta = ga * ta
        wt_g = w1.T @ ga                         # sum_j g_j w_j
        wt_gta = w1.T @ g_ta                     # sum_j g_j (w_j.a) w_j
        s_gta = float(g_ta.sum())

        def apply_block(block: np.ndarray) -> np.ndarray:
            t = w1 @ block                       # (m, k)
            term1 = w1.T @ (g_ta[:, None] * t)
            term2 = np.outer(wt_g, a @ block)
            term3 = np.outer(a, ga @ t)
            term4 = s_gta * block
            return inv_m * (term1 - term2 - term3 - term4)

        def apply(v: np.ndarray) -> np.ndarray:
            return apply_block(v[:, None])[:, 0]

        return LinearOperator(dim=d, apply=apply, symmetric=True, apply_block=apply_block)

    raise ContractViolationError(f"unknown operator variant '{variant}'")


def first_moment(g: GradientResponse | np.ndarray, w1: np.ndarray) -> np.ndarray:
    """(1/m) sum_j g_j w_j: the gradient-weighted first moment."""
    ga = g.g_a if isinstance(g, GradientResponse) else np.asarray(g, dtype=np.float64)
    return (w1.T @ ga) / w1.shape[0]


def estimate_subspace(
    p_op: LinearOperator,
    b: int,
    max_iters: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
) -> SubspaceEstimate:
    """Block power iteration for the top-|eigenvalue| invariant subspace.

    Starts from a seeded gaussian block, orthonormalizes every step, and
    stops when consecutive projectors differ by less than ``tol`` in
    Frobenius norm.  A stagnating residual above 10 * tol sets the
    ``stagnated`` flag instead of erroring.
    """
    if b < 1:
        raise ContractViolationError("subspace dimension must be >= 1")
    v = orthonormalize(rng.gaussians(seed, rng.PURPOSE_POWER_INIT, (p_op.dim, b)))
    residual = math.inf
    history: list[float] = []
    for it in range(1, max_iters + 1):
        y = p_op.matmat(v)
        scale = float(np.linalg.norm(y))
        if not np.isfinite(scale) or scale < 1e-300:
            raise DegenerateInputError("operator annihilates the iterate block")
        v_new = orthonormalize(y)
        overlap = np.linalg.norm(v_new.T @ v) ** 2
        residual = math.sqrt(max(2.0 * b - 2.0 * overlap, 0.0))
        v = v_new
        history.append(residual)
        if residual < tol:
            return SubspaceEstimate(v=v, iterations=it, residual=residual, stagnated=False)
        if len(history) >= 25:
            window = history[-25:]
            if min(window) > 10.0 * tol and (max(window) - min(window)) < 0.05 * max(window):
                return SubspaceEstimate(v=v, iterations=it, residual=residual, stagnated=True)
    return SubspaceEstimate(
        v=v, iterations=max_iters, residual=residual, stagnated=residual > 10.0 * tol
    )


def _project_rows(w1: np.ndarray, v: np.ndarray) -> np.ndarray:
    return w1 @ v


def estimate_projected_tensor(
    g: GradientResponse | np.ndarray,
    w1: np.ndarray,
    v: np.ndarray,
    act: Activation,
    variant: str = VARIANT_STANDARD,
    probe_a: np.ndarray | None = None,
    center: bool = False,
) -> SymTensor3:
    """Gradient-weighted third-moment tensor in span coordinates.

    standard: (1/m) sum_j g_j H3(V^T w_j); the ReLU-family variant uses
    the fourth Hermite tensor contracted with the (renormalized) span
    projection of the probe, trading one slot for the probe overlap.
    ``center`` as in build_P_operator.
    """
    ga = g.g_a if isinstance(g, GradientResponse) else np.asarray(g, dtype=np.float64)
    w1 = np.asarray(w1, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if center:
        ga = ga - ga.mean()
    m = w1.shape[0]
    b = v.shape[1]
    if not np.allclose(v.T @ v, np.eye(b), atol=1e-10):
        raise ContractViolationError("span basis must have orthonormal columns")
    u = _project_rows(w1, v)                    # (m, B), rows ~ N(0, I_B)
    inv_m = 1.0 / m
    eye = np.eye(b)

    if variant in (VARIANT_STANDARD, VARIANT_ALT):
        cube = np.einsum("j,ja,jb,jc->abc", ga, u, u, u) * inv_m
        s = (ga @ u) * inv_m
        lower = (
            np.einsum("a,bc->abc", s, eye)
            + np.einsum("b,ac->abc", s, eye)
            + np.einsum("c,ab->abc", s, eye)
        )
        return SymTensor3(cube - lower)

    if variant == VARIANT_RELU4:
        if probe_a is None:
            raise ContractViolationError("fourth-order contraction requires a probe vector")
        a_proj = v.T @ np.asarray(probe_a, dtype=np.float64)
        norm = float(np.linalg.norm(a_proj))
        if norm < 1e-8:
            raise DegenerateInputError("probe vector is orthogonal to the span")
        a_hat = a_proj / norm
        t = u @ a_hat                            # (m,)
        c = ga * t
        cube = np.einsum("j,ja,jb,jc->abc", c, u, u, u) * inv_m
        m2 = np.einsum("j,ja,jb->ab", ga, u, u) * inv_m
        uua = (
            np.einsum("ab,c->abc", m2, a_hat)
            + np.einsum("ac,b->abc", m2, a_hat)
            + np.einsum("bc,a->abc", m2, a_hat)
        )
        s2 = (c @ u) * inv_m
        u_tilde = (
            np.einsum("a,bc->abc", s2, eye)
            + np.einsum("b,ac->abc", s2, eye)
            + np.einsum("c,ab->abc", s2, eye)
        )
        mean_g = float(ga.sum()) * inv_m
        a_tilde = (
            np.einsum("a,bc->abc", a_hat, eye)
            + np.einsum("b,ac->abc", a_hat, eye)
            + np.einsum("c,ab->abc", a_hat, eye)
        )
        return SymTensor3(cube - uua - u_tilde + mean_g * a_tilde)

    raise ContractViolationError(f"unknown tensor variant '{variant}'")


def estimate_projected_tensor_alt(
    g: GradientResponse,
    w1: np.ndarray,
    v: np.ndarray,
    act: Activation,
    a_vec: np.ndarray | None = None,
) -> SymTensor3:
    """Third-moment tensor from the first-layer gradient block.

    Each row of g_w is a_j * sum_i r_i sigma'(w_j.x_i) x_i; pairing it
    with the second Hermite matrix of the projected rows estimates the
    same tensor with lower variance.  Requires the first-layer gradient
    and an activation with a nonvanishing third derivative moment.
    """
    if not isinstance(g, GradientResponse) or g.g_w is None:
        raise UnsupportedError("first-layer estimator needs the first-layer gradient")
    if act.k3 != 3:
        raise UnsupportedError(
            "first-layer estimator needs a nonvanishing third derivative moment"
        )
    w1 = np.asarray(w1, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = w1.shape[0]
    b = v.shape[1]
    if a_vec is None:
        a_vec = np.full(m, 1.0 / m)
    if np.any(a_vec == 0.0):
        raise UnsupportedError("first-layer estimator needs nonzero output weights")
    u = _project_rows(w1, v)                    # (m, B)
    gp = (g.g_w / (m * a_vec)[:, None]) @ v     # (m, B): projected r-weighted slopes
    eye = np.eye(b)
    t1 = np.einsum("ja,jb,jc->abc", gp, u, u) - np.einsum("a,bc->abc", gp.sum(axis=0), eye)
    sym = (t1 + t1.transpose(2, 0, 1) + t1.transpose(1, 2, 0)) / 3.0
    return SymTensor3(sym)


@dataclass(frozen=True)
class DecompositionResult:
    weights: np.ndarray            # (B,) sorted by |weight| descending
    vectors: np.ndarray            # (B, B), unit columns aligned with weights
    fit_residual: float            # relative residual of the rank-B fit
    joint_off_mass: float
    joint_converged: bool
    refined: bool
    rank_warning: bool

    def components(self) -> list[tuple[float, np.ndarray]]:
        return [(float(self.weights[i]), self.vectors[:, i]) for i in range(self.weights.size)]


def _stack_fit_residual(stack: np.ndarray, weights: np.ndarray, vectors: np.ndarray) -> float:
    model = np.einsum("kr,ar,br,cr->kabc", weights, vectors, vectors, vectors)
    scale = max(float(np.linalg.norm(stack.ravel())), 1e-300)
    return float(np.linalg.norm((model - stack).ravel())) / scale


def _weights_for_vectors(stack: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Per-tensor least-squares weights for fixed unit component vectors."""
    b = vectors.shape[1]
    basis = np.stack(
        [np.einsum("a,b,c->abc", vectors[:, i], vectors[:, i], vectors[:, i]).ravel() for i in range(b)],
        axis=1,
    )
    sol, *_ = np.linalg.lstsq(basis, stack.reshape(stack.shape[0], -1).T, rcond=None)
    return sol.T  # (K, B)


def _refine_cp(stack: np.ndarray, weights: np.ndarray, vectors: np.ndarray):
    """Gauss-Newton polish of the shared-component rank-B fit.

    One set of unit directions is shared by all tensors in the stack;
    each tensor keeps its own weights.  Stacking matters: a single
    B-dimensional tensor at small B is an (almost) saturated model that
    would absorb its own noise, while the stacked fit averages it.
    """
    k, b = weights.shape

    def unpack(flat):
        vs = flat[: b * b].reshape(b, b)
        ws = flat[b * b:].reshape(k, b)
        return vs, ws

    def resid(flat: np.ndarray) -> np.ndarray:
        vs, ws = unpack(flat)
        model = np.einsum("kr,ar,br,cr->kabc", ws, vs, vs, vs)
        return (model - stack).ravel()

    x0 = np.concatenate([vectors.ravel(), weights.ravel()])
    sol = least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    vs, ws = unpack(sol.x)
    norms = np.linalg.norm(vs, axis=0)
    norms[norms == 0.0] = 1.0
    return ws * (norms**3)[None, :], vs / norms[None, :]


def _refine_is_degenerate(weights: np.ndarray, vectors: np.ndarray, stack: np.ndarray) -> bool:
    """Reject polish outputs that fit via near-canceling huge components.

    When the rank-B model is (almost) saturated, a weak-signal tensor can
    be fit exactly by two nearly parallel components with exploding
    opposite weights; such solutions carry no usable structure.
    """
    b = vectors.shape[1]
    gram = vectors.T @ vectors
    off = np.abs(gram - np.eye(b))
    if off.size and float(off.max()) > 0.98:
        return True
    scale = max(float(np.linalg.norm(stack[0].ravel())), 1e-300)
    return float(np.abs(weights[0]).sum()) > 50.0 * max(1.0, b) * scale


def _pencil_start(t: np.ndarray, seed: int):
    """Two-slice similarity start for non-orthogonal components."""
    b = t.shape[0]
    d1 = rng.unit_vector(seed, rng.PURPOSE_PROJECTIONS, b, index=7001)
    d2 = rng.unit_vector(seed, rng.PURPOSE_PROJECTIONS, b, index=7002)
    m1 = np.tensordot(t, d1, axes=([2], [0]))
    m2 = np.tensordot(t, d2, axes=([2], [0]))
    try:
        k = m1 @ np.linalg.inv(m2)
    except np.linalg.LinAlgError:
        return None
    vals, vecs = np.linalg.eig(k)
    if np.max(np.abs(vals.imag)) > 1e-6 * max(np.max(np.abs(vals.real)), 1e-300):
        return None
    vecs = np.real(vecs)
    norms = np.linalg.norm(vecs, axis=0)
    if np.any(norms < 1e-12):
        return None
    return vecs / norms[None, :]


def decompose_projected(
    t_proj: SymTensor3,
    b: int,
    projections: int = 100,
    seed: int = 0,
    joint_tol: float = 1e-12,
    joint_max_sweeps: int = 100,
    refine: bool = True,
    extra_tensors: tuple = (),
) -> DecompositionResult:
    """Rank-B decomposition of the projected tensor.

    Random unit directions slice the tensor into matrices sharing the
    component structure; joint diagonalization supplies an orthogonal
    basis and per-slice diagonals, from which weights follow by least
    squares.  Because the true components need not be orthogonal, a
    Gauss-Newton polish of the full rank-B model (with a two-slice
    similarity fallback start) takes the estimate to the exact
    decomposition on clean input.  ``extra_tensors`` (same components,
    different weights, e.g. further probe contractions) join the slice
    family and the polish, averaging direction noise; reported weights
    always belong to ``t_proj``.
    """
    if t_proj.dim != b:
        raise ContractViolationError("tensor dimension must equal the component count")
    if projections < 2:
        raise ContractViolationError("need at least 2 slice projections")
    stack = np.stack([t_proj.entries] + [t.entries for t in extra_tensors])
    dirs = rng.gaussians(seed, rng.PURPOSE_PROJECTIONS, (projections, b))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    dirs /= norms
    slices = np.einsum("kabc,lc->klab", stack, dirs).reshape(-1, b, b)
    jd = joint_diagonalize(list(slices), tol=joint_tol, max_sweeps=joint_max_sweeps)
    q = jd.rotation
    proj = dirs @ q                               # (L, B): a_l . u_i
    denom = np.einsum("li,li->i", proj, proj)
    denom[denom == 0.0] = 1.0
    diag0 = jd.diagonals[: dirs.shape[0]]         # slices of t_proj itself
    weights0 = np.einsum("li,li->i", diag0, proj) / denom
    vectors = q.copy()
    weights = _weights_for_vectors(stack, vectors)
    weights[0] = weights0
    fit = _stack_fit_residual(stack, weights, vectors)
    refined = False
    if refine:
        safe = np.where(np.abs(weights) < 1e-300, 1e-300, weights)
        w_r, v_r = _refine_cp(stack, safe, vectors)
        fit_r = _stack_fit_residual(stack, w_r, v_r)
        if fit_r <= fit and not _refine_is_degenerate(w_r, v_r, stack):
            weights, vectors, fit, refined = w_r, v_r, fit_r, True
        if fit > 1e-8:
            start = _pencil_start(stack[0], seed)
            if start is not None:
                w_p = _weights_for_vectors(stack, start)
                w_p2, v_p2 = _refine_cp(
                    stack, np.where(np.abs(w_p) < 1e-300, 1e-300, w_p), start
                )
                fit_p = _stack_fit_residual(stack, w_p2, v_p2)
                if fit_p < fit and not _refine_is_degenerate(w_p2, v_p2, stack):
                    weights, vectors, fit, refined = w_p2, v_p2, fit_p, True
    lead = weights[0]
    order = np.argsort(-np.abs(lead), kind="stable")
    lead = lead[order]
    vectors = vectors[:, order]
    max_w = float(np.max(np.abs(lead))) if lead.size else 0.0
    rank_warning = bool(lead.size and np.min(np.abs(lead)) < 1e-10 * max(max_w, 1e-300))
    return DecompositionResult(
        weights=lead,
        vectors=vectors,
        fit_residual=fit,
        joint_off_mass=jd.off_diagonal_mass,
        joint_converged=jd.converged,
        refined=refined,
        rank_warning=rank_warning,
    )


@dataclass(frozen=True)
class RefinedWeights:
    signs: np.ndarray            # (B,) +-1 orientation of each direction
    residual_levels: np.ndarray  # (B,) fitted residue per component
    relative_misfit: float       # |g - model| / |g|


def refine_component_weights(
    ga: np.ndarray,
    w1: np.ndarray,
    directions: np.ndarray,
    act: Activation,
    input_scale: float = 1.0,
) -> RefinedWeights:
    """Re-fit component weights by regressing the gradient on the directions.

    Given direction estimates d_i, the observed gradient is linear in the
    residues: g_j = sum_i r_i sigma(w_j . (scale * s_i d_i)).  Solving the
    least-squares problem for every +-1 orientation pattern recovers the
    residue levels with far less variance than reading them off the
    decomposed tensor weights, because the heavy-tailed Hermite factors
    drop out.

    Orientation is scored by the regression misfit together with the
    match of the implied first moment against (1/m) sum_j g_j w_j and a
    penalty on negative residues (the designed output bias makes every
    residue positive).  The extra terms matter for (near-)odd
    activations, where flipping a direction and its residue jointly
    leaves the regression misfit unchanged.
    """
    b = directions.shape[1]
    if b > _SIGN_SEARCH_MAX:
        raise UnsupportedError("exhaustive sign search supports at most 12 components")
    ga = np.asarray(ga, dtype=np.float64)
    h1 = (w1.T @ ga) / w1.shape[0]
    h1_norm = max(float(np.linalg.norm(h1)), 1e-300)
    slope1 = act.moment(1, input_scale * input_scale) * input_scale
    g_norm = max(float(np.linalg.norm(ga)), 1e-300)
    best: tuple | None = None
    for pattern in product((1.0, -1.0), repeat=b):
        s = np.asarray(pattern)
        design = act.eval(w1 @ (directions * (s * input_scale)[None, :]))
        sol, _, _, _ = np.linalg.lstsq(design, ga, rcond=None)
        misfit = float(np.linalg.norm(design @ sol - ga)) / g_norm
        moment_model = directions @ (slope1 * sol * s)
        moment_term = float(np.linalg.norm(moment_model - h1)) / h1_norm
        negativity = float(np.sum(np.maximum(0.0, -sol))) / (1.0 + float(np.abs(sol).mean()))
        score = misfit + moment_term + negativity
        if best is None or score < best[3]:
            best = (s, sol, misfit, score)
    signs, levels, misfit, _ = best
    return RefinedWeights(
        signs=signs,
        residual_levels=levels,
        relative_misfit=misfit,
    )


def _candidate_grid(act: Activation, bias: float, order: int, input_scale: float):
    """Component-weight candidates for labels +1 / -1.

    For effective inputs of norm c the tensor weight of a component is
    moment(order, c^2) * (mean(c^2) + bias - y) * c^order.
    """
    v = input_scale * input_scale
    lam = act.moment(order, v) * input_scale**order
    base = act.mean(v) + bias
    return {+1.0: lam * (base - 1.0), -1.0: lam * (base + 1.0)}, lam, base


def recover_signs_labels(
    components: list[tuple[float, np.ndarray]],
    v: np.ndarray,
    act: Activation,
    bias: float,
    mode: str = "classification",
    *,
    variant: str = VARIANT_STANDARD,
    probe_proj: np.ndarray | None = None,
    first_moment_vec: np.ndarray | None = None,
    input_scale: float = 1.0,
    strict: bool = True,
    extra_diagnostics: dict | None = None,
) -> ReconstructionResult:
    """Resolve component signs and labels from weight discreteness.

    Odd-order estimates couple the component sign to the weight sign, so
    each component picks the (sign, label) pair whose candidate weight is
    nearest; a residual above half the candidate gap means the weights do
    not sit on the grid and recovery is refused (with ``strict=False``
    the refusal becomes an ``ambiguous`` diagnostics flag and the
    nearest candidates are used anyway).  The contracted fourth-order
    variant is sign-blind, so labels come from probe-normalized weights
    and signs from matching the first-moment estimate over all +-1
    patterns.
    """
    b = len(components)
    if b == 0:
        raise ContractViolationError("no components to label")
    order = act.k3 if act.k3 is not None else 3
    diags: dict = dict(extra_diagnostics or {})
    lam_arr = np.array([c[0] for c in components])
    u_mat = np.stack([c[1] for c in components], axis=1)          # (B, B)

    cands, lam_scale, label_base = _candidate_grid(act, bias, order, input_scale)
    gap = abs(cands[+1.0] - cands[-1.0])

    if mode == "classification":
        if variant == VARIANT_RELU4:
            if probe_proj is None or first_moment_vec is None:
                raise ContractViolationError(
                    "fourth-order recovery needs the probe projection and first moment"
                )
            if b > _SIGN_SEARCH_MAX:
                raise UnsupportedError("exhaustive sign search supports at most 12 components")
            overlaps = u_mat.T @ probe_proj                        # u_i . a_hat
            safe = np.where(np.abs(overlaps) < 1e-12, 1e-12, overlaps)
            eff = lam_arr / safe                                   # sign-invariant weights
            snapped = np.empty(b)
            labels = np.empty(b)
            snap_resid = np.empty(b)
            for i in range(b):
                best = min(cands.items(), key=lambda kv: abs(eff[i] - kv[1]))
                labels[i] = best[0]
                snapped[i] = best[1]
                snap_resid[i] = abs(eff[i] - best[1])
            _check_ambiguity(snap_resid, gap, diags, strict)
            dirs = v @ u_mat                                       # (d, B) unit columns
            r_star = label_base - labels                           # snapped residual levels
            slope1 = act.moment(1, input_scale**2) * input_scale
            best_signs, sign_resid = _best_sign_pattern(
                dirs, slope1 * r_star, first_moment_vec
            )
            diags["sign_search_residual"] = sign_resid
            x_cols = dirs * best_signs[None, :]
            signs = best_signs
        else:
            snapped = np.empty(b)
            labels = np.empty(b)
            signs = np.empty(b)
            snap_resid = np.empty(b)
            for i in range(b):
                best = None
                for s in (1.0, -1.0):
                    for y, cand in cands.items():
                        r = abs(s * lam_arr[i] - cand)
                        if best is None or r < best[0]:
                            best = (r, s, y, cand)
                snap_resid[i], signs[i], labels[i], snapped[i] = best
            _check_ambiguity(snap_resid, gap, diags, strict)
            x_cols = (v @ u_mat) * signs[None, :]
        diags["snapping_residuals"] = snap_resid
        x_hat = x_cols * input_scale
        norms2 = np.sum(x_hat * x_hat, axis=0)
        y_hat = np.array(
            [
                act.mean(n2) + bias - snapped[i] / _nonzero(act.moment(order, n2) * input_scale**order)
                for i, n2 in enumerate(norms2)
            ]
        )
        y_hat = np.where(np.abs(y_hat - labels) < 1e-6, labels, y_hat)  # pin exact labels
        return ReconstructionResult(
            x_hat=x_hat, y_hat=y_hat, lambda_hat=snapped, signs=signs, diagnostics=diags
        )

    # Regression: no discrete grid. The designed output bias keeps every
    # residual level positive, which fixes the sign of each odd-order weight.
    if variant == VARIANT_RELU4:
        raise UnsupportedError("regression labels need an odd-order estimate")
    lam_theory = lam_scale
    if abs(lam_theory) < 1e-12:
        raise AmbiguousRecoveryError(
            "activation has no usable odd derivative moment; components are unidentifiable",
            residuals=np.abs(lam_arr),
        )
    signs = np.where(lam_arr / lam_theory >= 0.0, 1.0, -1.0)
    lam_res = signs * lam_arr
    x_hat = (v @ u_mat) * signs[None, :] * input_scale
    norms2 = np.sum(x_hat * x_hat, axis=0)
    y_hat = np.array(
        [
            act.mean(n2) + bias - lam_res[i] / _nonzero(act.moment(order, n2) * input_scale**order)
            for i, n2 in enumerate(norms2)
        ]
    )
    diags["snapping_residuals"] = np.zeros(b)
    return ReconstructionResult(
        x_hat=x_hat, y_hat=y_hat, lambda_hat=lam_res, signs=signs, diagnostics=diags
    )


def _nonzero(x: float) -> float:
    if abs(x) < 1e-300:
        raise AmbiguousRecoveryError(
            "vanishing moment weight makes labels unidentifiable", residuals=None
        )
    return x


def _check_ambiguity(residuals: np.ndarray, gap: float, diags: dict, strict: bool = True):
    limit = 0.5 * gap
    diags["snapping_gap"] = gap
    if np.any(residuals > limit):
        if strict:
            raise AmbiguousRecoveryError(
                "component weights do not match the label grid "
                f"(worst residual {float(np.max(residuals)):.3g} vs allowed {limit:.3g}); "
                "the activation may be degenerate or the width too small",
                residuals=residuals,
            )
        diags["ambiguous"] = True


def _best_sign_pattern(dirs: np.ndarray, coefs: np.ndarray, target: np.ndarray):
    best = None
    for pattern in product((1.0, -1.0), repeat=dirs.shape[1]):
        s = np.asarray(pattern)
        resid = float(np.linalg.norm((dirs * (coefs * s)[None, :]).sum(axis=1) - target))
        if best is None or resid < best[1]:
            best = (s, resid)
    return best


def select_variants(act: Activation, override: str | None = None):
    """Operator/tensor variants from the activation's moment orders.

    The gradient-output route only: vanishing E[sigma''] switches the
    operator to the third-order contraction; vanishing E[sigma'''] moves
    the tensor to the contracted fourth order.
    """
    if override is not None:
        if override == VARIANT_TANH3:
            return VARIANT_TANH3, VARIANT_STANDARD
        if override == VARIANT_RELU4:
            return VARIANT_STANDARD, VARIANT_RELU4
        if override == VARIANT_STANDARD:
            return VARIANT_STANDARD, VARIANT_STANDARD
        raise ContractViolationError(f"unknown variant override '{override}'")
    op_variant = VARIANT_STANDARD if act.k2 == 2 else VARIANT_TANH3
    tensor_variant = VARIANT_RELU4 if act.k3 == 4 else VARIANT_STANDARD
    return op_variant, tensor_variant


def resolve_sources(act: Activation, config: AttackConfig, has_gw: bool):
    """Final (operator variant, tensor variant) given the estimator choice."""
    op_variant, tensor_variant = select_variants(act, config.variant_override)
    estimator = config.estimator
    if estimator == "first_layer":
        if not has_gw:
            raise UnsupportedError("first-layer estimator needs the first-layer gradient")
        if act.k3 != 3:
            raise UnsupportedError(
                "first-layer tensor estimator needs a nonvanishing third derivative moment"
            )
        op_variant, tensor_variant = VARIANT_GRAM, VARIANT_ALT
    elif estimator == "auto" and has_gw and config.variant_override is None:
        op_variant = VARIANT_GRAM
        if act.k3 == 3:
            tensor_variant = VARIANT_ALT
    if config.subspace_estimator == "first_layer":
        if not has_gw:
            raise UnsupportedError("first-layer span estimate needs the first-layer gradient")
        op_variant = VARIANT_GRAM
    elif config.subspace_estimator == "gradient_output":
        op_variant = VARIANT_STANDARD if act.k2 == 2 else VARIANT_TANH3
    return op_variant, tensor_variant


def estimate_batch_size(p_op: LinearOperator, b_max: int, seed: int = 0) -> dict:
    """Optional diagnostic: eigenvalue magnitudes of the operator.

    Runs block power iteration at width b_max + 2 and reports Ritz value
    magnitudes plus the largest relative gap position.  Not used by the
    pipeline (the batch size is a config input).
    """
    from .tensors import sym_eig

    k = min(p_op.dim, b_max + 2)
    est = estimate_subspace(p_op, k, max_iters=100, tol=1e-8, seed=seed)
    ritz = est.v.T @ p_op.matmat(est.v)
    vals = np.abs(sym_eig(0.5 * (ritz + ritz.T)).values)
    gaps = vals[:-1] - vals[1:]
    rel = gaps / np.maximum(vals[:-1], 1e-300)
    suggested = int(np.argmax(rel)) + 1 if vals.size > 1 else 1
    return {"eigenvalue_magnitudes": vals, "suggested_batch_size": suggested}


def estimate_moments(
    g: GradientResponse,
    w1: np.ndarray,
    act: Activation,
    config: AttackConfig,
    probe: np.ndarray | None = None,
    a_vec: np.ndarray | None = None,
) -> tuple[MomentEstimates, SubspaceEstimate]:
    """Operator, span, and projected tensor for one gradient response."""
    has_gw = isinstance(g, GradientResponse) and g.g_w is not None
    op_variant, tensor_variant = resolve_sources(act, config, has_gw)
    probes = probe if isinstance(probe, list) else ([probe] if probe is not None else [])
    if op_variant == VARIANT_TANH3:
        if not probes:
            raise ContractViolationError("third-order contraction requires probe vectors")
        ops = [
            build_P_operator(g, w1, act, variant=VARIANT_TANH3, probe_a=p, center=config.center)
            for p in probes
        ]
        p_op = _mean_squared_operator(ops, w1.shape[1])
    else:
        p_op = build_P_operator(
            g, w1, act, variant=op_variant, probe_a=probes[0] if probes else None,
            center=config.center,
        )
    sub = estimate_subspace(
        p_op, config.batch_size,
        max_iters=config.power_max_iters, tol=config.power_tol, seed=config.seed,
    )
    probe_proj = None
    fm = None
    t_extra: tuple = ()
    if tensor_variant == VARIANT_ALT:
        t_proj = estimate_projected_tensor_alt(g, w1, sub.v, act, a_vec=a_vec)
    elif tensor_variant == VARIANT_RELU4:
        if not probes:
            raise ContractViolationError("fourth-order contraction requires probe vectors")
        tensors = []
        first_proj = None
        for p in probes:
            a_proj = sub.v.T @ p
            norm = float(np.linalg.norm(a_proj))
            if norm < 1e-8:
                continue  # probe orthogonal to span: contributes nothing
            tensors.append(
                estimate_projected_tensor(
                    g, w1, sub.v, act, variant=VARIANT_RELU4, probe_a=p,
                    center=config.center,
                )
            )
            if first_proj is None:
                first_proj = a_proj / norm
        if not tensors:
            raise DegenerateInputError("all probe vectors are orthogonal to the span")
        t_proj = tensors[0]
        t_extra = tuple(tensors[1:])
        probe_proj = first_proj
        fm = first_moment(g, w1)
    else:
        t_proj = estimate_projected_tensor(
            g, w1, sub.v, act, variant=tensor_variant,
            probe_a=probes[0] if probes else None, center=config.center,
        )
    est = MomentEstimates(
        p_op=p_op, v=sub.v, t_proj=t_proj, variant=tensor_variant,
        probe_a=probes[0] if probes else None, probe_proj=probe_proj,
        first_moment=fm, t_extra=t_extra,
    )
    return est, sub


def _mean_squared_operator(ops: list[LinearOperator], dim: int) -> LinearOperator:
    """Average of squared symmetric operators: same top eigenspace, probe-averaged.

    Squaring keeps each contraction's span signal positive semidefinite so
    that different probes reinforce instead of cancel; averaging then cuts
    the probe-specific noise.
    """
    inv_k = 1.0 / len(ops)

    def apply_block(block: np.ndarray) -> np.ndarray:
        out = np.zeros_like(block)
        for op in ops:
            out += op.matmat(op.matmat(block))
        return inv_k * out

    def apply(v: np.ndarray) -> np.ndarray:
        return apply_block(v[:, None])[:, 0]

    return LinearOperator(dim=dim, apply=apply, symmetric=True, apply_block=apply_block)


def _pipeline(
    g: GradientResponse,
    w1: np.ndarray,
    act: Activation,
    bias: float,
    config: AttackConfig,
    input_scale: float = 1.0,
    a_vec: np.ndarray | None = None,
) -> ReconstructionResult:
    """Shared stage composition for two-layer and reduced deep problems."""
    d = w1.shape[1]
    b = config.batch_size
    if b > max(2.0, 2.0 * d**0.25):
        warnings.warn(
            f"batch size {b} is large for dimension {d}; recovery guarantees assume "
            "B well below d^(1/4)",
            RuntimeWarning,
            stacklevel=3,
        )
    has_gw = isinstance(g, GradientResponse) and g.g_w is not None
    op_variant, tensor_variant = resolve_sources(act, config, has_gw)
    probe_needed = op_variant == VARIANT_TANH3 or tensor_variant == VARIANT_RELU4
    attempts = 2 if probe_needed else 1
    last_degenerate: Exception | None = None
    for attempt in range(attempts):
        probes = None
        if probe_needed:
            probes = _probe_set(g, w1, op_variant, config, attempt)
        try:
            return _pipeline_once(g, w1, act, bias, config, input_scale, a_vec, probes, attempt)
        except DegenerateInputError as exc:
            last_degenerate = exc
    raise AttackStageError("estimation", last_degenerate)  # type: ignore[arg-type]


def _probe_set(
    g: GradientResponse, w1: np.ndarray, op_variant: str, config: AttackConfig, attempt: int
) -> list[np.ndarray]:
    """Probe vectors for the contracted variants.

    The operator contraction needs probes with sizable overlap with every
    sample; a random direction loses overlap like 1/sqrt(d), while the
    first-moment direction (a positively weighted sample combination,
    thanks to the output bias) keeps it dimension-independent.  It leads
    the set for the operator contraction; the rest (and all retries) are
    seeded random unit vectors.
    """
    d = w1.shape[1]
    k = max(1, config.n_probes)
    base = 17 * (attempt + 1)
    probes = [
        rng.unit_vector(config.seed, rng.PURPOSE_PROBE, d, index=base + i) for i in range(k)
    ]
    if op_variant == VARIANT_TANH3 and attempt == 0:
        fm = first_moment(g, w1)
        norm = float(np.linalg.norm(fm))
        if norm > 1e-10:
            probes[0] = fm / norm
    return probes


def _pipeline_once(
    g: GradientResponse,
    w1: np.ndarray,
    act: Activation,
    bias: float,
    config: AttackConfig,
    input_scale: float,
    a_vec: np.ndarray | None,
    probes: list[np.ndarray] | None,
    attempt: int,
) -> ReconstructionResult:
    stage = "moment_estimation"
    try:
        est, sub = estimate_moments(g, w1, act, config, probe=probes, a_vec=a_vec)
        stage = "decomposition"
        dec = decompose_projected(
            est.t_proj, config.batch_size,
            projections=config.projections, seed=config.seed,
            joint_tol=config.joint_tol, joint_max_sweeps=config.joint_max_sweeps,
            refine=config.refine, extra_tensors=est.t_extra,
        )
        diags = {
            "power_iters": sub.iterations,
            "subspace_residual": sub.residual,
            "subspace_stagnated": sub.stagnated,
            "joint_diag_residual": dec.joint_off_mass,
            "joint_converged": dec.joint_converged,
            "fit_residual": dec.fit_residual,
            "refined": dec.refined,
            "rank_warning": dec.rank_warning,
            "variant": est.variant,
            "probe_attempt": attempt,
        }
        stage = "weight_refinement"
        components = dec.components()
        effective_variant = (
            VARIANT_STANDARD if est.variant == VARIANT_ALT else est.variant
        )
        probe_proj = est.probe_proj
        fm = est.first_moment
        degenerate_act = act.k3 is None or abs(act.moment(act.k3, 1.0)) < 1e-12
        if config.refine_weights and not degenerate_act:
            dirs = est.v @ dec.vectors
            refined = refine_component_weights(
                g.g_a, w1, dirs, act, input_scale=input_scale
            )
            _, lam_scale, _ = _candidate_grid(act, bias, act.k3, input_scale)
            components = [
                (lam_scale * refined.residual_levels[i], refined.signs[i] * dec.vectors[:, i])
                for i in range(config.batch_size)
            ]
            diags["weight_misfit"] = refined.relative_misfit
            effective_variant = VARIANT_STANDARD  # refitted weights are sign-coupled
            probe_proj = None
            fm = None
        stage = "sign_recovery"
        return recover_signs_labels(
            components, est.v, act, bias, config.mode,
            variant=effective_variant,
            probe_proj=probe_proj,
            first_moment_vec=fm,
            input_scale=input_scale,
            strict=config.strict_labels,
            extra_diagnostics=diags,
        )
    except AmbiguousRecoveryError as exc:
        exc.stage = stage
        raise
    except DegenerateInputError:
        raise
    except GradinvError as exc:
        raise AttackStageError(stage, exc) from exc


def run_attack_two_layer(
    params: ModelParams,
    g: GradientResponse,
    config: AttackConfig,
) -> ReconstructionResult:
    """Full reconstruction from one two-layer gradient response."""
    if not params.two_layer:
        raise ContractViolationError("expected two-layer parameters")
    return _pipeline(
        g, params.weights[0], params.activations[-1], params.bias, config,
        input_scale=1.0, a_vec=params.a,
    )


def run_attack_deep(
    params: ModelParams,
    g: GradientResponse,
    config: AttackConfig,
) -> ReconstructionResult:
    """Reconstruction through a designed deep victim.

    The designed layers make the gradient of the output weights equal to
    a two-layer gradient taken at the hidden gaussian rows z_j with
    effective inputs c * x_i, so the two-layer pipeline runs on (z, g).
    For LeakyReLU designs the leak factor c is divided back out of the
    estimates (the rescale can be disabled for diagnostics).
    """
    if params.two_layer:
        raise ContractViolationError("expected deep designed parameters")
    if params.design is None or params.design.first_kind not in ("relu", "leaky_relu"):
        # Parameters may still carry a valid structure; validate directly.
        pass
    z = designed_z_rows(params)
    first_kind = params.activations[0].kind
    if first_kind not in ("relu", "leaky_relu"):
        raise UnsupportedError(
            "only the paired ReLU-family design reduces exactly; bijective stacks "
            "need norm recovery, which is out of scope"
        )
    scale = 1.0 if first_kind == "relu" else 1.0 + 0.01 ** (len(params.weights) - 1)
    act = params.activations[-1]
    result = _pipeline(g, z, act, params.bias, config, input_scale=scale, a_vec=params.a)
    if config.rescale_designed_input and scale != 1.0:
        x_hat = result.x_hat / scale
        diags = dict(result.diagnostics)
        diags["designed_input_scale"] = scale
        diags["rescaled"] = True
        return replace(result, x_hat=x_hat, diagnostics=diags)
    if scale != 1.0:
        diags = dict(result.diagnostics)
        diags["designed_input_scale"] = scale
        diags["rescaled"] = False
        return replace(result, diagnostics=diags)
    return result
