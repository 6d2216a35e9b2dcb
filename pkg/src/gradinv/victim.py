"""Victim network: forward pass, designed initializations, gradient oracle.

The loss convention follows the residual form: with r_i = f(x_i) - y_i,
the exposed gradient entries are

    g_a[j] = sum_i r_i * (last hidden feature of x_i)[j]
    g_W[j] = sum_i r_i * a_j * sigma'(w_j . x_i) * x_i      (two-layer only)

which are the derivatives of (1/2) sum_i (y_i - f(x_i))^2.  Central
differences of the plain squared loss are exactly LOSS_GRADIENT_FACTOR
times these values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .activations import Activation, make_activation
from .errors import (
    BudgetExceededError,
    ContractViolationError,
    InvalidDesignError,
)

# Ratio between derivatives of sum_i (y_i - f)^2 and the residual-form
# gradients exposed by gradient_query.
LOSS_GRADIENT_FACTOR = 2.0

# Output bias magnitude used by the experiment configs; keeps the
# component-weight ratio of the moment tensors bounded by 3.
DEFAULT_BIAS = 30.0


@dataclass(frozen=True)
class Batch:
    """Training samples as columns of ``x`` plus real labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    normalized: bool = True
    pi_min: float = field(init=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[1] != y.shape[0]:
            raise ContractViolationError(
                f"batch shapes inconsistent: x {x.shape}, y {y.shape}"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ContractViolationError("batch entries must be finite")
        if self.normalized:
            norms = np.linalg.norm(x, axis=0)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ContractViolationError("normalized batch requires unit columns")
        sv = np.linalg.svd(x, compute_uv=False)
        object.__setattr__(self, "pi_min", float(sv[-1]) if sv.size else 0.0)
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def size(self) -> int:
        return self.x.shape[1]

    @property
    def classification(self) -> bool:
        return bool(np.all(np.abs(np.abs(self.y) - 1.0) < 1e-12))


@dataclass(frozen=True)
class DeepDesign:
    """Metadata describing a designed multi-layer initialization."""

    first_kind: str            # relu | leaky_relu | identity-stacked kind
    depth: int                 # number of weight matrices
    input_scale: float         # effective factor c with w_j . h(x) = c * z_j . x


@dataclass(frozen=True)
class ModelParams:
    """Victim parameters: output vector ``a`` plus weight matrices.

    ``weights[0]`` is (m, d); deeper matrices are (m, m).  One activation
    per weight matrix.  ``bias`` is the designed output-layer shift.
    """

    a: np.ndarray
    weights: tuple[np.ndarray, ...]
    activations: tuple[Activation, ...]
    bias: float = 0.0
    design: DeepDesign | None = None

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=np.float64)
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        if len(ws) == 0 or len(ws) != len(self.activations):
            raise ContractViolationError("need one activation per weight matrix")
        m = ws[0].shape[0]
        if a.shape != (m,):
            raise ContractViolationError("output vector length must match width")
        for w in ws[1:]:
            if w.shape != (m, m):
                raise ContractViolationError("intermediate matrices must be (m, m)")
        a.flags.writeable = False
        for w in ws:
            w.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def depth(self) -> int:
        """Layer count including the linear output layer."""
        return len(self.weights) + 1

    @property
    def two_layer(self) -> bool:
        return len(self.weights) == 1


@dataclass(frozen=True)
class GradientResponse:
    """The single observed gradient: output-layer part, optional first-layer part."""

    g_a: np.ndarray
    g_w: np.ndarray | None
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.g_a)):
            raise ContractViolationError("gradient entries must be finite")
        if self.g_w is not None and not np.all(np.isfinite(self.g_w)):
            raise ContractViolationError("gradient entries must be finite")


class QueryBudget:
    """One-shot token modelling the single allowed gradient query.

    Not thread-safe by design; confine to one thread or synchronize
    externally.
    """

    def __init__(self, label: str = "experiment"):
        self.label = label
        self._spent = False

    def consume(self):
        if self._spent:
            raise BudgetExceededError(
                f"gradient budget '{self.label}' already spent: the oracle answers once"
            )
        self._spent = True

    @property
    def spent(self) -> bool:
        return self._spent


def hidden_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Feature vector(s) multiplying ``a``: sigma_l(W_l ... sigma_1(W_1 x)).

    Accepts a single column or a (d, n) block; returns (m,) or (m, n).
    """
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[:, None]
    if h.shape[0] != params.input_dim:
        raise ContractViolationError(
            f"input dim {h.shape[0]} does not match model dim {params.input_dim}"
        )
    for w, act in zip(params.weights, params.activations):
        h = act.eval(w @ h)
    return h[:, 0] if single else h


def forward(params: ModelParams, x: np.ndarray) -> float | np.ndarray:
    """Network output a . features(x) + bias for one column or a block."""
    feats = hidden_features(params, x)
    out = params.a @ feats + params.bias
    return float(out) if np.ndim(out) == 0 else out


def loss_value(params: ModelParams, batch: Batch) -> float:
    """Plain squared loss sum_i (y_i - f(x_i))^2 (no 1/2, no 1/B)."""
    pred = forward(params, batch.x)
    return float(np.sum((batch.y - pred) ** 2))


def residuals(params: ModelParams, batch: Batch) -> np.ndarray:
    """r_i = f(x_i) - y_i."""
    return forward(params, batch.x) - batch.y


def gradient_query(
    params: ModelParams,
    batch: Batch,
    noise_sigma: float = 0.0,
    seed: int = 0,
    budget: QueryBudget | None = None,
) -> GradientResponse:
    """Answer the one gradient query at the transmitted parameters.

    Returns residual-form gradients (see module docstring); two-layer
    victims also expose the first-layer part.  With ``noise_sigma > 0``
    every reported entry gets independent seeded N(0, noise_sigma^2)
    noise.  Passing the same ``budget`` twice raises BudgetExceededError.
    """
    if noise_sigma < 0:
        raise ContractViolationError("noise_sigma must be >= 0")
    if budget is not None:
        budget.consume()
    feats = hidden_features(params, batch.x)          # (m, B)
    r = params.a @ feats + params.bias - batch.y      # (B,)
    g_a = feats @ r                                   # (m,)
    g_w = None
    if params.two_layer:
        w1 = params.weights[0]
        act = params.activations[0]
        slopes = act.deriv(w1 @ batch.x)              # (m, B)
        g_w = (params.a[:, None] * slopes * r[None, :]) @ batch.x.T
    if noise_sigma > 0.0:
        m = g_a.shape[0]
        total = m + (g_w.size if g_w is not None else 0)
        noise = rng.gaussians(seed, rng.PURPOSE_NOISE, total) * noise_sigma
        g_a = g_a + noise[:m]
        if g_w is not None:
            g_w = g_w + noise[m:].reshape(g_w.shape)
    return GradientResponse(g_a=g_a, g_w=g_w, noise_sigma=float(noise_sigma), seed=seed)


def init_two_layer(
    m: int,
    d: int,
    seed: int,
    act: Activation | str,
    bias: float = 0.0,
) -> ModelParams:
    """Random two-layer victim: a_j = 1/m, rows of W i.i.d. N(0, I_d)."""
    if m < 1 or d < 1:
        raise ContractViolationError("width and dimension must be positive")
    if isinstance(act, str):
        act = make_activation(act)
    w = rng.gaussians(seed, rng.PURPOSE_WEIGHTS, (m, d))
    a = np.full(m, 1.0 / m)
    return ModelParams(a=a, weights=(w,), activations=(act,), bias=float(bias))


def leaky_pair_scale(depth: int) -> float:
    """Effective input factor of the designed all-LeakyReLU stack.

    The paired slots pass through depth-1 activations before the final
    contraction, so the pairing returns (1 + slope^(depth-1)) * z . x.
    For ReLU the leak vanishes and the factor is exactly 1.
    """
    return 1.0 + 0.01 ** (depth - 1)


def init_deep_design(
    depth: int,
    m: int,
    d: int,
    seed: int,
    acts: Activation | str | list,
    bias: float = 0.0,
) -> ModelParams:
    """Designed deep victim whose gradient reduces to a two-layer one.

    ``depth`` counts weight matrices (>= 3).  For ReLU/LeakyReLU first
    layers the construction is: W1 stacks [I; -I; 0] (needs m >= 2d),
    intermediates pass the first 2d coordinates through, and the last
    matrix pairs seeded gaussian rows [z_j, -z_j, 0] so that
    w_j . h(x) = c * z_j . x with c = leaky_pair_scale(depth) (c = 1 for
    ReLU).  For bijective kinds (tanh/sigmoid) the layers are identity
    stacks, which preserve the input but not its norm; the inversion
    pipeline does not cover that path.
    """
    if depth < 3:
        raise ContractViolationError("designed deep networks need depth >= 3")
    if isinstance(acts, (Activation, str)):
        kinds = [acts] * depth
    else:
        kinds = list(acts)
        if len(kinds) != depth:
            raise ContractViolationError("need one activation per weight matrix")
    acts_ = tuple(make_activation(k) if isinstance(k, str) else k for k in kinds)
    first_kind = acts_[0].kind

    if first_kind in ("relu", "leaky_relu"):
        if m < 2 * d:
            raise InvalidDesignError(
                f"pairing design needs m >= 2d (got m={m}, d={d})"
            )
        w1 = np.zeros((m, d))
        w1[:d] = np.eye(d)
        w1[d:2 * d] = -np.eye(d)
        mids = []
        for _ in range(depth - 2):
            wk = np.zeros((m, m))
            wk[:2 * d, :2 * d] = np.eye(2 * d)
            mids.append(wk)
        z = rng.gaussians(seed, rng.PURPOSE_WEIGHTS, (m, d))
        wl = np.zeros((m, m))
        wl[:, :d] = z
        wl[:, d:2 * d] = -z
        scale = 1.0 if first_kind == "relu" else leaky_pair_scale(depth)
        design = DeepDesign(first_kind=first_kind, depth=depth, input_scale=scale)
        weights = (w1, *mids, wl)
    elif first_kind in ("tanh", "sigmoid"):
        if m < d:
            raise InvalidDesignError("identity stacking needs m >= d")
        w1 = np.zeros((m, d))
        w1[:d] = np.eye(d)
        mids = []
        for _ in range(depth - 2):
            wk = np.zeros((m, m))
            wk[:d, :d] = np.eye(d)
            mids.append(wk)
        z = rng.gaussians(seed, rng.PURPOSE_WEIGHTS, (m, d))
        wl = np.zeros((m, m))
        wl[:, :d] = z
        design = DeepDesign(first_kind=first_kind, depth=depth, input_scale=float("nan"))
        weights = (w1, *mids, wl)
    else:
        raise InvalidDesignError(
            f"no designed initialization for first activation '{first_kind}'"
        )
    a = np.full(m, 1.0 / m)
    return ModelParams(a=a, weights=weights, activations=acts_, bias=float(bias), design=design)


def designed_z_rows(params: ModelParams) -> np.ndarray:
    """Extract the z matrix from a pairing-designed deep victim.

    Validates the designed structure of every layer; raises
    InvalidDesignError when the parameters were not built by the design.
    """
    if params.two_layer:
        raise InvalidDesignError("two-layer parameters carry no designed structure")
    d = params.input_dim
    m = params.width
    w1 = params.weights[0]
    expected = np.zeros((m, d))
    expected[:d] = np.eye(d)
    expected[d:2 * d] = -np.eye(d)
    if w1.shape != expected.shape or not np.array_equal(w1, expected):
        raise InvalidDesignError("first layer is not the [I; -I; 0] stack")
    for wk in params.weights[1:-1]:
        ref = np.zeros((m, m))
        ref[:2 * d, :2 * d] = np.eye(2 * d)
        if not np.array_equal(wk, ref):
            raise InvalidDesignError("intermediate layer is not the pass-through stack")
    wl = params.weights[-1]
    z = wl[:, :d]
    if not (np.array_equal(wl[:, d:2 * d], -z) and np.all(wl[:, 2 * d:] == 0.0)):
        raise InvalidDesignError("last hidden layer is not the [z, -z, 0] pairing")
    return z
