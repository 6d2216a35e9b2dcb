"""Reconstruction of training batches from a single gradient query."""

from .activations import Activation, activation_moment, make_activation
from .attack import (
    AttackConfig,
    MomentEstimates,
    ReconstructionResult,
    build_P_operator,
    decompose_projected,
    estimate_batch_size,
    estimate_moments,
    estimate_projected_tensor,
    estimate_projected_tensor_alt,
    estimate_subspace,
    recover_signs_labels,
    run_attack_deep,
    run_attack_two_layer,
)
from .errors import (
    AmbiguousRecoveryError,
    AttackStageError,
    BudgetExceededError,
    ContractViolationError,
    DataError,
    DataFormatError,
    DegenerateInputError,
    GenerationError,
    GradinvError,
    InvalidDesignError,
    NumericalError,
    OracleInapplicableError,
    UnsupportedError,
)
from .tensors import (
    EigenDecomposition,
    LinearOperator,
    SymMatrix,
    SymTensor3,
    hermite2_apply,
    hermite3,
    hermite4_contract,
    joint_diagonalize,
    orthonormalize,
    sym_eig,
)
from .victim import (
    Batch,
    GradientResponse,
    ModelParams,
    QueryBudget,
    forward,
    gradient_query,
    init_deep_design,
    init_two_layer,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
