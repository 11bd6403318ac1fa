import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy.linalg import block_diag
from core.errors import (ZeroBasis, NonPositivePhi, GridTooSmall, SingularBlockForMixedModel,
                         QBasisNotFound, GridMismatch, UsageError)
from core.linalg_utils import pseudoinverse, solve_spd

KINDS = ('ridge', 'second_difference', 'decomposition')

@dataclass(frozen=True)
class PenaltySpec:
    kind: str
    Q: Optional[np.ndarray] = None
    phi_a: float = 1.0
    phi_b: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"Unknown penalty kind '{self.kind}', use one of {KINDS}")
        if self.kind == 'decomposition':
            if self.Q is None:
                raise UsageError("A decomposition penalty needs a Q basis")
            Q = np.array(self.Q, dtype=float)
            object.__setattr__(self, 'Q', Q.reshape(-1, 1) if Q.ndim == 1 else Q)
        object.__setattr__(self, 'phi_a', float(self.phi_a))
        object.__setattr__(self, 'phi_b', float(self.phi_b))

    @property
    def label(self) -> str:
        if self.kind == 'decomposition':
            return f"decomposition(phi_a={self.phi_a:g}, phi_b={self.phi_b:g}, J={self.Q.shape[1]})"
        return self.kind


@dataclass(frozen=True)
class PenaltyMatrix:
    L: np.ndarray
    null_dim: int
    kind: str

    @property
    def m(self) -> int:
        return self.L.shape[0]

    @property
    def p(self) -> int:
        return self.L.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        g = self.L.T @ self.L
        return (g + g.T) / 2

    @cached_property
    def gram_logdet(self) -> float:
        sign, logdet = np.linalg.slogdet(self.gram)
        if sign <= 0:
            raise SingularBlockForMixedModel(f"{self.kind} penalty has a null space of dimension {self.null_dim}")
        return float(logdet)

    @cached_property
    def gram_inverse(self) -> np.ndarray:
        if self.null_dim > 0:
            raise SingularBlockForMixedModel(f"{self.kind} penalty has a null space of dimension {self.null_dim}")
        return solve_spd(self.gram, np.eye(self.p))

# ------------
# single-component operators
# ------------
def projection_from_basis(Q: np.ndarray) -> np.ndarray:
    """P_Q = Q Q^+ with numerically zero columns dropped"""
    Q = np.array(Q, dtype=float)
    Q = Q.reshape(-1, 1) if Q.ndim == 1 else Q
    norms = np.linalg.norm(Q, axis=0)
    if norms.size == 0 or norms.max() == 0:
        raise ZeroBasis("Every column of Q is zero")
    keep = norms > Q.shape[0] * np.finfo(float).eps * norms.max()
    Q = Q[:, keep]
    P = Q @ pseudoinverse(Q)
    return (P + P.T) / 2

def make_ridge(p: int) -> PenaltyMatrix:
    return PenaltyMatrix(L=np.eye(p), null_dim=0, kind='ridge')

def make_second_difference(p: int) -> PenaltyMatrix:
    if p < 3:
        raise GridTooSmall(f"Second-difference penalty needs p >= 3, got {p}")
    return PenaltyMatrix(L=np.diff(np.eye(p), n=2, axis=0), null_dim=2, kind='second_difference')

def make_decomposition(spec: PenaltySpec) -> PenaltyMatrix:
    """L_Q = phi_b P_Q + phi_a (I - P_Q)"""
    if spec.kind != 'decomposition':
        raise UsageError(f"Expected a decomposition spec, got {spec.kind}")
    if not (spec.phi_a > 0 and spec.phi_b > 0):
        raise NonPositivePhi(f"phi_a and phi_b must be positive, got {spec.phi_a}, {spec.phi_b}")
    p = spec.Q.shape[0]
    if spec.phi_a == spec.phi_b:
        # P + (I - P) collapses to the identity
        return PenaltyMatrix(L=spec.phi_a * np.eye(p), null_dim=0, kind='decomposition')
    P = projection_from_basis(spec.Q)
    L = spec.phi_b * P + spec.phi_a * (np.eye(p) - P)
    return PenaltyMatrix(L=(L + L.T) / 2, null_dim=0, kind='decomposition')

def make_penalty(spec: PenaltySpec, p: int) -> PenaltyMatrix:
    if spec.kind == 'ridge':
        return make_ridge(p)
    if spec.kind == 'second_difference':
        return make_second_difference(p)
    if spec.Q.shape[0] != p:
        raise GridMismatch(f"Q basis has {spec.Q.shape[0]} rows, grid has p={p}")
    return make_decomposition(spec)

# ------------
# block penalty
# ------------
@dataclass(frozen=True)
class BlockPenalty:
    blocks: Tuple[Tuple[float, PenaltyMatrix], ...]

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([lam for lam, _ in self.blocks])

    @property
    def p_tilde(self) -> int:
        return sum(pm.p for _, pm in self.blocks)

    @property
    def invertible(self) -> bool:
        return all(pm.null_dim == 0 and lam > 0 for lam, pm in self.blocks)

    @cached_property
    def assembled(self) -> np.ndarray:
        return block_diag(*[lam * pm.L for lam, pm in self.blocks])

    @cached_property
    def gram(self) -> np.ndarray:
        return block_diag(*[lam ** 2 * pm.gram for lam, pm in self.blocks])

    @cached_property
    def gram_inverse(self) -> np.ndarray:
        if not self.invertible:
            raise SingularBlockForMixedModel("(L'L)^-1 requested but a penalty block is rank deficient")
        return block_diag(*[pm.gram_inverse / lam ** 2 for lam, pm in self.blocks])

    @property
    def gram_logdet(self) -> float:
        if not self.invertible:
            raise SingularBlockForMixedModel("log|L'L| requested but a penalty block is rank deficient")
        return float(sum(2 * pm.p * np.log(lam) + pm.gram_logdet for lam, pm in self.blocks))

    def with_lambdas(self, lambdas: Sequence[float]) -> 'BlockPenalty':
        lambdas = [float(lam) for lam in lambdas]
        if len(lambdas) != len(self.blocks):
            raise UsageError(f"Expected {len(self.blocks)} lambdas, got {len(lambdas)}")
        if min(lambdas) <= 0:
            raise UsageError(f"Tuning values must be positive, got {lambdas}")
        return BlockPenalty(tuple((lam, pm) for lam, (_, pm) in zip(lambdas, self.blocks)))

def assemble_block(specs: List[PenaltySpec], lambdas: Sequence[float], p: int) -> BlockPenalty:
    if len(specs) != len(lambdas):
        raise UsageError(f"{len(specs)} penalty specs but {len(lambdas)} tuning values")
    unit = BlockPenalty(tuple((1.0, make_penalty(spec, p)) for spec in specs))
    return unit.with_lambdas(lambdas)

def load_q_basis(path: str, p: int) -> np.ndarray:
    """Q basis CSV: p rows x J columns, no header"""
    if not path or not os.path.exists(path):
        raise QBasisNotFound(f"Q basis file not found: {path}")
    Q = pd.read_csv(path, header=None, float_precision='round_trip').to_numpy(dtype=float)
    if Q.shape[0] != p:
        raise GridMismatch(f"Q basis has {Q.shape[0]} rows, grid has p={p}")
    return Q
