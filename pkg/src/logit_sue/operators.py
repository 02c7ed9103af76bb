"""Matrix-free Jacobian factors of the logit mapping and spectral analysis.

``S`` is the block-diagonal logit covariance ``d*theta*(diag(p) - p p^T)``,
``J = D^T diag(t') D`` is the path-cost Jacobian and ``K = -S J`` is the
reduced Jacobian of the logit mapping.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .equilibrium import FlowState, SueProblem, broadcast, segment_sum
from .pathset import IncidenceMatrix

DENSE_LIMIT = 20_000


class StaleOperatorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SOperator:
    p: np.ndarray
    path_demand: np.ndarray
    theta: float
    od_offsets: np.ndarray

    @classmethod
    def from_state(cls, state: FlowState) -> "SOperator":
        pr = state.problem
        return cls(state.p, pr.path_demand, pr.theta, pr.od_offsets)

    @property
    def n(self) -> int:
        return len(self.p)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``S @ v`` for a vector or an (n, b) block of vectors."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} entries, got {v.shape[0]}")
        col = (lambda x: x[:, None]) if v.ndim == 2 else (lambda x: x)
        pv = col(self.p) * v
        mean = broadcast(segment_sum(pv, self.od_offsets), self.od_offsets)
        return col(self.path_demand * self.theta) * (pv - col(self.p) * mean)

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))


@dataclass(frozen=True, eq=False)
class JOperator:
    incidence: IncidenceMatrix
    t_prime: np.ndarray
    source: FlowState | None = None
    version: int = 0

    @classmethod
    def from_state(cls, state: FlowState) -> "JOperator":
        return cls(state.problem.incidence, state.t_prime, state, state.version)

    @property
    def n(self) -> int:
        return self.incidence.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.source is not None and self.source.version != self.version:
            raise StaleOperatorError("marginal link costs are stale: the flow state changed after "
                                     "this operator was built")
        v = np.asarray(v, dtype=float)
        tp = self.t_prime[:, None] if v.ndim == 2 else self.t_prime
        return self.incidence.rmatvec(tp * self.incidence.matvec(v))

    def dense(self) -> np.ndarray:
        D = self.incidence.toarray()
        return D.T @ (self.t_prime[:, None] * D)


def apply_S(op: SOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


def apply_J(op: JOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


def apply_K(s: SOperator, j: JOperator, v: np.ndarray) -> np.ndarray:
    return -s.apply(j.apply(v))


def apply_I_minus_K(s: SOperator, j: JOperator, v: np.ndarray) -> np.ndarray:
    return v + s.apply(j.apply(v))


def apply_H_h(p: np.ndarray, od_offsets: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Derivative of ``h -> d(h) * p`` with respect to ``h`` at fixed ``p``,
    where ``d(h)`` are the per-OD sums of ``h``: row ``i`` is ``p_i`` on the
    columns of its own OD block."""
    return p * broadcast(segment_sum(v, od_offsets), od_offsets)


def operators_at(state: FlowState) -> tuple[SOperator, JOperator]:
    return SOperator.from_state(state), JOperator.from_state(state)


def dense_K(s: SOperator, j: JOperator, limit: int = DENSE_LIMIT, block: int = 512) -> np.ndarray:
    n = s.n
    if n > limit:
        raise ValueError(f"{n} paths exceeds the dense limit of {limit}")
    K = np.empty((n, n))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        E = np.zeros((n, hi - lo))
        E[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
        K[:, lo:hi] = apply_K(s, j, E)
    return K


@dataclass
class SpectralReport:
    eigenvalues_real: list[float]
    eigenvalues_imag: list[float]
    lambda_min: float
    lambda_max: float
    s_g: float
    s_conservative: float
    theta: float
    max_demand: float
    complex_flag: bool = False
    j_norm: float | None = None
    j_norm_bound: float | None = None
    method: str = "dense"

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array(self.eigenvalues_real) + 1j * np.array(self.eigenvalues_imag)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _report(eig, theta, max_demand, j_norm_bound, method, j_norm=None) -> SpectralReport:
    eig = np.asarray(eig, dtype=complex)
    re = eig.real
    lam_min = float(re.min()) if len(re) else 0.0
    lam_max = float(re.max()) if len(re) else 0.0
    scale = float(np.abs(eig).max()) if len(eig) else 0.0
    bound = j_norm_bound if j_norm_bound is not None else j_norm
    if bound is None:
        raise ValueError("need a bound on the norm of J")
    return SpectralReport(
        eigenvalues_real=re.tolist(),
        eigenvalues_imag=eig.imag.tolist(),
        lambda_min=lam_min,
        lambda_max=lam_max,
        s_g=2.0 / (2.0 - lam_min),
        s_conservative=2.0 / (2.0 + theta * max_demand * bound),
        theta=theta,
        max_demand=max_demand,
        complex_flag=bool(np.any(np.abs(eig.imag) > 1e-6 * max(scale, 1.0))),
        j_norm=j_norm,
        j_norm_bound=j_norm_bound,
        method=method,
    )


def spectral_analysis(K: np.ndarray, theta: float, max_demand: float,
                      j_norm_bound: float, j_norm: float | None = None) -> SpectralReport:
    """Eigenvalues of a dense ``K`` from the general (non-symmetric) solver."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    try:
        eig = np.linalg.eigvals(K)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed: {exc}") from exc
    return _report(eig, theta, max_demand, j_norm_bound, "dense", j_norm)


def _link_space_matrix(s: SOperator, j: JOperator) -> np.ndarray:
    """Symmetric |links| x |links| matrix ``-R D S D^T R`` with ``R = diag(sqrt(t'))``.

    ``K = -(S D^T R)(R D)`` and swapping the two factors keeps every nonzero
    eigenvalue, so this small matrix carries the whole nonzero spectrum of K.
    """
    import scipy.sparse as sp

    D = j.incidence.csr
    w = s.path_demand * s.theta
    DSD = (D @ sp.diags(w * s.p) @ D.T).toarray()
    n_od = len(s.od_offsets) - 1
    od = np.repeat(np.arange(n_od), np.diff(s.od_offsets))
    P = sp.csc_matrix((np.sqrt(w) * s.p, (np.arange(s.n), od)), shape=(s.n, n_od))
    U = (D @ P).toarray()
    DSD -= U @ U.T
    r = np.sqrt(np.maximum(j.t_prime, 0.0))
    return -(r[:, None] * DSD * r[None, :])


def link_space_eigenvalues(s: SOperator, j: JOperator) -> np.ndarray:
    """All n eigenvalues of K via the link-space matrix (requires t' >= 0)."""
    if np.any(j.t_prime < 0):
        raise ValueError("link-space spectrum needs non-negative marginal link costs")
    M = _link_space_matrix(s, j)
    lam = np.linalg.eigvalsh((M + M.T) / 2)
    n, m = s.n, len(lam)
    if n >= m:
        return np.concatenate([lam, np.zeros(n - m)])
    return np.sort(lam[np.argsort(np.abs(lam))[m - n:]])


def spectral_analysis_link_space(s: SOperator, j: JOperator, theta: float, max_demand: float,
                                 j_norm_bound: float) -> SpectralReport:
    return _report(link_space_eigenvalues(s, j), theta, max_demand, j_norm_bound, "link-space",
                   j_norm_exact(j))


def j_norm_exact(j: JOperator) -> float:
    """Spectral norm of J, from the |links| x |links| matrix R D D^T R."""
    D = j.incidence.csr
    r = np.sqrt(np.maximum(j.t_prime, 0.0))
    G = (D @ D.T).toarray()
    return float(np.linalg.eigvalsh(r[:, None] * G * r[None, :]).max(initial=0.0))


def power_norm(apply, apply_t, n: int, iters: int = 500, tol: float = 1e-12, seed: int = 0) -> float:
    """Spectral norm of a linear map by power iteration on ``A^T A``."""
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = apply_t(apply(v))
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - sigma) <= tol * new:
            return float(new)
        sigma = new
    return float(sigma)


def incidence_norm(D: IncidenceMatrix) -> float:
    return power_norm(D.matvec, D.rmatvec, D.shape[1])


def s_norm(s: SOperator) -> float:
    """Spectral norm of the symmetric S by power iteration."""
    return power_norm(s.apply, s.apply, s.n)


def j_norm_bound(problem: SueProblem, D_norm: float | None = None) -> float:
    """``||D||^2 * max t'(a_max)`` with every link loaded by the total demand."""
    D_norm = incidence_norm(problem.incidence) if D_norm is None else D_norm
    a_max = np.full(problem.network.link_count, problem.total_demand)
    return D_norm ** 2 * float(problem.network.link_cost_derivatives(a_max).max(initial=0.0))


def finite_difference_K_check(state: FlowState, v: np.ndarray, eps: float = 1e-5) -> float:
    """Max-norm gap between a central difference of the logit mapping along
    ``v`` and the operator product ``K v``."""
    pr = state.problem
    h = state.h
    plus, minus = h + eps * v, h - eps * v
    if np.any(plus < 0) or np.any(minus < 0):
        raise ValueError("perturbation leaves the non-negative orthant; reduce eps")
    fd = (pr.logit_mapping(plus) - pr.logit_mapping(minus)) / (2 * eps)
    s, j = operators_at(state)
    return float(np.max(np.abs(fd - apply_K(s, j, v)), initial=0.0))
