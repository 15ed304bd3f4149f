"""Kernel functions, Gram machinery, and kernel-vector regression.

Training inputs are stored column-wise: Z is M x S with one column per
scenario.  Gram matrices carry a diagonal jitter (default 1e-3) to avoid
rank deficiency; the jitter belongs to the training matrices only, plain
kernel evaluations never include it.  All operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import eigh

from . import conic

KERNEL_KINDS = ("linear", "polynomial", "gaussian")
DEFAULT_JITTER = 1e-3


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyper-parameters.

    gamma is the Gaussian width or the polynomial offset, beta the
    polynomial degree, jitter the diagonal added to Gram matrices.
    """

    kind: str = "linear"
    gamma: float = 1.0
    beta: int = 2
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("polynomial", "gaussian") and not self.gamma > 0:
            raise ValueError("gamma must be positive for this kernel")
        if self.kind == "polynomial" and int(self.beta) < 1:
            raise ValueError("polynomial degree beta must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": float(self.gamma),
                "beta": int(self.beta), "jitter": float(self.jitter)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(kind=d["kind"], gamma=d["gamma"], beta=int(d["beta"]),
                   jitter=d["jitter"])


def kernel_eval(spec: KernelSpec, z: np.ndarray, z_prime: np.ndarray) -> float:
    """K(z, z'): no jitter term."""
    z = np.asarray(z, dtype=float).ravel()
    z_prime = np.asarray(z_prime, dtype=float).ravel()
    if z.shape != z_prime.shape:
        raise ValueError(f"kernel input dimensions differ: {z.shape} vs {z_prime.shape}")
    if spec.kind == "linear":
        return float(z @ z_prime)
    if spec.kind == "polynomial":
        return float((z @ z_prime + spec.gamma) ** spec.beta)
    d2 = float(np.sum((z - z_prime) ** 2))
    return float(np.exp(-d2 / spec.gamma))


def cross_gram(spec: KernelSpec, Z: np.ndarray, Zq: np.ndarray) -> np.ndarray:
    """Pairwise kernel matrix [K(zq_t, z_s)] of shape (T, S), no jitter."""
    Z = np.asarray(Z, dtype=float)
    Zq = np.asarray(Zq, dtype=float)
    if Z.shape[0] != Zq.shape[0]:
        raise ValueError("cross_gram: input dimension mismatch")
    G = Zq.T @ Z
    if spec.kind == "linear":
        return G
    if spec.kind == "polynomial":
        return (G + spec.gamma) ** spec.beta
    d2 = (np.sum(Zq**2, axis=0)[:, None]
          + np.sum(Z**2, axis=0)[None, :] - 2.0 * G)
    return np.exp(-np.maximum(d2, 0.0) / spec.gamma)


def gram(spec: KernelSpec, Z: np.ndarray) -> np.ndarray:
    """S x S jittered Gram matrix over scenario columns of Z (M x S)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise ValueError("gram expects an M x S matrix with S >= 1")
    K = cross_gram(spec, Z, Z)
    K = 0.5 * (K + K.T)  # kill round-off asymmetry
    return K + spec.jitter * np.eye(Z.shape[1])


def gram_sqrt(K: np.ndarray) -> np.ndarray:
    """Factor L with L'L = K, via symmetric eigendecomposition.

    The eigen route stays usable for singular PSD inputs (for example a
    jitter-free linear Gram); genuinely indefinite input raises.
    """
    K = np.asarray(K, dtype=float)
    w, V = eigh(0.5 * (K + K.T))
    scale = max(abs(w[0]), abs(w[-1]), 1.0)
    if w[0] < -1e-10 * scale:
        raise np.linalg.LinAlgError(
            f"gram_sqrt: matrix is indefinite (min eigenvalue {w[0]:.3e})"
        )
    w = np.maximum(w, 0.0)
    return np.sqrt(w)[:, None] * V.T


@dataclass
class GramSet:
    """Per-inverter jittered Gram matrices and their square roots."""

    K: dict[int, np.ndarray]
    K_sqrt: dict[int, np.ndarray]
    sqrt_method: str = "eigh"

    @classmethod
    def build(cls, specs: dict[int, KernelSpec], inputs: dict[int, np.ndarray]) -> "GramSet":
        K = {}
        Ks = {}
        for bus, Z in inputs.items():
            K[bus] = gram(specs[bus], Z)
            Ks[bus] = gram_sqrt(K[bus])
        return cls(K=K, K_sqrt=Ks)


class RidgeFit(NamedTuple):
    a: np.ndarray
    b: float
    fitted: np.ndarray


def kernel_ridge(spec: KernelSpec, Z: np.ndarray, y: np.ndarray, mu: float,
                 intercept: bool = True, tol: float = conic.DEFAULT_TOL) -> RidgeFit:
    """Kernel-vector regression with a non-squared RKHS-norm penalty.

    Minimizes (1/S) ||y - K a - b 1||^2 + mu ||K^{1/2} a||_2 over (a, b),
    with K the jittered Gram, via the conic solver.  Note the penalty is
    the plain norm, not its square.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    S = Z.shape[1]
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if S < 2 or len(y) != S:
        raise ValueError("kernel_ridge needs S >= 2 targets matching Z columns")
    K = gram(spec, Z)

    nb = 1 if intercept else 0
    n = S + nb + 1 + (1 if mu > 0 else 0)  # a, [b], t, [gamma]
    i_t = S + nb
    i_g = i_t + 1
    c = np.zeros(n)
    c[i_t] = 1.0 / S
    if mu > 0:
        c[i_g] = mu

    rows = []
    bvec = []
    # rotated-cone epigraph: ||[2(Ka + b1 - y); t - 1]|| <= t + 1
    r0 = np.zeros(n)
    r0[i_t] = -1.0
    rows.append(r0)
    bvec.append(1.0)
    mid = np.zeros((S, n))
    mid[:, :S] = -2.0 * K
    if intercept:
        mid[:, S] = -2.0
    rows.extend(mid)
    bvec.extend(-2.0 * y)
    rl = np.zeros(n)
    rl[i_t] = -1.0
    rows.append(rl)
    bvec.append(-1.0)
    cones = [("soc", S + 2)]

    if mu > 0:
        Ks = gram_sqrt(K)
        rg = np.zeros(n)
        rg[i_g] = -1.0
        rows.append(rg)
        bvec.append(0.0)
        nrm = np.zeros((S, n))
        nrm[:, :S] = -Ks
        rows.extend(nrm)
        bvec.extend(np.zeros(S))
        cones.append(("soc", S + 1))

    prog = conic.ConeProgram(c=c, A=np.vstack(rows), b=np.array(bvec), cones=cones)
    sol = conic.solve(prog, tol=tol)
    if not sol.optimal:
        raise conic.SolverFailure("kernel_ridge solve failed", sol)
    a = sol.x[:S]
    b = float(sol.x[S]) if intercept else 0.0
    return RidgeFit(a=a, b=b, fitted=K @ a + b)
