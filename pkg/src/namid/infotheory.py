"""Exact entropies and mutual information on small discrete tables (nats).

A :class:`DiscreteJoint` holds ``p(x, n, z)`` over integer alphabets with
the composed variable ``xt = x + n``. Three-way co-information follows the
convention ``I(X;N;Z) = I(X;Z) - I(X;Z|N)``, under which the decomposition

    I(Xt;Z) = I(X;Z) + I(N;Z) - I(X;N;Z) + H(Z|X,N) - H(Z|Xt)

is an identity for every joint, not only deterministic ``Z = h(Xt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from namid.errors import InputError

MASS_TOL = 1e-12
MAX_ALPHABET = 16


def _check_distribution(p: np.ndarray, what: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise InputError(f"{what} is empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError(f"{what} has negative or non-finite entries")
    total = p.sum()
    if abs(total - 1.0) > MASS_TOL:
        raise InputError(f"{what} mass is {total!r}, not 1 within {MASS_TOL}")
    return p


def _plogp_sum(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy(p) -> float:
    """Shannon entropy ``-sum p log p`` with ``0 log 0 = 0``."""
    return _plogp_sum(_check_distribution(p).ravel())


def mutual_information(joint) -> float:
    """``sum p(a,b) log[p(a,b) / (p(a) p(b))]`` over a 2-D table."""
    p = _check_distribution(joint, "joint")
    if p.ndim != 2:
        raise InputError(f"mutual_information needs a 2-D joint, got {p.ndim}-D")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = p[mask] / (pa * pb)[mask]
    return float((p[mask] * np.log(ratio)).sum())


def conditional_mutual_information(joint3) -> float:
    """``I(A;C|B)`` for a table indexed ``[a, b, c]``, summed slice by slice."""
    p = _check_distribution(joint3, "joint")
    total = 0.0
    for b in range(p.shape[1]):
        pb = p[:, b, :].sum()
        if pb > 0:
            total += pb * mutual_information(p[:, b, :] / p[:, b, :].sum())
    return total


def interaction_information(joint3) -> float:
    """Co-information ``I(A;C) - I(A;C|B)`` for a table indexed ``[a, b, c]``.

    Symmetric in its three variables; may be negative (XOR gives ``-ln 2``).
    """
    p = _check_distribution(joint3, "joint")
    if p.ndim != 3:
        raise InputError(f"interaction_information needs a 3-D joint, got {p.ndim}-D")
    return mutual_information(p.sum(axis=1)) - conditional_mutual_information(p)


@dataclass
class DiscreteJoint:
    """``p(x, n, z)``; ``xt = x + n`` over alphabets ``0..|X|-1`` and ``0..|N|-1``."""

    table: np.ndarray

    def __post_init__(self):
        self.table = _check_distribution(self.table, "joint")
        if self.table.ndim != 3:
            raise InputError(f"joint must be indexed [x, n, z], got {self.table.ndim}-D")
        if max(self.table.shape) > MAX_ALPHABET:
            raise InputError(f"alphabets are capped at {MAX_ALPHABET}, got {self.table.shape}")

    @classmethod
    def from_channel(cls, p_xn, channel) -> "DiscreteJoint":
        """Build ``p(x,n) * p(z | xt = x + n)``; ``channel`` is indexed ``[xt, z]``."""
        p_xn = _check_distribution(p_xn, "p(x, n)")
        channel = np.asarray(channel, dtype=np.float64)
        if p_xn.ndim != 2 or channel.ndim != 2:
            raise InputError("p(x, n) and channel must both be 2-D")
        nx, nn = p_xn.shape
        needed = nx + nn - 1
        if channel.shape[0] < needed:
            raise InputError(f"channel defines {channel.shape[0]} values of x+n but the support needs {needed}")
        if np.any(channel < 0) or np.any(np.abs(channel.sum(axis=1) - 1.0) > MASS_TOL):
            raise InputError("channel rows must be probability vectors")
        xt = np.add.outer(np.arange(nx), np.arange(nn))
        return cls(p_xn[:, :, None] * channel[xt])

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.table.shape

    def p_xt_z(self) -> np.ndarray:
        nx, nn, nz = self.table.shape
        out = np.zeros((nx + nn - 1, nz))
        for x in range(nx):
            for n in range(nn):
                out[x + n] += self.table[x, n]
        return out

    def p_x_z(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def p_n_z(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def p_x_n(self) -> np.ndarray:
        return self.table.sum(axis=2)

    def p_z(self) -> np.ndarray:
        return self.table.sum(axis=(0, 1))


@dataclass
class InfoReport:
    H_Z: float
    H_Z_given_X: float
    H_Z_given_N: float
    H_Z_given_XN: float
    H_Z_given_Xt: float
    I_X_Z: float
    I_N_Z: float
    I_Xt_Z: float
    I_X_N_Z: float
    I_X_N: float

    FIELDS = (
        "H_Z", "H_Z_given_X", "H_Z_given_N", "H_Z_given_XN", "H_Z_given_Xt",
        "I_X_Z", "I_N_Z", "I_Xt_Z", "I_X_N_Z", "I_X_N",
    )

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _cond_entropy(joint_az: np.ndarray) -> float:
    """``H(Z|A)`` for a table whose last axis is ``Z``."""
    pa = joint_az.reshape(-1, joint_az.shape[-1])
    return _plogp_sum(pa.ravel()) - _plogp_sum(pa.sum(axis=1))


def info_report(joint: DiscreteJoint) -> InfoReport:
    p = joint.table
    return InfoReport(
        H_Z=entropy(joint.p_z()),
        H_Z_given_X=_cond_entropy(joint.p_x_z()),
        H_Z_given_N=_cond_entropy(joint.p_n_z()),
        H_Z_given_XN=_cond_entropy(p),
        H_Z_given_Xt=_cond_entropy(joint.p_xt_z()),
        I_X_Z=mutual_information(joint.p_x_z()),
        I_N_Z=mutual_information(joint.p_n_z()),
        I_Xt_Z=mutual_information(joint.p_xt_z()),
        I_X_N_Z=interaction_information(p),
        I_X_N=mutual_information(joint.p_x_n()),
    )


def theorem1_rhs(r: InfoReport) -> float:
    return r.I_X_Z + r.I_N_Z - r.I_X_N_Z + r.H_Z_given_XN - r.H_Z_given_Xt


def verify_theorem1(joint: DiscreteJoint) -> float:
    """Absolute residual of the four-variable decomposition of ``I(Xt;Z)``."""
    r = info_report(joint)
    return abs(r.I_Xt_Z - theorem1_rhs(r))


def proof_chain_residuals(joint: DiscreteJoint) -> dict[str, float]:
    """Residual of each intermediate step of the decomposition's derivation.

    Keys name the step: the three entropy forms of pairwise MI, the sum of
    the two pairwise MIs, the conditional expansion of ``H(Z|X) + H(Z|N)``,
    the combined form, and the final identity.
    """
    p = joint.table
    r = info_report(joint)
    i_zn_given_x = conditional_mutual_information(p.transpose(1, 0, 2))
    i_xz_given_n = conditional_mutual_information(p)
    lhs_pair = r.I_X_Z + r.I_N_Z
    expansion = r.H_Z_given_X + r.H_Z_given_N
    return {
        "mi_xt_entropy_form": abs(r.I_Xt_Z - (r.H_Z - r.H_Z_given_Xt)),
        "mi_x_entropy_form": abs(r.I_X_Z - (r.H_Z - r.H_Z_given_X)),
        "mi_n_entropy_form": abs(r.I_N_Z - (r.H_Z - r.H_Z_given_N)),
        "pair_sum": abs(lhs_pair - (2 * r.H_Z - expansion)),
        "conditional_split": abs(expansion - (2 * r.H_Z_given_XN + i_zn_given_x + i_xz_given_n)),
        "regroup": abs(
            (r.H_Z_given_XN + i_zn_given_x + i_xz_given_n + r.I_X_N_Z) - r.H_Z
        ),
        "combined": abs(lhs_pair - (r.I_Xt_Z + r.H_Z_given_Xt - r.H_Z_given_XN + r.I_X_N_Z)),
        "identity": abs(r.I_Xt_Z - theorem1_rhs(r)),
    }


def corollary1_residuals(joint: DiscreteJoint) -> tuple[float, float, float]:
    """``(|I(X;N;Z)|, |H(Z|X,N) - H(Z|Xt)|, |I(Xt;Z) - I(X;Z) - I(N;Z)|)``.

    The first two are the magnitudes the additive approximation neglects;
    the third is the resulting approximation error.
    """
    r = info_report(joint)
    return (
        abs(r.I_X_N_Z),
        abs(r.H_Z_given_XN - r.H_Z_given_Xt),
        abs(r.I_Xt_Z - r.I_X_Z - r.I_N_Z),
    )


def random_joint(
    rng: np.random.Generator,
    max_alphabet: int = 4,
    independent: bool = False,
    deterministic: bool = False,
) -> DiscreteJoint:
    """Random ``p(x,n)`` with a random channel ``z | x+n``."""
    nx, nn, nz = (int(v) for v in rng.integers(2, max_alphabet + 1, size=3))
    if independent:
        p_xn = np.outer(rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(nn)))
    else:
        p_xn = rng.dirichlet(np.ones(nx * nn)).reshape(nx, nn)
    p_xn = p_xn / p_xn.sum()
    if deterministic:
        channel = np.eye(nz)[rng.integers(0, nz, size=nx + nn - 1)]
    else:
        channel = rng.dirichlet(np.ones(nz), size=nx + nn - 1)
        channel = channel / channel.sum(axis=1, keepdims=True)
    return DiscreteJoint.from_channel(p_xn, channel)


def xor_joint() -> DiscreteJoint:
    """X, N independent fair bits and Z = X xor N (a function of X + N)."""
    table = np.zeros((2, 2, 2))
    for x in range(2):
        for n in range(2):
            table[x, n, x ^ n] = 0.25
    return DiscreteJoint(table)


def copy_joint() -> DiscreteJoint:
    """X = N = Z, one fair bit."""
    table = np.zeros((2, 2, 2))
    table[0, 0, 0] = table[1, 1, 1] = 0.5
    return DiscreteJoint(table)


def gaussian_mi(rho: float) -> float:
    """Closed-form MI of a bivariate Gaussian with correlation ``rho``."""
    if abs(rho) >= 1:
        raise InputError(f"|rho| must be < 1, got {rho}")
    return -0.5 * math.log1p(-rho * rho)


def sweep_theorem1(trials: int, seed: int, max_alphabet: int = 4) -> tuple[float, DiscreteJoint, InfoReport]:
    """Max residual over ``trials`` random joints, with the worst instance."""
    from namid.config import SeedTree

    rng = SeedTree(seed).rng("theorem1/sweep")
    worst, worst_joint = -1.0, None
    for _ in range(trials):
        joint = random_joint(rng, max_alphabet)
        res = verify_theorem1(joint)
        if res > worst:
            worst, worst_joint = res, joint
    return worst, worst_joint, info_report(worst_joint)
