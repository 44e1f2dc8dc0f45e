"""Affine matrix-inequality assembly for the observer synthesis problem.

Blocks are built from :class:`AffineExpr` objects, matrices that are affine in
a flat vector of scalar decision variables. Any structured variable may be
fixed to a numeric value instead, in which case it enters the expressions as a
constant; evaluating assembled blocks at fixed numbers is how the certifier
re-uses this module.

Block families
--------------
``lyap_lower`` / ``lyap_upper``
    ``alpha I <= P_q`` and ``P_q <= xi I``.
``boundedness``
    one-step decrease of the multiple Lyapunov function under mode mismatch,
    with the S-procedure multiplier ``nu`` and ratio ``epsilon``.
``gain_bound``
    ``[[lam^2 I, H^T], [H, I]] >= 0``.
``jump_coupling`` (equality)
    ``P_q = P_qh + d C + C^T d^T`` for each transition.
``attenuation``
    bounded real lemma style block for the disturbance channel at level gamma.
``sensitivity``
    DC-linearized block for the fault channel at floor beta.
``coupling``
    ``[[-m/4 I, H^T], [H, P]] >= 0`` tying a multiplier ``m`` to ``K^T P K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import SwitchedPlant, SynthesisParams

NSD = "nsd"  # block required <= 0
PSD = "psd"  # block required >= 0


class NonAffineError(RuntimeError):
    """An expression left the affine class (internal consistency failure)."""


class AffineExpr:
    """Matrix ``const + sum_i x[i] * terms[i]``."""

    __slots__ = ("const", "terms")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, const, terms=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = {} if terms is None else terms

    @property
    def shape(self):
        return self.const.shape

    @classmethod
    def constant(cls, value):
        if isinstance(value, AffineExpr):
            return value
        return cls(np.atleast_2d(np.asarray(value, dtype=float)).copy())

    @property
    def T(self):
        return AffineExpr(self.const.T, {i: c.T for i, c in self.terms.items()})

    def _combine(self, other, sign):
        other = AffineExpr.constant(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = dict(self.terms)
        for i, c in other.terms.items():
            terms[i] = terms[i] + sign * c if i in terms else sign * c
        return AffineExpr(self.const + sign * other.const, terms)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return AffineExpr.constant(other)._combine(self, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, s):
        if isinstance(s, AffineExpr):
            if s.is_constant:
                return self * s.const
            if self.is_constant:
                return s * self.const
            raise NonAffineError("product of two variable expressions")
        arr = np.asarray(s, dtype=float)
        if arr.ndim == 0 or arr.size == 1 and self.shape != (1, 1):
            f = float(arr.reshape(()))
            return AffineExpr(self.const * f, {i: c * f for i, c in self.terms.items()})
        if self.shape != (1, 1):
            raise NonAffineError("elementwise product of matrix expressions")
        # scalar expression times a constant matrix
        arr = np.atleast_2d(arr)
        return AffineExpr(self.const[0, 0] * arr, {i: c[0, 0] * arr for i, c in self.terms.items()})

    __rmul__ = __mul__

    def __matmul__(self, M):
        if isinstance(M, AffineExpr):
            if M.terms and self.terms:
                raise NonAffineError("product of two variable expressions")
            if not M.terms:
                M = M.const
            else:
                return (M.T @ self.const.T).T
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineExpr(self.const @ M, {i: c @ M for i, c in self.terms.items()})

    def __rmatmul__(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineExpr(M @ self.const, {i: M @ c for i, c in self.terms.items()})

    def value(self, x=None):
        out = self.const.copy()
        for i, c in self.terms.items():
            out = out + x[i] * c
        return out

    @property
    def is_constant(self):
        return not self.terms

    def sym(self):
        """Symmetric part ``(M + M^T) / 2``."""
        return (self + self.T) * 0.5


def bmat(rows: Sequence[Sequence]) -> AffineExpr:
    """Assemble a block matrix of affine expressions (``None`` = zero block)."""
    heights = []
    for row in rows:
        h = next((AffineExpr.constant(b).shape[0] for b in row if b is not None), None)
        if h is None:
            raise ValueError("block row with only empty entries")
        heights.append(h)
    widths = []
    for j in range(len(rows[0])):
        w = next((AffineExpr.constant(row[j]).shape[1] for row in rows if row[j] is not None), None)
        if w is None:
            raise ValueError("block column with only empty entries")
        widths.append(w)
    r0 = np.concatenate([[0], np.cumsum(heights)])
    c0 = np.concatenate([[0], np.cumsum(widths)])
    const = np.zeros((r0[-1], c0[-1]))
    terms: dict = {}
    for bi, row in enumerate(rows):
        for bj, blk in enumerate(row):
            if blk is None:
                continue
            e = AffineExpr.constant(blk)
            if e.shape != (heights[bi], widths[bj]):
                raise ValueError(f"block ({bi},{bj}) has shape {e.shape}, expected {(heights[bi], widths[bj])}")
            sl = (slice(r0[bi], r0[bi + 1]), slice(c0[bj], c0[bj + 1]))
            const[sl] = e.const
            for i, c in e.terms.items():
                if i not in terms:
                    terms[i] = np.zeros_like(const)
                terms[i][sl] = c
    return AffineExpr(const, terms)


# ---------------------------------------------------------------------------
# variables


@dataclass
class LmiVariables:
    """Structured decision variables (each entry: ndarray or AffineExpr).

    Pair-indexed entries use 0-based ``(q_hat, q)`` keys.
    """

    P: list
    H: list
    V: object
    sigma: list
    kappa: list
    varsigma: list
    nu: dict
    d: dict


def _label(idx):
    return "[" + ",".join(str(i + 1) for i in idx) + "]"


@dataclass
class _Entry:
    name: str
    kind: str  # "sym" | "mat"
    shape: tuple
    offset: int
    size: int


@dataclass
class VariableLayout:
    """Map between structured variables and the flat decision vector.

    Symmetric matrices use upper-triangle scalarization (row-major), so each
    structured entry corresponds to exactly one flat scalar.
    """

    entries: list = field(default_factory=list)
    fixed: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(e.size for e in self.entries)

    def names(self) -> list:
        return [e.name for e in self.entries]

    def _add(self, name, kind, shape):
        if any(e.name == name for e in self.entries):
            raise ValueError(f"duplicate variable {name}")
        size = shape[0] * (shape[0] + 1) // 2 if kind == "sym" else shape[0] * shape[1]
        e = _Entry(name, kind, tuple(shape), self.size, size)
        self.entries.append(e)
        return self.expr(e)

    def symmetric(self, name, n):
        return self._add(name, "sym", (n, n))

    def matrix(self, name, rows, cols):
        return self._add(name, "mat", (rows, cols))

    def scalar(self, name):
        return self._add(name, "mat", (1, 1))

    @staticmethod
    def expr(e: _Entry) -> AffineExpr:
        r, c = e.shape
        terms = {}
        k = e.offset
        if e.kind == "sym":
            for i in range(r):
                for j in range(i, r):
                    m = np.zeros((r, c))
                    m[i, j] = m[j, i] = 1.0
                    terms[k] = m
                    k += 1
        else:
            for i in range(r):
                for j in range(c):
                    m = np.zeros((r, c))
                    m[i, j] = 1.0
                    terms[k] = m
                    k += 1
        return AffineExpr(np.zeros((r, c)), terms)

    def entry(self, name) -> _Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def flatten_named(self, values: dict) -> np.ndarray:
        x = np.zeros(self.size)
        for e in self.entries:
            v = np.atleast_2d(np.asarray(values[e.name], dtype=float))
            if e.kind == "sym":
                iu = np.triu_indices(e.shape[0])
                x[e.offset:e.offset + e.size] = v[iu]
            else:
                x[e.offset:e.offset + e.size] = v.ravel()
        return x

    def unflatten_named(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"flat vector has shape {x.shape}, layout size {self.size}")
        out = {}
        for e in self.entries:
            seg = x[e.offset:e.offset + e.size]
            if e.kind == "sym":
                n = e.shape[0]
                m = np.zeros((n, n))
                iu = np.triu_indices(n)
                m[iu] = seg
                m = m + np.triu(m, 1).T
            else:
                m = seg.reshape(e.shape).copy()
            out[e.name] = m
        return out


def _maybe_fixed(layout, fixed, key, name, make):
    if key in fixed:
        return AffineExpr.constant(fixed[key])
    return make(name)


def make_variables(plant: SwitchedPlant, fixed: dict | None = None, families: Iterable[str] | None = None,
                   p_r: int | None = None):
    """Create a layout and the matching symbolic :class:`LmiVariables`.

    Parameters
    ----------
    plant : SwitchedPlant
    fixed : dict, optional
        Numeric values for structured entries that must not be decision
        variables, keyed ``("P", q)``, ``("H", q)``, ``("V",)``, ...
    families : iterable of str, optional
        Which multiplier families to create (subset of ``sigma``, ``kappa``,
        ``varsigma``, ``nu``, ``d``). Default: all.
    p_r : int, optional
        Residual dimension (default ``p``).

    Returns
    -------
    layout : VariableLayout
    v : LmiVariables with AffineExpr entries (absent families are ``None``).
    """
    fixed = dict(fixed or {})
    fams = set(families) if families is not None else {"sigma", "kappa", "varsigma", "nu", "d"}
    n, p, N = plant.n, plant.p, plant.N
    p_r = p if p_r is None else p_r
    lay = VariableLayout(fixed=fixed)
    P = [_maybe_fixed(lay, fixed, ("P", q), f"P{_label((q,))}", lambda nm: lay.symmetric(nm, n)) for q in range(N)]
    H = [_maybe_fixed(lay, fixed, ("H", q), f"H{_label((q,))}", lambda nm: lay.matrix(nm, n, p)) for q in range(N)]
    V = _maybe_fixed(lay, fixed, ("V",), "V", lambda nm: lay.matrix(nm, p_r, p))

    def scal(fam):
        if fam not in fams:
            return None
        return [_maybe_fixed(lay, fixed, (fam, q), f"{fam}{_label((q,))}", lay.scalar) for q in range(N)]

    sigma, kappa, varsigma = scal("sigma"), scal("kappa"), scal("varsigma")
    nu = None
    if "nu" in fams:
        nu = {(qh, q): _maybe_fixed(lay, fixed, ("nu", qh, q), f"nu{_label((qh, q))}", lay.scalar)
              for qh in range(N) for q in range(N) if q != qh}
    d = None
    if "d" in fams:
        d = {(qh, q): _maybe_fixed(lay, fixed, ("d", qh, q), f"d{_label((qh, q))}",
                                   lambda nm: lay.matrix(nm, n, p))
             for (qh, q) in plant.transitions}
    return lay, LmiVariables(P=P, H=H, V=V, sigma=sigma, kappa=kappa, varsigma=varsigma, nu=nu, d=d)


def numeric_variables(P, H, V, sigma=None, kappa=None, varsigma=None, nu=None, d=None) -> LmiVariables:
    """Wrap numeric values as constant expressions for block evaluation."""
    c = AffineExpr.constant

    def lst(v):
        return None if v is None else [c(np.atleast_2d(a)) for a in v]

    def dct(v):
        return None if v is None else {k: c(np.atleast_2d(a)) for k, a in v.items()}

    return LmiVariables(P=lst(P), H=lst(H), V=c(np.atleast_2d(V)), sigma=lst(sigma), kappa=lst(kappa),
                        varsigma=lst(varsigma), nu=dct(nu), d=dct(d))


# ---------------------------------------------------------------------------
# blocks


@dataclass
class Block:
    """Named affine symmetric block with sense ``NSD`` (<= 0) or ``PSD`` (>= 0)."""

    name: str
    sense: str
    expr: AffineExpr
    family: str = ""

    def value(self, x=None) -> np.ndarray:
        return self.expr.value(x)

    def violation(self, x=None) -> float:
        """Most-positive eigenvalue in the ``<= 0`` orientation."""
        M = self.value(x)
        w = np.linalg.eigvalsh(0.5 * (M + M.T))
        return float(w[-1]) if self.sense == NSD else float(-w[0])


@dataclass
class Equality:
    """Scalar equality ``coeffs @ x + const = 0``."""

    name: str
    coeffs: dict
    const: float


def _rho(A, P, H, C):
    # A^T P A - A^T H C - C^T H^T A - P, with H = P K
    return A.T @ P @ A - A.T @ H @ C - C.T @ H.T @ A - P


def lyapunov_bounds(plant, params, v: LmiVariables) -> list:
    n = plant.n
    out = []
    for q in range(plant.N):
        lab = _label((q,))
        out.append(Block(f"lyap_lower{lab}", PSD, v.P[q] - params.alpha * np.eye(n), "lyap_bounds"))
        out.append(Block(f"lyap_upper{lab}", NSD, v.P[q] - params.xi * np.eye(n), "lyap_bounds"))
    return out


def boundedness_block(plant, params, v: LmiVariables, qh: int, q: int, multiplier_weight: float = 0.25,
                      include_multiplier: bool = True) -> AffineExpr:
    """Mismatch decrease block for the estimator mode ``qh`` and plant mode ``q``.

    ``multiplier_weight`` scales ``sigma C^T C``: 1/4 is the assembled form,
    1 the intermediate form it implies (for ``sigma >= 0``).
    """
    C = plant.C
    A = plant.modes[qh].A
    dA = plant.modes[q].A - A
    P, H = v.P[qh], v.H[qh]
    nu = v.nu[(qh, q)]
    n = plant.n
    rho = _rho(A, P, H, C)
    tl = rho + nu * np.eye(n)
    if include_multiplier:
        tl = tl - (v.sigma[qh] * multiplier_weight) * (C.T @ C)
    off = A.T @ P @ dA - C.T @ H.T @ dA
    br = dA.T @ P @ dA - (params.epsilon ** 2) * (nu * np.eye(n))
    return bmat([[tl, off], [off.T, br]]).sym()


def assemble_boundedness(plant: SwitchedPlant, params: SynthesisParams, v: LmiVariables):
    """Lyapunov bounds, mismatch-decrease blocks, gain bounds and jump couplings.

    Returns
    -------
    blocks : list of Block
    equalities : list of Equality
    """
    blocks = lyapunov_bounds(plant, params, v)
    for qh in range(plant.N):
        for q in range(plant.N):
            if q == qh:
                continue  # no mismatch term, implied by the attenuation block
            blocks.append(Block(f"boundedness{_label((qh, q))}", NSD,
                                boundedness_block(plant, params, v, qh, q), "boundedness"))
    blocks.extend(gain_bounds(plant, params, v))
    return blocks, jump_couplings(plant, v)


def gain_bounds(plant, params, v: LmiVariables) -> list:
    n, p = plant.n, plant.p
    out = []
    for q in range(plant.N):
        lam = params.lam(q)
        M = bmat([[(lam ** 2) * np.eye(p), v.H[q].T], [v.H[q], np.eye(n)]]).sym()
        out.append(Block(f"gain_bound{_label((q,))}", PSD, M, "gain_bound"))
    return out


def jump_coupling_residual(plant, v: LmiVariables, qh: int, q: int) -> AffineExpr:
    C = plant.C
    d = v.d[(qh, q)]
    return v.P[q] - v.P[qh] - d @ C - C.T @ d.T


def jump_couplings(plant, v: LmiVariables) -> list:
    out = []
    iu = np.triu_indices(plant.n)
    for (qh, q) in plant.transitions:
        E = jump_coupling_residual(plant, v, qh, q)
        for i, j in zip(*iu):
            coeffs = {k: float(c[i, j]) for k, c in E.terms.items() if c[i, j] != 0.0}
            out.append(Equality(f"jump_coupling{_label((qh, q))}({i + 1},{j + 1})", coeffs, float(E.const[i, j])))
    return out


def _per_mode(values, N, name):
    vals = np.atleast_1d(np.asarray(values, dtype=float))
    if vals.size == 1:
        vals = np.full(N, float(vals[0]))
    if vals.shape != (N,):
        raise ValueError(f"{name} needs one value per mode")
    return vals


def attenuation_block(plant, v: LmiVariables, qh: int, q: int, gamma: float) -> AffineExpr:
    C = plant.C
    A = plant.modes[qh].A
    Bd, Dd = plant.modes[q].B_d, plant.modes[q].D_d
    P, H, V = v.P[qh], v.H[qh], v.V
    kap = v.kappa[qh] * 0.25
    m_d = plant.m_d
    p_r = V.shape[0]
    rho = _rho(A, P, H, C)
    theta = A.T @ P @ Bd - A.T @ H @ Dd - C.T @ H.T @ Bd
    lam = Bd.T @ P @ Bd - Bd.T @ H @ Dd - Dd.T @ H.T @ Bd - (gamma ** 2) * np.eye(m_d)
    lam = lam.sym()
    b11 = rho - kap * (C.T @ C)
    b12 = theta - kap * (C.T @ Dd)
    b22 = lam - kap * (Dd.T @ Dd)
    b13 = C.T @ V.T
    b23 = Dd.T @ V.T
    return bmat([[b11, b12, b13], [b12.T, b22, b23], [b13.T, b23.T, -np.eye(p_r)]]).sym()


def assemble_disturbance(plant: SwitchedPlant, params: SynthesisParams, gamma, v: LmiVariables) -> list:
    """Attenuation blocks for every ordered pair ``(q_hat, q)``."""
    g = _per_mode(gamma, plant.N, "gamma")
    if np.any(g <= 0):
        raise ValueError("gamma must be > 0")
    return [Block(f"attenuation{_label((qh, q))}", NSD, attenuation_block(plant, v, qh, q, g[qh]), "attenuation")
            for qh in range(plant.N) for q in range(plant.N)]


def phi(V, anchor, N):
    """Linearized concave term ``Va^T Va - Va^T V N - N^T V^T Va`` with ``Va = V_prev N``.

    Majorizes ``-(V N)^T (V N)``: the difference is ``(V N - Va)^T (V N - Va)``.
    """
    anchor = np.atleast_2d(np.asarray(anchor, dtype=float))
    VN = V @ N if isinstance(V, AffineExpr) else AffineExpr.constant(np.atleast_2d(V) @ N)
    return AffineExpr.constant(anchor.T @ anchor) - anchor.T @ VN - VN.T @ anchor


def fault_pairs(plant: SwitchedPlant, params: SynthesisParams) -> list:
    pairs = [(qh, q) for qh in range(plant.N) for q in range(plant.N)]
    if params.fault_pairs_only_active:
        pairs = [(qh, q) for (qh, q) in pairs if plant.modes[q].has_fault_channel]
    return pairs


def sensitivity_block(plant, v: LmiVariables, qh: int, q: int, beta: float, V_prev) -> AffineExpr:
    C = plant.C
    A = plant.modes[qh].A
    Bf, Df = plant.modes[q].B_f, plant.modes[q].D_f
    P, H, V = v.P[qh], v.H[qh], v.V
    V_prev = np.atleast_2d(np.asarray(V_prev, dtype=float))
    if V_prev.shape != V.shape:
        raise ValueError(f"anchor dimension mismatch: {V_prev.shape} vs {V.shape}")
    vs = v.varsigma[qh] * 0.25
    l = plant.l
    p_r = V.shape[0]
    rho = _rho(A, P, H, C)
    theta_f = A.T @ P @ Bf - A.T @ H @ Df - C.T @ H.T @ Bf
    lam_f = Bf.T @ P @ Bf - Bf.T @ H @ Df - Df.T @ H.T @ Bf + (beta ** 2) * np.eye(l)
    b11 = rho - vs * (C.T @ C) + 2.0 * phi(V, V_prev @ C, C)
    b12 = -theta_f + vs * (C.T @ Df)
    b22 = lam_f - vs * (Df.T @ Df) + 2.0 * phi(V, V_prev @ Df, Df)
    b13 = C.T @ V.T
    b23 = Df.T @ V.T
    return bmat([[b11, b12, b13], [b12.T, b22, b23], [b13.T, b23.T, -np.eye(p_r)]]).sym()


def assemble_fault(plant: SwitchedPlant, params: SynthesisParams, beta, anchor, v: LmiVariables,
                   pairs: list | None = None) -> list:
    """Sensitivity blocks at floor ``beta`` around the anchor ``V_prev``."""
    b = _per_mode(beta, plant.N, "beta")
    if np.any(b <= 0):
        raise ValueError("beta must be > 0")
    pairs = fault_pairs(plant, params) if pairs is None else pairs
    return [Block(f"sensitivity{_label((qh, q))}", NSD, sensitivity_block(plant, v, qh, q, b[qh], anchor),
                  "sensitivity") for (qh, q) in pairs]


def assemble_multiplier_coupling(plant: SwitchedPlant, v: LmiVariables, which=("sigma", "kappa", "varsigma")) -> list:
    """``[[-m/4 I, H^T], [H, P]] >= 0``, i.e. ``-m/4 I >= H^T P^-1 H = K^T P K``."""
    out = []
    p = plant.p
    for fam in which:
        mults = getattr(v, fam)
        if mults is None:
            continue
        for q in range(plant.N):
            M = bmat([[(-0.25 * mults[q]) * np.eye(p), v.H[q].T],
                      [v.H[q], v.P[q]]]).sym()
            out.append(Block(f"coupling_{fam}{_label((q,))}", PSD, M, "coupling"))
    return out


def assemble_nu_sign(plant, v: LmiVariables) -> list:
    """``nu >= 0`` as 1x1 blocks."""
    if v.nu is None:
        return []
    return [Block(f"nu_nonneg{_label(k)}", PSD, e, "nu_sign") for k, e in v.nu.items() if not e.is_constant]


# ---------------------------------------------------------------------------
# standard form


@dataclass
class LoweredBlock:
    name: str
    sense: str
    F0: np.ndarray
    idx: np.ndarray  # variable indices with nonzero coefficient
    F: np.ndarray    # (len(idx), m, m) coefficient stack
    family: str = ""

    @property
    def dim(self) -> int:
        return self.F0.shape[0]

    def value(self, x) -> np.ndarray:
        if len(self.idx) == 0:
            return self.F0.copy()
        return self.F0 + np.tensordot(np.asarray(x)[self.idx], self.F, axes=1)

    def violation(self, x) -> float:
        """Most-positive eigenvalue of the block in its ``<= 0`` orientation."""
        M = self.value(x)
        M = 0.5 * (M + M.T)
        w = np.linalg.eigvalsh(M)
        return float(w[-1]) if self.sense == NSD else float(-w[0])


@dataclass
class ConicProgram:
    """Flat semidefinite feasibility program.

    Attributes
    ----------
    layout : VariableLayout
        Back-map from the flat vector to structured names.
    blocks : list of LoweredBlock
    A_eq, b_eq : ndarray
        Linear equalities ``A_eq @ x = b_eq``.
    eq_names : list of str
    """

    layout: VariableLayout
    blocks: list
    A_eq: np.ndarray
    b_eq: np.ndarray
    eq_names: list

    @property
    def num_vars(self) -> int:
        return self.layout.size

    def violations(self, x) -> dict:
        return {b.name: b.violation(x) for b in self.blocks}

    def eq_residuals(self, x) -> np.ndarray:
        if self.A_eq.shape[0] == 0:
            return np.zeros(0)
        return np.abs(self.A_eq @ np.asarray(x) - self.b_eq)

    def unflatten(self, x) -> dict:
        return self.layout.unflatten_named(x)

    def dump(self) -> str:
        """Text dump: one section per block with sparse (row, col, var, coeff) triplets."""
        names = {}
        for e in self.layout.entries:
            for k in range(e.size):
                names[e.offset + k] = f"{e.name}#{k}"
        lines = [f"# variables {self.num_vars}"]
        for b in self.blocks:
            lines.append(f"[block {b.name} {b.sense} {b.dim}x{b.dim}]")
            for r, c in zip(*np.nonzero(b.F0)):
                if r <= c:
                    lines.append(f"{r} {c} const {b.F0[r, c]!r}")
            for vi, Fi in zip(b.idx, b.F):
                for r, c in zip(*np.nonzero(Fi)):
                    if r <= c:
                        lines.append(f"{r} {c} {names[int(vi)]} {Fi[r, c]!r}")
        lines.append("[equalities]")
        for name, row, rhs in zip(self.eq_names, self.A_eq, self.b_eq):
            terms = " ".join(f"{names[int(i)]}:{row[i]!r}" for i in np.nonzero(row)[0])
            lines.append(f"{name} {terms} = {rhs!r}")
        return "\n".join(lines) + "\n"


def lower_to_standard_form(blocks: Sequence[Block], equalities: Sequence[Equality], layout: VariableLayout,
                           sym_tol: float = 1e-12) -> ConicProgram:
    """Lower named blocks and equalities to a :class:`ConicProgram`."""
    nv = layout.size
    lowered = []
    for b in blocks:
        e = b.expr
        if e.shape[0] != e.shape[1]:
            raise NonAffineError(f"block {b.name} is not square")
        if np.max(np.abs(e.const - e.const.T), initial=0.0) > sym_tol:
            raise NonAffineError(f"block {b.name} has an asymmetric constant")
        idx, F = [], []
        for i in sorted(e.terms):
            c = e.terms[i]
            if not 0 <= i < nv:
                raise NonAffineError(f"block {b.name} references unknown variable {i}")
            if c.shape != e.shape or np.max(np.abs(c - c.T), initial=0.0) > sym_tol:
                raise NonAffineError(f"block {b.name} has a non-symmetric coefficient")
            if np.any(c != 0):
                idx.append(i)
                F.append(0.5 * (c + c.T))
        m = e.shape[0]
        lowered.append(LoweredBlock(b.name, b.sense, 0.5 * (e.const + e.const.T), np.array(idx, dtype=int),
                                    np.array(F).reshape(len(F), m, m), b.family))
    A = np.zeros((len(equalities), nv))
    rhs = np.zeros(len(equalities))
    for r, eq in enumerate(equalities):
        for i, c in eq.coeffs.items():
            A[r, i] += c
        rhs[r] = -eq.const
    return ConicProgram(layout, lowered, A, rhs, [eq.name for eq in equalities])
