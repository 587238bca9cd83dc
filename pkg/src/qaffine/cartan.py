"""Affine Cartan data for type A, weights, and diagram-automorphism data.

Weight coordinate convention
----------------------------
A weight is stored over the basis (alpha_1, ..., alpha_r, Lambda_0, delta)
with exact rational coordinates, optionally plus *symbolic atoms*: formal
multiples of the generic weights lambda and mu and of the ubiquitous
combinations omega*rhot/h and k*rhot/h (rhot = rho + h Lambda_0).  An atom
is keyed by (name, s) where s records an applied power of the diagram
automorphism B (only meaningful for "mu"; B fixes rhot).

Bilinear form
-------------
The invariant form is normalized by (alpha, alpha) = 2 on roots and
(D, D) = 0.  On the weight side this forces the Gram matrix

    (alpha_i, alpha_j) = finite Cartan matrix
    (alpha_i, Lambda_0) = (alpha_i, delta) = (delta, delta) = 0
    (Lambda_0, delta)   = 1
    (Lambda_0, Lambda_0) = -(rho, rho)/h^2      [equivalent to (D,D)=0]

since rhot corresponds to D under the form and (rhot, rhot) =
(rho, rho) + h^2 (Lambda_0, Lambda_0) must vanish.  This Gram matrix is the
documented resolution of the normalization left implicit by the
conventions (rhot, alpha_i) = 1 and (Lambda_0-vs-delta) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from . import linalg
from .scalars import ScalarField

AtomKey = Tuple[str, int]  # (name, B-power); names: "lam", "mu", "wroh", "kroh"

_F0 = Fraction(0)


@dataclass(frozen=True)
class Weight:
    """coords over (alpha_1..alpha_r, Lambda_0, delta) + symbolic atoms."""

    coords: Tuple[Fraction, ...]
    atoms: Tuple[Tuple[AtomKey, Fraction], ...] = ()

    def atom_dict(self) -> Dict[AtomKey, Fraction]:
        return dict(self.atoms)

    @property
    def is_concrete(self) -> bool:
        return not self.atoms

    def __add__(self, other: "Weight") -> "Weight":
        coords = tuple(x + y for x, y in zip(self.coords, other.coords))
        ad = self.atom_dict()
        for k, v in other.atoms:
            ad[k] = ad.get(k, _F0) + v
        atoms = tuple(sorted((k, v) for k, v in ad.items() if v))
        return Weight(coords, atoms)

    def __sub__(self, other: "Weight") -> "Weight":
        return self + other.scale(Fraction(-1))

    def scale(self, c) -> "Weight":
        c = Fraction(c)
        return Weight(
            tuple(c * x for x in self.coords),
            tuple(sorted((k, c * v) for k, v in self.atoms if c * v)),
        )

    def __neg__(self) -> "Weight":
        return self.scale(Fraction(-1))


@dataclass
class PairResult:
    """Decomposition of q^(2c(w1,w2)) into representable factors.

    coeff   -- monomial Scalar (powers of t, a_i, b_i, K)
    d_eu    -- added exponent of u = q^(-2 omega)
    d_ek    -- added exponent of kappa = q^(-2k)  (beyond what K-powers carry)
    d_plm, d_pkl, d_pwm -- added exponents of the prefactor symbols
        Plm = q^(-2(lambda,mu)), Pkl = q^(-2k(lambda,rho)/h),
        Pwm = q^(-2 omega (mu,rho)/h)
    """

    coeff: object
    d_eu: Fraction = _F0
    d_ek: Fraction = _F0
    d_plm: Fraction = _F0
    d_pkl: Fraction = _F0
    d_pwm: Fraction = _F0

    def __mul__(self, other: "PairResult") -> "PairResult":
        return PairResult(
            self.coeff * other.coeff,
            self.d_eu + other.d_eu,
            self.d_ek + other.d_ek,
            self.d_plm + other.d_plm,
            self.d_pkl + other.d_pkl,
            self.d_pwm + other.d_pwm,
        )


class PairingError(ValueError):
    """A weight pairing is not representable in the engine's symbols."""


class AffineCartanData:
    """Type A_r^(1) root/weight data with the (D,D)=0 form."""

    def __init__(self, rank: int):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.rank = rank
        self.coxeter = rank + 1
        r = rank
        self.dim = r + 2  # coords: alpha_1..alpha_r, Lambda_0, delta
        fin = [[Fraction(0)] * r for _ in range(r)]
        for i in range(r):
            fin[i][i] = Fraction(2)
            if i + 1 < r:
                fin[i][i + 1] = Fraction(-1)
                fin[i + 1][i] = Fraction(-1)
        self.finite_cartan = fin
        # rho = sum x_i alpha_i with (rho, alpha_j) = 1
        x = linalg.solve(fin, [Fraction(1)] * r)
        self.rho = Weight(tuple(x) + (_F0, _F0))
        # (rho, rho) = sum_i x_i (alpha_i, rho) = sum_i x_i
        self.rho_rho = sum(x)
        lam00 = -Fraction(self.rho_rho) / (self.coxeter ** 2)
        g = [[_F0] * self.dim for _ in range(self.dim)]
        for i in range(r):
            for j in range(r):
                g[i][j] = fin[i][j]
        g[r][r] = lam00          # (Lambda_0, Lambda_0)
        g[r][r + 1] = Fraction(1)  # (Lambda_0, delta)
        g[r + 1][r] = Fraction(1)
        self.gram = g
        self.Lambda0 = Weight(tuple(_F0 for _ in range(r)) + (Fraction(1), _F0))
        self.delta = Weight(tuple(_F0 for _ in range(r)) + (_F0, Fraction(1)))
        self.rhot = self.rho + self.Lambda0.scale(self.coxeter)
        # theta = highest root = alpha_1 + ... + alpha_r (type A)
        self.theta = Weight(tuple(Fraction(1) for _ in range(r)) + (_F0, _F0))

    def alpha(self, i: int) -> Weight:
        """Simple affine roots, i = 0..r;  alpha_0 = delta - theta."""
        r = self.rank
        if i == 0:
            return self.delta - self.theta
        coords = [_F0] * self.dim
        coords[i - 1] = Fraction(1)
        return Weight(tuple(coords))

    def pair_concrete(self, w1: Weight, w2: Weight) -> Fraction:
        if not (w1.is_concrete and w2.is_concrete):
            raise PairingError("pair_concrete needs concrete weights")
        acc = _F0
        for i, x in enumerate(w1.coords):
            if not x:
                continue
            for j, y in enumerate(w2.coords):
                if y:
                    acc += x * self.gram[i][j] * y
        return acc

    def level(self, w: Weight) -> Fraction:
        """(w, delta); concrete part only (atoms carry no level except kroh,
        which the caller handles through pairings)."""
        return self.pair_concrete(Weight(w.coords), self.delta)

    def principal_degree(self, w: Weight) -> Fraction:
        """(rhot, w) for concrete w -- counts simple-root content."""
        return self.pair_concrete(Weight(w.coords), self.rhot)

    # symbolic generic weights
    def lam(self) -> Weight:
        return Weight(tuple(_F0 for _ in range(self.dim)), ((("lam", 0), Fraction(1)),))

    def mu(self, s: int = 0) -> Weight:
        return Weight(tuple(_F0 for _ in range(self.dim)), ((("mu", s), Fraction(1)),))

    def wroh(self) -> Weight:
        """omega * rhot / h."""
        return Weight(tuple(_F0 for _ in range(self.dim)), ((("wroh", 0), Fraction(1)),))

    def kroh(self) -> Weight:
        """k * rhot / h."""
        return Weight(tuple(_F0 for _ in range(self.dim)), ((("kroh", 0), Fraction(1)),))

    def lam_tilde(self) -> Weight:
        return self.lam() + self.wroh()

    def mu_tilde(self) -> Weight:
        return self.mu() + self.kroh()


class TwistData:
    """A Dynkin-diagram automorphism T and everything derived from it."""

    def __init__(self, cartan: AffineCartanData, perm: Tuple[int, ...]):
        r = cartan.rank
        n = r + 1
        if sorted(perm) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{r}: {perm}")
        A = self._affine_cartan(cartan)
        for i in range(n):
            for j in range(n):
                if A[perm[i]][perm[j]] != A[i][j]:
                    raise ValueError(
                        f"permutation is not a diagram automorphism: "
                        f"a[{perm[i]}][{perm[j]}] != a[{i}][{j}]"
                    )
        self.cartan = cartan
        self.perm = tuple(perm)
        self.order = self._perm_order(perm)
        self.B = self._weight_matrix()     # acts on coords (column-vector convention)
        self.Binv = linalg.inverse(self.B)
        self._check_orthogonal()
        self.ltil_basis = self._fixed_basis()
        self.hprime_basis = self._hprime_basis()
        self.l_basis = self._l_basis()
        self.h0_basis = self._h0_basis()
        self.C_T = self._cayley()
        self._g_ltil_inv = linalg.inverse(self._gram_on(self.ltil_basis)) if self.ltil_basis else []
        self._g_h0_inv = linalg.inverse(self._gram_on(self.h0_basis)) if self.h0_basis else []

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _affine_cartan(cartan: AffineCartanData) -> List[List[Fraction]]:
        n = cartan.rank + 1
        return [
            [cartan.pair_concrete(cartan.alpha(i), cartan.alpha(j)) for j in range(n)]
            for i in range(n)
        ]

    @staticmethod
    def _perm_order(perm) -> int:
        order = 1
        cur = tuple(perm)
        ident = tuple(range(len(perm)))
        while cur != ident:
            cur = tuple(perm[i] for i in cur)
            order += 1
        return order

    def _apply_matrix(self, M, w: Weight) -> Weight:
        coords = linalg.mat_vec(M, list(w.coords))
        return Weight(tuple(coords))

    def _weight_matrix(self) -> List[List[Fraction]]:
        """B on weight coordinates: B(alpha_i)=alpha_{T(i)}, B(delta)=delta,
        B(Lambda_0)=(rhot - B(rho))/h (forced by B fixing rhot)."""
        c = self.cartan
        r = c.rank
        cols: List[Weight] = []
        for i in range(1, r + 1):
            cols.append(c.alpha(self.perm[i]))
        # B(rho): rho = sum x_i alpha_i
        brho_coords = [_F0] * c.dim
        brho = Weight(tuple(brho_coords))
        for i in range(1, r + 1):
            xi = c.rho.coords[i - 1]
            if xi:
                brho = brho + c.alpha(self.perm[i]).scale(xi)
        blam0 = (c.rhot - brho).scale(Fraction(1, c.coxeter))
        cols.append(blam0)
        cols.append(c.delta)
        # column i of the matrix = image of basis vector i
        return [[cols[j].coords[i] for j in range(c.dim)] for i in range(c.dim)]

    def _check_orthogonal(self):
        c = self.cartan
        n = c.dim
        BT = [[self.B[j][i] for j in range(n)] for i in range(n)]
        if linalg.mat_mul(BT, linalg.mat_mul(c.gram, self.B)) != c.gram:
            raise AssertionError("B does not preserve the bilinear form")

    def _fixed_basis(self) -> List[Weight]:
        n = self.cartan.dim
        M = [[self.B[i][j] - (Fraction(1) if i == j else _F0) for j in range(n)] for i in range(n)]
        return [Weight(tuple(Fraction(x) for x in v)) for v in linalg.nullspace(M, n)]

    def _hprime_basis(self) -> List[Weight]:
        c = self.cartan
        out = [c.alpha(i) for i in range(1, c.rank + 1)]
        out.append(c.delta)
        return out

    def _l_basis(self) -> List[Weight]:
        # l* = ltil* intersect hprime*: fixed weights with zero Lambda_0 coord
        c = self.cartan
        rows = [[w.coords[c.rank] for w in self.ltil_basis]]  # Lambda_0 coordinate
        combos = linalg.nullspace(rows, len(self.ltil_basis))
        out = []
        for v in combos:
            w = Weight(tuple(_F0 for _ in range(c.dim)))
            for x, basis_w in zip(v, self.ltil_basis):
                if x:
                    w = w + basis_w.scale(Fraction(x))
            out.append(w)
        return out

    def _h0_basis(self) -> List[Weight]:
        """Orthocomplement of ltil* inside hprime* (w.r.t. the form)."""
        c = self.cartan
        rows = []
        for lw in self.ltil_basis:
            rows.append([c.pair_concrete(lw, hw) for hw in self.hprime_basis])
        combos = linalg.nullspace(rows, len(self.hprime_basis))
        out = []
        for v in combos:
            w = Weight(tuple(_F0 for _ in range(c.dim)))
            for x, basis_w in zip(v, self.hprime_basis):
                if x:
                    w = w + basis_w.scale(Fraction(x))
            out.append(w)
        return out

    def _gram_on(self, basis: List[Weight]) -> List[List[Fraction]]:
        c = self.cartan
        return [[c.pair_concrete(u, v) for v in basis] for u in basis]

    def _cayley(self) -> List[List[Fraction]]:
        """C_T = (B+1)(B-1)^{-1} in the h0 basis."""
        if not self.h0_basis:
            return []
        c = self.cartan
        m = len(self.h0_basis)
        # express B(w_a) and w_a in the h0 basis via the (invertible) Gram
        g = self._gram_on(self.h0_basis)
        ginv = linalg.inverse(g)

        def in_basis(w: Weight) -> List[Fraction]:
            rhs = [c.pair_concrete(w, v) for v in self.h0_basis]
            return linalg.mat_vec(ginv, rhs)

        Bmat = [[_F0] * m for _ in range(m)]
        for a, w in enumerate(self.h0_basis):
            col = in_basis(self._apply_matrix(self.B, w))
            for i in range(m):
                Bmat[i][a] = col[i]
        one = [[Fraction(1) if i == j else _F0 for j in range(m)] for i in range(m)]
        bp = [[Bmat[i][j] + one[i][j] for j in range(m)] for i in range(m)]
        bm = [[Bmat[i][j] - one[i][j] for j in range(m)] for i in range(m)]
        return linalg.mat_mul(bp, linalg.inverse(bm))

    # -- actions -------------------------------------------------------------

    def apply_B(self, w: Weight, power: int = 1) -> Weight:
        """B^power on a weight.  Atoms: rhot-atoms are fixed; mu picks up a
        twist power; lam with nonzero power is rejected."""
        power %= self.order
        coords = list(w.coords)
        for _ in range(power):
            coords = linalg.mat_vec(self.B, coords)
        atoms = []
        for (name, s), v in w.atoms:
            if name in ("wroh", "kroh"):
                atoms.append(((name, 0), v))
            elif name == "mu":
                atoms.append((("mu", (s + power) % self.order), v))
            elif name == "lam":
                if power % self.order:
                    raise PairingError("B applied to the generic lambda is not representable")
                atoms.append((("lam", 0), v))
            else:
                raise PairingError(f"unknown atom {name}")
        return Weight(tuple(coords), tuple(sorted(atoms)))

    def project_ltil(self, w: Weight) -> Weight:
        """w minus its h0-component: the part of a concrete weight that the
        B-invariant dynamical parameter can see.  Shifts of the dynamical
        parameter by a weight act through this projection (the parameter
        ranges over the invariant subspace, so the anti-invariant component
        of a shift is invisible); for the identity twist h0 is zero and the
        projection is the identity."""
        if not self.h0_basis:
            return w
        c = self.cartan
        v = [c.pair_concrete(w, b) for b in self.h0_basis]
        coef = linalg.mat_vec(self._g_h0_inv, v)
        out = w
        for x, b in zip(coef, self.h0_basis):
            if x:
                out = out + b.scale(-Fraction(x))
        return out

    # -- Omega / Z pairings --------------------------------------------------

    def omega_pair(self, which: str, w1: Weight, w2: Weight) -> Fraction:
        """Eigenvalue pairing of the inverse-form tensor Omega_X on a pair of
        concrete weights: Omega_X acts on v (x) w by q^(omega_pair)."""
        basis, ginv = {
            "ltil": (self.ltil_basis, self._g_ltil_inv),
            "h0": (self.h0_basis, self._g_h0_inv),
        }[which]
        if not basis:
            return _F0
        c = self.cartan
        v1 = [c.pair_concrete(w1, b) for b in basis]
        v2 = [c.pair_concrete(b, w2) for b in basis]
        mid = linalg.mat_vec(ginv, v2)
        return sum(x * y for x, y in zip(v1, mid))

    def z_pair(self, w1: Weight, w2: Weight) -> Fraction:
        """Exponent of q in q^Z on a pair of concrete weights, with
        Z = 1/2 ((1 + C_T) (x) 1) Omega_{h0}, i.e. the bilinear form
        t(w1, w2) = 1/2 (w1, (1 - C_T) P_{h0} w2).

        The sign and Cayley orientation are forced: q^Z is the unique
        diagonal degree-0 part for which the twist difference equation is
        solvable, since the degree-0 block requires
        t(w1, w2) - t(w1 . B, w2) = Omega_{h0}(w1, w2), whose unique
        bilinear solution is M = B(B-1)^{-1} = (1+C_T)/2 applied to the
        first slot."""
        if not self.h0_basis:
            return _F0
        c = self.cartan
        m = len(self.h0_basis)
        # (1 - C_T) w_a expressed in the h0 basis, then paired with w1
        v2 = [c.pair_concrete(b, w2) for b in self.h0_basis]
        mid = linalg.mat_vec(self._g_h0_inv, v2)  # coefficients of w2's h0-projection
        acc = _F0
        for a in range(m):
            if not mid[a]:
                continue
            # (1-C_T) applied to basis vector a
            img = Weight(tuple(_F0 for _ in range(c.dim)))
            for i in range(m):
                coef = (Fraction(1) if i == a else _F0) - self.C_T[i][a]
                if coef:
                    img = img + self.h0_basis[i].scale(coef)
            acc += c.pair_concrete(w1, img) * mid[a]
        return acc / 2


# ---------------------------------------------------------------------------
# symbolic pairing into representable factors


def pair_q(field: ScalarField, cartan: AffineCartanData, w1: Weight, w2: Weight, c) -> PairResult:
    """Decompose q^(2c (w1, w2)) into (monomial, key-shifts, prefactor-shifts).

    Raises PairingError for combinations the symbol system cannot express
    (e.g. (lambda, lambda) or (B^s mu, lambda) with s != 0).
    """
    c = Fraction(c)
    res = PairResult(field.one)
    if not c:
        return res
    conc1, conc2 = Weight(w1.coords), Weight(w2.coords)
    # concrete x concrete
    g = cartan.pair_concrete(conc1, conc2)
    if g:
        res.coeff = res.coeff * field.q_pow(2 * c * g)
    # atom x concrete and concrete x atom
    for (atoms, conc) in (((w1.atoms), conc2), ((w2.atoms), conc1)):
        for (name, s), v in atoms:
            res = _atom_concrete(field, cartan, name, s, v * c, conc, res)
    # atom x atom
    for (n1, s1), v1 in w1.atoms:
        for (n2, s2), v2 in w2.atoms:
            res = _atom_atom(field, cartan, (n1, s1), (n2, s2), v1 * v2 * c, res)
    return res


def _atom_concrete(field, cartan, name, s, cv, conc, res: PairResult) -> PairResult:
    """Accumulate q^(2 cv (B^s atom, conc))."""
    if not cv or all(x == 0 for x in conc.coords):
        return res
    if name == "lam":
        # (lambda, nu) with nu concrete: only the alpha-part of nu pairs.
        for i in range(1, cartan.rank + 1):
            xi = conc.coords[i - 1]
            if xi:
                res.coeff = res.coeff * field.l_pow(i, -cv * xi)
        return res
    if name == "mu":
        nu = conc
        if s:
            # (B^s mu, nu) = (mu, B^-s nu); caller must have twist data --
            # the twist-aware path goes through pair_q_twisted below.
            raise PairingError("twisted mu atom needs pair_q_twisted")
        for i in range(1, cartan.rank + 1):
            xi = nu.coords[i - 1]
            if xi:
                res.coeff = res.coeff * field.m_pow(i, -cv * xi)
        return res
    if name == "wroh":
        y = cartan.pair_concrete(cartan.rhot, conc) / cartan.coxeter
        res.d_eu += -cv * y  # q^(2 omega y)^cv = u^(-cv*y)
        return res
    if name == "kroh":
        # q^(2 cv k (rhot, nu)/h) is *rational* in the field generator K
        # (kappa-root), so it stays a scalar; kappa-series keys appear only
        # when traces are expanded (ScalarField.kappa_expand).
        y = cartan.pair_concrete(cartan.rhot, conc) / cartan.coxeter
        res.coeff = res.coeff * field.kq_pow(-cv * y)
        return res
    raise PairingError(f"unknown atom {name}")


def _atom_atom(field, cartan, k1: AtomKey, k2: AtomKey, cv, res: PairResult) -> PairResult:
    if not cv:
        return res
    n1, s1 = k1
    n2, s2 = k2
    names = tuple(sorted((n1, n2)))
    if names == ("lam", "mu"):
        s = s1 if n1 == "mu" else s2
        if s:
            raise PairingError("(B^s mu, lambda) with s != 0 is not representable")
        res.d_plm += -cv
        return res
    if names == ("kroh", "lam"):
        res.d_pkl += -cv
        return res
    if names == ("mu", "wroh"):
        res.d_pwm += -cv
        return res
    if names in (("kroh", "wroh"), ("wroh", "wroh"), ("kroh", "kroh")):
        return res  # (rhot, rhot) = 0
    raise PairingError(f"pairing {n1} x {n2} is not representable")


def pair_q_twisted(field: ScalarField, twist: TwistData, w1: Weight, w2: Weight, c) -> PairResult:
    """Like pair_q but resolves twisted mu atoms (B^s mu, nu) = (mu, B^-s nu)
    using the twist's B matrix."""
    out = PairResult(field.one)
    # Expand bilinearly: concrete parts and atoms of both sides.
    pieces1 = _pieces(w1)
    pieces2 = _pieces(w2)
    for kind1, val1 in pieces1:
        for kind2, val2 in pieces2:
            out = _twisted_term(field, twist, kind1, val1, kind2, val2, Fraction(c), out)
    return out


def _pieces(w: Weight):
    out = []
    if any(w.coords):
        out.append(("conc", Weight(w.coords)))
    for key, v in w.atoms:
        out.append((key, v))
    return out


def _twisted_term(field, twist, kind1, val1, kind2, val2, c, res: PairResult) -> PairResult:
    cartan = twist.cartan
    if kind1 == "conc" and kind2 == "conc":
        g = cartan.pair_concrete(val1, val2)
        if g:
            res.coeff = res.coeff * field.q_pow(2 * c * g)
        return res
    if kind1 == "conc" or kind2 == "conc":
        if kind1 == "conc":
            (name, s), cv, conc = kind2, val2, val1
        else:
            (name, s), cv, conc = kind1, val1, val2
        if name == "mu" and s:
            conc = twist.apply_B(conc, -s)
            name = "mu"
            s = 0
        return _atom_concrete(field, cartan, name, s, cv * c, conc, res)
    # atom x atom
    return _atom_atom(field, cartan, (kind1[0], kind1[1]), (kind2[0], kind2[1]), val1 * val2 * c, res)
