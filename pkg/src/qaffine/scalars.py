"""Exact coefficient field for the engine.

Every coefficient that appears anywhere in the engine is an element of one
fixed rational-function field

    Q(t, a_1..a_r, b_1..b_r, K)

backed by sympy's sparse multivariate fraction field over ZZ.  The
generators are *roots* of the quantities we actually care about, so that
all the fractional exponents produced by weight pairings become integer
exponents of the generators:

    t   = q^(1/G)                    (G = the "granularity", see below)
    a_i = l_i^(1/G),   l_i = q^(-2(lambda, alpha_i))
    b_i = m_i^(1/G),   m_i = q^(-2(mu, alpha_i))
    K   = kappa^(1/(2hG)) = q^(-k/(hG)),   kappa = q^(-2k)

Here lambda and mu are the two generic finite weights, k is the formal
level-like parameter of the mu side, and h is the Coxeter number.  The
granularity G is chosen generously (4*h^2*(r+1) for type A_r) so that every
pairing of lattice/weight data the engine can produce has an integer
exponent; the helpers below assert this and raise GranularityError instead
of silently rounding.

The omega-side formal variable u = q^(-2 omega) never enters the field:
all omega-dependence is carried by series keys (see series.py).  The
k-dependence, by contrast, must live in the field, because matrix entries
of Verma modules with highest weight mu~ = mu + k rho~ / h are *rational*
in q^(k/h); they are expanded into kappa-power series only at trace time
(kappa_expand below).
"""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, Iterable, List, Tuple

from sympy import ZZ
from sympy.polys.fields import field


class GranularityError(ValueError):
    """An exponent is not representable at the field's granularity."""


class ScalarField:
    """The shared coefficient field with granularity-checked power helpers."""

    def __init__(self, rank: int, coxeter: int, granularity: int | None = None):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.rank = rank
        self.coxeter = coxeter
        # Generous default: covers quarter-weight pairings, (1/h)-shifts and
        # the half-integer pairings of the weight lattice simultaneously.
        self.G = granularity if granularity is not None else 4 * coxeter * coxeter * (rank + 1)
        names = ["t"] + [f"a{i}" for i in range(1, rank + 1)] + [f"b{i}" for i in range(1, rank + 1)] + ["K"]
        created = field(",".join(names), ZZ)
        self.field = created[0]
        gens = created[1:]
        self.gen_names: Tuple[str, ...] = tuple(names)
        self.gens = {n: g for n, g in zip(names, gens)}
        self.t = self.gens["t"]
        self.K = self.gens["K"]
        self.a = {i: self.gens[f"a{i}"] for i in range(1, rank + 1)}
        self.b = {i: self.gens[f"b{i}"] for i in range(1, rank + 1)}
        self.zero = self.field.zero
        self.one = self.field.one
        self._k_index = self.gen_names.index("K")

    # ------------------------------------------------------------------
    # constructors

    def from_fraction(self, x) -> object:
        x = Fraction(x)
        return self.field.ground_new(ZZ(x.numerator)) / self.field.ground_new(ZZ(x.denominator))

    def _int_exp(self, x: Fraction, what: str) -> int:
        e = Fraction(x) * self.G
        if e.denominator != 1:
            raise GranularityError(f"exponent {x} of {what} is not a multiple of 1/{self.G}")
        return int(e)

    def q_pow(self, x) -> object:
        """q^x as a field element (x any Fraction with denominator | G)."""
        return self.t ** self._int_exp(Fraction(x), "q")

    def l_pow(self, i: int, x) -> object:
        """l_i^x = q^(-2 x (lambda, alpha_i))."""
        return self.a[i] ** self._int_exp(Fraction(x), f"l_{i}")

    def m_pow(self, i: int, x) -> object:
        """m_i^x = q^(-2 x (mu, alpha_i))."""
        return self.b[i] ** self._int_exp(Fraction(x), f"m_{i}")

    def kq_pow(self, x) -> object:
        """q^(-2 k x) = kappa^x as a field element (a power of K)."""
        e = Fraction(x) * 2 * self.coxeter * self.G
        if e.denominator != 1:
            raise GranularityError(f"kappa-exponent {x} not representable")
        return self.K ** int(e)

    def qnum(self, n: int) -> object:
        """The balanced q-integer [n] = (q^n - q^-n)/(q - q^-1)."""
        q = self.q_pow(1)
        if n == 0:
            return self.zero
        s = self.zero
        sign = 1
        if n < 0:
            n, sign = -n, -1
        for j in range(n):
            s = s + q ** (n - 1 - 2 * j)
        return s * sign

    def qfact(self, n: int) -> object:
        out = self.one
        for j in range(1, n + 1):
            out = out * self.qnum(j)
        return out

    def qbinom(self, n: int, k: int) -> object:
        return self.qfact(n) / (self.qfact(k) * self.qfact(n - k))

    # ------------------------------------------------------------------
    # substitution

    def subs(self, el, values: Dict[str, object]):
        """Evaluate ``el`` with the named generators replaced by field
        elements (the values may be arbitrary nonzero rational functions,
        e.g. t**3/K for an inversion-type substitution).  Unnamed
        generators keep their identity."""
        if not el:
            return self.zero
        vals = [values.get(n, self.gens[n]) for n in self.gen_names]

        def eval_poly(p):
            out = self.zero
            for mono, coeff in p.terms():
                term = self.field.ground_new(coeff)
                for g, e in zip(vals, mono):
                    if e:
                        term = term * g ** e
                out = out + term
            return out

        num = eval_poly(el.numer)
        den = eval_poly(el.denom)
        if not den:
            raise ZeroDivisionError("substitution made a denominator vanish")
        return num / den

    def shift_K(self, el, eta: int):
        """The substitution k -> k + eta on the field level: every K^e term
        is multiplied by q^(-eta e / (h G)).  Raises GranularityError unless
        h | eta*e for every occurring exponent e (true for all engine-made
        elements, whose K-exponents are multiples of G)."""
        if not el:
            return self.zero
        ki = self._k_index
        ring = self.field.ring

        def shift_part(p):
            acc = self.zero
            for mono, coeff in p.terms():
                e = mono[ki]
                extra = Fraction(-eta * e, self.coxeter)
                if extra.denominator != 1:
                    raise GranularityError(f"K-exponent {e} not shiftable by eta={eta}")
                term = self.field.raw_new(ring.term_new(mono, coeff), ring.one)
                acc = acc + term * self.t ** int(extra)
            return acc

        num = shift_part(el.numer)
        den = shift_part(el.denom)
        return num / den

    # ------------------------------------------------------------------
    # kappa expansion

    def _split_by_k(self, poly) -> Dict[int, object]:
        """Split a PolyElement into {K-exponent: K-free field element}."""
        out: Dict[int, object] = {}
        ki = self._k_index
        ring = self.field.ring
        for mono, coeff in poly.terms():
            j = mono[ki]
            reduced = list(mono)
            reduced[ki] = 0
            term = ring.term_new(tuple(reduced), coeff)
            out[j] = out.get(j, ring.zero) + term
        return {j: self.field.raw_new(p, ring.one) for j, p in out.items() if p}

    def kappa_expand(self, el, max_ek: Fraction) -> Dict[Fraction, object]:
        """Laurent-expand ``el`` in K = kappa^(1/(2hG)) around kappa = 0.

        Returns {ek: coefficient} where ek is the kappa-exponent (a
        Fraction) and each coefficient is K-free.  Orders with
        ek > max_ek are discarded; the expansion is exact below that.
        """
        if not el:
            return {}
        unit = 2 * self.coxeter * self.G  # K-order per unit of ek
        jcap_abs = Fraction(max_ek) * unit
        num = self._split_by_k(el.numer)
        den = self._split_by_k(el.denom)
        s_num = min(num)
        s_den = min(den)
        num = {j - s_num: v for j, v in num.items()}
        den = {j - s_den: v for j, v in den.items()}
        base = s_num - s_den  # overall K-order offset
        jmax = jcap_abs - base  # expand the regular part up to this K-order
        if jmax < 0:
            return {}
        d0 = den.pop(0)
        # Reachable K-orders: additive closure of the supports.
        steps = sorted(set(den) | set(j for j in num if j != 0))
        reach = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for j in frontier:
                for s in steps:
                    t = j + s
                    if t <= jmax and t not in reach:
                        reach.add(t)
                        nxt.append(t)
            frontier = nxt
        inv: Dict[int, object] = {0: self.one / d0}
        for j in sorted(reach):
            if j == 0:
                continue
            acc = self.zero
            for s, dv in den.items():
                prev = inv.get(j - s)
                if prev is not None:
                    acc = acc + dv * prev
            if acc:
                inv[j] = -acc / d0
        out: Dict[Fraction, object] = {}
        for j in sorted(reach):
            acc = self.zero
            for jn, nv in num.items():
                iv = inv.get(j - jn)
                if iv is not None:
                    acc = acc + nv * iv
            if acc:
                out[Fraction(base + j, unit)] = acc
        return out

    # ------------------------------------------------------------------
    # canonical text form

    def transplant(self, other: "ScalarField", el):
        """Carry an element of ``other`` (same generator names, possibly a
        coarser granularity) into this field by name-matching the
        generators; exponents are rescaled by the granularity ratio.  Used
        to inject universal q-coefficients solved in an auxiliary field.

        The rescaling substitutes each generator g -> g^ratio, which is an
        injective ring map, so a numerator/denominator pair that is coprime
        in the source stays coprime here and no re-cancellation is needed."""
        if not el:
            return self.zero
        ratio, rem = divmod(self.G, other.G)
        if rem:
            raise ValueError(f"granularity {other.G} does not divide {self.G}")
        pos = []
        for name in other.gen_names:
            if name not in self.gens:
                raise ValueError(f"no generator {name!r} in target field")
            pos.append(self.gen_names.index(name))
        nself = len(self.gen_names)
        ring = self.field.ring

        def conv(p):
            d = {}
            for mono, coeff in p.terms():
                m = [0] * nself
                for src, e in enumerate(mono):
                    if e:
                        m[pos[src]] = e * ratio
                d[tuple(m)] = coeff
            return ring.from_dict(d)

        return self.field.raw_new(conv(el.numer), conv(el.denom))

    def only_gens(self, el, names) -> bool:
        """True if ``el`` involves no generators outside ``names``."""
        allowed = {self.gen_names.index(n) for n in names}
        for p in (el.numer, el.denom):
            for mono, _ in p.terms():
                for i, e in enumerate(mono):
                    if e and i not in allowed:
                        return False
        return True

    def canonical_str(self, el) -> str:
        """Deterministic, eval-able text form '(num)/(den)'."""
        if not el:
            return "(0)/(1)"
        return f"({self._poly_str(el.numer)})/({self._poly_str(el.denom)})"

    def _poly_str(self, p) -> str:
        terms = sorted(p.terms(), key=lambda mc: mc[0])
        parts = []
        for mono, coeff in terms:
            factors = [str(int(coeff))]
            for name, e in zip(self.gen_names, mono):
                if e:
                    factors.append(f"{name}**{e}" if e != 1 else name)
            parts.append("*".join(factors))
        return " + ".join(parts) if parts else "0"

    def parse(self, text: str):
        """Inverse of canonical_str (also accepts any python expression in
        the generators)."""
        ns = dict(self.gens)
        ns["Fraction"] = Fraction

        def ev(expr: str):
            val = eval(expr, {"__builtins__": {}}, ns)  # trusted input: our own serialization
            return self.from_fraction(val) if isinstance(val, (int, Fraction)) else val

        # canonical form '(num)/(den)': evaluate the sides separately so the
        # division happens in the field, never as python float division
        if text.startswith("(") and text.endswith(")") and ")/(" in text:
            num, den = text[1:-1].split(")/(", 1)
            if "(" not in num and "(" not in den:
                return ev(num) / ev(den)
        return ev(text)
