"""Multi-truncated graded formal series with exact completeness tracking.

A Series is a finite map  Key -> SMat  together with
  * a global prefactor exponent triple (plm, pkl, pwm) for the symbols
      Plm = q^(-2(lambda,mu)),  Pkl = q^(-2k(lambda,rho)/h),
      Pwm = q^(-2 omega (mu,rho)/h),
  * per-axis *support* and *completeness* windows, and
  * optional linear support / trust bounds mixing several axes.

Keys are (eu, ek, ey):  u = q^(-2 omega), kappa = q^(-2k), and one integer
z-degree per z-variable.  eu and ek are Fractions: weight spaces of
principal degree d contribute u- and kappa-exponents in (1/h)Z, and the
difference-operator sums over level -1 modules contribute quarter shifts.

Trust model
-----------
Each axis carries four optional numbers (None = unbounded):

    slo, shi : the *support window*.  A structural guarantee about the
        exact, untruncated object: every key of the true series has its
        value on this axis inside [slo, shi].
    clo, chi : the *completeness window*.  Every key whose axis values all
        lie in [clo, chi] (and which satisfies every trust bound below)
        carries an exactly-correct coefficient; a missing key is an exact
        zero there.

In addition a series may carry

    supp_bounds : linear bounds  sum_a c_a * key[a] >= const  satisfied by
        every key of the true object (e.g. the diagonal bound
        h*eu + ez >= -span of an entrywise-constructed series), and
    extra_bounds : linear trust bounds  sum_a c_a * key[a] <= const; keys
        violating any of them are outside the completeness region (these
        arise from z-rescalings, which shear a formal-axis window).

Soundness of products: a product key is marked complete only when *every*
decomposition of it into supported keys of the two factors stays inside
both factors' completeness regions.  Each trust constraint of one factor
is transported by adding the other factor's support minimum of the same
linear form; when that minimum cannot be derived from the declared support
data the operation raises TruncationError instead of silently over-trusting
(a dropped *support* bound is always sound; a dropped *trust* bound never
is).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import linalg
from .cartan import AffineCartanData, PairResult, Weight
from .matrices import SMat
from .scalars import ScalarField

_F0 = Fraction(0)


@dataclass(frozen=True)
class Key:
    eu: Fraction
    ek: Fraction
    ey: Tuple[int, ...]

    def __add__(self, other: "Key") -> "Key":
        return Key(self.eu + other.eu, self.ek + other.ek,
                   tuple(a + b for a, b in zip(self.ey, other.ey)))

    def axis(self, name: str, zvars: Tuple[str, ...]):
        if name == "u":
            return self.eu
        if name == "k":
            return self.ek
        return self.ey[zvars.index(name)]

    def sort_key(self):
        return (self.eu, self.ek, self.ey)


@dataclass
class Axis:
    slo: Optional[Fraction]         # support lower bound of the true object
    chi: Optional[Fraction]         # complete up to this value
    shi: Optional[Fraction] = None  # support upper bound of the true object
    clo: Optional[Fraction] = None  # complete down to this value


@dataclass(frozen=True)
class Bound:
    """A linear form over the axes with a constant.

    As a *trust* bound (extra_bounds) it means sum c_a*key[a] <= const
    inside the completeness region; as a *support* bound (supp_bounds) it
    means sum c_a*key[a] >= const for every key of the true object."""
    coeffs: Tuple[Tuple[str, Fraction], ...]
    const: Fraction

    def holds(self, key: Key, zvars) -> bool:
        tot = _F0
        for name, c in self.coeffs:
            tot += c * Fraction(key.axis(name, zvars))
        return tot <= self.const

    def holds_lower(self, key: Key, zvars) -> bool:
        tot = _F0
        for name, c in self.coeffs:
            tot += c * Fraction(key.axis(name, zvars))
        return tot >= self.const

    def value(self, key: Key, zvars) -> Fraction:
        tot = _F0
        for name, c in self.coeffs:
            tot += c * Fraction(key.axis(name, zvars))
        return tot


def _lin_norm(coeffs: Iterable[Tuple[str, Fraction]]) -> Tuple[Tuple[str, Fraction], ...]:
    acc: Dict[str, Fraction] = {}
    for name, c in coeffs:
        c = Fraction(c)
        if c:
            acc[name] = acc.get(name, _F0) + c
    return tuple(sorted((n, c) for n, c in acc.items() if c))


class _Empty:
    """Sentinel: the constraint region is empty (zero series)."""


_EMPTY = _Empty()


def _fm_project(ineqs: List[Tuple[Dict[str, Fraction], Fraction]],
                elim_vars) -> List[Tuple[Dict[str, Fraction], Fraction]]:
    """Fourier-Motzkin elimination of elim_vars from a system of linear
    inequalities  sum c x <= const.  Returns the projected system."""
    sys = []
    for cf, const in ineqs:
        sys.append(({n: Fraction(c) for n, c in cf.items() if c}, Fraction(const)))

    def norm(cf, const):
        return tuple(sorted(((n, c) for n, c in cf.items() if c),
                            key=lambda nc: str(nc[0]))), const

    for var in sorted(set(elim_vars), key=str):
        ups, lows, keep = [], [], []
        for cf, const in sys:
            a = cf.get(var, _F0)
            if a > 0:
                ups.append((cf, const, a))
            elif a < 0:
                lows.append((cf, const, -a))
            else:
                keep.append((cf, const))
        new = {}
        for cf, const in keep:
            it, cst = norm(cf, const)
            prev = new.get(it)
            if prev is None or cst < prev:
                new[it] = cst
        for cfu, cu, au in ups:
            for cfl, cl, al in lows:
                cf = {}
                for n in set(cfu) | set(cfl):
                    if n == var:
                        continue
                    v = al * cfu.get(n, _F0) + au * cfl.get(n, _F0)
                    if v:
                        cf[n] = v
                it, cst = norm(cf, al * cu + au * cl)
                prev = new.get(it)
                if prev is None or cst < prev:
                    new[it] = cst
        sys = [(dict(it), cst) for it, cst in new.items()]
    return sys


def _fm_sup(objective: Dict[str, Fraction],
            ineqs: List[Tuple[Dict[str, Fraction], Fraction]]):
    """Exact supremum of objective . x over {x : sum c x <= const for each
    inequality}, by Fourier-Motzkin elimination.  Returns a Fraction, None
    (unbounded), or _EMPTY (infeasible region)."""
    first = {n: -c for n, c in objective.items() if c}
    first["@t"] = Fraction(1)
    names = set(objective)
    for cf, _ in ineqs:
        names.update(cf)
    sys = _fm_project([(first, _F0)] + list(ineqs), names)
    sup: Optional[Fraction] = None
    for cf, const in sys:
        a = cf.get("@t", _F0)
        if a > 0:
            v = const / a
            if sup is None or v < sup:
                sup = v
        elif not a and const < 0:
            return _EMPTY
    return sup


@dataclass
class Context:
    field: ScalarField
    cartan: AffineCartanData


class TruncationError(RuntimeError):
    """An operation needed data beyond a series' completeness window."""


class Series:
    def __init__(self, ctx: Context, zvars: Tuple[str, ...],
                 data: Optional[Dict[Key, SMat]] = None,
                 pref: Tuple[Fraction, Fraction, Fraction] = (_F0, _F0, _F0),
                 axes: Optional[Dict[str, Axis]] = None,
                 extra_bounds: Tuple[Bound, ...] = (),
                 supp_bounds: Tuple[Bound, ...] = ()):
        self.ctx = ctx
        self.zvars = tuple(zvars)
        self.data: Dict[Key, SMat] = {k: v for k, v in (data or {}).items() if v}
        self.pref = (Fraction(pref[0]), Fraction(pref[1]), Fraction(pref[2]))
        if axes is None:
            axes = {}
        self.axes: Dict[str, Axis] = {}
        for name in self.axis_names():
            src = axes.get(name)
            if src is None:
                default_slo = _F0 if name in ("u", "k") else None
                self.axes[name] = Axis(default_slo, None, None, None)
            else:
                self.axes[name] = Axis(src.slo, src.chi, src.shi, src.clo)
        self.extra_bounds = tuple(extra_bounds)
        self.supp_bounds = tuple(supp_bounds)

    # ------------------------------------------------------------------

    def axis_names(self) -> Tuple[str, ...]:
        return ("u", "k") + self.zvars

    def key(self, eu=0, ek=0, ey: Optional[Sequence[int]] = None) -> Key:
        return Key(Fraction(eu), Fraction(ek), tuple(ey) if ey is not None else (0,) * len(self.zvars))

    def clone(self, data=None, pref=None, axes=None, extra_bounds=None,
              supp_bounds=None) -> "Series":
        return Series(self.ctx, self.zvars,
                      data if data is not None else self.data,
                      pref if pref is not None else self.pref,
                      axes if axes is not None else self.axes,
                      extra_bounds if extra_bounds is not None else self.extra_bounds,
                      supp_bounds if supp_bounds is not None else self.supp_bounds)

    def trusted(self, key: Key) -> bool:
        for name in self.axis_names():
            ax = self.axes[name]
            v = Fraction(key.axis(name, self.zvars))
            if ax.chi is not None and v > ax.chi:
                return False
            if ax.clo is not None and v < ax.clo:
                return False
        return all(b.holds(key, self.zvars) for b in self.extra_bounds)

    def in_support(self, key: Key) -> bool:
        """Whether the key lies inside the declared support region; keys
        outside it are known to be zero in the true object (hence complete
        even when the trust windows do not cover them)."""
        for name in self.axis_names():
            ax = self.axes[name]
            v = Fraction(key.axis(name, self.zvars))
            if ax.slo is not None and v < ax.slo:
                return False
            if ax.shi is not None and v > ax.shi:
                return False
        return all(b.holds_lower(key, self.zvars) for b in self.supp_bounds)

    def fully_exact(self) -> bool:
        """No truncation anywhere: every key of the true object is stored."""
        if self.extra_bounds:
            return False
        return all(a.chi is None and a.clo is None for a in self.axes.values())

    # -- declared (or, for fully exact series, observed) support data ----

    def _axis_lo(self, name: str) -> Optional[Fraction]:
        ax = self.axes[name]
        if ax.slo is not None:
            return ax.slo
        if self.fully_exact():
            if not self.data:
                return _F0
            return min(Fraction(k.axis(name, self.zvars)) for k in self.data)
        return None

    def _axis_hi(self, name: str) -> Optional[Fraction]:
        ax = self.axes[name]
        if ax.shi is not None:
            return ax.shi
        if self.fully_exact():
            if not self.data:
                return _F0
            return max(Fraction(k.axis(name, self.zvars)) for k in self.data)
        return None

    def effective_slo(self, name: str) -> Fraction:
        v = self._axis_lo(name)
        if v is None:
            raise TruncationError(f"axis {name}: no structural lower support bound")
        return v

    def support_max(self, name: str) -> Fraction:
        if not self.data:
            return _F0
        return max(Fraction(k.axis(name, self.zvars)) for k in self.data)

    def _support_ineqs(self, conditioned: Optional[Dict[str, Tuple[Optional[Fraction], Optional[Fraction]]]] = None
                       ) -> List[Tuple[Dict[str, Fraction], Fraction]]:
        """The declared support region as a list of <=-inequalities.
        `conditioned` optionally intersects with extra per-axis (lo, hi)
        windows (used for products conditioned on a result box)."""
        out: List[Tuple[Dict[str, Fraction], Fraction]] = []
        one = Fraction(1)
        for name in self.axis_names():
            lo = self._axis_lo(name)
            hi = self._axis_hi(name)
            if conditioned and name in conditioned:
                clo, chi = conditioned[name]
                if clo is not None:
                    lo = clo if lo is None else max(lo, clo)
                if chi is not None:
                    hi = chi if hi is None else min(hi, chi)
            if lo is not None:
                out.append(({name: -one}, -lo))
            if hi is not None:
                out.append(({name: one}, hi))
        for b in self.supp_bounds:
            out.append(({n: -c for n, c in b.coeffs}, -b.const))
        return out

    def _trust_ineqs(self) -> List[Tuple[Dict[str, Fraction], Fraction]]:
        return [(dict(b.coeffs), b.const) for b in self._trust_constraints()]

    def lin_lo(self, coeffs: Tuple[Tuple[str, Fraction], ...],
               conditioned=None) -> Optional[Fraction]:
        """A lower bound for the linear form sum c_a*key[a] over the support
        of the *true* object, derived from declared windows and support
        bounds.  None means unbounded/underivable; an empty support region
        gives None as well (callers treat the factor as potentially zero)."""
        obj = {n: -c for n, c in coeffs}
        sup = _fm_sup(obj, self._support_ineqs(conditioned))
        if sup is _EMPTY:
            return _F0 if not self.data else None
        return None if sup is None else -sup

    def lin_hi(self, coeffs: Tuple[Tuple[str, Fraction], ...],
               use_trust: bool = False,
               extra_ineqs: Optional[List[Tuple[Dict[str, Fraction], Fraction]]] = None
               ) -> Optional[Fraction]:
        """An upper bound for the linear form over the declared support,
        optionally intersected with the completeness region (use_trust)."""
        ineqs = self._support_ineqs()
        if use_trust:
            ineqs.extend(self._trust_ineqs())
        if extra_ineqs:
            ineqs.extend(extra_ineqs)
        sup = _fm_sup({n: c for n, c in coeffs}, ineqs)
        if sup is _EMPTY:
            return _F0 if not self.data else None
        return sup

    def widen_trust(self, drops: Dict[str, str]) -> "Series":
        """Remove per-axis trust constraints that are *provably redundant*:
        for each (axis, side) in drops (side 'lo' or 'hi'), certify that the
        support region intersected with the remaining trust constraints
        already implies the dropped window, then remove it.  Raises
        TruncationError if the certificate fails."""
        axes = {n: Axis(a.slo, a.chi, a.shi, a.clo) for n, a in self.axes.items()}
        for name, side in drops.items():
            ax = axes[name]
            if side == "lo":
                if ax.clo is None:
                    continue
                dropped_form = ((name, Fraction(-1)),)
                dropped_const = -ax.clo
                ax.clo = None
            elif side == "hi":
                if ax.chi is None:
                    continue
                dropped_form = ((name, Fraction(1)),)
                dropped_const = ax.chi
                ax.chi = None
            else:
                raise ValueError(f"side must be 'lo' or 'hi', got {side!r}")
            probe = self.clone(axes=axes)
            cert = probe.lin_hi(dropped_form, use_trust=True)
            if cert is None or cert > dropped_const:
                raise TruncationError(
                    f"cannot certify redundancy of the {side} trust window on "
                    f"axis {name} (bound {dropped_const}, certified {cert})")
        return self.clone(axes=axes)

    def _store(self, data: Dict[Key, SMat], key: Key, mat: SMat):
        if not mat:
            return
        cur = data.get(key)
        if cur is None:
            data[key] = mat
        else:
            s = cur + mat
            if s:
                data[key] = s
            else:
                del data[key]

    # ------------------------------------------------------------------
    # ring operations

    def _trust_constraints(self) -> List[Bound]:
        """All completeness constraints in <=-form (axis windows included)."""
        out: List[Bound] = []
        for name in self.axis_names():
            ax = self.axes[name]
            if ax.chi is not None:
                out.append(Bound(((name, Fraction(1)),), ax.chi))
            if ax.clo is not None:
                out.append(Bound(((name, Fraction(-1)),), -ax.clo))
        out.extend(self.extra_bounds)
        return out

    @staticmethod
    def _none_add(a: Optional[Fraction], b: Optional[Fraction]) -> Optional[Fraction]:
        return None if (a is None or b is None) else a + b

    @staticmethod
    def _none_sub(a: Optional[Fraction], b: Optional[Fraction]) -> Optional[Fraction]:
        return None if (a is None or b is None) else a - b

    def _product_windows(self, other: "Series",
                         box: Optional[Dict[str, Tuple[Optional[Fraction], Optional[Fraction]]]] = None):
        """Axes / bounds for a product (also used by tensor).

        A product key K is complete iff every support decomposition
        K = k1 + k2 (k1 in supp(f1), k2 in supp(f2)) has both parts inside
        their factor's completeness region.  For each trust constraint
        c.k_own <= A of a factor we therefore need

            sup { c.k_own : k_own in supp(own), K - k_own in supp(other) } <= A.

        That supremum is a piecewise-linear concave function of K; we obtain
        its affine upper pieces exactly by Fourier-Motzkin elimination of the
        decomposition variables (parametric in K) and keep, per constraint,
        one sound piece: if some piece is <= A over the whole working region
        the constraint is vacuous and dropped, otherwise the piece of maximal
        slack becomes a trust bound on K.

        `box` optionally declares that the caller will truncate the result to
        per-axis (lo, hi) windows; the vacuity/slack evaluation then only
        ranges over the box, which sharpens the transported constants."""
        axes: Dict[str, Axis] = {}
        extra: List[Bound] = []
        # support windows add
        for name in self.axis_names():
            a, b = self.axes[name], other.axes[name]
            axes[name] = Axis(self._none_add(a.slo, b.slo), None,
                              self._none_add(a.shi, b.shi), None)

        def region_window(name: str):
            """(lo, hi) of the working region on one product axis."""
            lo, hi = axes[name].slo, axes[name].shi
            if box and name in box:
                blo, bhi = box[name]
                if blo is not None:
                    lo = blo if lo is None else max(lo, blo)
                if bhi is not None:
                    hi = bhi if hi is None else min(hi, bhi)
            return lo, hi

        def region_sup(coeffs) -> Optional[Fraction]:
            """sup of a linear form over the working region (None = +inf)."""
            tot = _F0
            for name, c in coeffs:
                if not c:
                    continue
                lo, hi = region_window(name)
                v = hi if c > 0 else lo
                if v is None:
                    return None
                tot += c * v
            return tot

        names = self.axis_names()
        for src, oth in ((self, other), (other, self)):
            src_supp = src._support_ineqs()
            oth_supp = oth._support_ineqs()
            for bd in src._trust_constraints():
                cd = dict(bd.coeffs)
                # joint system over x (src part) and K; x-vars are tagged
                sys: List[Tuple[Dict, Fraction]] = []
                for cf, cst in src_supp:
                    sys.append(({("@x", n): v for n, v in cf.items()}, cst))
                for cf, cst in oth_supp:
                    row = {n: v for n, v in cf.items()}
                    row.update({("@x", n): -v for n, v in cf.items()})
                    sys.append((row, cst))
                obj = {("@x", n): -v for n, v in cd.items() if v}
                obj["@t"] = Fraction(1)
                sys.append((obj, _F0))
                proj = _fm_project(sys, [("@x", n) for n in names])
                candidates: List[Bound] = []
                vacuous = False
                for cf, cst in proj:
                    ct = cf.get("@t", _F0)
                    rest = tuple(sorted((n, v) for n, v in cf.items()
                                        if n != "@t" and v))
                    if ct > 0:
                        # t <= (cst - rest.K)/ct; safe iff that is <= A
                        candidates.append(Bound(
                            tuple((n, -v / ct) for n, v in rest),
                            bd.const - cst / ct))
                    elif not ct and rest:
                        # feasibility: decompositions need rest.K <= cst;
                        # if violated across the region, nothing decomposes
                        lo_neg = region_sup(tuple((n, -v) for n, v in rest))
                        if lo_neg is not None and -lo_neg > cst:
                            vacuous = True
                            break
                    elif not ct and not rest and cst < 0:
                        vacuous = True  # no decomposition exists at all
                        break
                if vacuous:
                    continue
                best = None
                best_slack = None
                unbounded: List[Bound] = []
                for cand in candidates:
                    s = region_sup(cand.coeffs)
                    if s is None:
                        unbounded.append(cand)
                        continue
                    slack = cand.const - s
                    if best_slack is None or slack > best_slack:
                        best, best_slack = cand, slack
                if best is not None and best_slack >= 0:
                    continue  # provably satisfied everywhere we will claim
                if best is None:
                    if not unbounded:
                        raise TruncationError(
                            f"cannot transport trust bound {bd.coeffs} <= "
                            f"{bd.const}: supremum over decompositions is "
                            f"unbounded on the working region")
                    # no candidate is measurable against the region; prefer
                    # one shaped like the original constraint, else the
                    # simplest, deterministically
                    shaped = [c for c in unbounded if c.coeffs == bd.coeffs]
                    pool = shaped or unbounded
                    best = min(pool, key=lambda c: (len(c.coeffs), str(c)))
                # fold single-axis bounds back into the window
                if len(best.coeffs) == 1:
                    (name, c), = best.coeffs
                    ax = axes[name]
                    if c > 0:
                        v = best.const / c
                        ax.chi = v if ax.chi is None else min(ax.chi, v)
                        continue
                    if c < 0:
                        v = best.const / c
                        ax.clo = v if ax.clo is None else max(ax.clo, v)
                        continue
                extra.append(best)
        # transport support bounds (droppable, so failures are silent)
        supp: List[Bound] = []
        for src, oth in ((self, other), (other, self)):
            for bd in src.supp_bounds:
                lo = oth.lin_lo(bd.coeffs)
                if lo is not None:
                    supp.append(Bound(bd.coeffs, bd.const + lo))
        return axes, tuple(dict.fromkeys(extra)), tuple(dict.fromkeys(supp))

    def _sum_windows(self, other: "Series"):
        axes: Dict[str, Axis] = {}
        for name in self.axis_names():
            a, b = self.axes[name], other.axes[name]
            slo = None if (a.slo is None or b.slo is None) else min(a.slo, b.slo)
            shi = None if (a.shi is None or b.shi is None) else max(a.shi, b.shi)
            chis = [c for c in (a.chi, b.chi) if c is not None]
            clos = [c for c in (a.clo, b.clo) if c is not None]
            axes[name] = Axis(slo, min(chis) if chis else None,
                              shi, max(clos) if clos else None)
        extra = tuple(dict.fromkeys(tuple(self.extra_bounds) + tuple(other.extra_bounds)))
        supp: List[Bound] = []
        for src, oth in ((self, other), (other, self)):
            for bd in src.supp_bounds:
                lo = oth.lin_lo(bd.coeffs)
                if lo is not None:
                    supp.append(Bound(bd.coeffs, min(bd.const, lo)))
        return axes, extra, tuple(dict.fromkeys(supp))

    def _compat(self, other: "Series", same_pref: bool):
        if self.zvars != other.zvars:
            raise ValueError(f"z-variable mismatch: {self.zvars} vs {other.zvars}")
        if same_pref and self.pref != other.pref:
            raise ValueError(f"prefactor mismatch: {self.pref} vs {other.pref}")

    def __add__(self, other: "Series") -> "Series":
        self._compat(other, same_pref=True)
        acc: Dict[Key, SMat] = dict(self.data)
        for k, v in other.data.items():
            self._store(acc, k, v)
        axes, extra, supp = self._sum_windows(other)
        return Series(self.ctx, self.zvars, acc, self.pref, axes, extra, supp)

    def __sub__(self, other: "Series") -> "Series":
        return self + other.scale_scalar(-self.ctx.field.one)

    def scale_scalar(self, c) -> "Series":
        return self.clone(data={k: v.scale(c) for k, v in self.data.items()} if c else {})

    def _convolve(self, other: "Series", combine, box=None) -> "Series":
        self._compat(other, same_pref=False)
        axes, extra, supp = self._product_windows(other, box)
        if box:
            for name, (blo, bhi) in box.items():
                ax = axes[name]
                chi, clo = ax.chi, ax.clo
                if bhi is not None:
                    chi = bhi if chi is None else min(chi, bhi)
                if blo is not None:
                    clo = blo if clo is None else max(clo, blo)
                axes[name] = Axis(ax.slo, chi, ax.shi, clo)
        pref = tuple(x + y for x, y in zip(self.pref, other.pref))
        out: Dict[Key, SMat] = {}
        probe = Series(self.ctx, self.zvars, {}, pref, axes, extra, supp)
        for k1, m1 in self.data.items():
            for k2, m2 in other.data.items():
                k = k1 + k2
                if not probe.trusted(k):
                    continue
                self._store(out, k, combine(m1, m2))
        probe.data = {k: v for k, v in out.items() if v}
        return probe

    def __mul__(self, other: "Series") -> "Series":
        """Composition: (self o other), key-wise convolution, truncated to
        the combined completeness region."""
        return self._convolve(other, lambda a, b: a * b)

    def mul_within(self, other: "Series",
                   box: Dict[str, Tuple[Optional[Fraction], Optional[Fraction]]]) -> "Series":
        """Product whose completeness is only claimed inside the per-axis
        box {axis: (lo, hi)}; the conditioning sharpens the transported
        trust constants (see _product_windows)."""
        return self._convolve(other, lambda a, b: a * b, box=box)

    def tensor(self, other: "Series") -> "Series":
        return self._convolve(other, lambda a, b: a.tensor(b))

    def apply_smat(self, left: Optional[SMat] = None, right: Optional[SMat] = None) -> "Series":
        out = {}
        for k, m in self.data.items():
            if left is not None:
                m = left * m
            if right is not None:
                m = m * right
            if m:
                out[k] = m
        return self.clone(data=out)

    def permute_legs(self, perm: Sequence[int]) -> "Series":
        """Permute the tensor legs of every coefficient matrix (labels only;
        z-keys are indexed by z-variable name, not by leg, so they stay)."""
        return self.clone(data={k: m.permute_legs(perm) for k, m in self.data.items()})

    def map_values(self, f: Callable[[SMat], SMat]) -> "Series":
        out = {}
        for k, m in self.data.items():
            w = f(m)
            if w:
                out[k] = w
        return self.clone(data=out)

    def extend_zvars(self, zvars: Sequence[str]) -> "Series":
        """Embed into a larger z-variable set (the series is constant in
        the new variables: support {0}, complete everywhere)."""
        zvars = tuple(zvars)
        pos = [zvars.index(v) for v in self.zvars]
        if len(set(zvars)) != len(zvars):
            raise ValueError("duplicate z-variables")
        data = {}
        for k, m in self.data.items():
            ey = [0] * len(zvars)
            for p, e in zip(pos, k.ey):
                ey[p] = e
            data[Key(k.eu, k.ek, tuple(ey))] = m
        axes = {name: self.axes[name] for name in ("u", "k")}
        for v in zvars:
            axes[v] = self.axes[v] if v in self.zvars else Axis(_F0, None, _F0, None)
        return Series(self.ctx, zvars, data, self.pref, axes,
                      self.extra_bounds, self.supp_bounds)

    def shift_keys(self, d_eu=_F0, d_ek=_F0, d_ey: Optional[Sequence[int]] = None) -> "Series":
        d_eu, d_ek = Fraction(d_eu), Fraction(d_ek)
        dk = Key(d_eu, d_ek, tuple(d_ey) if d_ey is not None else (0,) * len(self.zvars))
        data = {k + dk: v for k, v in self.data.items()}
        axes = {}
        for name in self.axis_names():
            a = self.axes[name]
            d = Fraction(dk.axis(name, self.zvars))
            axes[name] = Axis(None if a.slo is None else a.slo + d,
                              None if a.chi is None else a.chi + d,
                              None if a.shi is None else a.shi + d,
                              None if a.clo is None else a.clo + d)

        def shift_bound(b: Bound) -> Bound:
            delta = sum((c * Fraction(dk.axis(n, self.zvars)) for n, c in b.coeffs), _F0)
            return Bound(b.coeffs, b.const + delta)

        return self.clone(data=data, axes=axes,
                          extra_bounds=tuple(shift_bound(b) for b in self.extra_bounds),
                          supp_bounds=tuple(shift_bound(b) for b in self.supp_bounds))

    def apply_pair(self, pr: PairResult) -> "Series":
        """Multiply the whole series by the monomial/key content of a
        PairResult (coeff, key shifts, prefactor shifts)."""
        out = self.scale_scalar(pr.coeff) if pr.coeff != self.ctx.field.one else self
        out = out.shift_keys(pr.d_eu, pr.d_ek)
        pref = (self.pref[0] + pr.d_plm, self.pref[1] + pr.d_pkl, self.pref[2] + pr.d_pwm)
        return out.clone(pref=pref)

    # ------------------------------------------------------------------
    # truncation and trust management

    def truncate(self, chis: Dict[str, Fraction],
                 clos: Optional[Dict[str, Fraction]] = None) -> "Series":
        """Impose (possibly tighter) completeness bounds and drop keys
        outside them."""
        clos = clos or {}
        axes = {}
        for name in self.axis_names():
            a = self.axes[name]
            chi, clo = a.chi, a.clo
            c = chis.get(name)
            if c is not None:
                c = Fraction(c)
                chi = c if chi is None else min(chi, c)
            c = clos.get(name)
            if c is not None:
                c = Fraction(c)
                clo = c if clo is None else max(clo, c)
            axes[name] = Axis(a.slo, chi, a.shi, clo)
        probe = self.clone(data={}, axes=axes)
        probe.data = {k: v for k, v in self.data.items() if probe.trusted(k)}
        return probe

    def declare_support(self, axes: Optional[Dict[str, Axis]] = None,
                        supp_bounds: Tuple[Bound, ...] = ()) -> "Series":
        """Attach structural support information (the caller asserts it holds
        for the exact object).  Stored data violating it is rejected."""
        new_axes = dict(self.axes)
        for name, ax in (axes or {}).items():
            cur = new_axes[name]
            slo = ax.slo if cur.slo is None else (cur.slo if ax.slo is None else max(cur.slo, ax.slo))
            shi = ax.shi if cur.shi is None else (cur.shi if ax.shi is None else min(cur.shi, ax.shi))
            new_axes[name] = Axis(slo, cur.chi, shi, cur.clo)
        all_supp = tuple(dict.fromkeys(tuple(self.supp_bounds) + tuple(supp_bounds)))
        probe = self.clone(axes=new_axes, supp_bounds=all_supp)
        for k in self.data:
            for name in self.axis_names():
                ax = probe.axes[name]
                v = Fraction(k.axis(name, self.zvars))
                if (ax.slo is not None and v < ax.slo) or (ax.shi is not None and v > ax.shi):
                    raise ValueError(f"stored key {k} violates declared support on axis {name}")
            for b in probe.supp_bounds:
                if not b.holds_lower(k, self.zvars):
                    raise ValueError(f"stored key {k} violates declared support bound {b}")
        return probe

    # ------------------------------------------------------------------
    # inversion

    def invert(self) -> "Series":
        """Inverse by graded geometric recursion.

        Requires a unique componentwise-minimal support corner with an
        invertible matrix; the remainder must be supported on keys >= the
        corner on every axis (pre-flip z-axes with invert_z if needed).
        Each axis must be either complete below (clo None) or carry a
        declared support lower bound covered by the completeness window
        (clo <= slo), so that the corner is the true support minimum."""
        fld = self.ctx.field
        if not self.data:
            raise ZeroDivisionError("cannot invert the zero series")
        if self.extra_bounds:
            raise TruncationError("cannot invert a series with sheared trust bounds")
        for name in self.axis_names():
            ax = self.axes[name]
            if ax.clo is not None and (ax.slo is None or ax.clo > ax.slo):
                raise TruncationError(
                    f"axis {name}: completeness window does not reach the support corner")
        corner = Key(min(k.eu for k in self.data), min(k.ek for k in self.data),
                     tuple(min(k.ey[j] for k in self.data) for j in range(len(self.zvars))))
        m0 = self.data.get(corner)
        if m0 is None:
            raise ZeroDivisionError("no corner term: support minimum is not attained at one key")
        m0inv = _smat_inverse(m0, fld)
        # normalize: corner at key 0; N = m0inv*(shifted - corner term)
        shifted = self.shift_keys(-corner.eu, -corner.ek, tuple(-e for e in corner.ey))
        zero_key = shifted.key()
        ndata = {k: m0inv * v for k, v in shifted.data.items() if k != zero_key}
        n_axes = {name: Axis(_F0, shifted.axes[name].chi, None, None)
                  for name in self.axis_names()}
        n_series = Series(self.ctx, self.zvars, ndata, (_F0, _F0, _F0), n_axes)
        # geometric sum sum_j (-N)^j within the trust window
        labels = sorted({r for (r, c) in m0.data} | {c for (r, c) in m0.data})
        term = n_series.clone(data={zero_key: SMat.identity(labels, fld.one)})
        acc = term
        for _ in range(100000):
            term = term.__mul__(n_series).scale_scalar(-fld.one)
            if not term.data:
                break
            acc = acc + term
        else:
            raise TruncationError("series inversion did not terminate; "
                                  "truncate the relevant axes first")
        inv = acc.apply_smat(right=m0inv)
        inv = inv.shift_keys(-corner.eu, -corner.ek, tuple(-e for e in corner.ey))
        return inv.clone(pref=tuple(-p for p in self.pref))

    # ------------------------------------------------------------------
    # argument shifts (lambda / mu / formal / z)

    def shifted_lambda(self, weight_fn: Callable[[tuple, tuple], Weight],
                       shift_range: Optional[Dict[str, Tuple[Fraction, Fraction]]] = None
                       ) -> "Series":
        """lambda -> lambda + nu(entry): substitute on l-monomials and push
        the induced prefactor corrections (entry-wise nu from weight_fn).

        shift_range optionally declares the [min, max] of the induced
        entry-wise formal-key shifts per axis ('u'/'k'); when omitted it is
        derived from the entries actually present, which is exact whenever
        every possible entry label occurs in the data (or the prefactor
        exponents are zero so no key shifts arise)."""
        return self._shifted_arg("lam", weight_fn, shift_range)

    def shifted_mu(self, weight_fn: Callable[[tuple, tuple], Weight],
                   shift_range: Optional[Dict[str, Tuple[Fraction, Fraction]]] = None
                   ) -> "Series":
        return self._shifted_arg("mu", weight_fn, shift_range)

    def _windows_after_entry_shift(self, ranges: Dict[str, Tuple[Fraction, Fraction]]):
        """Adjust axes and bounds for an entry-dependent key shift whose
        per-axis range is given: support [+smin, +smax], completeness
        [clo+smax, chi+smin]; a linear bound gains min over the shift box."""
        axes = {}
        for name in self.axis_names():
            a = self.axes[name]
            smin, smax = ranges.get(name, (_F0, _F0))
            axes[name] = Axis(None if a.slo is None else a.slo + smin,
                              None if a.chi is None else a.chi + smin,
                              None if a.shi is None else a.shi + smax,
                              None if a.clo is None else a.clo + smax)

        def adj(b: Bound) -> Bound:
            delta = _F0
            for name, c in b.coeffs:
                smin, smax = ranges.get(name, (_F0, _F0))
                delta += c * (smin if c > 0 else smax)
            return Bound(b.coeffs, b.const + delta)

        return (axes, tuple(adj(b) for b in self.extra_bounds),
                tuple(adj(b) for b in self.supp_bounds))

    def _shifted_arg(self, side: str, weight_fn, shift_range=None) -> "Series":
        fld = self.ctx.field
        car = self.ctx.cartan
        plm, pkl, pwm = self.pref
        out: Dict[Key, SMat] = {}
        rho = car.rho
        h = car.coxeter
        subs_cache: Dict[tuple, dict] = {}
        seen_shifts: Dict[str, List[Fraction]] = {"u": [], "k": []}
        for k, m in self.data.items():
            for (r, c), v in m.data.items():
                nu = weight_fn(r, c)
                nu_key = nu.coords
                if nu_key not in subs_cache:
                    vals = {}
                    for i in range(1, car.rank + 1):
                        x = car.pair_concrete(nu, car.alpha(i))
                        if x:
                            gen = f"a{i}" if side == "lam" else f"b{i}"
                            vals[gen] = fld.q_pow(Fraction(-2 * x, fld.G)) * fld.gens[gen]
                    nr = car.pair_concrete(nu, rho)
                    subs_cache[nu_key] = {"vals": vals, "nu_rho": nr}
                cc = subs_cache[nu_key]
                nv = fld.subs(v, cc["vals"]) if cc["vals"] else v
                d_eu = _F0
                d_ek = _F0
                if side == "lam":
                    # Plm^plm gains q^(-2 plm (nu, mu)) : an m-monomial
                    if plm:
                        nv = nv * _mu_monomial(fld, car, nu, plm)
                    if pkl:
                        d_ek = pkl * Fraction(cc["nu_rho"], 1) / h
                else:
                    if plm:
                        nv = nv * _lam_monomial(fld, car, nu, plm)
                    if pwm:
                        d_eu = pwm * Fraction(cc["nu_rho"], 1) / h
                seen_shifts["u"].append(d_eu)
                seen_shifts["k"].append(d_ek)
                if not nv:
                    continue
                nk = Key(k.eu + d_eu, k.ek + d_ek, k.ey)
                self._store(out, nk, SMat({(r, c): nv}))
        if shift_range is None:
            shift_range = {name: ((min(vs), max(vs)) if vs else (_F0, _F0))
                           for name, vs in seen_shifts.items()}
        axes, extra, supp = self._windows_after_entry_shift(shift_range)
        return self.clone(data=out, axes=axes, extra_bounds=extra, supp_bounds=supp)

    def map_entries_pair(self, fn: Callable[[tuple, tuple], PairResult],
                         shift_range: Optional[Dict[str, Tuple[Fraction, Fraction]]] = None
                         ) -> "Series":
        """Entry-wise multiplication by a PairResult-valued function of the
        (row, col) labels: each entry is scaled by the coefficient and moved
        by the (d_eu, d_ek) key shift.  All entries must agree on the
        prefactor shifts (these are label-independent symbols)."""
        out: Dict[Key, SMat] = {}
        pr_pref = None
        cache: Dict[tuple, PairResult] = {}
        seen: Dict[str, List[Fraction]] = {"u": [], "k": []}
        for k, m in self.data.items():
            for (r, c), v in m.data.items():
                ck = (r, c)
                pr = cache.get(ck)
                if pr is None:
                    pr = fn(r, c)
                    cache[ck] = pr
                p = (pr.d_plm, pr.d_pkl, pr.d_pwm)
                if pr_pref is None:
                    pr_pref = p
                elif pr_pref != p:
                    raise ValueError("entry-dependent prefactor shift is not representable")
                seen["u"].append(Fraction(pr.d_eu))
                seen["k"].append(Fraction(pr.d_ek))
                nv = v * pr.coeff
                if not nv:
                    continue
                nk = Key(k.eu + Fraction(pr.d_eu), k.ek + Fraction(pr.d_ek), k.ey)
                self._store(out, nk, SMat({(r, c): nv}))
        if shift_range is None:
            shift_range = {name: ((min(vs), max(vs)) if vs else (_F0, _F0))
                           for name, vs in seen.items()}
        axes, extra, supp = self._windows_after_entry_shift(shift_range)
        pref = self.pref
        if pr_pref is not None:
            pref = (pref[0] + pr_pref[0], pref[1] + pr_pref[1], pref[2] + pr_pref[2])
        return self.clone(data=out, pref=pref, axes=axes,
                          extra_bounds=extra, supp_bounds=supp)

    def shift_formal(self, which: str, eta: int) -> "Series":
        """omega -> omega + eta (which='u') or k -> k + eta (which='k')."""
        fld = self.ctx.field
        car = self.ctx.cartan
        h = car.coxeter
        out = {}
        for k, m in self.data.items():
            a = k.eu if which == "u" else k.ek
            factor = fld.q_pow(-2 * eta * a) if a else fld.one
            mm = m.scale(factor) if factor != fld.one else m
            if which == "k":
                mm = mm.map_values(lambda v: fld.shift_K(v, eta))
            if mm:
                out[k] = mm
        res = self.clone(data=out)
        # prefactor corrections
        plm, pkl, pwm = self.pref
        if which == "u" and pwm:
            # Pwm^pwm gains q^(-2 eta (mu,rho)/h)^pwm : m-monomial
            res = res.clone(data={k: v.scale(_mu_monomial(fld, car, car.rho.scale(Fraction(eta, h)), pwm))
                                  for k, v in res.data.items()})
        if which == "k" and pkl:
            res = res.clone(data={k: v.scale(_lam_monomial(fld, car, car.rho.scale(Fraction(eta, h)), pkl))
                                  for k, v in res.data.items()})
        return res

    def scale_z(self, var: str, which: str) -> "Series":
        """z_var -> p * z_var (which='k', p = q^{2k} = kappa^{-1}) or
        z_var -> s * z_var (which='u', s = q^{2 omega} = u^{-1}).

        A z-degree-d coefficient moves to (ek - d) resp. (eu - d); all
        windows and bounds on the formal axis become sheared linear bounds
        in the new coordinates."""
        j = self.zvars.index(var)
        out = {}
        for k, m in self.data.items():
            d = k.ey[j]
            nk = Key(k.eu - (d if which == "u" else 0), k.ek - (d if which == "k" else 0), k.ey)
            self._store(out, nk, m)
        axes = dict(self.axes)
        extra: List[Bound] = []
        supp: List[Bound] = []
        one = Fraction(1)
        ax = axes[which]
        # old formal value = new formal value + z-degree
        if ax.chi is not None:
            extra.append(Bound(_lin_norm(((which, one), (var, one))), ax.chi))
        if ax.clo is not None:
            extra.append(Bound(_lin_norm(((which, -one), (var, -one))), -ax.clo))
        if ax.slo is not None:
            supp.append(Bound(_lin_norm(((which, one), (var, one))), ax.slo))
        if ax.shi is not None:
            supp.append(Bound(_lin_norm(((which, -one), (var, -one))), -ax.shi))
        axes[which] = Axis(None, None, None, None)

        def shear(b: Bound) -> Bound:
            coeffs = dict(b.coeffs)
            if which in coeffs:
                coeffs[var] = coeffs.get(var, _F0) + coeffs[which]
            return Bound(_lin_norm(coeffs.items()), b.const)

        extra.extend(shear(b) for b in self.extra_bounds)
        supp.extend(shear(b) for b in self.supp_bounds)
        return self.clone(data=out, axes=axes,
                          extra_bounds=tuple(dict.fromkeys(extra)),
                          supp_bounds=tuple(dict.fromkeys(supp)))

    def invert_z(self, var: str) -> "Series":
        """z_var -> z_var^{-1}: negate that z-degree everywhere (windows and
        bounds flip accordingly)."""
        j = self.zvars.index(var)
        out = {}
        for k, m in self.data.items():
            ey = list(k.ey)
            ey[j] = -ey[j]
            out[Key(k.eu, k.ek, tuple(ey))] = m
        axes = dict(self.axes)
        a = axes[var]
        axes[var] = Axis(None if a.shi is None else -a.shi,
                         None if a.clo is None else -a.clo,
                         None if a.slo is None else -a.slo,
                         None if a.chi is None else -a.chi)

        def flip(b: Bound) -> Bound:
            coeffs = dict(b.coeffs)
            if var in coeffs:
                coeffs[var] = -coeffs[var]
            return Bound(_lin_norm(coeffs.items()), b.const)

        return self.clone(data=out, axes=axes,
                          extra_bounds=tuple(flip(b) for b in self.extra_bounds),
                          supp_bounds=tuple(flip(b) for b in self.supp_bounds))

    # ------------------------------------------------------------------
    # comparison

    def compare(self, other: "Series") -> List[Tuple[Key, tuple, object, object]]:
        """Exact comparison on the intersection of the trust windows.
        Returns a list of (key, (row, col), left_value, right_value)."""
        if self.zvars != other.zvars:
            raise ValueError("z-variable mismatch")
        if self.pref != other.pref:
            return [(Key(_F0, _F0, (0,) * len(self.zvars)), ("prefactor",),
                     self.pref, other.pref)]
        fails = []
        keys = set(self.data) | set(other.data)
        zero = SMat()
        for k in sorted(keys, key=Key.sort_key):
            if not (self.trusted(k) and other.trusted(k)):
                continue
            a = self.data.get(k, zero)
            b = other.data.get(k, zero)
            if a == b:
                continue
            labels = set(a.data) | set(b.data)
            for lab in sorted(labels):
                va = a.data.get(lab)
                vb = b.data.get(lab)
                if va != vb:
                    fails.append((k, lab, va, vb))
        return fails

    # ------------------------------------------------------------------

    def __repr__(self):
        return (f"Series(zvars={self.zvars}, keys={len(self.data)}, "
                f"pref={self.pref})")


def _mu_monomial(fld: ScalarField, car: AffineCartanData, nu: Weight, power: Fraction):
    """q^(-2 power (nu, mu)) as an m-monomial (nu concrete)."""
    out = fld.one
    # nu = sum x_i alpha_i (+ Lambda0/delta parts which pair to 0 with mu)
    for i in range(1, car.rank + 1):
        x = nu.coords[i - 1]
        if x:
            out = out * fld.m_pow(i, power * x)
    return out


def _lam_monomial(fld: ScalarField, car: AffineCartanData, nu: Weight, power: Fraction):
    out = fld.one
    for i in range(1, car.rank + 1):
        x = nu.coords[i - 1]
        if x:
            out = out * fld.l_pow(i, power * x)
    return out


def _smat_inverse(m: SMat, fld: ScalarField) -> SMat:
    labels = sorted({r for (r, c) in m.data} | {c for (r, c) in m.data})
    idx = {lab: i for i, lab in enumerate(labels)}
    n = len(labels)
    dense = [[fld.zero] * n for _ in range(n)]
    for (r, c), v in m.data.items():
        dense[idx[r]][idx[c]] = v
    inv = linalg.inverse(dense)
    out = {}
    for i in range(n):
        for j in range(n):
            if inv[i][j]:
                out[(labels[i], labels[j])] = inv[i][j]
    return SMat(out)
