"""The quantum R-matrix with spectral parameter.

Structure: the R-matrix factors as

    R = q^CF . Theta,     Theta = sum_{n>=0} Theta_n,

where CF is the Cartan factor with exponent

    CF(w1,w2) = (fin w1, fin w2) + (lev(w1) dd(w2) + dd(w1) lev(w2)) / h,
    dd(w) = (w, rhot),  lev(w) = (w, delta),

and Theta_n lies in U(n+)_n (x) U(n-)_{-n} (principal degree n), with
Theta_0 = 1 (x) 1.  The nilpotent part is universal: its coefficients over
word bases are rational functions of q only.  They are built once, degree
by degree, from a dual-basis construction: per weight-content block the
inverse of the word pairing Gram matrix, calibrated by one row of the
defining recursion and verified against sampled recursion rows (with a
slow full-recursion reference solver kept as an independent oracle).  The
table is persisted to a disk cache.  Evaluating the word coefficients in
concrete modules then gives every R-matrix the engine needs, including on
truncated infinite-dimensional legs.

For finite-dimensional evaluation modules there is a second, fully
independent construction (used as an oracle): a direct graded linear solve
of the intertwining property

    R Delta(x) = Delta^op(x) R

on V1 (x) V2, normalized by requiring that the component of principal
bidegree zero equal the Cartan factor and that the reference diagonal
entry carry no higher z-corrections (the intertwining property alone only
determines R up to a scalar series in z).

Spectral parameter: (D_z (x) 1)R multiplies each term by z^(principal
degree of the first tensor component).  On evaluation modules that degree
is carried by the z-degrees of the generator matrices; on graded modules
(Verma/integrable) it is the degree change, and z-powers are attached by
degree splitting at the point of use.
"""

from __future__ import annotations

import itertools
import json
import os
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from . import linalg
from .cartan import AffineCartanData, Weight
from .matrices import SMat
from .modules import GradedModule, WordQuotient, build_verma, scalar_pair
from .scalars import ScalarField
from .series import Axis, Context, Key, Series

_F0 = Fraction(0)


# ---------------------------------------------------------------------------
# Cartan factor


def cartan_exponent(cartan: AffineCartanData, w1: Weight, w2: Weight) -> Fraction:
    """Exponent of q in the Cartan factor on a pair of concrete weights.

    With the (D, D) = 0 normalization of the invariant form, the
    level-scaling coupling (c (x) D + D (x) c)/h plus the h'-block inverse
    form add up to exactly the full invariant pairing (w1, w2): the
    projection to h' removes the same cross terms that the coupling
    reinstates."""
    return cartan.pair_concrete(Weight(w1.coords), Weight(w2.coords))


def cartan_factor_scalar(field: ScalarField, cartan: AffineCartanData,
                         w1: Weight, w2: Weight, power: Fraction = Fraction(1)):
    """q^(power * (w1, w2)) as a field element (symbolic atoms become
    a_i/b_i-monomials and K-powers; raises if u-keys or mixed prefactor
    symbols would be needed)."""
    return scalar_pair(field, cartan, w1, w2, Fraction(power) / 2)


def cartan_factor(ctx: Context, V1: GradedModule, V2: GradedModule, power: int = 1) -> SMat:
    """Diagonal matrix q^(power * CF) over the basis of V1 (x) V2."""
    fld = ctx.field
    out = {}
    for i, w1 in enumerate(V1.weights):
        for j, w2 in enumerate(V2.weights):
            out[((i, j), (i, j))] = cartan_factor_scalar(fld, ctx.cartan, w1, w2,
                                                         Fraction(power))
    return SMat(out)


# ---------------------------------------------------------------------------
# word actions


def word_matrix(module: GradedModule, fam: str, word: tuple) -> SMat:
    """Matrix of X_{w1} X_{w2} ... X_{wd} (left-to-right composition)."""
    if not word:
        return SMat.identity(module.labels(), module.ctx.field.one)
    out = module.smat(fam, word[0])
    for letter in word[1:]:
        out = out * module.smat(fam, letter)
    return out


def word_zdeg(module: GradedModule, fam: str, word: tuple) -> int:
    return sum(module.zdeg(fam, letter) for letter in word)


def _mat_zpower(module: GradedModule, mat: SMat) -> int:
    """Spectral power of a weight-homogeneous operator on a graded module:
    the delta-coordinate change of its entries."""
    for (dst, src) in mat.data:
        d = Fraction(module.weights[dst[0]].coords[-1] - module.weights[src[0]].coords[-1])
        if d.denominator != 1:
            raise ValueError("non-integer delta-degree change")
        return int(d)
    return 0


def word_zpower(module: GradedModule, fam: str, word: tuple, mat: SMat) -> int:
    """z-power acquired under D_z (x) 1 by this word acting on the leg.

    Evaluation-type modules (untruncated) carry it on the generator
    z-degrees; graded modules carry it in the delta-coordinates of their
    weights."""
    if module.d_max is None:
        return word_zdeg(module, fam, word)
    return _mat_zpower(module, mat)


def gen_zpower(module: GradedModule, fam: str, i: int) -> int:
    if module.d_max is None:
        return module.zdeg(fam, i)
    return _mat_zpower(module, module.smat(fam, i))


def rho_span(module: GradedModule) -> Fraction:
    """max over basis weights of (rho, w - w') -- bounds the finite part of
    any weight shift the module supports."""
    cartan = module.ctx.cartan
    vals = [cartan.pair_concrete(Weight(w.coords[:-2] + (_F0, _F0)), cartan.rho)
            for w in module.weights]
    return max(vals) - min(vals) if vals else _F0


# ---------------------------------------------------------------------------
# universal nilpotent part

_THETA_CACHE: Dict[tuple, Dict[int, Dict[tuple, object]]] = {}

# Convention knobs of the bilinear word pairing used by theta_universal,
# pinned empirically against theta_recursion_reference at low degree (the
# per-block scalar calibration below absorbs any residual normalization).
_PAIR_AFTER = True    # q-weight counts the letters after the matched one
_PAIR_SIGMA = 1       # sign of the q-weight exponent
_GRAM_FLIP = False    # use the transpose of the Gram inverse
# Degrees up to which every recursion row is checked; deeper degrees check
# a deterministic sample per content block.
_THETA_FULL_VERIFY = 4
_THETA_SAMPLES = 24


# Solved coefficients are also persisted on disk: computing them afresh at
# the depths the verifiers need takes minutes, so the package ships a
# prebuilt table (regenerable with theta_regenerate_cache) and falls back
# to a per-user cache, then to computing.  Loaded tables carry the solve
# conventions and are ignored on any mismatch; tests check the table
# against the independent reference solver at low degree.
_THETA_FORMAT = 1
_THETA_SOLVE_GRANULARITY = 4


def _theta_cache_paths(cartan: AffineCartanData) -> Tuple[str, str]:
    fname = f"theta_r{cartan.rank}_h{cartan.coxeter}.json"
    shipped = os.path.join(os.path.dirname(__file__), "data", fname)
    user = os.path.join(os.path.expanduser("~"), ".cache", "qaffine", fname)
    return shipped, user


def _theta_doc_matches(doc: dict, cartan: AffineCartanData) -> bool:
    return (doc.get("format") == _THETA_FORMAT
            and doc.get("rank") == cartan.rank
            and doc.get("coxeter") == cartan.coxeter
            and doc.get("granularity") == _THETA_SOLVE_GRANULARITY
            and doc.get("pair_after") == _PAIR_AFTER
            and doc.get("pair_sigma") == _PAIR_SIGMA
            and doc.get("gram_flip") == _GRAM_FLIP)


def _theta_load(ctx: Context, n_max: int):
    """Load coefficients from the shipped or per-user table, transplanted
    into ctx.field; None if no deep-enough matching table exists."""
    cartan = ctx.cartan
    for path in _theta_cache_paths(cartan):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, ValueError):
            continue
        if not _theta_doc_matches(doc, cartan) or doc.get("depth", -1) < n_max:
            continue
        sf = ScalarField(cartan.rank, cartan.coxeter,
                         granularity=_THETA_SOLVE_GRANULARITY)
        out: Dict[int, Dict[Tuple[tuple, tuple], object]] = {}
        for ns, cmap in doc["coeffs"].items():
            d: Dict[Tuple[tuple, tuple], object] = {}
            for key, text in cmap.items():
                wp_s, wm_s = key.split("|")
                wp = tuple(int(x) for x in wp_s.split(",") if x)
                wm = tuple(int(x) for x in wm_s.split(",") if x)
                d[(wp, wm)] = ctx.field.transplant(sf, sf.parse(text))
            out[int(ns)] = d
        return out
    return None


def _theta_store(cartan: AffineCartanData, sf: ScalarField,
                 c: Dict[int, Dict[Tuple[tuple, tuple], object]]) -> None:
    """Write the solved table (elements of the auxiliary field sf) to the
    per-user cache unless an equally deep one is already there."""
    user = _theta_cache_paths(cartan)[1]
    depth = max(c)
    try:
        with open(user, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if _theta_doc_matches(doc, cartan) and doc.get("depth", -1) >= depth:
            return
    except (OSError, ValueError):
        pass
    coeffs = {str(n): {",".join(map(str, wp)) + "|" + ",".join(map(str, wm)):
                       sf.canonical_str(v)
                       for (wp, wm), v in sorted(cn.items())}
              for n, cn in c.items()}
    doc = {"format": _THETA_FORMAT, "rank": cartan.rank,
           "coxeter": cartan.coxeter,
           "granularity": _THETA_SOLVE_GRANULARITY,
           "pair_after": _PAIR_AFTER, "pair_sigma": _PAIR_SIGMA,
           "gram_flip": _GRAM_FLIP, "depth": depth, "coeffs": coeffs}
    try:
        os.makedirs(os.path.dirname(user), exist_ok=True)
        tmp = user + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
        os.replace(tmp, user)
    except OSError:
        pass  # caching is best-effort


def _content(ngen: int, word: tuple) -> tuple:
    out = [0] * ngen
    for letter in word:
        out[letter] += 1
    return tuple(out)


def _by_content(ngen: int, words) -> Dict[tuple, List[tuple]]:
    out: Dict[tuple, List[tuple]] = {}
    for w in words:
        out.setdefault(_content(ngen, w), []).append(w)
    return out


def theta_universal(ctx: Context, n_max: int) -> Dict[int, Dict[Tuple[tuple, tuple], object]]:
    """Coefficients c_n[(word_plus, word_minus)] of Theta_n over the echelon
    word bases, as elements of ctx.field (rational in q only).

    Construction: Theta_n is the canonical element of the nondegenerate
    bilinear pairing between the raising and lowering word algebras in each
    principal degree, so its coefficient matrix per letter-content block is
    the inverse Gram matrix of that pairing -- whose entries are small
    Laurent polynomials in q, keeping the elimination cheap at depths where
    the generic-weight intertwining solve (theta_recursion_reference) is
    intractable.  The overall scalar of each block is calibrated from one
    row of that intertwining recursion, and further rows are checked
    exactly (all of them at low degree, a deterministic sample deeper);
    any convention mismatch raises instead of propagating.
    """
    cartan = ctx.cartan
    cache_key = (cartan.rank, id(ctx.field))
    hit = _THETA_CACHE.get(cache_key)
    if hit is not None and max(hit) >= n_max:
        return hit
    loaded = _theta_load(ctx, n_max)
    if loaded is not None:
        _THETA_CACHE[cache_key] = loaded
        return loaded
    # The auxiliary solve involves only integer and half-integer q-exponents,
    # so a much coarser granularity keeps the rational arithmetic cheap; the
    # transplant at the end rescales exponents into the engine's field.
    sf = ScalarField(cartan.rank, cartan.coxeter,
                     granularity=_THETA_SOLVE_GRANULARITY)
    sctx = Context(sf, cartan)
    lam_c = cartan.lam()
    low = build_verma(sctx, lam_c, n_max, lowest=True, name="genN")
    wq = WordQuotient.get(sf, cartan, n_max)
    index: Dict[tuple, int] = {w: i for i, w in enumerate(low.words)}
    ngen = cartan.rank + 1

    # Pairing values involve only integer q-exponents, so the Gram
    # elimination runs in a granularity-1 field where the integer
    # arithmetic inside gcds is several times smaller.
    gp = ScalarField(cartan.rank, cartan.coxeter, granularity=1)

    rp = {(i, j): cartan.pair_concrete(cartan.alpha(i), cartan.alpha(j))
          for i in range(ngen) for j in range(ngen)}

    memo: Dict[tuple, object] = {}

    def pair_words(wp: tuple, wm: tuple):
        """Bilinear pairing of a raising word with a lowering word (free
        words, same letter content; the letter-pairing constant is folded
        into the per-block calibration scalar)."""
        if not wp:
            return gp.one if not wm else gp.zero
        v = memo.get((wp, wm))
        if v is not None:
            return v
        i, rest = wp[0], wp[1:]
        total = sum((rp[(i, j)] for j in wm), _F0)
        acc = gp.zero
        before = _F0
        for m, j in enumerate(wm):
            if j == i:
                sub = pair_words(rest, wm[:m] + wm[m + 1:])
                if sub:
                    w = (total - before - rp[(i, i)]) if _PAIR_AFTER else before
                    acc = acc + gp.q_pow(_PAIR_SIGMA * w) * sub
            before = before + rp[(i, j)]
        memo[(wp, wm)] = acc
        return acc

    phi = {i: scalar_pair(sf, cartan, lam_c, cartan.alpha(i), Fraction(-1, 2))
           for i in range(ngen)}

    k1cache: Dict[tuple, object] = {}

    def k1_of(i: int, bp: tuple):
        val = k1cache.get((i, bp))
        if val is None:
            val = scalar_pair(sf, cartan, low.weights[index[bp]],
                              cartan.alpha(i), Fraction(1, 2))
            k1cache[(i, bp)] = val
        return val

    c: Dict[int, Dict[Tuple[tuple, tuple], object]] = {0: {((), ()): sf.one}}
    for n in range(n_max):
        bps_by_c = _by_content(ngen, wq.basis_words[n])
        cn_by_bp: Dict[tuple, List[tuple]] = {}
        for (wp0, wm0), cv in c[n].items():
            cn_by_bp.setdefault(wp0, []).append((wm0, cv))

        def rhs_val(i: int, bp: tuple, bm: tuple):
            # right-hand side of the intertwining recursion row (i, bp) at
            # target word bm, assembled from the degree-n coefficients
            acc = sf.zero
            for wm0, cv in cn_by_bp.get(bp, ()):
                rv = wq.reduce(wm0 + (i,)).get(bm)
                if rv:
                    acc = acc + cv * phi[i] * rv
                rv = wq.reduce((i,) + wm0).get(bm)
                if rv:
                    acc = acc - cv * k1_of(i, bp) * rv
            return acc

        cn: Dict[Tuple[tuple, tuple], object] = {}
        for cc, wps in _by_content(ngen, wq.basis_words[n + 1]).items():
            nb = len(wps)
            gram = [[pair_words(wa, wb) for wb in wps] for wa in wps]
            try:
                inv_gp = linalg.inverse(gram)
            except ZeroDivisionError:
                raise RuntimeError(
                    f"degenerate word pairing at degree {n + 1}, content {cc}")
            inv = [[sf.transplant(gp, v) for v in row] for row in inv_gp]

            def cval(a: int, b: int):
                return inv[b][a] if _GRAM_FLIP else inv[a][b]

            # rows of the intertwining recursion used for calibration
            row_meta = []
            for i in range(ngen):
                if cc[i] == 0:
                    continue
                sub = list(cc)
                sub[i] -= 1
                for bp in bps_by_c.get(tuple(sub), ()):
                    row_meta.append((i, bp))
            pairs = [(r, b) for r in range(len(row_meta)) for b in range(nb)]
            if n + 1 > _THETA_FULL_VERIFY:
                stride = max(1, len(pairs) // _THETA_SAMPLES)
                sel = pairs[::stride]
                if pairs and pairs[-1] not in sel:
                    sel.append(pairs[-1])
            else:
                sel = pairs
            scal = None
            rowcache: Dict[int, List] = {}
            for r, b in sel:
                i, bp = row_meta[r]
                row = rowcache.get(r)
                if row is None:
                    fi = low.F[i]
                    row = [fi.get((index[bp], index[wp]), sf.zero) for wp in wps]
                    rowcache[r] = row
                lhs = sf.zero
                for a in range(nb):
                    ra = row[a]
                    if ra:
                        cv = cval(a, b)
                        if cv:
                            lhs = lhs + ra * cv
                rhs = rhs_val(i, bp, wps[b])
                if scal is None:
                    if lhs:
                        scal = rhs / lhs
                    elif rhs:
                        raise RuntimeError(
                            f"inconsistent calibration at degree {n + 1}, content {cc}")
                elif scal * lhs - rhs:
                    raise RuntimeError(
                        f"word-pairing convention check failed at degree {n + 1}, "
                        f"content {cc}")
            if scal is None or not scal:
                raise RuntimeError(
                    f"could not calibrate block at degree {n + 1}, content {cc}")
            if not sf.only_gens(scal, ("t",)):
                raise RuntimeError(
                    f"calibration scalar at degree {n + 1} is not weight-free")
            for a in range(nb):
                for b in range(nb):
                    val = cval(a, b)
                    if val:
                        cn[(wps[a], wps[b])] = scal * val
        c[n + 1] = cn

    _theta_store(cartan, sf, c)
    out = {n: {pair: ctx.field.transplant(sf, v) for pair, v in cn.items()}
           for n, cn in c.items()}
    _THETA_CACHE[cache_key] = out
    return out


def theta_regenerate_cache(rank: int, n_max: int) -> str:
    """Recompute the persistent coefficient table for type A_rank to depth
    n_max and write it to the per-user cache; returns the file path.  Copy
    the file into the package's data/ directory to refresh the shipped
    table."""
    cartan = AffineCartanData(rank)
    fld = ScalarField(rank, cartan.coxeter)
    ctx = Context(fld, cartan)
    user = _theta_cache_paths(cartan)[1]
    try:
        os.remove(user)
    except OSError:
        pass
    _THETA_CACHE.pop((rank, id(fld)), None)
    # bypass any shipped table shallower than requested
    shipped = _theta_cache_paths(cartan)[0]
    have = None
    try:
        with open(shipped, "r", encoding="utf-8") as fh:
            have = json.load(fh)
    except (OSError, ValueError):
        pass
    if have is not None and _theta_doc_matches(have, cartan) and have.get("depth", -1) >= n_max:
        # shipped table already deep enough; just copy it to the user cache
        os.makedirs(os.path.dirname(user), exist_ok=True)
        with open(user, "w", encoding="utf-8") as fh:
            json.dump(have, fh, sort_keys=True)
        return user
    theta_universal(ctx, n_max)
    return user


def theta_recursion_reference(ctx: Context, n_max: int) -> Dict[int, Dict[Tuple[tuple, tuple], object]]:
    """Independent low-degree oracle for theta_universal: solves the
    intertwining recursion degree by degree on a generic lowest-weight
    Verma module, with no word-pairing input.  Exact but much slower."""
    cartan = ctx.cartan
    sf = ScalarField(cartan.rank, cartan.coxeter, granularity=4)
    sctx = Context(sf, cartan)
    lam_c = cartan.lam()
    low = build_verma(sctx, lam_c, n_max, lowest=True, name="genN")
    wq = WordQuotient.get(sf, cartan, n_max)
    index: Dict[tuple, int] = {w: i for i, w in enumerate(low.words)}
    ngen = cartan.rank + 1

    phi = {i: scalar_pair(sf, cartan, lam_c, cartan.alpha(i), Fraction(-1, 2))
           for i in range(ngen)}

    k1cache: Dict[tuple, object] = {}

    def k1_of(i: int, bp: tuple):
        val = k1cache.get((i, bp))
        if val is None:
            val = scalar_pair(sf, cartan, low.weights[index[bp]],
                              cartan.alpha(i), Fraction(1, 2))
            k1cache[(i, bp)] = val
        return val

    c: Dict[int, Dict[Tuple[tuple, tuple], object]] = {0: {((), ()): sf.one}}
    for n in range(n_max):
        bps_by_c = _by_content(ngen, wq.basis_words[n])
        # One pass over the degree-n coefficients assembles every
        # right-hand side: rhs_all[(i, bp)][bm].
        rhs_all: Dict[tuple, Dict[tuple, object]] = {}
        for (wp0, wm0), cv in c[n].items():
            for i in range(ngen):
                dst = rhs_all.setdefault((i, wp0), {})
                a = cv * phi[i]
                for bm, rv in wq.reduce(wm0 + (i,)).items():
                    dst[bm] = dst.get(bm, sf.zero) + a * rv
                b = cv * k1_of(i, wp0)
                for bm, rv in wq.reduce((i,) + wm0).items():
                    dst[bm] = dst.get(bm, sf.zero) - b * rv
        cn: Dict[Tuple[tuple, tuple], object] = {}
        # The system splits by letter content: Theta pairs words of equal
        # weight, and each equation couples only one content class.
        for cc, wps in _by_content(ngen, wq.basis_words[n + 1]).items():
            bms = wps  # second-leg targets of the same content
            rows = []
            row_meta = []
            for i in range(ngen):
                if cc[i] == 0:
                    continue
                sub = list(cc)
                sub[i] -= 1
                for bp in bps_by_c.get(tuple(sub), ()):
                    fi = low.F[i]
                    rows.append([fi.get((index[bp], index[wp]), sf.zero) for wp in wps])
                    row_meta.append((i, bp))
            rhs_cols = [[rhs_all.get(rm, {}).get(bm, sf.zero) for rm in row_meta]
                        for bm in bms]
            sols = linalg.solve_multi(rows, rhs_cols, require_unique=True)
            if sols is None:
                raise RuntimeError(
                    f"universal R-matrix solve degenerate at degree {n + 1}")
            for col_i, bm in enumerate(bms):
                for wp, val in zip(wps, sols[col_i]):
                    if val:
                        if not sf.only_gens(val, ("t",)):
                            raise RuntimeError(
                                f"universal coefficient at degree {n + 1} is not weight-free")
                        cn[(wp, bm)] = val
        c[n + 1] = cn

    return {n: {pair: ctx.field.transplant(sf, v) for pair, v in cn.items()}
            for n, cn in c.items()}


# ---------------------------------------------------------------------------
# evaluation of R on a module pair


def _leg_level(cartan: AffineCartanData, module: GradedModule):
    """(concrete level, symbolic k-level coefficient) of a module."""
    if not module.weights:
        return _F0, _F0
    w = module.weights[0]
    conc = cartan.level(w)
    katom = w.atom_dict().get(("kroh", 0), _F0)
    if w.atom_dict().get(("wroh", 0), _F0):
        raise ValueError("omega-level legs are not supported in R-matrix evaluation")
    return conc, katom


def r_matrix(ctx: Context, V1: GradedModule, V2: GradedModule,
             zvars: Tuple[str, ...], legvars: Tuple[Optional[str], Optional[str]],
             n_max: int, level_dress: bool = False) -> Series:
    """R = q^CF . Theta evaluated on V1 (x) V2 (first leg: raising side).

    legvars[i] names the z-variable of leg i (None for graded legs whose
    spectral powers are attached later by degree splitting).  The result is
    exact in z when every leg is either graded and truncated at depth
    <= n_max, or gets its trust window set from n_max (see below).

    level_dress: when one leg carries a nonzero level, the level-scaling
    coupling of the Cartan factor acts on the other leg's spectral offsets;
    this multiplies the term with leg offsets (d1, d2) by
    q^(lev1*d2 + lev2*d1).  It amounts to the multiplicative spectral shift
    z -> z q^(-lev) relative to the undressed evaluation.
    """
    theta = theta_universal(ctx, n_max)
    fld = ctx.field
    cf = cartan_factor(ctx, V1, V2)
    zero_ey = (0,) * len(zvars)
    lev1 = _leg_level(ctx.cartan, V1)
    lev2 = _leg_level(ctx.cartan, V2)

    def dress(zd1: int, zd2: int):
        e = lev1[0] * zd2 + lev2[0] * zd1
        ke = lev1[1] * zd2 + lev2[1] * zd1
        out = fld.q_pow(e) if e else fld.one
        if ke:
            out = out * fld.kq_pow(-Fraction(ke) / 2)
        return out

    def keyed(zd1: int, zd2: int) -> Key:
        ey = list(zero_ey)
        if legvars[0] is not None and zd1:
            ey[zvars.index(legvars[0])] += zd1
        if legvars[1] is not None and zd2:
            ey[zvars.index(legvars[1])] += zd2
        return Key(_F0, _F0, tuple(ey))

    data: Dict[Key, SMat] = {}
    for n in range(n_max + 1):
        for (wp, wm), cv in theta.get(n, {}).items():
            m1 = word_matrix(V1, "E", wp)
            if not m1:
                continue
            m2 = word_matrix(V2, "F", wm)
            if not m2:
                continue
            zd1 = word_zpower(V1, "E", wp, m1)
            zd2 = word_zpower(V2, "F", wm, m2)
            k = keyed(zd1, zd2)
            coeff = cv
            if level_dress and (zd1 or zd2):
                coeff = coeff * dress(zd1, zd2)
            term = (cf * m1.tensor(m2)).scale(coeff)
            if not term:
                continue
            cur = data.get(k)
            data[k] = cur + term if cur is not None else term
            if not data[k]:
                del data[k]

    axes: Dict[str, Axis] = {}
    for leg, (V, var) in enumerate(((V1, legvars[0]), (V2, legvars[1]))):
        if V.d_max is not None:
            # graded truncated leg: higher Theta components annihilate it,
            # the result is exact (no z trust window needed), but the
            # one-sided z-support is still worth declaring
            if V.d_max > n_max:
                raise ValueError("graded leg deeper than the solved Theta degree")
            if var is not None:
                axes[var] = (Axis(_F0, None, None, None) if leg == 0
                             else Axis(None, None, _F0, None))
            continue
        if var is None:
            continue
        span = rho_span(V)
        chi = (Fraction(n_max) - span) / ctx.cartan.coxeter
        chi = Fraction(int(chi) if chi >= 0 else -1)  # floor for >=0; -1: nothing trusted
        if leg == 0:
            # support [0, inf), complete up to chi
            axes[var] = Axis(_F0, chi, None, None)
        else:
            # support (-inf, 0], complete down to -chi
            axes[var] = Axis(None, None, _F0, -chi)
    # the whole object is a pure z-series: u and k support is exactly {0}
    axes["u"] = Axis(_F0, None, _F0, None)
    axes["k"] = Axis(_F0, None, _F0, None)
    # graded legs with d_max <= n_max are exact: no axis entry needed.
    out = Series(ctx, zvars, data, axes=axes)
    return out.truncate({name: ax.chi for name, ax in axes.items() if ax.chi is not None},
                        {name: ax.clo for name, ax in axes.items() if ax.clo is not None})


# ---------------------------------------------------------------------------
# coproduct actions


def coproduct_series(ctx: Context, mods: Sequence[GradedModule], zvars: Tuple[str, ...],
                     legvars: Sequence[Optional[str]], fam: str, i: int,
                     op: bool = False) -> Series:
    """(iterated) coproduct of E_i / F_i evaluated on mods[0] (x) ... as a
    Series (z-degrees keyed per leg variable).

    Delta(E_i) = E_i (x) q^{h_i} + 1 (x) E_i
    Delta(F_i) = F_i (x) 1 + q^{-h_i} (x) F_i
    op=True gives the opposite coproduct (legs reversed roles).
    """
    fld = ctx.field
    cartan = ctx.cartan
    alpha = cartan.alpha(i)
    N = len(mods)
    zero_ey = (0,) * len(zvars)
    data: Dict[Key, SMat] = {}
    for j in range(N):
        legs = []
        zd = gen_zpower(mods[j], fam, i)
        for l in range(N):
            if l == j:
                legs.append(mods[l].smat(fam, i))
            else:
                # which side of leg j gets the q^h dressing
                after = (l > j) if not op else (l < j)
                if fam == "E":
                    legs.append(mods[l].qh_pair(alpha, Fraction(1, 2)) if after
                                else SMat.identity(mods[l].labels(), fld.one))
                else:
                    legs.append(mods[l].qh_pair(alpha, Fraction(-1, 2)) if not after
                                else SMat.identity(mods[l].labels(), fld.one))
        mat = legs[0]
        for m in legs[1:]:
            mat = mat.tensor(m)
        if not mat:
            continue
        ey = list(zero_ey)
        if legvars[j] is not None and zd:
            ey[zvars.index(legvars[j])] += zd
        k = Key(_F0, _F0, tuple(ey))
        cur = data.get(k)
        data[k] = cur + mat if cur is not None else mat
    return Series(ctx, zvars, data)


def intertwining_residual(R: Series, mods: Sequence[GradedModule],
                          legvars: Sequence[Optional[str]]) -> List[tuple]:
    """Failures of R Delta(x) = Delta^op(x) R for all generators, compared
    on the intersection of the trust windows."""
    ctx = R.ctx
    fails = []

    def boundary(fam: str, col: tuple) -> bool:
        # R Delta(x) applied to a source at the top of a truncated window
        # needs the missing next layer; such entries are not checkable.
        for l, V in enumerate(mods):
            if V.d_max is not None and V.upward() == fam and \
                    V.degrees[col[l]] + 1 > V.d_max:
                return True
        return False

    for fam in ("E", "F"):
        for i in range(ctx.cartan.rank + 1):
            d = coproduct_series(ctx, mods, R.zvars, legvars, fam, i, op=False)
            dop = coproduct_series(ctx, mods, R.zvars, legvars, fam, i, op=True)
            lhs = R * d
            rhs = dop * R
            for key, lab, a, b in lhs.compare(rhs):
                if lab != ("prefactor",) and boundary(fam, lab[1]):
                    continue
                fails.append((fam, i, key, lab, a, b))
    return fails


# ---------------------------------------------------------------------------
# direct graded solve on evaluation modules


def build_intertwining_system(ctx: Context, V1: GradedModule, V2: GradedModule,
                              m_max: int):
    """Linear system for the z-graded entries of R on V1 (x) V2.

    Unknowns: entries ((r1,r2),(c1,c2)) at z-order m (keys (m,-m)), with
    principal grade g = (rho, fin shift of leg 1) + h*m.  Entries with
    g < 0 are structurally zero; g = 0 entries are the fixed Cartan factor.
    Returns (variables, fixed, rows, rhs) where rows/rhs define A x = b over
    the g > 0 variables and fixed maps g = 0 variables to their values.
    """
    fld = ctx.field
    cartan = ctx.cartan
    h = cartan.coxeter
    rho = cartan.rho

    def finw(w: Weight) -> Weight:
        return Weight(w.coords[:-2] + (_F0, _F0))

    n1, n2 = V1.dim, V2.dim
    wt1 = [finw(w) for w in V1.weights]
    wt2 = [finw(w) for w in V2.weights]

    variables: List[tuple] = []   # (r1, r2, c1, c2, m) with g > 0
    fixed: Dict[tuple, object] = {}
    var_index: Dict[tuple, int] = {}
    solve_margin = m_max
    for r1, r2, c1, c2 in itertools.product(range(n1), range(n2), range(n1), range(n2)):
        shift1 = wt1[r1] - wt1[c1]
        total = shift1 + (wt2[r2] - wt2[c2])
        if any(total.coords) or total.atoms:
            continue
        g0 = cartan.pair_concrete(shift1, rho)
        for m in range(0, solve_margin + 1):
            g = g0 + h * m
            if g < 0:
                continue
            v = (r1, r2, c1, c2, m)
            if g == 0:
                if (r1, r2) == (c1, c2):
                    fixed[v] = fld.q_pow(cartan_exponent(cartan, V1.weights[r1], V2.weights[r2]))
                else:
                    fixed[v] = fld.zero
            else:
                var_index[v] = len(variables)
                variables.append(v)

    # coproduct term lists: (left-leg SMat 2-leg tensor, (d1, d2))
    def terms(fam: str, i: int, op: bool):
        out = []
        alpha = cartan.alpha(i)
        for j in (0, 1):
            legs = []
            zd = (V1, V2)[j].zdeg(fam, i)
            for l in (0, 1):
                V = (V1, V2)[l]
                if l == j:
                    legs.append(V.smat(fam, i))
                else:
                    after = (l > j) if not op else (l < j)
                    if fam == "E":
                        legs.append(V.qh_pair(alpha, Fraction(1, 2)) if after
                                    else SMat.identity(V.labels(), fld.one))
                    else:
                        legs.append(V.qh_pair(alpha, Fraction(-1, 2)) if not after
                                    else SMat.identity(V.labels(), fld.one))
            mat = legs[0].tensor(legs[1])
            d = (zd, 0) if j == 0 else (0, zd)
            if mat:
                out.append((mat, d))
        return out

    # assemble equations: eq[(fam,i,bigrade,row_label,col_label)] -> {var: coeff}
    equations: Dict[tuple, Dict[tuple, object]] = {}
    rhs_map: Dict[tuple, object] = {}
    invalid: set = set()

    def entry_val(v):
        return None if v in var_index else fixed.get(v)

    all_entries = list(var_index.keys()) + list(k for k, val in fixed.items() if val)

    for fam in ("E", "F"):
        for i in range(cartan.rank + 1):
            tlist = terms(fam, i, False)
            toplist = terms(fam, i, True)
            dshifts = [d for _, d in tlist] + [d for _, d in toplist]
            for v in all_entries:
                r1, r2, c1, c2, m = v
                sign_terms = [(tlist, False), (toplist, True)]
                for lst, is_op in sign_terms:
                    for mat, (d1, d2) in lst:
                        if not is_op:
                            # R o Delta: R entry rows fixed, compose on columns
                            for (tr, tc), tv in mat.data.items():
                                if tr != (c1, c2):
                                    continue
                                big = (m + d1, -m + d2)
                                ekey = (fam, i, big, (r1, r2), tc)
                                coefmap = equations.setdefault(ekey, {})
                                if v in var_index:
                                    coefmap[v] = coefmap.get(v, fld.zero) + tv
                                else:
                                    rhs_map[ekey] = rhs_map.get(ekey, fld.zero) - fixed[v] * tv
                        else:
                            # Delta^op o R, with a minus sign
                            for (tr, tc), tv in mat.data.items():
                                if tc != (r1, r2):
                                    continue
                                big = (m + d1, -m + d2)
                                ekey = (fam, i, big, tr, (c1, c2))
                                coefmap = equations.setdefault(ekey, {})
                                if v in var_index:
                                    coefmap[v] = coefmap.get(v, fld.zero) - tv
                                else:
                                    rhs_map[ekey] = rhs_map.get(ekey, fld.zero) + fixed[v] * tv
            # invalid bigrades: an out-of-window unknown could contribute
            for ekey in list(equations.keys()) + list(rhs_map.keys()):
                famk, ik, big, _, _ = ekey
                if (famk, ik) != (fam, i):
                    continue
                for d1, d2 in dshifts:
                    mneed = big[0] - d1
                    if mneed == -(big[1] - d2) and mneed > solve_margin:
                        invalid.add((fam, i, big))

    keys = sorted(set(equations) | set(rhs_map),
                  key=lambda k: (k[0], k[1], k[2], k[3], k[4]))
    rows = []
    rhs = []
    for ekey in keys:
        if (ekey[0], ekey[1], ekey[2]) in invalid:
            continue
        coefmap = equations.get(ekey, {})
        row = [fld.zero] * len(variables)
        for v, cv in coefmap.items():
            row[var_index[v]] = cv
        b = rhs_map.get(ekey, fld.zero)
        if any(row) or b:
            rows.append(row)
            rhs.append(b)
    return variables, fixed, rows, rhs


def normalize_reference_gauge(fld, data: Dict[Key, SMat], zero_ey, j1: int, j2: int,
                              ref: tuple, m_top: int) -> Dict[Key, SMat]:
    """Fix the scalar-series gauge of an R-type z-series: multiply by the
    unique scalar series c(z) (c_0 = 1) making the diagonal entry ``ref``
    exactly constant (its degree-0 value, no higher z-corrections)."""
    e = {}
    for m in range(0, m_top + 1):
        ey = list(zero_ey)
        ey[j1] += m
        ey[j2] -= m
        mat = data.get(Key(_F0, _F0, tuple(ey)))
        v = mat.data.get((ref, ref)) if mat is not None else None
        e[m] = v if v is not None else fld.zero
    if not e[0]:
        raise RuntimeError("reference normalization entry vanishes at degree 0")
    c = {0: fld.one}
    for m in range(1, m_top + 1):
        c[m] = -sum((c[j] * e[m - j] for j in range(m)), fld.zero) / e[0]
    out: Dict[Key, SMat] = {}
    for k, mat in data.items():
        m0 = k.ey[j1]
        for j in range(0, m_top + 1 - m0):
            if not c[j]:
                continue
            ey = list(k.ey)
            ey[j1] += j
            ey[j2] -= j
            nk = Key(k.eu, k.ek, tuple(ey))
            add = mat.scale(c[j])
            cur = out.get(nk)
            s = cur + add if cur is not None else add
            if s:
                out[nk] = s
            elif cur is not None:
                del out[nk]
    return out


def r_matrix_eval_solve(ctx: Context, V1: GradedModule, V2: GradedModule,
                        zvars: Tuple[str, ...], legvars: Tuple[str, str],
                        m_max: int) -> Series:
    """Direct construction of R on evaluation modules by solving the graded
    intertwining system (solved with one extra z-order of margin, returned
    truncated to m_max)."""
    solve_to = m_max + 1
    variables, fixed, rows, rhs = build_intertwining_system(ctx, V1, V2, solve_to)
    sol = linalg.solve(rows, rhs)
    if sol is None:
        raise RuntimeError("intertwining system inconsistent")
    fld = ctx.field
    zero_ey = (0,) * len(zvars)
    j1 = zvars.index(legvars[0])
    j2 = zvars.index(legvars[1])
    data: Dict[Key, SMat] = {}

    def put(v, val):
        if not val:
            return
        r1, r2, c1, c2, m = v
        ey = list(zero_ey)
        ey[j1] += m
        ey[j2] -= m
        k = Key(_F0, _F0, tuple(ey))
        cur = data.get(k)
        add = SMat({((r1, r2), (c1, c2)): val})
        data[k] = cur + add if cur is not None else add

    for v, val in fixed.items():
        put(v, val)
    for v, val in zip(variables, sol):
        put(v, val if not isinstance(val, int) else fld.zero)

    # The intertwining condition only determines R up to multiplication by
    # an arbitrary scalar series in z: normalize so that the reference
    # diagonal entry (the lexicographically smallest degree-0 label pair,
    # typically highest (x) highest) keeps exactly its degree-0 value with
    # no higher z-corrections.
    ref = min((r1, r2) for (r1, r2, c1, c2, m), val in fixed.items()
              if m == 0 and (r1, r2) == (c1, c2) and val)
    ndata = normalize_reference_gauge(fld, data, zero_ey, j1, j2, ref, m_max + 1)
    axes = {legvars[0]: Axis(_F0, Fraction(m_max), None, None),
            legvars[1]: Axis(None, None, _F0, Fraction(-m_max)),
            "u": Axis(_F0, None, _F0, None),
            "k": Axis(_F0, None, _F0, None)}
    out = Series(ctx, zvars, ndata, axes=axes)
    return out.truncate({legvars[0]: Fraction(m_max)},
                        {legvars[1]: Fraction(-m_max)})
