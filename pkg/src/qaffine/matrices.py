"""Sparse matrices over the scalar field, with tuple-structured labels.

Row and column labels are tuples with one slot per tensor leg; a slot is a
basis index (int) of the corresponding module.  Scalar-valued series use the
empty tuple () as their single label.  Zero entries are never stored.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Sequence, Tuple

Label = Tuple


class SMat:
    __slots__ = ("data",)

    def __init__(self, data: Dict[Tuple[Label, Label], object] | None = None):
        self.data = data or {}

    # -- constructors --------------------------------------------------------

    @staticmethod
    def scalar(value) -> "SMat":
        return SMat({((), ()): value}) if value else SMat()

    @staticmethod
    def identity(labels: Iterable[Label], one) -> "SMat":
        out = {}
        for lab in labels:
            out[(lab, lab)] = one
        return SMat(out)

    @staticmethod
    def from_entries(entries: Iterable[Tuple[Label, Label, object]]) -> "SMat":
        out: Dict[Tuple[Label, Label], object] = {}
        for r, c, v in entries:
            if v:
                cur = out.get((r, c))
                out[(r, c)] = cur + v if cur is not None else v
        return SMat({k: v for k, v in out.items() if v})

    # -- basics --------------------------------------------------------------

    def __bool__(self) -> bool:
        return bool(self.data)

    def __eq__(self, other) -> bool:
        return isinstance(other, SMat) and self.data == other.data

    def copy(self) -> "SMat":
        return SMat(dict(self.data))

    def __add__(self, other: "SMat") -> "SMat":
        out = dict(self.data)
        for k, v in other.data.items():
            cur = out.get(k)
            if cur is None:
                out[k] = v
            else:
                s = cur + v
                if s:
                    out[k] = s
                else:
                    del out[k]
        return SMat(out)

    def __sub__(self, other: "SMat") -> "SMat":
        return self + other.scale(-1)

    def scale(self, c) -> "SMat":
        if not c:
            return SMat()
        return SMat({k: v * c for k, v in self.data.items()})

    def __mul__(self, other: "SMat") -> "SMat":
        """Composition self o other (matrix product)."""
        by_row: Dict[Label, List[Tuple[Label, object]]] = {}
        for (r, c), v in other.data.items():
            by_row.setdefault(r, []).append((c, v))
        out: Dict[Tuple[Label, Label], object] = {}
        for (r, c), v in self.data.items():
            hits = by_row.get(c)
            if not hits:
                continue
            for c2, v2 in hits:
                key = (r, c2)
                prod = v * v2
                cur = out.get(key)
                out[key] = cur + prod if cur is not None else prod
        return SMat({k: v for k, v in out.items() if v})

    def tensor(self, other: "SMat") -> "SMat":
        out = {}
        for (r1, c1), v1 in self.data.items():
            for (r2, c2), v2 in other.data.items():
                p = v1 * v2
                if p:
                    out[(r1 + r2, c1 + c2)] = p
        return SMat(out)

    def transpose(self) -> "SMat":
        return SMat({(c, r): v for (r, c), v in self.data.items()})

    def trace(self):
        tot = 0
        for (r, c), v in self.data.items():
            if r == c:
                tot = tot + v
        return tot

    # -- leg surgery ---------------------------------------------------------

    def permute_legs(self, perm: Sequence[int]) -> "SMat":
        """New leg order: new slot i = old slot perm[i] (rows and columns)."""
        out = {}
        for (r, c), v in self.data.items():
            out[(tuple(r[p] for p in perm), tuple(c[p] for p in perm))] = v
        return SMat(out)

    def map_values(self, f: Callable) -> "SMat":
        out = {}
        for k, v in self.data.items():
            w = f(v)
            if w:
                out[k] = w
        return SMat(out)

    def map_labels(self, frow: Callable, fcol: Callable | None = None) -> "SMat":
        fcol = fcol or frow
        out: Dict[Tuple[Label, Label], object] = {}
        for (r, c), v in self.data.items():
            key = (frow(r), fcol(c))
            cur = out.get(key)
            out[key] = cur + v if cur is not None else v
        return SMat({k: v for k, v in out.items() if v})

    def partial_trace(self, legs: Sequence[int], nlegs: int) -> "SMat":
        """Trace over the listed leg slots; remaining slots keep their order."""
        keep = [i for i in range(nlegs) if i not in set(legs)]
        out: Dict[Tuple[Label, Label], object] = {}
        for (r, c), v in self.data.items():
            if any(r[i] != c[i] for i in legs):
                continue
            key = (tuple(r[i] for i in keep), tuple(c[i] for i in keep))
            cur = out.get(key)
            out[key] = cur + v if cur is not None else v
        return SMat({k: v for k, v in out.items() if v})

    def promote(self, positions: Sequence[int], nlegs: int, identities: Sequence[Sequence]) -> "SMat":
        """Embed this operator (acting on len(positions) legs, in order) into
        an nlegs-product, acting as identity on the other legs.

        identities[i] = basis label list (per-leg ints) of product leg i; only
        the non-acted legs' lists are consulted.
        """
        import itertools

        pos = list(positions)
        others = [i for i in range(nlegs) if i not in pos]
        out = {}
        other_spaces = [list(identities[i]) for i in others]
        for (r, c), v in self.data.items():
            for combo in itertools.product(*other_spaces):
                rr = [None] * nlegs
                cc = [None] * nlegs
                for slot, p in enumerate(pos):
                    rr[p] = r[slot]
                    cc[p] = c[slot]
                for slot, o in enumerate(others):
                    rr[o] = combo[slot]
                    cc[o] = combo[slot]
                out[(tuple(rr), tuple(cc))] = v
        return SMat(out)

    def entries(self):
        return self.data.items()

    def __repr__(self):
        return f"SMat({len(self.data)} entries)"
