"""Dense exact Gaussian elimination, generic over any field-like elements.

Works for fractions.Fraction and for sympy FracElement alike: elements need
+, -, *, /, == and truthiness (zero is falsy).  Matrices are lists of lists.
All pivoting is deterministic (first nonzero entry in row-major scan), which
keeps every downstream basis and golden file reproducible.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple


def rref(rows: List[List], ncols: int | None = None) -> Tuple[List[List], List[int]]:
    """Reduced row echelon form. Returns (rref_rows, pivot_column_list).

    Zero rows are dropped.  Input rows are not mutated.
    """
    m = [list(r) for r in rows]
    if not m:
        return [], []
    n = ncols if ncols is not None else len(m[0])
    pivots: List[int] = []
    row = 0
    for col in range(n):
        sel = None
        for i in range(row, len(m)):
            if m[i][col]:
                sel = i
                break
        if sel is None:
            continue
        m[row], m[sel] = m[sel], m[row]
        piv = m[row][col]
        m[row] = [x / piv for x in m[row]]
        for i in range(len(m)):
            if i != row and m[i][col]:
                f = m[i][col]
                m[i] = [x - f * y for x, y in zip(m[i], m[row])]
        pivots.append(col)
        row += 1
        if row == len(m):
            break
    return m[:row], pivots


def nullspace(rows: List[List], ncols: int) -> List[List]:
    """Basis of the right nullspace {x : M x = 0}, echelon-normalized.

    Free variables are taken in increasing column order; each basis vector
    has a 1 in its free column.
    """
    red, pivots = rref(rows, ncols)
    pivset = set(pivots)
    basis = []
    for free in range(ncols):
        if free in pivset:
            continue
        vec = [0] * ncols
        vec[free] = 1
        for prow, pcol in zip(red, pivots):
            vec[pcol] = -prow[free]
        basis.append(vec)
    return basis


def solve(rows: List[List], rhs: List) -> List | None:
    """One solution of M x = rhs, or None if inconsistent.

    Free variables are set to 0 (deterministically).
    """
    if not rows:
        return None if any(rhs) else []
    n = len(rows[0])
    aug = [list(r) + [b] for r, b in zip(rows, rhs)]
    red, pivots = rref(aug, n + 1)
    if n in pivots:
        return None  # pivot in the rhs column: inconsistent
    x = [0] * n
    for prow, pcol in zip(red, pivots):
        x[pcol] = prow[n]
    return x


def solve_multi(rows: List[List], rhs_cols: List[List],
                require_unique: bool = False) -> List[List] | None:
    """Solutions of M x = b for several right-hand sides with one
    elimination pass.  Returns one solution vector per rhs column (free
    variables set to 0), or None if any system is inconsistent.  With
    require_unique=True, None is also returned when M has a nontrivial
    nullspace (free columns)."""
    if not rows:
        return None if any(any(c) for c in rhs_cols) else [[] for _ in rhs_cols]
    n = len(rows[0])
    k = len(rhs_cols)
    aug = [list(r) + [col[i] for col in rhs_cols] for i, r in enumerate(rows)]
    red, pivots = rref(aug, n + k)
    if any(p >= n for p in pivots):
        return None
    if require_unique and len(pivots) < n:
        return None
    outs = []
    for j in range(k):
        x = [0] * n
        for prow, pcol in zip(red, pivots):
            x[pcol] = prow[n + j]
        outs.append(x)
    return outs


def inverse(rows: List[List]) -> List[List]:
    n = len(rows)
    one = None
    for r in rows:
        for x in r:
            if x:
                one = x / x
                break
        if one is not None:
            break
    if one is None:
        raise ZeroDivisionError("zero matrix not invertible")
    zero = one - one
    aug = [list(r) + [one if i == j else zero for j in range(n)] for i, r in enumerate(rows)]
    red, pivots = rref(aug, 2 * n)
    if pivots[:n] != list(range(n)) or len(red) != n:
        raise ZeroDivisionError("matrix not invertible")
    return [r[n:] for r in red]


def mat_mul(a: Sequence[Sequence], b: Sequence[Sequence]) -> List[List]:
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def mat_vec(a: Sequence[Sequence], v: Sequence) -> List:
    return [sum(a[i][k] * v[k] for k in range(len(v))) for i in range(len(a))]
