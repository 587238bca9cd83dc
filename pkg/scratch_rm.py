import time
from fractions import Fraction

from qaffine.cartan import AffineCartanData
from qaffine.scalars import ScalarField
from qaffine.series import Context
from qaffine.modules import build_evaluation, build_verma
from qaffine import rmatrix as rm

t0 = time.time()
cartan = AffineCartanData(1)
fld = ScalarField(1, 2)
ctx = Context(fld, cartan)

# 1. universal Theta, low degrees
theta = rm.theta_universal(ctx, 4)
qd = fld.q_pow(1) - fld.q_pow(-1)
print("theta degrees:", sorted(theta))
for (wp, wm), v in sorted(theta[1].items()):
    print("  deg1", wp, wm, fld.canonical_str(v) == fld.canonical_str(qd), fld.canonical_str(v))
print("deg2 #terms:", len(theta[2]), "deg3:", len(theta[3]), "deg4:", len(theta[4]))
print("t =", round(time.time() - t0, 2))

# 2. direct graded solve on vector (x) vector
V = build_evaluation(ctx, "vector")
R = rm.r_matrix_eval_solve(ctx, V, V, ("z1", "z2"), ("z1", "z2"), 5)
print("direct-solve keys:", len(R.data), "axes:", {n: (a.slo, a.chi) for n, a in R.axes.items()})
res = rm.intertwining_residual(R, (V, V), ("z1", "z2"))
print("direct residual failures:", len(res))
if res:
    print(res[:3])
print("t =", round(time.time() - t0, 2))

# 3. universal route, trusted window chi=1, compare with direct solve
R2 = rm.r_matrix(ctx, V, V, ("z1", "z2"), ("z1", "z2"), 4)
print("universal keys:", len(R2.data), "axes:", {n: (a.slo, a.chi) for n, a in R2.axes.items()})
fails = R2.compare(R)
print("universal vs direct mismatches:", len(fails))
if fails:
    for f in fails[:5]:
        print("  ", f[0], f[1],
              fld.canonical_str(f[2]) if f[2] is not None else None,
              fld.canonical_str(f[3]) if f[3] is not None else None)
res2 = rm.intertwining_residual(R2, (V, V), ("z1", "z2"))
print("universal residual failures:", len(res2))
print("t =", round(time.time() - t0, 2))

# 4. W (x) V with W a truncated level-0 graded module: residual must vanish
# (nonzero level would couple the Cartan factor to the spectral offsets and
# the naive check does not apply there).
W = build_verma(ctx, cartan.rho.scale(2), 3, name="M")
RWV = rm.r_matrix(ctx, W, V, ("zw",), ("zw", None), 4)
print("WxV keys:", len(RWV.data), "dims:", W.dim, V.dim)
resw = rm.intertwining_residual(RWV, (W, V), ("zw", None))
print("WxV residual failures:", len(resw))
if resw:
    f = resw[0]
    print("  ", f[0], f[1], f[2], f[3])
    print("  lhs:", fld.canonical_str(f[4]) if f[4] is not None else None)
    print("  rhs:", fld.canonical_str(f[5]) if f[5] is not None else None)
# symbolic-weight Verma leg builds without error (Cartan factor via atoms)
Wmu = build_verma(ctx, cartan.mu_tilde(), 2, name="Mmu")
_ = rm.r_matrix(ctx, Wmu, V, ("zw",), ("zw", None), 4)
print("symbolic-weight WxV build ok")
print("t =", round(time.time() - t0, 2))
