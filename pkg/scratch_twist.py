import time
from fractions import Fraction

from qaffine.cartan import AffineCartanData, TwistData
from qaffine.scalars import ScalarField
from qaffine.series import Context, Key
from qaffine.modules import build_evaluation
from qaffine import rmatrix as rm
from qaffine import twist as tw

t0 = time.time()
cartan = AffineCartanData(1)
fld = ScalarField(1, 2)
ctx = Context(fld, cartan)
V = build_evaluation(ctx, "vector")
zvars = ("z1", "z2")
legvars = ("z1", "z2")
n_z, n_u = 3, 2

for name, perm in (("id", (0, 1)), ("swap", (1, 0))):
    twist = TwistData(cartan, perm)
    J = tw.abrr_solve(ctx, V, V, twist, zvars, legvars, n_z, n_u)
    print(f"{name}: J keys={len(J.data)}  t={round(time.time()-t0,1)}s")
    res = tw.abrr_residual(ctx, J, V, V, twist, legvars, 2 * n_z + 1)
    print(f"{name} ABRR residual failures: {len(res)}")
    if res:
        for f in res[:3]:
            print("  ", f[0], f[1],
                  fld.canonical_str(f[2]) if f[2] is not None else None,
                  fld.canonical_str(f[3]) if f[3] is not None else None)
    # u^0 slice must equal evaluated R0^21 . q^Z
    slice0 = J.clone(data={k: m for k, m in J.data.items() if k.eu == 0})
    R21 = tw.r_matrix_swapped(ctx, V, V, zvars, legvars, 2 * n_z + 1)

    def strip(r, c, twist=twist):
        w1 = V.weights[c[0]]
        w2 = V.weights[c[1]]
        from qaffine.cartan import PairResult
        e = twist.z_pair(w1, w2) - cartan.pair_concrete(w1, w2)
        return PairResult(fld.q_pow(e))

    ref = R21.map_entries_pair(strip)
    fails = slice0.compare(ref)
    print(f"{name} u^0 slice vs R0^21.q^Z mismatches: {len(fails)}")
    if fails:
        for f in fails[:5]:
            print("  ", f[0], f[1],
                  fld.canonical_str(f[2]) if f[2] is not None else None,
                  fld.canonical_str(f[3]) if f[3] is not None else None)
print("total t =", round(time.time() - t0, 1))
