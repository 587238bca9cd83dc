import time
from qaffine.cartan import AffineCartanData, TwistData
from qaffine.scalars import ScalarField
from qaffine.series import Context
from qaffine.modules import build_evaluation
from qaffine import twist as tw

t0 = time.time()
cartan = AffineCartanData(1)
fld = ScalarField(1, 2)
ctx = Context(fld, cartan)
V = build_evaluation(ctx, "vector")
n_z, n_u = 2, 1
legs = tuple(tw.Leg(V, f"z{i+1}") for i in range(3))

for name, perm in (("id", (0, 1)), ("swap", (1, 0))):
    twist = TwistData(cartan, perm)
    lhs, rhs = tw.cocycle_sides(ctx, legs, twist, n_z, n_u)
    cov_l = tw.required_region_failures(lhs, ("z1","z2","z3"), n_z, n_u)
    cov_r = tw.required_region_failures(rhs, ("z1","z2","z3"), n_z, n_u)
    fails = lhs.compare(rhs)
    print(f"{name}: cocycle mismatches={len(fails)} covL={len(cov_l)} covR={len(cov_r)}  t={round(time.time()-t0,1)}s")
    if fails:
        for f in fails[:3]:
            print("  ", f[0], f[1])
    if cov_l:
        print("  covL sample:", cov_l[:3])
print("total t =", round(time.time() - t0, 1))
