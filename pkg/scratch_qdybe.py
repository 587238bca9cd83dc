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
n_z, n_u = 1, 1
legs = tuple(tw.Leg(V, f"z{i+1}") for i in range(3))
for name, perm in (("id", (0, 1)), ("swap", (1, 0))):
    twist = TwistData(cartan, perm)
    lhs, rhs = tw.qdybe_sides(ctx, legs, twist, n_z, n_u, n_solve=3, box_z=3)
    covl = tw.required_region_failures(lhs, ("z1","z2","z3"), n_z, n_u)
    covr = tw.required_region_failures(rhs, ("z1","z2","z3"), n_z, n_u)
    fails = lhs.compare(rhs)
    print(f"{name}: mismatches={len(fails)} covL={len(covl)} covR={len(covr)} t={round(time.time()-t0,1)}s")
    if fails:
        for f in fails[:3]:
            print("  ", f[0], f[1])
    if covl: print("  covL:", covl[:4])
    if covr: print("  covR:", covr[:4])
print("total t =", round(time.time()-t0,1))
