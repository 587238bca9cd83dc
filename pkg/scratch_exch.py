import time
from fractions import Fraction
from qaffine.cartan import AffineCartanData, TwistData
from qaffine.scalars import ScalarField
from qaffine.series import Context, Key
from qaffine.modules import build_evaluation
from qaffine import twist as tw

t0 = time.time()
cartan = AffineCartanData(1)
fld = ScalarField(1, 2)
ctx = Context(fld, cartan)
V = build_evaluation(ctx, "vector")
n_z, n_u = 1, 1
l1, l2 = tw.Leg(V, "z1"), tw.Leg(V, "z2")
for name, perm in (("id", (0, 1)), ("swap", (1, 0))):
    twist = TwistData(cartan, perm)
    R = tw.exchange_matrix(ctx, [l1], [l2], twist, n_z, n_u, n_solve=3)
    print(f"{name}: R keys={len(R.data)} t={round(time.time()-t0,1)}s")
    cov = tw.required_region_failures(R, ("z1","z2"), n_z, n_u)
    print(f"{name} coverage failures: {len(cov)}", cov[:4] if cov else "")
    cons = tw.principal_conservation_failures(R, (l1, l2))
    print(f"{name} conservation failures: {len(cons)}")
print("total t =", round(time.time()-t0,1))
