import time
from fractions import Fraction

from qaffine.cartan import AffineCartanData, TwistData, PairResult
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
n_z, n_u = 3, 2
legs1 = (tw.Leg(V, "z1"),)
legs2 = (tw.Leg(V, "z2"),)

for name, perm in (("id", (0, 1)), ("swap", (1, 0))):
    twist = TwistData(cartan, perm)
    J = tw.abrr_solve_legs(ctx, legs1, legs2, twist, n_z, n_u)
    print(f"{name}: J keys={len(J.data)}  t={round(time.time()-t0,1)}s")
    Jold = tw.abrr_solve(ctx, V, V, twist, ("z1","z2"), ("z1","z2"), n_z, n_u)
    fails = J.compare(Jold)
    print(f"{name} legs-vs-2leg mismatches: {len(fails)}")
    res = tw.abrr_residual_legs(ctx, J, legs1, legs2, twist, 2 * n_z + 1)
    print(f"{name} ABRR residual failures: {len(res)}")
    cons = tw.principal_conservation_failures(J, legs1 + legs2)
    print(f"{name} conservation failures: {len(cons)}")
    cov = tw.required_region_failures(J, ("z1", "z2"), n_z, n_u)
    print(f"{name} coverage failures on ball: {len(cov)}")
print("total t =", round(time.time() - t0, 1))
