import time, traceback
from fractions import Fraction
from qaffine.cartan import AffineCartanData, TwistData
from qaffine.scalars import ScalarField
from qaffine.series import Context
from qaffine.modules import build_evaluation
from qaffine import twist as tw

cartan = AffineCartanData(1)
fld = ScalarField(1, 2)
ctx = Context(fld, cartan)
V = build_evaluation(ctx, "vector")
n_z, n_u, n_solve, box_z = 1, 1, 3, 3
legs = tuple(tw.Leg(V, f"z{i+1}") for i in range(3))
twist = TwistData(cartan, (0, 1))
zvars = ("z1","z2","z3")
def ex(i,j):
    R = tw.exchange_matrix(ctx, [legs[i]], [legs[j]], twist, box_z, n_u, n_solve=n_solve, zvars=zvars)
    return tw.promote_series(R, [i,j], legs)
R12, R13, R23 = ex(0,1), ex(0,2), ex(1,2)
one = Fraction(1)
box = {"u": (Fraction(0), Fraction(n_u))}
for v in zvars: box[v] = (Fraction(-box_z), Fraction(box_z))
lhs1 = R12.mul_within(tw.shift_dynamical(R13, legs, {1: one}, twist), box)
print("first product ok")
print("lhs1 supp bounds:", lhs1.supp_bounds)
print("lhs1 extra bounds:", lhs1.extra_bounds)
print("lhs1 axes:", {n: lhs1.axes[n] for n in lhs1.axis_names()})
print("R23 supp:", R23.supp_bounds)
print("R23 extra:", R23.extra_bounds)
print("R23 axes:", {n: R23.axes[n] for n in R23.axis_names()})
try:
    lhs = lhs1.mul_within(R23, box)
    print("second ok")
except Exception as e:
    print("FAIL:", e)
