# # How far the optimum moves when a client comes or goes
#
# For least squares the optimum is available in closed form, so the shift
# caused by one client leaving (or joining) can be compared with the bound
# 8 L n_a^2 D_a / (mu^2 n^2), where D_a measures how badly the client's own
# data fit the new optimum.

import numpy as np

from elasticfl.policies import QuadraticProblem, random_problem, shift_bound, should_abandon

rng = np.random.default_rng(7)
p = random_problem(rng, d=5, N=6, n_range=(20, 60), l2=0.05)
print("client sizes:", p.sizes)
for a in range(len(p.sizes)):
    leave, join = shift_bound(p, a, "leave"), shift_bound(p, a, "join")
    print(f"client {a}: leave {leave.lhs:.2e} <= {leave.rhs:.2e}   join {join.lhs:.2e} <= {join.rhs:.2e}")

# The join bound needs the newcomer to be outnumbered. A single client with
# far more data than everyone before it drags the optimum most of the way to
# its own, and the bound no longer holds.

big = QuadraticProblem((np.ones((6, 1)), np.ones((35, 1))), (np.zeros(6), np.ones(35)))
b = shift_bound(big, 1, "join")
print(f"dominant newcomer: shift {b.lhs:.3f} vs bound {b.rhs:.3f} (holds: {b.holds})")

# ## Keeping or dropping an unreliable client
#
# A client idle a fraction y of the time is worth keeping only while
# y <= c / (T E); the longer the training, the less idleness is tolerated.

for T in (10, 100, 1000):
    print(f"T={T:5d}: drop a client idle 1% of the time? {should_abandon(0.01, T, 5, c_ratio=10)}")
