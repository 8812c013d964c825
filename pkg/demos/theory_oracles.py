"""Exact checks of the risk bounds on small finite worlds.

Every quantity is computed by exhaustive search over world points, so the
printed slacks are exact up to float rounding.
"""
from tarot.theory import (check_instances, empirical_rademacher, random_instance, verify_prop1,
                          verify_prop3)

inst = random_instance(0)
print(f"world: {len(inst.world)} points, eps={inst.epsilon:.3f}, rho={inst.rho:.3f}, "
      f"{inst.size} hypotheses, {inst.n_classes} classes")
for name, rep in (("risk bound", verify_prop1(inst)), ("lipschitz bound", verify_prop3(inst))):
    print(f"{name:16s} lhs {rep.lhs:.4f} <= rhs {rep.rhs:.4f}  slack {rep.slack:+.4f}")

# the Lipschitz form of the bound is not a theorem; this instance breaks it
bad = verify_prop3(random_instance(3875))
print(f"counterexample   slack {bad.slack:+.4f}, lipschitz-only rhs holds: "
      f"{bad.terms['lipschitz_only_rhs'] >= bad.lhs}")

summary = check_instances(200)
print("min slack over 200 instances:", {k: round(v, 4) for k, v in summary["min_slack"].items()})
print("rademacher of the margin class:", round(empirical_rademacher(inst.pi_one_values()[:, :12]), 4))
