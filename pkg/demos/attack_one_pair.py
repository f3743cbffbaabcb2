"""Attack a single synthetic pair and compare against both heuristics.

Run with ``python demos/attack_one_pair.py``. Takes a few seconds.
"""

from icp_attack.attack import (
    AttackConfig,
    baseline_normal,
    baseline_uniform,
    evaluate_perturbation,
    optimize_perturbation,
)
from icp_attack.data import generate_shape, make_pair
from icp_attack.harness import compute_allowance
from icp_attack.icp import MapModel

LAM = 0.1

shape = generate_shape("L-shape", seed=3)
pair = make_pair(shape, seed=1, pair_id="demo")
mm = MapModel(pair.map)

config = AttackConfig(lam=LAM, beta=1000)
attack = optimize_perturbation(pair, config, mm)
allowance = compute_allowance([attack])
print(f"unperturbed error  {attack.pose_error_before.planar_norm:.4f}")
print(f"attack error       {attack.pose_error_after.planar_norm:.4f}  (loss {attack.loss_trace[0]:.4f} -> {min(attack.loss_trace):.4f})")
print(f"overshoot allowance {allowance:.4f}")

# Baselines get the attack's overshoot as extra budget.
bound = LAM + allowance
for result in (baseline_uniform(pair.scan, bound, seed=0), baseline_normal(pair.scan, bound)):
    scored = evaluate_perturbation(result, pair, config.eval_icp, mm)
    print(f"{result.method:<18} {scored.pose_error_after.planar_norm:.4f}")
