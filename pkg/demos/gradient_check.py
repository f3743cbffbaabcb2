"""Compare unrolled ICP gradients with central differences on a small scan."""

from icp_attack.data import generate_shape, make_pair
from icp_attack.gradients import GradientConfig, finite_difference_check
from icp_attack.icp import icp_profile

pair = make_pair(generate_shape("cross", density=60, seed=2), seed=4, sample_size=40, noise_sigma=0.01)
report = finite_difference_check(
    pair.scan,
    pair.map,
    GradientConfig(unroll_iterations=25, icp=icp_profile("shapenet")),
    pair.ground_truth,
    (1, 1, 0, 0, 0, 0),
    sample_coordinates=60,
)
print(f"{report.pass_fraction:.1%} of {report.checked} probes within 1e-3 (excluded {report.excluded})")
