"""Smoke test for the qsphere Python module.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/qsphere-*.whl
"""

import cmath
import json
import math

import qsphere


def norm(z):
    return math.sqrt(sum(abs(c) ** 2 for c in z))


def dist(a, b):
    return math.sqrt(sum(abs(x - y) ** 2 for x, y in zip(a, b)))


def main():
    sys_a = qsphere.System.sys_a()
    assert sys_a.dim == 2
    assert sys_a.check()["pass"]
    assert qsphere.System.from_json(sys_a.to_json()).dim == 2

    gal = qsphere.System.galerkin("x^2", n=3, sigma=2.0, epsilon=0.0)
    assert gal.check()["pass"], gal.check()

    # zero noise: exact free evolution of e_1
    e1 = sys_a.e(1)
    times, states = qsphere.simulate(sys_a, e1, 3, seed=1, noise=qsphere.NoiseModel.zero(8))
    assert times == [0.0, 1.0, 2.0, 3.0]
    lam1 = sys_a.eigenvalues[0]
    exact = [c * cmath.exp(-1j * lam1 * 3.0) for c in e1]
    assert dist(states[-1], exact) < 1e-9

    # the noisy chain stays on the sphere and is reproducible
    a = qsphere.chain(sys_a, e1, 5, seed=7)
    b = qsphere.chain(sys_a, e1, 5, seed=7)
    assert a == b
    assert all(abs(norm(z) - 1.0) < 1e-9 for z in a)

    # exact steering and replay
    z1 = [1 / math.sqrt(2), 1j / math.sqrt(2)]
    z2 = [0.6, -0.8j]
    plan = qsphere.global_steer(sys_a, z1, z2, delta=0.03, tol=1e-6, seed=3)
    assert plan.total_error < 1e-6, plan
    assert dist(plan.replay(sys_a), z2) < 1e-6
    again = qsphere.SteeringPlan.from_json(plan.to_json())
    assert again.duration == plan.duration
    assert json.loads(plan.to_json())["stages"]

    part = qsphere.Partition.fit(sys_a, cells=8, samples=400, seed=2)
    assert len(part) == 8
    assert 0 <= part.assign(e1) < 8
    report = qsphere.mixing(sys_a, part, sys_a.e(1), sys_a.e(2), k_max=12, ensemble=200, seed=2)
    assert report["rate"] > 0.0

    try:
        qsphere.NoiseModel([], "standard_normal")
    except ValueError:
        pass
    else:
        raise AssertionError("empty noise model accepted")

    print("qsphere smoke test: ok", plan)


if __name__ == "__main__":
    main()
