"""Smoke test for the samplet_gp Python module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/samplet-gp-py/Cargo.toml
"""

import math
import random

import samplet_gp as sg


def cloud(n, d, seed):
    rng = random.Random(seed)
    return [[rng.random() for _ in range(d)] for _ in range(n)]


def main():
    pts = cloud(500, 2, 1)

    k = sg.MaternKernel(1.5, 0.5)
    assert abs(k(0.0) - 1.0) < 1e-14
    assert k(0.3) < 1.0

    basis = sg.SampletBasis(pts, q=2)
    assert len(basis) == 500
    f = [math.sin(3 * x) * y for x, y in pts]
    back = basis.inverse(basis.forward(f))
    assert max(abs(a - b) for a, b in zip(f, back)) < 1e-12
    energy = sum(v * v for v in f)
    assert abs(sum(c * c for c in basis.forward(f)) - energy) < 1e-10 * energy

    exact = basis.compress(k, eta=0.8, exact_far_field=True)
    assert exact.dim == 500 and exact.nnz > 0
    kd = k.matrix(pts, pts)
    u = [random.Random(2).gauss(0, 1) for _ in pts]
    direct = [sum(r[j] * u[j] for j in range(500)) for r in kd]
    via = basis.inverse(exact.matvec(basis.forward(u)))
    err = max(abs(a - b) for a, b in zip(direct, via))
    assert err < 1e-8, err

    y = [math.sin(4 * x) + 0.5 * y for x, y in pts]
    gp = sg.GaussianProcess.train(pts, y, nu=2.5, ell=0.3, sigma2=1e-2, n_steps=3)
    mean = gp.predict_mean([[0.5, 0.5]])
    assert abs(mean[0] - (math.sin(2.0) + 0.25)) < 0.1, mean
    m, cov = gp.predict([[0.3, 0.7], [0.6, 0.2]])
    assert len(m) == 2 and cov[0][0] >= 0.0 and abs(cov[0][1] - cov[1][0]) < 1e-10
    assert set(gp.hyperparameters) == {"nu", "ell", "s2", "sigma2"}

    fill, sep, ratio = sg.mesh_metrics([[0.0], [0.5], [1.0]])
    assert abs(sep - 0.25) < 1e-12 and abs(fill - 0.25) < 1e-3 and ratio >= 1.0

    res = sg.bayes_opt(lambda x: -((x[0] - 0.3) ** 2) - (x[1] - 0.6) ** 2, 2, n0=30, seed=4)
    assert len(res["history"]) == 30
    assert res["y_best"] == max(v for _, v in res["history"])
    assert res["y_best"] > -0.01, res["y_best"]

    try:
        sg.MaternKernel(1.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("integer smoothness accepted")

    def broken(x):
        raise KeyError("probe")

    try:
        sg.bayes_opt(broken, 1, n0=5)
    except KeyError:
        pass
    else:
        raise AssertionError("objective error swallowed")

    print("smoke test passed")


if __name__ == "__main__":
    main()
