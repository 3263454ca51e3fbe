"""End-to-end smoke test of the limbfit Python module."""

import math
import tempfile
from pathlib import Path

import limbfit


def main() -> None:
    cols, cost = limbfit.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assert cost == 5.0, (cols, cost)

    gt = [[0.0, 0.0, float(j)] for j in range(13)]
    shifted = [[0.03, 0.0, z] for _, _, z in gt]
    assert math.isclose(limbfit.mpjpe(shifted, gt), 0.03, rel_tol=1e-12)
    assert limbfit.mpjpe(gt[::-1], gt, matched=True) == 0.0

    pts = [[0.0, 0.0, 0.0], [0.0, 0.1, 0.0], [5.0, 0.0, 0.0], [5.0, 0.1, 0.0]]
    labels, _, inertia = limbfit.kmeans(pts, 2)
    assert labels[0] == labels[1] != labels[2] == labels[3]
    assert math.isclose(inertia, 0.01, rel_tol=1e-9)

    assert limbfit.gradcheck(configs=2, points=64) < 1e-4

    with tempfile.TemporaryDirectory() as tmp:
        data, fit = Path(tmp) / "data", Path(tmp) / "fit"
        assert limbfit.generate(str(data), sequences=2, frames=3, seed=1) == 2
        totals = limbfit.fit(str(data), str(fit), weights="supp-demo", iters=10)
        assert len(totals) == 2 and all(math.isfinite(t) for t in totals)
        rows, mean = limbfit.evaluate(str(fit), str(data), matched=True)
        assert len(rows) == 6 and 0.0 < mean < 0.2
        win_rate, _ = limbfit.perturb(str(data), trials=2, iters=20)
        assert 0.0 <= win_rate <= 1.0

    try:
        limbfit.hungarian([[1.0, 2.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("non-square matrix accepted")

    print("limbfit smoke test passed")


if __name__ == "__main__":
    main()
