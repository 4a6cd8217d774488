"""Smoke test for the histodiff Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin develop -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import histodiff_py as hd


def main():
    ab = hd.alpha_bars(1000, 1e-4, 2e-2)
    assert len(ab) == 1000
    assert all(b < a for a, b in zip(ab, ab[1:]))
    assert math.isclose(ab[0], 1 - 1e-4)

    seq = hd.ddim_timesteps(1000, 50)
    assert seq[0] == 1000 and seq[-1] == 1 and len(seq) == 50

    assert abs(hd.frechet_distance([0.0], [[1.0]], [2.0], [[1.0]]) - 4.0) < 1e-6
    assert abs(hd.frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) - 1.0) < 1e-6

    labels = [0] * 10 + [1] * 10
    predicted = [0] * 8 + [1] * 2 + [0] * 3 + [1] * 7
    m = hd.classification_metrics(labels, predicted, 2)
    assert math.isclose(m["accuracy"], 0.75)
    assert math.isclose(m["sensitivity"], 0.75)
    assert abs(m["f1"] - 0.749) < 1e-3

    try:
        hd.ddim_timesteps(10, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("num_steps=0 should be rejected")

    with tempfile.TemporaryDirectory() as out:
        bench = Path(hd.gen_benchmark(output_dir=out))
        header = (bench / "pool.csv").read_text().splitlines()[0]
        assert header == "path,label,source", header

    print("histodiff_py smoke test passed")


if __name__ == "__main__":
    main()
