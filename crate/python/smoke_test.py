"""Smoke test for the langfree Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import math
import random
import sys

import langfree_py as lf


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    data = lf.gen_dataset(4, 0)
    caption, side, pixels = data[0]
    assert side == 32 and len(pixels) == side * side * 3
    assert all(-1.0 <= p <= 1.0 for p in pixels)
    assert lf.gen_dataset(4, 0) == data

    oracle = lf.OracleEncoders(64, 7)
    t = oracle.encode_text(caption)
    i = oracle.encode_attributes(caption)
    assert close(lf.cosine_similarity(t, i), 1.0, 1e-12)

    rng = random.Random(3)
    f = [rng.gauss(0, 1) for _ in range(64)]
    eps = [rng.gauss(0, 1) for _ in range(64)]
    h = lf.pseudo_fixed(f, 0.5, eps)
    assert close(math.sqrt(sum(x * x for x in h)), 1.0, 1e-12)
    assert lf.pseudo_fixed(f, 0.0, eps) == lf.unit(f)
    raw = lf.perturb_fixed(f, 0.5, eps)
    norm_f = math.sqrt(sum(x * x for x in f))
    diff = math.sqrt(sum((a - b) ** 2 for a, b in zip(raw, f)))
    assert close(diff, 0.5 * norm_f, 1e-9)

    bound = lf.similarity_bound(0.7, 0.5, 64)
    emp, b2, se, passed = lf.similarity_mc_check(0.7, 0.5, 64, trials=20000, seed=1)
    assert close(bound, b2) and passed and emp >= bound - 3 * se

    loss = lf.contrastive_loss([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], tau=0.5, sharpen=False)
    assert loss > 0.0

    assert close(lf.fid([0.0, 0.0], [[1, 0], [0, 1]], [3.0, 4.0], [[1, 0], [0, 1]]), 25.0, 1e-9)
    mean, _ = lf.inception_score([[0.25] * 4] * 8)
    assert close(mean, 1.0, 1e-12)

    if len(sys.argv) > 1:
        gen = lf.Generator.load(sys.argv[1])
        img = gen.generate(oracle.encode_text("a large red circle"), [0.0] * gen.z_dim)
        assert len(img) == gen.side * gen.side * 3

    print("python smoke test: OK")


if __name__ == "__main__":
    main()
