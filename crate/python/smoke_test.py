"""Smoke test for the smlab extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
Run:                       python python/smoke_test.py [--train]
"""

import math
import os
import sys
import tempfile

import smlab


def main() -> None:
    scenario = smlab.Scenario()
    assert len(scenario) == 1998, len(scenario)
    assert scenario.particle_counts() == (2382, 1068)
    vocab = scenario.vocab
    assert vocab[:2] == ["[PAD]", "[MASK]"]

    split = scenario.sample_split(0)
    assert [len(split[k]) for k in ("sample", "train", "test")] == [470, 440, 30]
    record = split["train"][0]
    assert scenario.is_consistent(record)
    ids = scenario.encode(record)
    assert len(ids) == 11

    rng = smlab.Rng(7)
    draws = [rng.uniform() for _ in range(1000)]
    assert all(0.0 <= u < 1.0 for u in draws)
    assert smlab.Rng(7).uniform() == draws[0]

    model = smlab.Model(d_model=32, d_ffn=64, seed=3)
    assert model.parameter_count() > 0
    masked = list(ids)
    masked[4] = vocab.index("[MASK]")
    (ranked,) = model.predict(masked, [4])
    assert len(ranked) == len(vocab)
    attn = model.attention(masked)
    for head in attn[0]:
        for row in head:
            assert math.isclose(sum(row), 1.0, rel_tol=1e-9)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        assert smlab.Model.load(path).predict(masked, [4]) == model.predict(masked, [4])

    if "--train" in sys.argv:
        result = smlab.train_trial(0, schedule="1")
        acc = result["checkpoints"][0]["accuracy"]
        print("epoch 1 accuracy (i, ii, iii):", acc)

    print("smlab smoke test passed")


if __name__ == "__main__":
    main()
