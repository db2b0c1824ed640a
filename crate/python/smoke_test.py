"""Smoke test for the maskdiff Python bindings.

Build the extension and put it on the path, then run this file:

    cargo build -p maskdiff-py --features extension-module
    cp target/debug/libmaskdiff_py.so python/maskdiff_py.so
    python3 python/smoke_test.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import maskdiff_py as md


def check_schedule():
    s = md.Schedule.linear(50)
    assert s.steps == 50
    assert s.alpha_bars[-1] < 0.01
    for t in range(2, 11):
        for xt in (0, 1):
            for x0 in (0, 1):
                p = s.posterior(xt, x0, t)
                assert abs(sum(p) - 1.0) < 1e-12
    m = s.marginal(1, 50)
    assert abs(m[1] - 0.5) < 0.005
    c = md.Schedule.cosine(10)
    assert len(c.betas) == 10


def check_data_and_metrics():
    samples = md.generate_dataset(4, size=32, seed=3, ambiguous_frac=0.0)
    assert len(samples) == 4
    s = samples[0]
    h, w, rgb = s.image
    assert (h, w) == (32, 32) and len(rgb) == h * w * 3
    assert s.difficulty == "easy"
    mask = s.mask
    assert md.f1(mask, mask) == 1.0
    assert md.auc([float(v) for v in mask.labels], mask) == 1.0
    noisy = md.q_sample(mask, 50, md.Schedule.linear(50), seed=1)
    assert noisy.height == 32
    again = md.q_sample(mask, 50, md.Schedule.linear(50), seed=1)
    assert noisy == again
    return samples


def check_train_and_sample(samples):
    cfg = {
        "schedule": {"steps": 5, "kind": "cosine", "s": 0.008},
        "denoiser": {
            "base_channels": 16,
            "time_embed_dim": 16,
            "attention_heads": 2,
            "pyramid_channels": [8, 8, 8],
        },
        "train": {"batch_size": 2},
    }
    trainer = md.Trainer(json.dumps(cfg))
    recs = trainer.train(samples, until=2)
    assert [r[0] for r in recs] == [1, 2]
    assert all(r[2] == r[2] and r[2] >= 0 for r in recs)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        trainer.save(path)
        model = md.Model.load(path)
        assert model.steps == 5
        h, w, rgb = samples[1].image
        e1 = model.sample(h, w, rgb, n=3, seed=7)
        e2 = model.sample(h, w, rgb, n=3, seed=7)
        assert len(e1.members) == 3
        assert e1.vote_probs == e2.vote_probs
        assert all(0.0 <= u <= 1.0 for u in e1.uncertainty)
        assert e1.final_mask.height == h


def main():
    print("maskdiff", md.__version__)
    check_schedule()
    samples = check_data_and_metrics()
    check_train_and_sample(samples)
    failed = [c for c in md.verify() if not c[1]]
    assert not failed, failed
    print("ok")


if __name__ == "__main__":
    main()
