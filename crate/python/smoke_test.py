"""Smoke test for the gpuq_py extension.

Build and install first:
    maturin develop --release -m crates/python/Cargo.toml
then run:
    python python/smoke_test.py
"""

import math
import os
import tempfile

import gpuq_py

LABELS = {"negative": 0, "uncertain": 1, "positive": 2}


def main():
    assert gpuq_py.preprocess_text("No Edema, seen.") == ["no", "edema", "seen"]

    reports = gpuq_py.synth_generate(seed=0, num_examples=600, disagreement_rate=0.1)
    table = gpuq_py.synthetic_embeddings(dim=16, seed=0)
    xs, ys = [], []
    for _id, text, primary, _secondary in reports:
        vec, _oov = gpuq_py.embed_mean(gpuq_py.preprocess_text(text), table)
        xs.append(vec)
        ys.append(LABELS[primary])

    gp = gpuq_py.SvgpModel.init(xs, num_inducing=32, seed=0)
    assert abs(gp.kl_divergence()) < 1e-9
    trace = gp.fit(xs, ys, seed=0, epochs=5, learning_rate=0.01, batch_size=100)
    assert len(trace) == 30 and all(math.isfinite(t) for t in trace)
    probs = gp.predict_proba(xs, samples=16, seed=0)
    assert all(abs(sum(p) - 1.0) < 1e-9 for p in probs)
    print("gp  accuracy", round(gpuq_py.accuracy(probs, ys), 3), "nlpp", round(gpuq_py.nlpp(probs, ys), 3))

    ens = gpuq_py.Ensemble.fit(xs, ys, seed=0, members=2, width=16, epochs=3)
    eprobs = ens.predict_proba(xs)
    print("ens accuracy", round(gpuq_py.accuracy(eprobs, ys), 3), "mmpcl", round(gpuq_py.mmpcl(eprobs), 3))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "gp.json")
        gp.save(path)
        again = gpuq_py.SvgpModel.load(path)
        assert again.predict_proba(xs[:5], samples=16, seed=0) == probs[:5]
        path = os.path.join(d, "ens.json")
        ens.save(path)
        assert gpuq_py.Ensemble.load(path).predict_proba(xs[:5]) == eprobs[:5]

    iso = gpuq_py.pava_fit([0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 1.0, 1.0])
    assert iso.values == [0.5, 0.5, 1.0, 1.0]
    assert iso(0.05) <= iso(0.35)
    cal = gpuq_py.calibrate_probs(probs, ys, probs[:3])
    assert len(cal) == 3

    try:
        gpuq_py.SvgpModel.load(os.path.join(tempfile.gettempdir(), "does-not-exist.json"))
    except OSError as e:
        assert "does-not-exist.json" in str(e)
    else:
        raise AssertionError("expected OSError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
