"""Smoke test for the pyleadrecon extension.

Build and install first:
    maturin develop -m crates/python/Cargo.toml
then run:
    python python/smoke_test.py [RUN_DIR]

RUN_DIR, if given, is an output directory of the `leadrecon` CLI after `train`.
"""

import math
import sys

import pyleadrecon as lr

WINDOW = 256


def main():
    classes = lr.builtin_classes()
    assert len(classes) >= 4, classes

    rec = lr.synth_record(classes[0], duration=10.0, fs=500.0, seed=3)
    assert len(rec["leads"]) == 12 and rec["leads"][0] == "I", rec["leads"]
    assert len(rec["samples"][0]) == 5000

    clean = {name: lr.clean_lead(row, rec["fs"]) for name, row in zip(rec["leads"], rec["samples"])}
    assert len(clean["II"]) == 1000
    peaks = lr.detect_r_peaks(clean["II"], 100.0)
    assert 5 <= len(peaks) <= 25, peaks

    assert lr.supcon_loss([[0.6, 0.8], [-1.0, 0.0]], [["A"], ["A"]]) == 0.0
    want = math.log(1.0 + math.exp(-1.0 / 0.07))
    got = lr.supcon_loss([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [["A"], ["A"], ["B"]])
    assert abs(got - want) < 1e-12, (got, want)

    assert abs(lr.rmse([1.0, 2.0], [1.0, 4.0]) - math.sqrt(2.0)) < 1e-12
    assert abs(lr.pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) - 1.0) < 1e-12
    try:
        lr.r2([1.0, 2.0], [3.0, 3.0])
    except ValueError:
        pass
    else:
        raise AssertionError("constant truth should be rejected")

    vectors = [[1.0, 0.0]] * 5 + [[-1.0, 0.0]] * 5
    names, matrix, diag = lr.knn_affinity(vectors, ["A"] * 5 + ["B"] * 5, k=3)
    assert names == ["A", "B"] and diag == 1.0, (names, matrix)

    x = [clean[lead][:WINDOW] for lead in lr.INPUT_LEADS]
    x_hat = lr.normalize_x(x)
    encoder = lr.Encoder(seed=1)
    h = encoder.embed(x)
    assert len(h) == 128
    decoder = lr.Decoder("V4", conditioned=True, seed=1)
    assert len(decoder.decode(x_hat, h)) == WINDOW
    total = encoder.parameter_count() + 5 * decoder.parameter_count()
    assert 200_000 <= total <= 280_000, total

    if len(sys.argv) > 1:
        model = lr.ReconstructionModel.load(sys.argv[1])
        pred = model.predict(x)
        assert len(pred) == 5 and all(len(p) == WINDOW for p in pred)
        full = model.reconstruct([clean[lead] for lead in lr.INPUT_LEADS])
        assert all(len(p) == 1000 for p in full)
        print("trained model:", model.parameter_count(), "parameters")

    print("pyleadrecon smoke test passed")


if __name__ == "__main__":
    main()
