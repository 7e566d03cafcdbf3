"""Smoke test for the odil_py extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/odil_py-*.whl
Then run:
    python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import odil_py

TINY = {
    "seed": 2,
    "benchmark": {"side": 8, "num_classes": 5, "base_noise": 1.0},
    "stream": [
        {"source": "synthetic", "id": 1, "name": "home", "classes": [0, 1, 2, 3, 4],
         "shift": {"kind": "preset", "severity": "mild"}, "train_size": 60, "test_size": 30},
        {"source": "synthetic", "id": 2, "name": "away", "classes": [0, 1, 2, 3, 4],
         "shift": {"kind": "preset", "severity": "severe"}, "train_size": 20, "test_size": 30},
    ],
    "model": {
        "input_shape": [1, 8, 8],
        "classes": 5,
        "layers": [
            {"kind": "conv2d", "out_channels": 4, "kernel": 3},
            {"kind": "batch_norm", "channels": 4},
            {"kind": "relu"},
            {"kind": "global_avg_pool"},
            {"kind": "classifier"},
        ],
    },
}


def check_momentum():
    alphas = odil_py.momentum_sequence(3)
    assert math.isclose(alphas[0], 0.94 * 0.1 + 0.05, abs_tol=1e-15), alphas
    assert alphas == sorted(alphas), "standard schedule rises"
    decaying = odil_py.momentum_sequence(5, offset=0.005)
    assert decaying == sorted(decaying, reverse=True), "small offset decays"
    try:
        odil_py.momentum_sequence(3, offset=0.2)
    except ValueError:
        pass
    else:
        raise AssertionError("offset above alpha_0 must be rejected")


def check_metrics():
    assert odil_py.accuracy([0, 1, 2, 2], [0, 1, 2, 3]) == 0.75
    rows = [[0.9], [0.7, 0.8]]
    assert math.isclose(odil_py.average_accuracy(rows, 2), 0.75)
    assert math.isclose(odil_py.average_forgetting(rows, 2), 0.2)


def check_adaptation():
    home, away = odil_py.generate_stream(seed=2, config_json=json.dumps(TINY))
    assert home["id"] == 1 and away["id"] == 2
    train = home["train"]
    model = odil_py.Model.from_config_json(json.dumps(TINY["model"]), seed=2)
    base = model.train(train["data"], train["shape"], train["labels"], epochs=5, seed=2)
    assert base.classes == 5 and base.input_shape == [1, 8, 8]

    learner = odil_py.Learner(base)
    test = home["test"]
    before = learner.infer(1, test["data"], test["shape"])
    assert before == base.predict(test["data"], test["shape"])

    adapt = away["adapt"]
    step = learner.adapt(2, adapt["data"], adapt["shape"])
    assert step == adapt["shape"][0]
    assert learner.tasks() == [1, 2]
    assert learner.stats(1) != learner.stats(2)

    # Earlier domains keep their predictions after a new domain is learned.
    assert learner.infer(1, test["data"], test["shape"]) == before
    preds = learner.infer(2, away["test"]["data"], away["test"]["shape"])
    assert len(preds) == away["test"]["shape"][0]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "learner.json")
        learner.save(path)
        again = odil_py.Learner.load(path)
        assert again.tasks() == [1, 2]
        assert again.infer(2, away["test"]["data"], away["test"]["shape"]) == preds

    try:
        learner.infer(9, test["data"], test["shape"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown task must be rejected")
    return odil_py.accuracy(preds, away["test"]["labels"])


def main():
    check_momentum()
    check_metrics()
    acc = check_adaptation()
    print(f"odil_py smoke test passed (adapted accuracy {acc:.3f})")


if __name__ == "__main__":
    main()
