"""Smoke test for the fedcast extension module.

Build first: pip install --no-build-isolation -e crates/py
"""

import json
import math
import tempfile

import fedcast


def main():
    model = fedcast.Model(5, seed=1)
    assert model.param_count == 5381, model.param_count
    assert fedcast.Model(7).param_count == 5541

    windows = [[[0.1 * (s + f) for f in range(5)] for s in range(6)] for _ in range(3)]
    preds = model.predict(windows)
    assert len(preds) == 3 and all(math.isfinite(p) for p in preds)
    loss, grad = model.loss_and_gradients(windows, [0.2, 0.3, 0.4])
    assert loss >= 0 and len(grad) == model.param_count

    params = model.parameters()
    other = [p + 1.0 for p in params]
    avg = fedcast.fedavg([(1, params), (3, other)])
    assert abs(avg[0] - (params[0] + 0.75)) < 1e-12

    labels = fedcast.agglomerate([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0]], "ward", 1.0)
    assert labels[0] == labels[1] != labels[2], labels
    assert fedcast.cluster_quality(labels, [0, 0, 1]) == 1.0

    assert fedcast.rmse([1.0, 2.0], [1.0, 4.0]) == math.sqrt(2.0)
    assert round(fedcast.savings_factor(5.6e6, 71.0e6), 1) == 12.7
    assert round(fedcast.pct_difference(0.0187, 0.0196), 1) == 4.6

    with tempfile.TemporaryDirectory() as tmp:
        meters, weather, truth = fedcast.synthesize(tmp + "/syn", 2, archetypes=1, days=10, seed=3)
        assert meters.endswith("meters.csv")
        config = {
            "seed": 2,
            "data": {"source": "synthetic", "households": 2, "archetypes": 1, "noise": 0.05, "days": 10},
            "variants": [{"k": 6, "weather": False}],
            "scenarios": ["localised", "fl"],
            "hidden_size": 4,
            "caps": {"localised_epochs": 2, "fl_rounds": 2},
        }
        run_dir, results = fedcast.run(json.dumps(config), tmp + "/out")
        reports = json.loads(results)
        assert len(reports) == 2, reports
        try:
            fedcast.run("{\"seed\": \"x\"}", tmp + "/bad")
        except ValueError:
            pass
        else:
            raise AssertionError("bad config accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
