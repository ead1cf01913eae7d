import pytest

from onepass.bench import BenchReport, MethodTiming, make_runner, run_benchmark


def test_runner_rejects_unknown_method(small_model):
    with pytest.raises(ValueError):
        make_runner(small_model, None, 0.0, "bogus")


def test_iteration_floors(small_model):
    with pytest.raises(ValueError):
        run_benchmark(small_model, [0.0] * 72, 0.1, iters=10)
    with pytest.raises(ValueError):
        run_benchmark(small_model, [0.0] * 72, 0.1, warmup=1)


def test_report_ratios_come_from_medians(small_model):
    report = run_benchmark(small_model, [0.5] * 72, 0.1, ("ours", "deterministic", "mcdrop-3"),
                           iters=30, warmup=5)
    ratios = report.to_dict()["ratios"]
    assert ratios["ours/deterministic"] == report.median("ours") / report.median("deterministic")
    assert ratios["mcdrop-3/ours"] == report.median("mcdrop-3") / report.median("ours")
    assert all(t.iterations == 30 for t in report.timings.values())


def test_ratios_skip_missing_methods():
    report = BenchReport({"deterministic": MethodTiming("deterministic", 1, 1, 1, 30, 5)})
    assert report.ratios() == {}
