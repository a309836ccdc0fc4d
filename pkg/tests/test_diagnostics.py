import pytest

from application.diagnostics import GRADCHECK_THRESHOLD, SUITE, CheckResult, run_gradcheck_suite


def test_suite_covers_every_component():
    names = [name for name, _ in SUITE]
    assert len(names) == len(set(names))
    for expected in ("matmul", "softmax (causal mask)", "cross_entropy", "lora linear",
                     "fused answer loss", "batch loss: vision patch", "batch loss: projector",
                     "batch loss: lora b"):
        assert expected in names


def test_check_result_threshold():
    assert CheckResult("x", GRADCHECK_THRESHOLD / 2).passed
    assert not CheckResult("x", GRADCHECK_THRESHOLD).passed


@pytest.mark.parametrize("seed", [0, 1])
def test_suite_passes(seed):
    results = run_gradcheck_suite(seed)
    assert len(results) == len(SUITE)
    failed = [(r.component, r.max_relative_error) for r in results if not r.passed]
    assert failed == []


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(2, 20))
def test_suite_passes_many_seeds(seed):
    assert all(r.passed for r in run_gradcheck_suite(seed))
