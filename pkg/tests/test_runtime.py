import numpy as np
import pytest

from allinone import store
from allinone.errors import DimensionError, RangeError
from allinone.runtime import benchmark, build_plan, count_work, infer, write_benchmark_csv
from allinone.trainer import round_weights_to_storage

from conftest import random_state, tiny_descriptor

ARCHS = ["lenet", "mini_resnet", "tiny"]


def _state(name, scheme, n, seed):
    desc = tiny_descriptor() if name == "tiny" else None
    block = (2, 6) if name == "tiny" else (4, 8)
    state = random_state(name if desc is None else "tiny", scheme, n, seed=seed, block=block, descriptor=desc)
    round_weights_to_storage(state)
    return state


def _oracle(model, n, x):
    """Dense network with the switch's hard mask multiplied in, eval-mode BN."""
    net = model.network()
    net.set_group_masks(model.hard_mask(n))
    net.set_switch(n - 1)
    return net.forward(x, train=False)


def _pairs(count):
    rng = np.random.default_rng(2024)
    for i in range(count):
        yield (ARCHS[i % 3], ("pattern", "block")[(i // 3) % 2], int(rng.integers(1, 5)), i)


@pytest.mark.parametrize("scheme", ["pattern", "block"])
def test_runtime_matches_dense_masked_oracle(scheme):
    rng = np.random.default_rng(7)
    checked = 0
    for name, _, n, seed in _pairs(200):
        state = _state(name, scheme, n, seed)
        model = store.loads(store.dumps(store.from_state(state)))
        switch = int(rng.integers(1, n + 1))
        x = rng.standard_normal((2, *model.descriptor["input"]))
        np.testing.assert_allclose(infer(build_plan(model, switch), x), _oracle(model, switch, x),
                                   rtol=0, atol=1e-10)
        checked += 1
    assert checked == 200


@pytest.mark.parametrize("name", ARCHS)
@pytest.mark.parametrize("scheme", ["pattern", "block"])
def test_work_count_equals_mac_account(name, scheme):
    state = _state(name, scheme, 3, 11)
    model = store.from_state(state)
    for n in (1, 2, 3):
        assert count_work(build_plan(model, n)) == state.account.current(state.hard_mask(n))


def test_work_strictly_decreases_with_switch():
    state = _state("lenet", "pattern", 4, 3)
    model = store.from_state(state)
    work = [count_work(build_plan(model, n)) for n in range(1, 5)]
    assert all(a > b for a, b in zip(work, work[1:]))


def test_switch_one_touches_every_stored_group():
    state = _state("mini_resnet", "pattern", 3, 5)
    model = store.from_state(state)
    for name in model.layers:
        np.testing.assert_array_equal(model.hard_mask(1)[name], model.codes[name] > 0)


@pytest.mark.parametrize("bad", [0, 4, -1, 1.5])
def test_switch_out_of_range(bad):
    model = store.from_state(_state("lenet", "pattern", 3, 0))
    with pytest.raises(RangeError):
        build_plan(model, bad)


def test_wrong_input_shape():
    model = store.from_state(_state("lenet", "pattern", 3, 0))
    with pytest.raises(DimensionError):
        infer(build_plan(model, 1), np.zeros((1, 3, 28, 28)))


def test_float32_path_is_close():
    model = store.from_state(_state("mini_resnet", "block", 2, 1))
    x = np.random.default_rng(0).standard_normal((2, *model.descriptor["input"]))
    plan = build_plan(model, 2)
    np.testing.assert_allclose(infer(plan, x, check=False), infer(plan, x), rtol=1e-3, atol=1e-4)


def test_benchmark_rows(tmp_path):
    model = store.from_state(_state("lenet", "pattern", 2, 0))
    x = np.zeros((2, 1, 28, 28))
    rows = benchmark(model, x, repetitions=2)
    assert [r["switch"] for r in rows] == [1, 2]
    assert all(r["median_ns"] > 0 and r["repetitions"] == 2 for r in rows)
    write_benchmark_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "switch,repetitions,median_ns,macs"
