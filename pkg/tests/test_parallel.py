import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgpde.functional import BNState
from mgpde.mgtrain import LevelData
from mgpde.network import UNetSpec, build
from mgpde.optim import make_optimizer
from mgpde.parallel import (ClusterSpec, Communicator, DataParallel, ReplicaDivergence, allreduce_average,
                            partition, run_workers, sync_bn, train_epoch, tree_sum)
from mgpde.problem import GridSpec, sample_omegas
from mgpde.tensor import Tensor, tsum


def all_positions(part):
    """(per-rank positions, per-step local sizes) over one epoch."""
    per_rank = [[] for _ in range(part.p)]
    sizes = []
    for n in range(part.n_batches):
        step = [part.local_positions(n, r) for r in range(part.p)]
        sizes.append({s.size for s in step})
        for r, s in enumerate(step):
            per_rank[r].append(s)
    return [np.concatenate(x) for x in per_rank], sizes


@pytest.mark.parametrize(
    "N,b,p,N2,b2",
    [(4096, 64, 4, 4096, 64), (100, 30, 4, 100, 28), (10, 5, 3, 12, 3), (7, 7, 1, 7, 7), (64, 64, 8, 64, 64)],
)
def test_partition_examples(N, b, p, N2, b2):
    part = partition(N, b, p)
    assert (part.n_samples, part.batch_size) == (N2, b2)


@pytest.mark.parametrize("args", [(0, 1, 1), (10, 0, 1), (10, 4, 0), (10, 11, 1), (10, 3, 4)])
def test_partition_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        partition(*args)


@settings(max_examples=500)
@given(st.integers(1, 2000).flatmap(
    lambda N: st.tuples(st.just(N), st.integers(1, N)).flatmap(
        lambda nb: st.tuples(st.just(nb[0]), st.just(nb[1]), st.integers(1, nb[1])))))
def test_partition_properties(case):
    N, b, p = case
    part = partition(N, b, p)
    assert part.n_samples % p == 0 and part.batch_size % p == 0
    # remainder lemma: the short last batch is still divisible by p
    assert (part.n_samples % part.batch_size) % p == 0
    per_rank, sizes = all_positions(part)
    assert all(len(s) == 1 for s in sizes)
    assert len({r.size for r in per_rank}) == 1 and per_rank[0].size == part.local_samples
    union = np.sort(np.concatenate(per_rank))
    assert np.array_equal(union, np.arange(part.n_samples))
    ids = part.sample_ids(union)
    assert set(ids.tolist()) == set(range(N))


@given(st.integers(1, 400).flatmap(
    lambda N: st.tuples(st.just(N), st.integers(1, N)).flatmap(
        lambda nb: st.tuples(st.just(nb[0]), st.just(nb[1]), st.integers(1, nb[1])))))
def test_epoch_table_matches_stepwise_positions(case):
    part = partition(*case)
    pos, step = part.epoch_table()
    for r in range(part.p):
        expect = [part.local_positions(n, r) for n in range(part.n_batches)]
        assert np.array_equal(pos[r], np.concatenate(expect))
        assert np.array_equal(step[r], np.concatenate([np.full(e.size, n) for n, e in enumerate(expect)]))


def test_sample_ids_follow_order():
    part = partition(5, 2, 2)
    order = np.array([4, 3, 2, 1, 0])
    assert part.sample_ids(np.arange(6), order).tolist() == [4, 3, 2, 1, 0, 4]


def test_tree_sum_order_and_allreduce_examples():
    v = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
    assert np.array_equal(tree_sum(v), np.array([9.0, 12.0]))
    out = allreduce_average(v)
    assert all(np.array_equal(o, np.array([3.0, 4.0])) for o in out)
    assert allreduce_average([np.array([0.1])])[0][0] == 0.1
    with pytest.raises(ValueError, match="length"):
        allreduce_average([np.zeros(2), np.zeros(3)])


def test_sync_bn_example_and_byte_identity(rng):
    a = {"l": BNState(np.array([1.0, 2.0]), np.array([1.0, 3.0]))}
    b = {"l": BNState(np.array([3.0, 4.0]), np.array([2.0, 5.0]))}
    out = sync_bn([a, b])
    assert np.array_equal(out[0]["l"].mean, [2.0, 3.0]) and np.array_equal(out[0]["l"].var, [1.5, 4.0])
    states = [{f"l{k}": BNState(rng.standard_normal(5), rng.uniform(0.1, 3, 5)) for k in range(3)}
              for _ in range(4)]
    out = sync_bn(states)
    for n in states[0]:
        plain_mean = tree_sum([s[n].mean for s in states]) / 4
        for o in out:
            assert o[n].mean.tobytes() == out[0][n].mean.tobytes() == plain_mean.tobytes()
            assert o[n].var.tobytes() == out[0][n].var.tobytes()
        assert np.allclose(out[0][n].var, np.mean([s[n].var for s in states], axis=0), rtol=1e-15)


def test_sync_bn_structure_mismatch():
    with pytest.raises(ValueError, match="structure"):
        sync_bn([{"a": BNState.fresh(2)}, {"b": BNState.fresh(2)}])


def test_communicator_threads_agree():
    comm = Communicator(4)
    out = run_workers(4, lambda r: comm.allreduce(r, np.array([float(r)])), comm)
    assert all(o.tobytes() == np.array([1.5]).tobytes() for o in out)
    assert comm.counter.grad_reduces == 1 and comm.counter.grad_bytes == [8]


def test_worker_error_aborts_group():
    comm = Communicator(3)

    def fn(r):
        if r == 1:
            raise KeyError("boom")
        return comm.allreduce(r, np.zeros(2))

    with pytest.raises(KeyError):
        run_workers(3, fn, comm)


def cheap_setup(p, N=256, b=64):
    data = np.linspace(0.5, 1.5, N)
    model = build(UNetSpec(depth=1, base_filters=1))

    def loss_fn(m, ids, reducer):
        s = tsum(Tensor(np.zeros(1)))
        for q in m.parameters():
            s = s + tsum(q * q)
        return s * float(np.mean(data[ids]))

    return DataParallel(model, ClusterSpec(p), "sgd", 1e-2), loss_fn


@pytest.mark.parametrize("p", [1, 2, 4, 8])
def test_reduce_count_and_bytes(p):
    dp, loss_fn = cheap_setup(p, N=4096, b=64)
    rep = dp.train_epoch(loss_fn, 4096, 64)
    nw = dp.model.parameter_count
    assert rep.comm.grad_reduces == 64 and len(rep.batch_losses) == 64
    assert rep.comm.grad_bytes == [8 * nw] * 64
    assert rep.comm.bn_syncs == (len(dp.model.bn_names()) if p > 1 else 0)


def test_zero_gradient_epoch_leaves_parameters():
    model = build(UNetSpec(depth=1, base_filters=1))
    dp = DataParallel(model, ClusterSpec(2), "adam", 1e-3)
    before = dp.model.parameter_digest()
    zero = lambda m, ids, r: tsum(m.parameters()[0] * 0.0)
    rep = dp.train_epoch(zero, 16, 4)
    assert rep.loss == 0.0 and dp.model.parameter_digest() == before


def test_cheap_loss_curve_is_worker_count_invariant():
    curves = {}
    for p in (1, 2, 4):
        dp, loss_fn = cheap_setup(p)
        curves[p] = [dp.train_epoch(loss_fn, 256, 64).loss for _ in range(5)]
    for p in (2, 4):
        assert np.allclose(curves[p], curves[1], rtol=1e-13, atol=0)


def test_replica_divergence_detected():
    dp, loss_fn = cheap_setup(2)
    dp.replicas[1].params["out.bias"].data = dp.replicas[1].params["out.bias"].data + 1.0
    with pytest.raises(ReplicaDivergence):
        dp.train_epoch(loss_fn, 256, 64)


def test_train_epoch_argument_checks():
    m = build(UNetSpec(depth=1, base_filters=1))
    with pytest.raises(ValueError):
        train_epoch([m, m.copy()], partition(8, 4, 1), [make_optimizer("sgd", 1.0)], lambda *a: None)
    with pytest.raises(ValueError, match="bn_mode"):
        train_epoch([m], partition(8, 4, 1), [make_optimizer("sgd", 1.0)], lambda *a: None, bn_mode="x")


def test_real_loss_one_step_gradients_match_across_p():
    grid = GridSpec(8)
    data = LevelData(sample_omegas(16, 0), grid)
    model = build(UNetSpec(depth=2, base_filters=2), seed=3)
    grads = {}
    for p in (1, 2, 4):
        dp = DataParallel(model, ClusterSpec(p), "adam", 1e-3)
        grads[p] = dp.train_epoch(data.loss_fn, 16, 8, keep_grads=True).averaged_grads
    for p in (2, 4):
        for g, g1 in zip(grads[p], grads[1]):
            assert np.linalg.norm(g - g1) <= 1e-12 * np.linalg.norm(g1)
