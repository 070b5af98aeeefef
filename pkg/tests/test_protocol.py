import dataclasses

import numpy as np
import pytest

from metafed.errors import ConfigError, ProtocolError
from metafed.nncore import Model, checksum, payload_nbytes, to_bytes
from metafed.protocol import (
    CSV_COLUMNS, CommonModel, HyperParams, RunTrace, aggregate, build_federations, comm_cost, evaluate,
    resolve_order, run, run_fedavg, run_metafed_pp, run_stage1, run_stage2, stage1_branch, stage1_round,
    stage2_branch, _train,
)

from conftest import (
    assert_branch_soundness, assert_teacher_causality, constant_model, labelled, scenario, tiny_split,
)

FAST = dict(local_iters=5, rounds_stage1=2, lr=0.05, eval_every=2)


def hp(**kw):
    return HyperParams(**{**FAST, **kw})


# -- decision rules --------------------------------------------------------------

def test_stage2_examples():
    h = HyperParams(lambda0=2.0, l_t2=0.5)
    assert stage2_branch(h, 0.2, 0.9) == ("local", 0.0)
    assert stage2_branch(h, 0.9, 0.2) == ("distill", 2.0)
    branch, lam = stage2_branch(dataclasses.replace(h, l_t2=0.3), 0.4, 0.6)
    assert branch == "distill" and lam == pytest.approx(2.0 * 1e-2, rel=1e-12)


def test_stage1_thresholds():
    assert stage1_branch(HyperParams(l_t1=1.1), 1.0) == ("copy", 1.0)
    assert stage1_branch(HyperParams(l_t1=0.0), 0.01) == ("distill", 1.0)
    assert stage1_branch(HyperParams(l_t1=0.5), 0.5) == ("copy", 1.0)
    assert stage1_branch(HyperParams(mode="finetune_ablation", l_t1=0.0), 0.9) == ("copy", 0.0)


# -- Stage I -----------------------------------------------------------------------

def test_copy_everywhere_when_threshold_above_one():
    split = tiny_split(n_fed=3)
    res = run(split, hp(l_t1=1.1), seed=0)
    s1 = res.trace.stage("stage1")
    assert s1 and all(r.branch == "copy" for r in s1)


def test_distill_everywhere_when_threshold_zero():
    split = tiny_split(n_fed=3)
    res = run(split, hp(l_t1=0.0), seed=0)
    s1 = res.trace.stage("stage1")
    assert all(r.gate_acc > 0 for r in s1)
    assert all(r.branch == "distill" for r in s1)


def test_two_node_ring_schedule():
    split = tiny_split(n_fed=2)
    res = run(split, hp(rounds_stage1=2), seed=1)
    pre = {r.federation: r.model for r in res.trace.stage("pretrain")}
    s1 = res.trace.stage("stage1")
    assert [(r.round, r.federation) for r in s1] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert s1[0].teacher == pre[1]          # first receiver starts from the other's warm-up model
    assert s1[1].teacher == s1[0].model     # federation 2 learns from federation 1's fresh model
    assert s1[2].teacher == s1[1].model     # and federation 1 then learns from federation 2's
    assert s1[3].teacher == s1[2].model


def test_single_federation_common_is_local_model():
    split = tiny_split(n_fed=1)
    feds = build_federations(split, seed=0)
    trace = RunTrace("metafed")
    common = run_stage1(feds, hp(rounds_stage1=1), trace)
    assert checksum(common.params) == checksum(feds[0].model)
    assert trace.payloads == 0


def test_zero_lambda_equals_plain_local_training():
    split = tiny_split(n_fed=3)
    h = hp(lambda0=0.0, l_t1=0.0)
    feds = build_federations(split, seed=2)
    run_stage1(feds, h, RunTrace("metafed"))
    ref = build_federations(split, seed=2)
    for f in ref:
        for _ in range(1 + h.rounds_stage1):
            _train(f, h, h.local_iters)
    for a, b in zip(feds, ref):
        assert to_bytes(a.model) == to_bytes(b.model)
    transferred = build_federations(split, seed=2)
    run_stage1(transferred, dataclasses.replace(h, lambda0=1.0), RunTrace("metafed"))
    assert any(to_bytes(a.model) != to_bytes(b.model) for a, b in zip(feds, transferred))


def test_stage1_deterministic_checksum():
    split = tiny_split(n_fed=4)
    sums = []
    for _ in range(2):
        feds = build_federations(split, seed=5)
        sums.append(checksum(run_stage1(feds, hp(), RunTrace("metafed")).params))
    assert sums[0] == sums[1]


def test_common_model_is_last_trained():
    split = tiny_split(n_fed=3)
    feds = build_federations(split, seed=0)
    trace = RunTrace("metafed")
    common = run_stage1(feds, hp(order=(2, 0, 1)), trace)
    assert common.owner == 1
    assert checksum(common.params) == trace.stage("stage1")[-1].model


def test_empty_validation_is_protocol_error():
    feds = scenario([[0, 1], [0, 1]], [0, 1])
    feds[1].data.valid = labelled([])
    with pytest.raises(ProtocolError):
        stage1_round(feds, hp(local_iters=0), RunTrace("metafed"))


def test_early_stop():
    split = tiny_split(n_fed=3)
    res = run(split, hp(rounds_stage1=30, early_stop=True), seed=0)
    assert res.trace.stage("stage1")[-1].round < 30


# -- Stage II ----------------------------------------------------------------------

def test_stage2_constructed_accuracies():
    # fed 0: valid 20% class 0; fed 1: valid 70% class 0. fed 0 predicts 1, fed 1 predicts 0.
    feds = scenario([[0] * 2 + [1] * 8, [0] * 7 + [1] * 3], [1, 0])
    common = CommonModel(constant_model(0), owner=1)
    trace = RunTrace("metafed")
    run_stage2(feds, common, hp(local_iters=0, l_t2=0.5, lambda0=3.0), trace)
    r0, r1 = trace.stage("stage2")
    assert (r0.acc_common, r0.acc_local, r0.lam) == (0.2, 0.8, 0.0)
    assert (r1.acc_common, r1.acc_local) == (0.7, 0.7)
    assert r1.lam == pytest.approx(0.3, rel=1e-12)
    assert trace.payloads == 2


def test_stage2_does_not_mutate_common():
    split = tiny_split(n_fed=3)
    feds = build_federations(split, seed=0)
    trace = RunTrace("metafed")
    h = hp(l_t2=0.0)
    common = run_stage1(feds, h, trace)
    before = to_bytes(common.params)
    run_stage2(feds, common, h, trace)
    assert to_bytes(common.params) == before
    assert_teacher_causality(trace, checksum(common.params))


def test_stage2_picks_best_validation_checkpoint():
    split = tiny_split(n_fed=3)
    res = run(split, hp(), seed=0)
    for r, fed_acc in zip(res.trace.stage("stage2"), res.valid_acc):
        assert r.valid_acc == fed_acc
        assert r.valid_acc >= r.acc_local


@pytest.mark.parametrize("l_t1", [0.0, 0.5, 1.1])
def test_branch_soundness_on_training_runs(l_t1):
    split = tiny_split(n_fed=4)
    h = hp(l_t1=l_t1, rounds_stage1=3)
    res = run(split, h, seed=3)
    assert_branch_soundness(res.trace, h)
    assert_teacher_causality(res.trace, checksum(res.common.params))


# -- baselines ---------------------------------------------------------------------

def scalar_model(w):
    return Model([np.array([[w]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], [None, None], 1)


def test_aggregate_examples():
    assert aggregate([scalar_model(2.0), scalar_model(4.0)], [1, 1]).weights[0][0, 0] == 3.0
    assert aggregate([scalar_model(0.0), scalar_model(4.0)], [1, 3]).weights[0][0, 0] == 3.0


def test_fedavg_zero_local_steps_keeps_global():
    split = tiny_split(n_fed=2)
    feds = build_federations(split, seed=0)
    init = feds[0].model.copy()
    run_fedavg(feds, hp(local_iters=0), RunTrace("fedavg"))
    for f in feds:
        for a, b in zip(f.model.weights + f.model.biases, init.weights + init.biases):
            np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


def test_fedbn_keeps_norms_local():
    split = tiny_split(n_fed=3)
    feds = build_federations(split, seed=0)
    trace = RunTrace("fedbn")
    run_fedavg(feds, hp(rounds_stage1=1), trace, "fedbn")
    assert all(np.array_equal(f.model.weights[0], feds[0].model.weights[0]) for f in feds)
    means = [f.model.norms[0].mean for f in feds]
    assert not np.array_equal(means[0], means[1])
    assert trace.total_bytes == 2 * 3 * payload_nbytes(feds[0].model, include_norm=False)


def test_fedbn_norms_untouched_by_aggregation():
    split = tiny_split(n_fed=3)
    feds = build_federations(split, seed=0)
    h = hp(rounds_stage1=1)
    # replay local training by hand to capture each federation's own post-training norms
    ref = build_federations(split, seed=0)
    expected = []
    for f in ref:
        _train(f, h, h.local_iters)
        expected.append(f.model.norms[0].copy())
    run_fedavg(feds, h, RunTrace("fedbn"), "fedbn")
    for f, nm in zip(feds, expected):
        for name in ("mean", "var", "scale", "shift"):
            assert getattr(f.model.norms[0], name).tobytes() == getattr(nm, name).tobytes()


def test_fedavg_averages_norms():
    split = tiny_split(n_fed=3)
    feds = build_federations(split, seed=0)
    run_fedavg(feds, hp(rounds_stage1=1), RunTrace("fedavg"), "fedavg")
    assert all(np.array_equal(f.model.norms[0].mean, feds[0].model.norms[0].mean) for f in feds)


def test_fedprox_differs_from_fedavg():
    split = tiny_split(n_fed=3)
    a = run(split, hp(mode="fedavg", prox_mu=1.0), seed=0)
    b = run(split, hp(mode="fedprox", prox_mu=1.0), seed=0)
    assert to_bytes(a.models[0]) != to_bytes(b.models[0])


def test_local_mode_sends_nothing():
    res = run(tiny_split(n_fed=3), hp(mode="local"), seed=0)
    assert res.trace.total_bytes == 0 and res.trace.payloads == 0


# -- communication accounting ---------------------------------------------------------

def test_comm_counts():
    split = tiny_split(n_fed=4, n=400)
    h = hp(rounds_stage1=3, local_iters=1)
    meta = run(split, h, seed=0)
    avg = run(split, dataclasses.replace(h, mode="fedavg"), seed=0)
    p = payload_nbytes(meta.models[0])
    assert comm_cost(meta.trace)["payloads"] == 3 * 4 + 4
    assert comm_cost(meta.trace)["bytes"] == (3 * 4 + 4) * p
    assert comm_cost(avg.trace)["payloads"] == 24
    assert comm_cost(avg.trace)["bytes"] == 24 * p
    assert meta.trace.total_bytes < avg.trace.total_bytes


def test_byte_counters_monotone():
    res = run(tiny_split(n_fed=3), hp(), seed=0)
    last = {}
    for r in res.trace.records:
        assert r.bytes_sent >= last.get(r.federation, 0)
        last[r.federation] = r.bytes_sent


# -- ablations -------------------------------------------------------------------------

def test_no_stage2_is_prefix_of_metafed():
    split = tiny_split(n_fed=3)
    full = run(split, hp(), seed=0).trace.to_csv()
    part = run(split, hp(mode="no_stage2"), seed=0).trace.to_csv()
    assert full.startswith(part)
    assert "stage2" not in part


def test_finetune_forces_zero_lambda():
    res = run(tiny_split(n_fed=3), hp(mode="finetune_ablation"), seed=0)
    recs = res.trace.stage("stage1") + res.trace.stage("stage2")
    assert all(r.lam == 0 and r.branch == "copy" for r in recs)


def test_no_stage1_uses_best_local_model():
    split = tiny_split(n_fed=3)
    res = run(split, hp(mode="no_stage1"), seed=0)
    assert res.trace.stage("stage1") == []
    pre = {r.federation: r.model for r in res.trace.stage("pretrain")}
    assert checksum(res.common.params) == pre[res.common.owner]


@pytest.mark.parametrize("mode", ["metafed", "metafed_pp", "fedavg", "fedprox", "fedbn", "local",
                                  "finetune_ablation", "no_stage1", "no_stage2"])
def test_every_mode_is_deterministic(mode):
    split = tiny_split(n_fed=4)
    a = run(split, hp(mode=mode, group_count=2), seed=4)
    b = run(split, hp(mode=mode, group_count=2), seed=4)
    assert a.trace.to_csv() == b.trace.to_csv()
    assert all(0 <= t <= 1 for t in a.test_acc)


# -- MetaFed++ -------------------------------------------------------------------------

def test_pp_single_group_equals_metafed():
    split = tiny_split(n_fed=4)
    a = run(split, hp(), seed=0)
    b = run(split, hp(mode="metafed_pp", groups=((0, 1, 2, 3),)), seed=0)
    assert a.trace.to_csv() == b.trace.to_csv()


def test_pp_singleton_groups():
    split = tiny_split(n_fed=3)
    res = run(split, hp(mode="metafed_pp", groups=((0,), (1,), (2,))), seed=0)
    t = res.trace
    intra = [r for r in t.stage("stage1")]
    assert intra and all(r.branch == "local" and r.teacher is None for r in intra)
    inter = t.stage("stage1_inter")
    assert [r.federation for r in inter] == [0, 1, 2] * 2
    for prev, cur in zip(inter, inter[1:]):
        assert cur.teacher == prev.model
    assert t.payloads == 2 * 3


def test_pp_six_federations_three_groups():
    split = tiny_split(n_fed=6, n=600)
    feds = build_federations(split, seed=0)
    trace = RunTrace("metafed_pp")
    groups, commons = run_metafed_pp(feds, hp(mode="metafed_pp", group_count=3), trace, seed=0)
    assert len(groups) == 3 and sorted(i for g in groups for i in g) == list(range(6))
    assert all(0 <= evaluate(f.model, f.test) <= 1 for f in feds)
    sums = [checksum(c.params) for c in commons]
    assert len(set(sums)) == 3


def test_pp_rejects_bad_groups():
    split = tiny_split(n_fed=3)
    with pytest.raises(ConfigError):
        run(split, hp(mode="metafed_pp", groups=((0, 1), ())), seed=0)
    with pytest.raises(ConfigError):
        run(split, hp(mode="metafed_pp", groups=((0, 1),)), seed=0)


# -- misc ----------------------------------------------------------------------------------

def test_evaluate_examples():
    assert evaluate(constant_model(0), labelled([0, 0, 0])) == 1.0
    assert evaluate(constant_model(1), labelled([0, 1, 0, 1])) == 0.5
    with pytest.raises(ValueError):
        evaluate(constant_model(0), labelled([]))


def test_evaluate_matches_per_sample_recount():
    from metafed.data import gaussian_pool
    from metafed.nncore import forward, init_model

    ds = gaussian_pool(50, 3, 4, seed=3)
    m = init_model([4, 6, 6, 3], np.random.default_rng(3))
    correct = 0
    for i in range(len(ds)):
        correct += int(np.argmax(forward(m, ds.x[i:i + 1]).logits[0]) == ds.y[i])
    assert evaluate(m, ds) == correct / len(ds)


def test_orders():
    assert resolve_order(HyperParams(), 4) == [0, 1, 2, 3]
    r = resolve_order(HyperParams(order="random", order_seed=1), 5)
    assert sorted(r) == list(range(5))
    assert resolve_order(HyperParams(order=(2, 0, 1)), 3) == [2, 0, 1]
    with pytest.raises(ConfigError):
        resolve_order(HyperParams(order=(0, 0, 1)), 3)


def test_hyperparam_validation():
    with pytest.raises(ConfigError):
        HyperParams(mode="swarm")
    with pytest.raises(ConfigError):
        HyperParams(lr=0)
    with pytest.raises(ConfigError):
        HyperParams(order="sorted")


def test_csv_schema():
    text = run(tiny_split(n_fed=2), hp(), seed=0).trace.to_csv()
    assert text.splitlines()[0].split(",") == list(CSV_COLUMNS)
