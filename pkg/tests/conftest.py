import numpy as np
import pytest

from metafed.data import Dataset, FederatedSplit, FederationData, PartitionSpec, gaussian_pool, gen_label_shift
from metafed.losses import total_loss
from metafed.nncore import init_model, trainable_arrays


def small_model(seed, dims=(4, 5, 5, 3), split=1):
    return init_model(dims, np.random.default_rng(seed), split=split)


def randomize_norms(model, rng):
    """Give norm layers non-trivial running stats and affine params."""
    for nm in model.norms:
        if nm is not None:
            nm.mean[:] = rng.standard_normal(nm.mean.shape)
            nm.var[:] = rng.uniform(0.5, 2.0, nm.var.shape)
            nm.scale[:] = rng.uniform(0.5, 1.5, nm.scale.shape)
            nm.shift[:] = rng.standard_normal(nm.shift.shape) * 0.3
    return model


def finite_diff_grads(model, x, y, spec, teacher=None, reference=None, h=1e-5):
    """Central differences of the train-mode total loss, one trainable scalar at a time."""
    out = []
    for arr in trainable_arrays(model):
        g = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            up, _ = total_loss(x, y, model, spec, teacher, reference)
            arr.flat[i] = old - h
            down, _ = total_loss(x, y, model, spec, teacher, reference)
            arr.flat[i] = old
            g.flat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def normed_bias_positions(model):
    """Positions in ``trainable_arrays`` of linear biases feeding a train-mode norm layer.

    Batch-mean subtraction cancels these biases, so their exact gradient is
    zero and a relative error against finite differences is meaningless.
    """
    n = model.n_layers
    # trainable order: W_k, b_k, then scale_k, shift_k for normed layers
    pos, out = 0, []
    for k in range(n):
        if model.norms[k] is not None:
            out.append(pos + 1)
            pos += 4
        else:
            pos += 2
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def tiny_split(n_fed=3, n=300, k=3, d=4, seed=0, alpha=1.0):
    pool = gaussian_pool(n, k, d, seed, separation=3.0)
    return gen_label_shift(pool, PartitionSpec(n_fed, alpha, seed=seed))


@pytest.fixture
def split3():
    return tiny_split()


def constant_model(cls, k=2, d=2, hidden=(3, 3)):
    """A model whose logits are a one-hot bias, so it always predicts ``cls``."""
    m = init_model([d, *hidden, k], np.random.default_rng(0))
    for w in m.weights:
        w[:] = 0.0
    m.biases[-1][cls] = 1.0
    return m


def labelled(labels, k=2, d=2, seed=0):
    labels = np.asarray(labels)
    x = np.random.default_rng(seed).standard_normal((len(labels), d))
    return Dataset(x, labels, k)


def scenario(valid_labels, predicted):
    """Federations with fixed validation labels and constant-predictor models."""
    from metafed.protocol import Federation

    feds = []
    for i, (labels, cls) in enumerate(zip(valid_labels, predicted)):
        ds = labelled(labels, seed=i)
        feds.append(Federation(i, FederationData(ds, ds, ds), constant_model(cls), np.random.default_rng(i)))
    return feds


def assert_branch_soundness(trace, hp):
    from metafed.losses import lambda_schedule

    for r in trace.records:
        if r.stage in ("stage1", "stage1_inter") and r.gate_acc is not None:
            assert (r.branch == "copy") == (r.gate_acc <= hp.l_t1), r
            assert r.lam == hp.lambda0
        if r.stage == "stage2":
            zero = r.acc_common <= r.acc_local and r.acc_common < hp.l_t2
            assert (r.lam == 0) == zero or (hp.lambda0 == 0), r
            if not zero:
                assert r.lam == lambda_schedule(hp.lambda0, r.acc_common, r.acc_local)


def assert_teacher_causality(trace, common_checksum=None):
    """Each Stage-I teacher is the previous step's trained model; Stage II always uses the common model."""
    s1 = [r for r in trace.records if r.stage in ("pretrain", "stage1")]
    latest = {}
    for r in s1:
        if r.stage == "stage1" and r.teacher is not None:
            assert r.teacher in latest.values()
        latest[r.federation] = r.model
    ring = [r for r in trace.records if r.stage == "stage1" and r.teacher is not None]
    for prev, cur in zip(ring, ring[1:]):
        assert cur.teacher == prev.model
    s2 = [r for r in trace.records if r.stage == "stage2"]
    if s2:
        teachers = {r.teacher for r in s2}
        assert len(teachers) == 1
        if common_checksum is not None:
            assert teachers == {common_checksum}


# -- acceptance report -------------------------------------------------------------

CRITERIA: list[tuple[str, bool, str]] = []


def criterion(name, ok, detail=""):
    """Record a pass/fail line for the end-of-run report, then assert."""
    CRITERIA.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
