"""Federated training engines.

MetaFed runs serverless: federations sit on a ring and pass models to their
successor. Stage I (common knowledge accumulation) trains each federation
against its predecessor's freshly trained model for a number of cyclic
rounds; the last federation's model becomes the common model. Stage II
(personalization) forwards that common model, untouched, around the ring
once while each federation trains its own model against it with an
adaptive distillation weight.

The server-based baselines (FedAvg, FedProx, FedBN) and local-only training
live here too so that every method shares one training loop, one trace
format and one byte accounting.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, FederatedSplit, FederationData
from .errors import ConfigError, ProtocolError
from .losses import TAPS, LossSpec, lambda_schedule, loss_and_grad, teacher_features
from .nncore import Model, checksum, copy_model, forward, init_model, payload_nbytes, sgd_step, to_bytes

log = logging.getLogger(__name__)

MODES = (
    "metafed", "metafed_pp", "fedavg", "fedprox", "fedbn", "local",
    "finetune_ablation", "no_stage1", "no_stage2",
)
FEDAVG_FAMILY = ("fedavg", "fedprox", "fedbn")
SERVER = -1
CSV_COLUMNS = (
    "round", "federation", "stage", "branch", "lambda", "loss_cls", "loss_dist",
    "valid_acc", "test_acc", "bytes_sent",
)


@dataclass
class HyperParams:
    mode: str = "metafed"
    lambda0: float = 1.0
    l_t1: float = 0.6
    l_t2: float = 0.5
    rounds_stage1: int = 5
    local_iters: int = 50
    lr: float = 0.01
    batch_size: int = 32
    tap: str = "last_hidden_block"
    share_norm: bool = False
    # "index", "random" (seeded by order_seed) or an explicit permutation
    order: str | tuple[int, ...] = "index"
    order_seed: int = 0
    prox_mu: float = 0.01
    groups: tuple[tuple[int, ...], ...] | None = None
    group_count: int = 3
    early_stop: bool = False
    eval_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.tap not in TAPS:
            raise ConfigError(f"unknown tap {self.tap!r}")
        if not self.lambda0 >= 0:
            raise ConfigError("lambda0 must be >= 0")
        if self.rounds_stage1 < 1 or self.local_iters < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("rounds_stage1, batch_size, eval_every must be >= 1 and local_iters >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be >= 0")
        if isinstance(self.order, list):
            self.order = tuple(self.order)
        if isinstance(self.order, str) and self.order not in ("index", "random"):
            raise ConfigError(f"order must be 'index', 'random' or a permutation, got {self.order!r}")
        if self.groups is not None:
            self.groups = tuple(tuple(int(i) for i in g) for g in self.groups)


@dataclass
class Federation:
    id: int
    data: FederationData
    model: Model
    rng: np.random.Generator
    last_valid_acc: float = 0.0

    @property
    def train(self) -> Dataset:
        return self.data.train

    @property
    def valid(self) -> Dataset:
        return self.data.valid

    @property
    def test(self) -> Dataset:
        return self.data.test


@dataclass
class CommonModel:
    params: Model
    owner: int


@dataclass
class StepRecord:
    round: int
    federation: int
    stage: str
    branch: str
    lam: float
    loss_cls: float
    loss_dist: float
    valid_acc: float
    test_acc: float
    bytes_sent: int
    bytes_received: int
    # decision inputs: Stage-I gate accuracy, Stage-II common/local accuracies
    gate_acc: float | None = None
    acc_common: float | None = None
    acc_local: float | None = None
    teacher: str | None = None
    model: str | None = None


class RunTrace:
    """Audit log of one run plus cumulative communication counters."""

    def __init__(self, method: str):
        self.method = method
        self.records: list[StepRecord] = []
        self.sent = defaultdict(int)
        self.received = defaultdict(int)
        self.payloads = 0
        self.total_bytes = 0
        self.rounds = 0

    def transmit(self, src: int, dst: int, nbytes: int) -> None:
        self.sent[src] += nbytes
        self.received[dst] += nbytes
        self.payloads += 1
        self.total_bytes += nbytes

    def log(self, fed: int, **kw) -> StepRecord:
        rec = StepRecord(federation=fed, bytes_sent=self.sent[fed], bytes_received=self.received[fed], **kw)
        self.records.append(rec)
        return rec

    def stage(self, name: str) -> list[StepRecord]:
        return [r for r in self.records if r.stage == name]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.round, r.federation, r.stage, r.branch, repr(float(r.lam)), repr(float(r.loss_cls)),
                        repr(float(r.loss_dist)), repr(float(r.valid_acc)), repr(float(r.test_acc)), r.bytes_sent])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def decisions(self) -> list[dict]:
        keep = ("round", "federation", "stage", "branch", "lam", "gate_acc", "acc_common", "acc_local")
        return [{k: getattr(r, k) for k in keep} for r in self.records
                if r.gate_acc is not None or r.acc_common is not None]


def comm_cost(trace: RunTrace) -> dict:
    return {"method": trace.method, "payloads": trace.payloads, "bytes": trace.total_bytes, "rounds": trace.rounds}


@dataclass
class RunResult:
    mode: str
    models: list[Model]
    valid_acc: list[float]
    test_acc: list[float]
    trace: RunTrace
    common: CommonModel | None = None
    groups: tuple[tuple[int, ...], ...] | None = None

    @property
    def mean_test(self) -> float:
        return float(np.mean(self.test_acc))

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "per_federation_test_acc": [float(a) for a in self.test_acc],
            "average_test_acc": self.mean_test,
            "total_bytes": self.trace.total_bytes,
            "payloads": self.trace.payloads,
            "rounds": self.trace.rounds,
            "groups": None if self.groups is None else [list(g) for g in self.groups],
            "decisions": self.trace.decisions(),
        }


def evaluate(model: Model, ds: Dataset) -> float:
    """Fraction of argmax-correct predictions, eval mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(model, ds.x, train=False).logits
    return float(np.mean(np.argmax(logits, axis=1) == ds.y))


def _valid_acc(model: Model, fed: Federation) -> float:
    if len(fed.valid) == 0:
        raise ProtocolError(f"federation {fed.id} has an empty validation set")
    return evaluate(model, fed.valid)


class _Best:
    """Best-on-validation checkpoint tracker; ties keep the earlier checkpoint."""

    def __init__(self, fed: Federation):
        self.fed = fed
        self.acc = -1.0
        self.model = None

    def offer(self, model: Model) -> None:
        acc = _valid_acc(model, self.fed)
        if acc > self.acc:
            self.acc, self.model = acc, model.copy()


def _train(fed: Federation, hp: HyperParams, iters: int, lam: float = 0.0, teacher: Model | None = None,
           reference: Model | None = None, best: _Best | None = None) -> tuple[float, float]:
    """Minibatch SGD on ``fed.model``; returns mean (cls, dist) over the iterations."""
    spec = LossSpec(lam=lam, tap=hp.tap, prox_mu=hp.prox_mu if reference is not None else 0.0)
    n = len(fed.train)
    bs = min(hp.batch_size, n)
    cls_sum = dist_sum = 0.0
    for it in range(iters):
        idx = fed.rng.choice(n, size=bs, replace=False)
        x, y = fed.train.x[idx], fed.train.y[idx]
        tf = teacher_features(teacher, x, hp.tap) if lam > 0 else None
        _, parts, grads = loss_and_grad(fed.model, x, y, spec, tf, reference)
        sgd_step(fed.model, grads, hp.lr)
        cls_sum += parts["cls"]
        dist_sum += parts["dist"]
        if best is not None and ((it + 1) % hp.eval_every == 0 or it + 1 == iters):
            best.offer(fed.model)
    if iters == 0:
        return 0.0, 0.0
    return cls_sum / iters, dist_sum / iters


def _log_step(trace, fed, rnd, stage, branch, lam, losses, teacher=None, **extra):
    va = _valid_acc(fed.model, fed)
    fed.last_valid_acc = va
    return trace.log(
        fed.id, round=rnd, stage=stage, branch=branch, lam=float(lam), loss_cls=losses[0], loss_dist=losses[1],
        valid_acc=va, test_acc=evaluate(fed.model, fed.test),
        teacher=None if teacher is None else checksum(teacher), model=checksum(fed.model), **extra,
    )


def resolve_order(hp: HyperParams, n: int) -> list[int]:
    if hp.order == "index":
        return list(range(n))
    if hp.order == "random":
        return [int(i) for i in np.random.default_rng(hp.order_seed).permutation(n)]
    order = [int(i) for i in hp.order]
    if sorted(order) != list(range(n)):
        raise ConfigError(f"explicit order {order} is not a permutation of 0..{n - 1}")
    return order


def build_federations(split: FederatedSplit, seed: int, hidden=(64, 64), split_index: int = 1) -> list[Federation]:
    """One federation per split entry, all starting from the same seeded model."""
    first = split[0].train
    dims = [first.dim, *hidden, first.num_classes]
    base = init_model(dims, np.random.default_rng([seed, 0]), split=split_index)
    return [Federation(i, fd, base.copy(), np.random.default_rng([seed, 1, i])) for i, fd in enumerate(split)]


# -- MetaFed ------------------------------------------------------------------

def pretrain(feds: list[Federation], hp: HyperParams, trace: RunTrace, order=None) -> None:
    """Local-only warm-up with cross-entropy, before any exchange."""
    for i in order if order is not None else range(len(feds)):
        fed = feds[i]
        losses = _train(fed, hp, hp.local_iters)
        _log_step(trace, fed, 0, "pretrain", "local", 0.0, losses)


def stage1_branch(hp: HyperParams, gate_acc: float) -> tuple[str, float]:
    """Distill from the predecessor when the local model clears ``l_t1`` on
    validation, otherwise start over from the predecessor's parameters.
    Both branches then train with ``lambda0``."""
    if hp.mode == "finetune_ablation":
        return "copy", 0.0
    if gate_acc > hp.l_t1:
        return "distill", hp.lambda0
    return "copy", hp.lambda0


def stage2_branch(hp: HyperParams, acc_common: float, acc_local: float) -> tuple[str, float]:
    if hp.mode == "finetune_ablation":
        return "copy", 0.0
    if acc_common <= acc_local and acc_common < hp.l_t2:
        return "local", 0.0
    return "distill", lambda_schedule(hp.lambda0, acc_common, acc_local)


def _stage1_step(dst: Federation, teacher: Model, src_id: int, hp: HyperParams, trace: RunTrace,
                 rnd: int, stage: str = "stage1") -> StepRecord:
    trace.transmit(src_id, dst.id, payload_nbytes(teacher))
    gate = _valid_acc(dst.model, dst)
    branch, lam = stage1_branch(hp, gate)
    if branch == "copy":
        dst.model = copy_model(teacher, dst.model, preserve_local_norm=not hp.share_norm)
    losses = _train(dst, hp, hp.local_iters, lam, teacher)
    return _log_step(trace, dst, rnd, stage, branch, lam, losses, teacher=teacher, gate_acc=gate)


def stage1_round(feds: list[Federation], hp: HyperParams, trace: RunTrace, rnd: int = 1,
                 order: list[int] | None = None) -> list[Federation]:
    """One cyclic pass: each federation trains against its ring predecessor's current model.

    The first federation in ``order`` receives from the last one, so after
    the pass the last federation holds the most recently trained model.
    """
    order = resolve_order(hp, len(feds)) if order is None else list(order)
    if len(order) == 1:
        fed = feds[order[0]]
        losses = _train(fed, hp, hp.local_iters)
        _log_step(trace, fed, rnd, "stage1", "local", 0.0, losses)
        return feds
    for p, i in enumerate(order):
        src = feds[order[p - 1]]
        _stage1_step(feds[i], src.model, src.id, hp, trace, rnd)
    return feds


def run_stage1(feds: list[Federation], hp: HyperParams, trace: RunTrace, order: list[int] | None = None,
               *, warm_up: bool = True, first_round: int = 1) -> CommonModel:
    """Optional local warm-up, then ``rounds_stage1`` cyclic rounds (fewer with early stopping)."""
    order = resolve_order(hp, len(feds)) if order is None else list(order)
    if warm_up:
        pretrain(feds, hp, trace, order)
    prev = None
    stalls = 0
    for r in range(hp.rounds_stage1):
        rnd = first_round + r
        stage1_round(feds, hp, trace, rnd, order)
        trace.rounds = max(trace.rounds, rnd)
        mean_acc = float(np.mean([feds[i].last_valid_acc for i in order]))
        if prev is not None and mean_acc - prev < 1e-3:
            stalls += 1
        else:
            stalls = 0
        prev = mean_acc
        if hp.early_stop and stalls >= 2:
            log.info("stage I stopped early after round %d", rnd)
            break
    last = feds[order[-1]]
    return CommonModel(last.model.copy(), last.id)


def run_stage2(feds: list[Federation], common: CommonModel, hp: HyperParams, trace: RunTrace,
               order: list[int] | None = None, rnd: int | None = None) -> list[Model]:
    """Single personalization pass with the frozen common model as teacher.

    Each federation keeps the checkpoint with the best validation accuracy
    seen during its training.
    """
    order = resolve_order(hp, len(feds)) if order is None else list(order)
    rnd = trace.rounds + 1 if rnd is None else rnd
    frozen = to_bytes(common.params)
    nbytes = payload_nbytes(common.params)
    holder = common.owner
    for i in order:
        fed = feds[i]
        if holder != fed.id:
            trace.transmit(holder, fed.id, nbytes)
        holder = fed.id
        acc_common = _valid_acc(common.params, fed)
        acc_local = _valid_acc(fed.model, fed)
        branch, lam = stage2_branch(hp, acc_common, acc_local)
        if branch == "copy":
            fed.model = copy_model(common.params, fed.model, preserve_local_norm=not hp.share_norm)
        best = _Best(fed)
        best.offer(fed.model)
        losses = _train(fed, hp, hp.local_iters, lam, common.params, best=best)
        fed.model = best.model
        _log_step(trace, fed, rnd, "stage2", branch, lam, losses, teacher=common.params,
                  acc_common=acc_common, acc_local=acc_local)
    trace.rounds = max(trace.rounds, rnd)
    if to_bytes(common.params) != frozen:
        raise ProtocolError("common model was modified during personalization")
    return [f.model for f in feds]


def _best_local_as_common(feds: list[Federation]) -> CommonModel:
    scores = [np.mean([_valid_acc(f.model, g) for g in feds]) for f in feds]
    k = int(np.argmax(scores))
    return CommonModel(feds[k].model.copy(), feds[k].id)


# -- MetaFed++ ----------------------------------------------------------------

def group_federations(feds: list[Federation], k: int, seed: int = 0) -> tuple[tuple[int, ...], ...]:
    """k-means over per-federation (mean, variance) of training inputs."""
    from sklearn.cluster import KMeans

    if not 1 <= k <= len(feds):
        raise ConfigError(f"group count {k} must be in [1, {len(feds)}]")
    stats = np.array([np.concatenate([f.train.x.mean(axis=0), f.train.x.var(axis=0)]) for f in feds])
    labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(stats)
    seen = []
    for lab in labels:
        if lab not in seen:
            seen.append(lab)
    return tuple(tuple(int(i) for i in np.flatnonzero(labels == lab)) for lab in seen)


def _check_groups(groups, n):
    if not groups or any(len(g) < 1 for g in groups):
        raise ConfigError("every group needs at least one federation")
    flat = sorted(i for g in groups for i in g)
    if flat != list(range(n)):
        raise ConfigError(f"groups {groups} must partition federations 0..{n - 1}")


def run_metafed_pp(feds: list[Federation], hp: HyperParams, trace: RunTrace, seed: int = 0):
    """Stage I inside every group, a cyclic Stage I pass across groups, then Stage II per group.

    In the cross-group pass each group is represented by its last member,
    which trains against the previous group's common model; its result
    becomes its group's new common model.
    """
    groups = hp.groups if hp.groups is not None else group_federations(feds, hp.group_count, seed)
    _check_groups(groups, len(feds))
    pretrain(feds, hp, trace, [i for g in groups for i in g])
    commons = [run_stage1(feds, hp, trace, list(g), warm_up=False) for g in groups]
    last_round = trace.rounds
    if len(groups) >= 2:
        for r in range(hp.rounds_stage1):
            rnd = last_round + 1 + r
            for p, g in enumerate(groups):
                prev = commons[p - 1]
                member = feds[g[-1]]
                _stage1_step(member, prev.params, prev.owner, hp, trace, rnd, stage="stage1_inter")
                commons[p] = CommonModel(member.model.copy(), member.id)
            trace.rounds = rnd
    rnd = trace.rounds + 1
    for g, c in zip(groups, commons):
        run_stage2(feds, c, hp, trace, list(g), rnd=rnd)
    return groups, commons


# -- server-based baselines ---------------------------------------------------

def aggregate(models: list[Model], weights, include_norm: bool = True) -> Model:
    """Sample-weighted parameter average, reduced in list order."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = models[0].copy()
    for k in range(out.n_layers):
        out.weights[k] = sum(wi * m.weights[k] for wi, m in zip(w, models))
        out.biases[k] = sum(wi * m.biases[k] for wi, m in zip(w, models))
        if include_norm and out.norms[k] is not None:
            for name in ("mean", "var", "scale", "shift"):
                setattr(out.norms[k], name, sum(wi * getattr(m.norms[k], name) for wi, m in zip(w, models)))
    return out


def run_fedavg(feds: list[Federation], hp: HyperParams, trace: RunTrace, variant: str = "fedavg") -> list[Model]:
    """FedAvg / FedProx / FedBN with a simulated server for ``rounds_stage1`` rounds.

    Each federation reports the round whose model scored best on its
    validation set. FedBN keeps norm layers local and leaves them out of
    both averaging and payloads.
    """
    if variant not in FEDAVG_FAMILY:
        raise ConfigError(f"unknown FedAvg variant {variant!r}")
    local_bn = variant == "fedbn"
    global_model = feds[0].model.copy()
    nbytes = payload_nbytes(global_model, include_norm=not local_bn)
    sizes = [len(f.train) for f in feds]
    bests = [_Best(f) for f in feds]
    for rnd in range(1, hp.rounds_stage1 + 1):
        losses = []
        for fed in feds:
            trace.transmit(SERVER, fed.id, nbytes)
            fed.model = copy_model(global_model, fed.model, preserve_local_norm=local_bn)
            ref = global_model if variant == "fedprox" else None
            losses.append(_train(fed, hp, hp.local_iters, reference=ref))
            trace.transmit(fed.id, SERVER, nbytes)
        global_model = aggregate([f.model for f in feds], sizes, include_norm=not local_bn)
        for fed, ls, best in zip(feds, losses, bests):
            fed.model = copy_model(global_model, fed.model, preserve_local_norm=local_bn)
            best.offer(fed.model)
            _log_step(trace, fed, rnd, variant, "aggregate", 0.0, ls)
        trace.rounds = rnd
    for fed, best in zip(feds, bests):
        fed.model = best.model
    return [f.model for f in feds]


def run_local(feds: list[Federation], hp: HyperParams, trace: RunTrace) -> list[Model]:
    """Cross-entropy only, with the same per-federation step budget as MetaFed
    (warm-up + ``rounds_stage1`` + personalization)."""
    for fed in feds:
        best = _Best(fed)
        for seg in range(hp.rounds_stage1 + 2):
            losses = _train(fed, hp, hp.local_iters, best=best)
            _log_step(trace, fed, seg, "local", "local", 0.0, losses)
        fed.model = best.model
    trace.rounds = hp.rounds_stage1 + 2
    return [f.model for f in feds]


# -- entry point --------------------------------------------------------------

def run(split: FederatedSplit, hp: HyperParams, seed: int = 0, hidden=(64, 64)) -> RunResult:
    """Train every federation in ``split`` with ``hp.mode`` and report personalized accuracies."""
    feds = build_federations(split, seed, hidden)
    trace = RunTrace(hp.mode)
    common = None
    groups = None
    mode = hp.mode
    if mode in ("metafed", "finetune_ablation", "no_stage2"):
        common = run_stage1(feds, hp, trace)
        if mode != "no_stage2":
            run_stage2(feds, common, hp, trace)
    elif mode == "no_stage1":
        pretrain(feds, hp, trace, resolve_order(hp, len(feds)))
        common = _best_local_as_common(feds)
        run_stage2(feds, common, hp, trace, rnd=1)
    elif mode == "metafed_pp":
        groups, _ = run_metafed_pp(feds, hp, trace, seed)
    elif mode in FEDAVG_FAMILY:
        run_fedavg(feds, hp, trace, mode)
    elif mode == "local":
        run_local(feds, hp, trace)
    return RunResult(
        mode,
        [f.model for f in feds],
        [evaluate(f.model, f.valid) for f in feds],
        [evaluate(f.model, f.test) for f in feds],
        trace,
        common,
        groups,
    )


def hyperparams_dict(hp: HyperParams) -> dict:
    d = asdict(hp)
    if isinstance(d["order"], tuple):
        d["order"] = list(d["order"])
    if d["groups"] is not None:
        d["groups"] = [list(g) for g in d["groups"]]
    return d


def summary_json(result: RunResult, **meta) -> str:
    return json.dumps({**meta, **result.summary()}, indent=2, sort_keys=True)
