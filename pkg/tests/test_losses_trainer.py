import hashlib

import numpy as np
import pytest

from dualnet import trainer
from dualnet.backbone import ArchConfig
from dualnet.fastnet import ClassifierHeads, ProtocolError
from dualnet.memory import MemoryEntry, update_soft_label
from dualnet.stream import StreamBatch, build_split_benchmark, synthetic_dataset
from dualnet.tensor import Tensor, float64_mode, no_grad
from dualnet.trainer import (
    DualNetLearner,
    ERLearner,
    LossStats,
    TrainConfig,
    supervised_loss,
    train_er_baseline,
    train_stream,
)
from oracles import replay_loss_scalar

SMALL = ArchConfig(resolution=16, widths=(8, 16), strides=(2, 2), proj_hidden=16, proj_dim=8)


@pytest.fixture(scope="module")
def bench():
    return build_split_benchmark(synthetic_dataset(4, 20, 16, seed=0), 2, 2, seed=0)


def config(**kw):
    base = dict(arch=SMALL, memory_slots=6, n_ssl_iters=1, lookahead_k=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------- replay loss
class LinearStub:
    """Features are the flattened image; heads are a real multi-head classifier."""

    def __init__(self, dim, rng):
        self.heads = ClassifierHeads(dim, "multi", rng)

    def features(self, x):
        return x.reshape(x.shape[0], -1)


def toy(seed=0, n_cur=3, n_mem=4):
    rng = np.random.default_rng(seed)
    with float64_mode():
        model = LinearStub(3, rng)
        model.heads.register_task(0, [5, 9])
    cur = rng.normal(size=(n_cur, 3, 1, 1))
    cur_y = rng.choice([5, 9], size=n_cur)
    mem = []
    for i in range(n_mem):
        e = MemoryEntry(image=rng.normal(size=(3, 1, 1)), hard_label=int(rng.choice([5, 9])), task_id=0)
        update_soft_label(e, rng.normal(size=2), 2.0)
        e.soft_label = e.soft_label.astype(np.float64)
        mem.append(e)
    return model, cur, cur_y, mem


def logits_of(model, x):
    with float64_mode(), no_grad():
        return model.heads(model.features(Tensor(x)), 0).data


def test_replay_loss_matches_scalar_oracle():
    for seed in range(5):
        model, cur, cur_y, mem = toy(seed)
        with float64_mode():
            got = supervised_loss(model, cur, cur_y, 0, mem, 2.0, 2.0).item()
        col = {5: 0, 9: 1}
        expected = replay_loss_scalar(
            logits_of(model, cur).tolist(), [col[y] for y in cur_y],
            logits_of(model, np.stack([e.image for e in mem])).tolist(), [col[e.hard_label] for e in mem],
            [e.soft_label.tolist() for e in mem], 2.0, 2.0,
        )
        assert got == pytest.approx(expected, abs=1e-6)


def test_replay_loss_reductions():
    model, cur, cur_y, mem = toy(3)
    with float64_mode():
        only_cur = supervised_loss(model, cur, cur_y, 0, [], 2.0, 2.0).item()
        er = supervised_loss(model, cur, cur_y, 0, mem, 0.0, 2.0).item()
    col = [{5: 0, 9: 1}[y] for y in cur_y]
    assert only_cur == pytest.approx(replay_loss_scalar(logits_of(model, cur).tolist(), col, [], [], [], 0, 2), abs=1e-9)
    mem_l = logits_of(model, np.stack([e.image for e in mem])).tolist()
    mem_y = [{5: 0, 9: 1}[e.hard_label] for e in mem]
    assert er == pytest.approx(
        replay_loss_scalar(logits_of(model, cur).tolist(), col, mem_l, mem_y, [[1.0, 0.0]] * 4, 0.0, 2.0), abs=1e-9
    )


def test_missing_soft_label_contributes_ce_only():
    model, cur, cur_y, mem = toy(4)
    stats = LossStats()
    mem[0].soft_label = None
    with float64_mode():
        partial = supervised_loss(model, cur, cur_y, 0, mem, 2.0, 2.0, stats=stats).item()
        no_kl = supervised_loss(model, cur, cur_y, 0, mem, 0.0, 2.0).item()
    assert stats.missing_soft == 1 and partial > no_kl


def test_single_head_soft_label_from_fewer_classes():
    rng = np.random.default_rng(0)
    with float64_mode():
        model = LinearStub(3, rng)
        model.heads = ClassifierHeads(3, "single", rng)
        model.heads.observe_classes([0, 1, 2])
    e = MemoryEntry(image=rng.normal(size=(3, 1, 1)), hard_label=1, task_id=None)
    e.soft_label = np.array([0.3, 0.7])
    with float64_mode():
        loss = supervised_loss(model, rng.normal(size=(1, 3, 1, 1)), [0], None, [e], 1.0, 2.0)
    assert np.isfinite(loss.item())


# ------------------------------------------------------------- training
def test_reduction_to_er_parameter_trajectory(bench):
    cfg = config(n_ssl_iters=0, lambda_tr=0.0, modulate=False)
    traj = {"dual": [], "er": []}

    def recorder(key, get):
        return lambda learner, batch: traj[key].append(get(learner.model).snapshot())

    train_stream(bench, cfg, 3, on_batch=recorder("dual", lambda m: m.slow.backbone_params().merge(m.heads.params)))
    train_er_baseline(bench, cfg, 3, on_batch=recorder("er", lambda m: m.backbone.backbone_params().merge(m.heads.params)))
    assert len(traj["dual"]) == len(traj["er"]) > 0
    worst = max(
        float(np.max(np.abs(a[k] - b[k]))) for a, b in zip(traj["dual"], traj["er"]) for k in a
    )
    assert worst <= 1e-6


def test_run_log_is_deterministic(bench):
    a = train_stream(bench, config(), 5).log_text()
    b = train_stream(bench, config(), 5).log_text()
    assert a == b
    assert a != train_stream(bench, config(), 6).log_text()
    c = train_er_baseline(bench, config(lambda_tr=0.0), 5).log_text()
    assert c == train_er_baseline(bench, config(lambda_tr=0.0), 5).log_text()


def test_log_schema(bench):
    res = train_stream(bench, config(), 0)
    batch = res.log[0]
    assert set(batch) == {"event", "task", "step", "loss_tr", "loss_ssl", "wall_ms"}
    assert batch["wall_ms"] is None
    assert [r["event"] for r in res.log].count("eval") == 2 and res.log[-1]["event"] == "metrics"


def test_phase_isolation(bench):
    learner = DualNetLearner(config(check_isolation=True), 0)
    batch = next(iter(trainer.TaskStream(bench, 10, "ta", 1.0, np.random.default_rng(0))))
    learner._check_protocol(batch)
    learner._register(batch)
    learner._write_memory(batch, with_soft=True)
    slow = learner.model.slow.params.fingerprint()
    fast = learner.model.fast.params.fingerprint()
    heads = learner.model.heads.params.fingerprint()
    learner.ssl_phase(batch.unlabeled_images)
    assert learner.model.slow.params.fingerprint() != slow
    assert (learner.model.fast.params.fingerprint(), learner.model.heads.params.fingerprint()) == (fast, heads)
    slow = learner.model.slow.backbone_params().fingerprint()
    learner._supervised(batch)
    assert learner.model.slow.backbone_params().fingerprint() != slow
    assert learner.model.fast.params.fingerprint() != fast and learner.model.heads.params.fingerprint() != heads


def test_n_does_not_change_supervised_sequence(bench, monkeypatch):
    real = trainer.supervised_loss

    def run(n):
        seen = []

        def spy(model, images, labels, task, mem_batch, *args, **kwargs):
            h = hashlib.sha256(np.ascontiguousarray(images).tobytes())
            for e in mem_batch:
                h.update(e.image.tobytes())
            seen.append((h.hexdigest(), tuple(int(y) for y in labels), tuple(e.hard_label for e in mem_batch)))
            return real(model, images, labels, task, mem_batch, *args, **kwargs)

        monkeypatch.setattr(trainer, "supervised_loss", spy)
        train_stream(bench, config(n_ssl_iters=n), 2)
        return seen

    assert run(0) == run(2)


def test_single_task_stream_metrics():
    b = build_split_benchmark(synthetic_dataset(2, 20, 16, seed=1), 2, 1, seed=0)
    m = train_stream(b, config(), 0).metrics
    assert m["FM"] == 0.0 and m["ACC"] == m["LA"] and m["FM_status"] != "ok"


def test_task_free_run_and_leak_detection(bench):
    cfg = config(protocol="tf", memory_policy="reservoir", memory_slots=3)
    res = train_stream(bench, cfg, 0)
    assert 0.0 <= res.metrics["ACC"] <= 1.0
    learner = DualNetLearner(config(protocol="tf", memory_policy="reservoir"), 0)
    x = np.zeros((2, 3, 16, 16), dtype=np.float32)
    leaky = StreamBatch(x, np.array([0, 1]), np.array([True, True]), task=0, end_of_task=False)
    with pytest.raises(ProtocolError):
        learner.observe(leaky)
    ta = ERLearner(config(), 0)
    with pytest.raises(ProtocolError):
        ta.observe(StreamBatch(x, np.array([0, 1]), np.array([True, True]), task=None, end_of_task=False))


def test_semi_supervised_unlabeled_rows_reach_ssl_only(bench):
    cfg = config(rho=0.5)
    res = train_stream(bench, cfg, 0)
    mem = res.learner.memory
    assert all(e.hard_label >= 0 for e in mem.entries())
    assert any(r.get("loss_ssl") is not None for r in res.log if r["event"] == "batch")


def test_config_validation():
    for bad in (dict(protocol="x"), dict(tau=0.0), dict(lambda_tr=-1.0), dict(objective="moco"), dict(soft_loss="x")):
        with pytest.raises(ValueError):
            config(**bad).validate()


@pytest.mark.parametrize("objective", ["simclr", "classification"])
def test_alternative_objectives_run(bench, objective):
    res = train_stream(bench, config(objective=objective), 0)
    assert np.isfinite(res.metrics["ACC"])
