import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from cdgc.classifiers import build_backbone, parse_backbone
from cdgc.datapipe import AugmentationConfig, generate_toyset
from cdgc.trainer import (NonFiniteLossError, OptimizerConfig, ScheduleConfig, TrainReport,
                          evaluate, he_init, lr_at, topk_accuracy, train_classifier)


def test_he_init_variance():
    conv = nn.Conv2d(64, 64, 3, bias=True)
    he_init(conv, seed=0)
    w = conv.weight.detach()
    assert w.numel() >= 10_000
    assert abs(w.var().item() / (2 / 576) - 1) < 0.2
    assert torch.all(conv.bias == 0)


def test_he_init_bn_and_determinism():
    a = he_init(build_backbone(parse_backbone("resnet20")), seed=5)
    b = he_init(build_backbone(parse_backbone("resnet20")), seed=5)
    for mod in a.modules():
        if isinstance(mod, nn.BatchNorm2d):
            assert torch.all(mod.bias == 0) and torch.all(mod.weight == 1)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    c = he_init(build_backbone(parse_backbone("resnet20")), seed=6)
    assert not torch.equal(a.conv1.weight, c.conv1.weight)


def test_he_init_skips_frozen():
    lin = nn.Linear(4, 4)
    before = lin.weight.detach().clone()
    lin.requires_grad_(False)
    he_init(lin, seed=0)
    assert torch.equal(lin.weight, before)


def test_lr_schedule_values():
    s = ScheduleConfig()
    assert lr_at(s, 0) == 0.001 and lr_at(s, 1) == 0.001
    assert lr_at(s, 2) == 0.1
    assert lr_at(s, 61) == pytest.approx(0.02)
    assert lr_at(s, 165) == pytest.approx(0.0008)
    for bad in (-1, 200):
        with pytest.raises(ValueError):
            lr_at(s, bad)


def test_lr_schedule_monotone_after_warmup():
    s = ScheduleConfig()
    lrs = [lr_at(s, e) for e in range(s.warmup_epochs, s.total_epochs)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) == 4


@settings(max_examples=30, deadline=None)
@given(total=st.integers(10, 300))
def test_scaled_schedule_is_valid(total):
    s = ScheduleConfig.scaled(total)
    assert all(0 < m < total for m in s.milestones)
    assert lr_at(s, total - 1) <= lr_at(s, min(2, total - 1))


def test_scaled_schedule_40():
    assert ScheduleConfig.scaled(40).milestones == (12, 24, 32)


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(milestones=(60, 60))
    with pytest.raises(ValueError):
        ScheduleConfig(total_epochs=100, milestones=(60, 120))
    with pytest.raises(ValueError):
        ScheduleConfig(decay=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(batch_size=0)


def test_topk_hand_fixture():
    logits = torch.tensor([[0.1, 0.9, 0.0, 0.0, 0.0, 0.0],
                           [0.5, 0.2, 0.3, 0.0, 0.0, 0.0],
                           [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]])
    labels = torch.tensor([1, 2, 0])
    # ranks of the true class: 1, 2, 6
    top1, top5 = topk_accuracy(logits, labels)
    assert top1 == pytest.approx(1 / 3) and top5 == pytest.approx(2 / 3)


def test_topk_perfect_and_small_class_count():
    labels = torch.arange(10)
    assert topk_accuracy(F.one_hot(labels).float(), labels) == (1.0, 1.0)
    t1, t5 = topk_accuracy(torch.eye(4), torch.arange(4))
    assert t1 == 1.0 and t5 is None


def test_uniform_logits_give_chance():
    labels = torch.arange(1000) % 10
    top1, top5 = topk_accuracy(torch.zeros(1000, 10), labels)
    assert top1 == pytest.approx(0.1) and top5 == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), c=st.integers(5, 12))
def test_top1_le_top5(seed, n, c):
    g = torch.Generator().manual_seed(seed)
    t1, t5 = topk_accuracy(torch.randn(n, c, generator=g), torch.randint(0, c, (n,), generator=g))
    assert 0 <= t1 <= t5 <= 1


def test_evaluate_does_not_mutate_model():
    m = build_backbone(parse_backbone("resnet8", n_classes=4)).train()
    ds = generate_toyset(0, 4, 2, 40)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    top1, top5 = evaluate(m, ds)
    assert top5 is None and 0 <= top1 <= 1
    assert m.training
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k
    with pytest.raises(ValueError):
        evaluate(m, ds.subset([]))


def test_memorization_fixture():
    torch.manual_seed(0)
    ds = generate_toyset(0, 4, 4, 32)
    m = he_init(build_backbone(parse_backbone("resnet8", n_classes=4)), seed=0).train()
    opt = torch.optim.SGD(m.parameters(), lr=0.05, momentum=0.9, weight_decay=5e-4)
    for step in range(200):
        loss = F.cross_entropy(m(ds.images), ds.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss.item() < 0.01:
            break
    assert loss.item() < 0.01, f"loss {loss.item()} after {step + 1} steps"


def _tiny_run(seed, out_dir=None, epochs=3):
    full = generate_toyset(2, 4, 2, 160)
    tr, te = full.split(128)
    m = build_backbone(parse_backbone("resnet8", n_classes=4))
    sched = ScheduleConfig(total_epochs=epochs, milestones=(2,), warmup_epochs=1)
    return train_classifier(m, tr, te, OptimizerConfig(batch_size=32), sched, seed=seed,
                            out_dir=out_dir)


def test_train_replay_is_deterministic(tmp_path):
    a, sa = _tiny_run(0, tmp_path)
    b, sb = _tiny_run(0)
    assert a.epochs == b.epochs
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    c, _ = _tiny_run(1)
    assert c.epochs != a.epochs


def test_report_best_and_csv(tmp_path):
    report, _ = _tiny_run(0, tmp_path)
    assert report.best_top1 == max(r["top1"] for r in report.epochs)
    assert report.epochs[report.best_epoch]["top1"] == report.best_top1
    assert [r["lr"] for r in report.epochs] == [0.001, 0.1, 0.020000000000000004]
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,top1,top5"
    assert lines[-1].startswith(f"# best epoch={report.best_epoch} ")
    back = TrainReport.read_csv(tmp_path / "report.csv")
    assert [r["epoch"] for r in back.epochs] == [0, 1, 2]
    assert back.best_epoch == report.best_epoch
    for r, s in zip(back.epochs, report.epochs):
        assert r["lr"] == s["lr"] and r["top1"] == pytest.approx(s["top1"], abs=1e-6)


def test_non_finite_loss_aborts():
    ds = generate_toyset(0, 4, 2, 32)
    ds.images[3, 0, 0, 0] = float("nan")
    m = build_backbone(parse_backbone("resnet8", n_classes=4))
    with pytest.raises(NonFiniteLossError, match="epoch 0"):
        train_classifier(m, ds, ds, OptimizerConfig(batch_size=32),
                         ScheduleConfig(total_epochs=1, milestones=(), warmup_epochs=0),
                         augmentation=AugmentationConfig(enabled=False))
