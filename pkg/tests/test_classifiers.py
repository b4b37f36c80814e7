import pytest
import torch
import torch.nn as nn

from cdgc.attend import AttendBlockConfig
from cdgc.classifiers import (AttendTap, BackboneConfig, FeatureContext, ReLUTap, SEBlock,
                              build_backbone, export_feature_context, insert_attend_blocks,
                              parse_backbone, se_block)
from cdgc.context import ContextModelConfig, build_cdgc
from cdgc.trainer import he_init

SMALL_CTX = ContextModelConfig(widths=(4, 4, 4, 8, 8, 8))


def _x(n=2, seed=0):
    return torch.randn(n, 3, 32, 32, generator=torch.Generator().manual_seed(seed))


def _count(model, kind):
    return sum(isinstance(m, kind) for m in model.modules())


@pytest.mark.parametrize("name", ["vgg8", "vgg13", "vgg16", "resnet20", "resnet32", "wrn-16-2"])
def test_logits_shape(name):
    m = build_backbone(parse_backbone(name)).eval()
    assert m(_x()).shape == (2, 10)


def test_parse_names():
    assert parse_backbone("wrn-16-10") == BackboneConfig("wrn", 16, 10)
    assert parse_backbone("ResNet56").depth == 56
    assert parse_backbone("vgg13", n_classes=100).name == "vgg13"
    for bad in ["resnet21", "wrn-15-2", "vgg11", "alexnet"]:
        with pytest.raises(ValueError):
            parse_backbone(bad)


def test_wrn_16_10_layer_count():
    m = build_backbone(parse_backbone("wrn-16-10"))
    # 1 stem + 3 stages x 2 blocks x 2 convs + 3 projection shortcuts
    assert _count(m, nn.Conv2d) == 16
    assert m.fc.in_features == 640


def test_resnet_depth_counts():
    for depth in (20, 32, 56):
        m = build_backbone(parse_backbone(f"resnet{depth}"))
        n_blocks = sum(len(s) for s in m.stages)
        assert 2 * n_blocks + 2 == depth  # convs on the main path plus stem and fc


def test_resnet20_stage_resolutions():
    m = build_backbone(parse_backbone("resnet20")).eval()
    sizes = []
    hooks = [s[-1].register_forward_hook(lambda mod, i, o: sizes.append(tuple(o.shape[1:])))
             for s in m.stages]
    m(_x(1))
    for h in hooks:
        h.remove()
    assert sizes == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]
    assert (m.points["stage2"].channels, m.points["stage2"].size) == (32, 16)
    assert (m.points["stage3"].channels, m.points["stage3"].size) == (64, 8)


def test_vgg_insertion_points():
    m = build_backbone(parse_backbone("vgg13"))
    assert (m.points["stage2"].size, m.points["stage3"].size) == (16, 8)
    assert _count(m, nn.Dropout) == 0
    assert _count(m, nn.Linear) == 1


def test_taps_are_called_at_their_resolution():
    for name in ("resnet20", "vgg13", "wrn-16-2"):
        m = build_backbone(parse_backbone(name)).eval()
        seen = {}
        for point in ("stage2", "stage3"):
            m.tap_module(point).register_forward_hook(
                lambda mod, i, o, p=point: seen.__setitem__(p, tuple(o.shape[1:])))
        m(_x(1))
        for point, info in m.points.items():
            assert seen[point] == (info.channels, info.size, info.size)


def test_se_block_scales_channels():
    torch.manual_seed(0)
    se = SEBlock(32, 16)
    x = torch.randn(2, 32, 4, 4)
    s = se.scale(x)
    assert s.shape == (2, 32) and torch.all((s > 0) & (s < 1))
    assert torch.allclose(se_block(x, se), x * s[:, :, None, None])
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.zero_()
    assert torch.allclose(se(x), 0.5 * x)
    with pytest.raises(ValueError):
        SEBlock(20, 16)


def test_se_backbone_adds_one_block_per_residual_unit():
    plain = build_backbone(parse_backbone("resnet20"))
    se = build_backbone(parse_backbone("resnet20", se=True)).eval()
    assert _count(se, SEBlock) == 9 and _count(plain, SEBlock) == 0
    assert se(_x()).shape == (2, 10)
    with pytest.raises(ValueError):
        parse_backbone("vgg13", se=True)


def test_export_feature_context_shapes():
    m = build_backbone(parse_backbone("wrn-16-10"))
    m.train()
    t = export_feature_context(m, _x(2), "stage3")
    assert t.shape == (2, 640, 8, 8)
    assert not t.requires_grad and torch.all(t >= 0)
    assert m.training  # mode restored
    with pytest.raises(ValueError):
        export_feature_context(m, _x(1), "stage2")  # 16x16 is not a context size
    assert FeatureContext(m).encode(_x(1)).shape == (1, 640, 8, 8)


def _augmented(name="resnet20", seed=0, **kw):
    base = he_init(build_backbone(parse_backbone(name)), seed=seed).eval()
    ctx = build_cdgc(SMALL_CTX)
    aug = he_init(insert_attend_blocks(base, ctx, **kw), seed=seed).eval()
    return base, ctx, aug


def test_insertion_copies_backbone_and_freezes_context():
    base, ctx, aug = _augmented()
    assert isinstance(base.tap_module("stage3"), ReLUTap)
    assert isinstance(aug.backbone.tap_module("stage3"), AttendTap)
    assert aug.backbone is not base
    assert all(not p.requires_grad for p in aug.context.parameters())
    aug.train()
    assert aug.backbone.training and not aug.context.training
    # identical backbone weights for the same seed, attend blocks aside
    bstate = base.state_dict()
    for k, v in aug.backbone.state_dict().items():
        if k in bstate:
            assert torch.equal(v, bstate[k]), k


def test_frozen_context_gets_no_gradient():
    _, ctx, aug = _augmented()
    aug.train()
    before = {k: v.clone() for k, v in ctx.state_dict().items()}
    aug(_x(4)).sum().backward()
    assert all(p.grad is None for p in ctx.parameters())
    assert all(torch.equal(v, before[k]) for k, v in ctx.state_dict().items())
    assert aug.head.l1[0].weight.grad is not None


@pytest.mark.parametrize("name", ["resnet20", "vgg13", "wrn-16-2"])
def test_zero_branch_bitwise_equivalence(name):
    base, _, aug = _augmented(name)
    for block in aug.blocks.values():
        block.zero_branch = True
        with torch.no_grad():
            block.r1[-1].weight.zero_()
            block.r1[-1].bias.zero_()
    x = _x(100, seed=3)
    with torch.no_grad():
        assert torch.equal(aug(x), base(x))


def test_parameter_count_identity():
    base, ctx, aug = _augmented()
    n = lambda m: sum(p.numel() for p in m.parameters())
    trainable = sum(p.numel() for p in aug.trainable_parameters())
    assert trainable == n(base) + n(aug.head) + sum(n(b) for b in aug.blocks.values())
    assert n(aug) == trainable + n(ctx)


def test_insertion_rejects_unknown_point():
    base = build_backbone(parse_backbone("resnet20"))
    with pytest.raises(ValueError):
        insert_attend_blocks(base, build_cdgc(SMALL_CTX), ("stage1",))


def test_attend_tap_needs_context():
    _, _, aug = _augmented()
    with pytest.raises(RuntimeError):
        aug.backbone(_x(1))


@pytest.mark.parametrize("ca,rb", [(True, True), (False, True), (True, False)])
def test_augmented_variants_run(ca, rb):
    _, _, aug = _augmented(cfg=AttendBlockConfig(use_channel_attention=ca, use_rebias=rb),
                           points=("stage3",))
    assert aug(_x()).shape == (2, 10)
    assert list(aug.blocks) == ["stage3"]
