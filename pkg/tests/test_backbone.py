import pytest
import torch

from smvcenet.backbone import (BackboneConfig, FeatureBundle, FrozenBackbone, assert_frozen,
                               extract_features)
from smvcenet.errors import ConfigError, ContractError, LoadError, ShapeError


def test_tiny_shapes_stride8():
    bb = FrozenBackbone(BackboneConfig())
    feats = extract_features(torch.rand(3, 64, 64), bb)
    assert isinstance(feats, FeatureBundle)
    assert feats.f_query.shape == (1, 256, 8, 8)
    assert feats.i_class.shape == (1, 64, 8, 8)
    assert feats.spatial_stride == 8


@pytest.mark.parametrize("align, grid", [("resize_up", 16), ("dilation", 16), ("resize_down", 8)])
def test_tiny_align_modes(align, grid):
    bb = FrozenBackbone(BackboneConfig(align=align))
    feats = bb(torch.rand(2, 3, 64, 64))
    assert feats.f_query.shape == (2, 256, grid, grid)
    assert feats.i_class.shape == (2, 64, grid, grid)
    assert feats.spatial_stride == 64 // grid


@pytest.mark.parametrize("hw", [(48, 48), (64, 96), (96, 128)])
def test_shape_law(hw):
    bb = FrozenBackbone(BackboneConfig(block4_out_channels=32))
    feats = bb(torch.rand(1, 3, *hw))
    assert feats.f_query.shape[-2:] == (hw[0] // 8, hw[1] // 8)
    assert feats.i_class.shape == (1, 32, hw[0] // 8, hw[1] // 8)


def test_adapter_disabled_tiny():
    bb = FrozenBackbone(BackboneConfig(adapter_enabled=False))
    assert isinstance(bb.adapter, torch.nn.Identity)
    assert bb(torch.rand(1, 3, 64, 64)).i_class.shape == (1, 64, 8, 8)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(variant="vgg")
    with pytest.raises(ConfigError):
        BackboneConfig(variant="pretrained_resnet50")
    with pytest.raises(ConfigError):
        BackboneConfig(block4_out_channels=63)
    with pytest.raises(ConfigError):
        BackboneConfig(align="sideways")


def test_too_small_input():
    with pytest.raises(ShapeError):
        FrozenBackbone(BackboneConfig())(torch.rand(1, 3, 4, 4))


def test_extraction_is_read_only_and_deterministic():
    bb = FrozenBackbone(BackboneConfig()).eval()
    before = bb.frozen_state()
    x = torch.zeros(1, 3, 64, 64)
    a, b = bb(x), bb(x)
    bb(torch.rand(1, 3, 64, 64))
    assert torch.equal(a.f_query, b.f_query) and torch.equal(a.i_class, b.i_class)
    assert assert_frozen(before, bb.frozen_state())


def test_frozen_blocks_have_no_grad_but_heads_do():
    bb = FrozenBackbone(BackboneConfig())
    assert not any(p.requires_grad for p in bb.frozen_parameters())
    assert all(p.requires_grad for p in bb.adapter.parameters())
    assert all(p.requires_grad for p in bb.query_conv.parameters())
    feats = bb(torch.rand(1, 3, 64, 64))
    (feats.f_query.sum() + feats.i_class.sum()).backward()
    assert all(p.grad is None for p in bb.frozen_parameters())
    assert bb.adapter[0].weight.grad is not None and bb.adapter[0].weight.grad.abs().sum() > 0


def test_assert_frozen_exact():
    bb = FrozenBackbone(BackboneConfig())
    state = bb.frozen_state()
    assert assert_frozen(state, state)
    perturbed = {k: v.clone() for k, v in state.items()}
    key = next(iter(perturbed))
    perturbed[key].view(-1)[0] += 1e-7
    assert not assert_frozen(state, perturbed)
    with pytest.raises(ContractError):
        assert_frozen(state, {k: v for k, v in list(state.items())[1:]})


def test_tiny_init_seed_controls_weights():
    a = FrozenBackbone(BackboneConfig(init_seed=0)).frozen_state()
    b = FrozenBackbone(BackboneConfig(init_seed=0)).frozen_state()
    c = FrozenBackbone(BackboneConfig(init_seed=1)).frozen_state()
    assert assert_frozen(a, b)
    assert not assert_frozen(a, c)


def test_tiny_weights_roundtrip(tmp_path):
    src = FrozenBackbone(BackboneConfig(init_seed=7))
    path = tmp_path / "tiny.pt"
    torch.save(src.frozen_state(), path)
    loaded = FrozenBackbone(BackboneConfig(weights_path=str(path)))
    assert assert_frozen(src.frozen_state(), loaded.frozen_state())


def test_weights_manifest_mismatch(tmp_path):
    state = FrozenBackbone(BackboneConfig(block4_out_channels=32)).frozen_state()
    path = tmp_path / "tiny32.pt"
    torch.save(state, path)
    with pytest.raises(LoadError, match="b4"):
        FrozenBackbone(BackboneConfig(weights_path=str(path)))


def test_corrupt_weights(tmp_path):
    path = tmp_path / "bad.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError):
        FrozenBackbone(BackboneConfig(weights_path=str(path)))
    with pytest.raises(LoadError):
        FrozenBackbone(BackboneConfig(weights_path=str(tmp_path / "missing.pt")))


@pytest.fixture(scope="module")
def resnet_weights(tmp_path_factory):
    from torchvision.models import resnet50

    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("rn50") / "resnet50.pth"
    torch.save(resnet50(weights=None).state_dict(), path)
    return path


def test_resnet50_variant(resnet_weights):
    cfg = BackboneConfig(variant="pretrained_resnet50", weights_path=str(resnet_weights),
                         block4_out_channels=2048)
    bb = FrozenBackbone(cfg)
    assert bb.adapter[0].in_channels == 512 + 1024 and bb.adapter[0].out_channels == 1024
    before = bb.frozen_state()
    bb.train()
    assert not bb.b1[1].training  # batch-norm of the frozen stem stays in eval mode
    with torch.no_grad():
        feats = bb(torch.rand(1, 3, 64, 64))
    assert feats.f_query.shape == (1, 256, 8, 8)
    assert feats.i_class.shape == (1, 2048, 8, 8)
    assert assert_frozen(before, bb.frozen_state())
    ref = torch.load(resnet_weights, weights_only=True)
    assert torch.equal(bb.b2[0].conv1.weight, ref["layer2.0.conv1.weight"])


def test_resnet50_rejects_wrong_file(tmp_path, resnet_weights):
    state = torch.load(resnet_weights, weights_only=True)
    state["layer4.0.conv1.weight"] = torch.zeros(3, 3, 1, 1)
    path = tmp_path / "bad.pth"
    torch.save(state, path)
    cfg = BackboneConfig(variant="pretrained_resnet50", weights_path=str(path),
                         block4_out_channels=2048)
    with pytest.raises(LoadError, match="b4.0.conv1.weight"):
        FrozenBackbone(cfg)
