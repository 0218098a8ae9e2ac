import pytest
import torch
import torch.nn.functional as F

from fastat_bench import modelzoo

RESNET18_CIFAR10_PARAMS = 11_173_962


def resnet18_param_oracle(num_classes, width=1.0):
    """Walk the 4-stage, 2-block basic-block layout and count weights by hand."""
    conv = lambda cin, cout, k: cin * cout * k * k  # noqa: E731  (no conv bias)
    bn = lambda c: 2 * c  # noqa: E731
    widths = [int(round(c * width)) for c in (64, 128, 256, 512)]
    total = conv(3, widths[0], 3) + bn(widths[0])
    cin = widths[0]
    for stage, cout in enumerate(widths):
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
            if stride != 1 or cin != cout:
                total += conv(cin, cout, 1) + bn(cout)
            cin = cout
    return total + cin * num_classes + num_classes


def test_param_count_oracle_matches_frozen_constant():
    assert resnet18_param_oracle(10) == RESNET18_CIFAR10_PARAMS
    model = modelzoo.build_model("resnet18", 10)
    assert modelzoo.count_parameters(model) == RESNET18_CIFAR10_PARAMS


@pytest.mark.parametrize(
    "arch,classes,size", [("resnet18", 10, 32), ("preactresnet18", 200, 64), ("tiny-cnn", 10, 32)]
)
def test_logit_shapes(arch, classes, size):
    model = modelzoo.build_model(arch, classes, width_multiplier=0.25 if arch != "tiny-cnn" else 0.5)
    model.eval()
    assert model(torch.rand(2, 3, size, size)).shape == (2, classes)


def test_unknown_arch():
    with pytest.raises(ValueError, match="unknown arch"):
        modelzoo.build_model("vit-b16", 10)


def test_nonpositive_width():
    with pytest.raises(ValueError):
        modelzoo.build_model("tiny-cnn", 10, width_multiplier=0)


def test_same_seed_same_init_and_different_seed_differs():
    a = modelzoo.clone_parameters(modelzoo.build_model("tiny-cnn", 10, 0.5, seed=3))
    b = modelzoo.clone_parameters(modelzoo.build_model("tiny-cnn", 10, 0.5, seed=3))
    c = modelzoo.clone_parameters(modelzoo.build_model("tiny-cnn", 10, 0.5, seed=4))
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_consume_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    modelzoo.build_model("tiny-cnn", 10, 0.5, seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_clone_is_isolated_and_idempotent():
    model = modelzoo.build_model("tiny-cnn", 10, 0.5)
    x = torch.rand(2, 3, 32, 32)
    before = model(x).detach()
    clone = modelzoo.clone_parameters(model)
    for t in clone.values():
        t.add_(1.0)
    assert torch.equal(model(x).detach(), before)
    again = modelzoo.clone_parameters(model)
    twice = {k: v.clone() for k, v in again.items()}
    assert all(torch.equal(again[k], twice[k]) for k in again)


def test_load_of_clone_is_bitwise():
    src = modelzoo.build_model("resnet18", 10, 0.25, seed=1).eval()
    dst = modelzoo.build_model("resnet18", 10, 0.25, seed=2).eval()
    x = torch.rand(2, 3, 32, 32)
    modelzoo.load_parameters(dst, modelzoo.clone_parameters(src))
    assert torch.equal(src(x), dst(x))


def test_checkpoint_round_trip(tmp_path):
    model = modelzoo.build_model("tiny-cnn", 4, 0.5, seed=0).eval()
    path = modelzoo.save_checkpoint(tmp_path / "m.ckpt", model, "abc", 7, weights="wa")
    ckpt = modelzoo.load_checkpoint(path)
    assert ckpt["config_hash"] == "abc" and ckpt["epoch"] == 7
    restored = modelzoo.restore_model(ckpt, "tiny-cnn", 4, 0.5).eval()
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(restored(x), model(x))


def test_checkpoint_arch_mismatch(tmp_path):
    model = modelzoo.build_model("tiny-cnn", 4, 0.5)
    ckpt = modelzoo.load_checkpoint(modelzoo.save_checkpoint(tmp_path / "m.ckpt", model, "h", 1))
    with pytest.raises(ValueError, match="mismatch"):
        modelzoo.restore_model(ckpt, "resnet18", 4, 0.5)


def test_normalization_is_inside_the_model():
    model = modelzoo.build_model("tiny-cnn", 10, 0.5, normalization=((0.5,) * 3, (0.25,) * 3))
    assert isinstance(model.norm, modelzoo.Normalize)
    assert not any(p is model.norm.mean for p in model.parameters())


def central_difference_check(model, x, y, coords, h=1e-6):
    x = x.clone().requires_grad_(True)
    F.cross_entropy(model(x), y).backward()
    analytic = x.grad.flatten()
    worst = 0.0
    flat = x.detach().flatten()
    with torch.no_grad():
        for i in coords:
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            fp = F.cross_entropy(model(plus.view_as(x)), y)
            fm = F.cross_entropy(model(minus.view_as(x)), y)
            numeric = ((fp - fm) / (2 * h)).item()
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-10))
    return worst


def test_input_gradient_matches_finite_differences():
    model = modelzoo.build_model("tiny-cnn", 10, 0.5, seed=0).double()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    y = torch.tensor([1, 7])
    coords = torch.randint(0, x.numel(), (10,), generator=g).tolist()
    assert central_difference_check(model, x, y, coords) < 1e-3
