import pytest
import torch

from ccgan.core import ExperimentConfig
from ccgan.networks import (
    CheckpointError,
    Discriminator,
    Generator,
    build_bundle,
    build_classifier,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
    with_condition,
)

SMALL = ExperimentConfig(patch_size=32, num_classes=3, generator_filters=8, discriminator_filters=8, residual_blocks=2)


def test_generator_shape_and_range_at_full_size():
    g = build_generator(ExperimentConfig()).eval()
    x = with_condition(torch.rand(1, 3, 256, 256) * 2 - 1, torch.tensor([5]), 8)
    assert x.shape == (1, 11, 256, 256)
    with torch.no_grad():
        out = g(x)
    assert out.shape == (1, 3, 256, 256)
    assert float(out.abs().max()) <= 1.0


def test_generator_is_fully_convolutional():
    g = build_generator(ExperimentConfig(patch_size=64)).eval()
    with torch.no_grad():
        assert g(torch.zeros(2, 11, 64, 64)).shape == (2, 3, 64, 64)
        assert g(torch.zeros(1, 11, 48, 80)).shape == (1, 3, 48, 80)


def test_generator_input_contracts():
    g = Generator(num_classes=3, filters=4, n_blocks=1)
    with pytest.raises(ValueError, match="channels"):
        g(torch.zeros(1, 3, 16, 16))
    with pytest.raises(ValueError, match="divisible by 4"):
        g(torch.zeros(1, 6, 18, 16))
    assert Generator(num_classes=3, conditioned=False, filters=4, n_blocks=1).in_channels == 3


def test_generator_range_with_extreme_weights():
    g = Generator(num_classes=3, filters=4, n_blocks=1)
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(1000.0)
        out = g(torch.randn(2, 6, 16, 16) * 100)
    assert float(out.abs().max()) <= 1.0


def test_same_seed_same_network():
    x = with_condition(torch.rand(1, 3, 32, 32), torch.tensor([1]), 3)
    a, b = build_bundle(SMALL, seed=4), build_bundle(SMALL, seed=4)
    with torch.no_grad():
        assert torch.equal(a.g_enc(x), b.g_enc(x))
    assert a.fingerprint() == b.fingerprint()
    assert build_bundle(SMALL, seed=5).fingerprint() != a.fingerprint()


def test_discriminator_patch_map_30x30():
    d = build_discriminator(ExperimentConfig()).eval()
    with torch.no_grad():
        out = d(torch.zeros(1, 11, 256, 256))
    assert out.shape == (1, 1, 30, 30)


def test_discriminator_contracts():
    d = Discriminator(num_classes=8, filters=8)
    with pytest.raises(ValueError, match="channels"):
        d(torch.zeros(1, 3 + 7, 64, 64))
    vanilla = Discriminator(num_classes=3, filters=8, sigmoid=True)
    with torch.no_grad():
        s = vanilla(torch.randn(2, 6, 64, 64) * 5)
    assert float(s.min()) > 0 and float(s.max()) < 1
    ls = build_discriminator(ExperimentConfig(num_classes=3))
    assert not any(isinstance(m, torch.nn.Sigmoid) for m in ls.modules())


def test_discriminator_has_five_conv_layers():
    d = build_discriminator(ExperimentConfig())
    convs = [m for m in d.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512, 1]


def test_classifier_outputs_logits():
    c = build_classifier(ExperimentConfig()).eval()
    convs = [m for m in c.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 8
    with torch.no_grad():
        assert c(torch.zeros(1, 3, 256, 256)).shape == (1, 8)
        logits = c(torch.rand(3, 3, 64, 64))
    assert logits.shape == (3, 8)
    assert torch.allclose(torch.softmax(logits, dim=1).sum(dim=1), torch.ones(3), atol=1e-6)
    with pytest.raises(ValueError):
        c(torch.zeros(1, 11, 64, 64))


def test_parameter_counts_regression():
    assert build_bundle(ExperimentConfig(), seed=0).parameter_counts() == {
        "g_enc": 2910339,
        "g_dec": 2910339,
        "d_enc": 2772929,
        "d_dec": 2772929,
        "s_enc": 9840072,
        "s_dec": 9840072,
    }
    assert build_bundle(ExperimentConfig(num_classes=3, condition_generators=False), seed=0).parameter_counts()["g_enc"] == 2855811


def test_unconditioned_generator_ignores_class():
    b = build_bundle(SMALL.replace(condition_generators=False), seed=1)
    assert not b.generator_conditioned
    assert b.g_enc.in_channels == 3 and b.d_enc.in_channels == 6


def test_checkpoint_roundtrip(tmp_path):
    b = build_bundle(SMALL, seed=2)
    path = save_checkpoint(tmp_path / "c.pt", b, SMALL, 17, {"note": 1})
    ck = load_checkpoint(path)
    assert ck.iteration == 17 and ck.config == SMALL and ck.extra == {"note": 1}
    assert ck.bundle.fingerprint() == b.fingerprint()


def test_checkpoint_rejects_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", build_bundle(SMALL, seed=2), SMALL, 0)
    with pytest.raises(CheckpointError, match="arch"):
        load_checkpoint(path, SMALL.replace(generator_filters=16))
    (tmp_path / "junk.pt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt")
