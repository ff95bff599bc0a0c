import struct

import numpy as np
import pytest

from sanetkit.errors import CheckpointError, ConfigError
from sanetkit.model import VARIANTS, ModelConfig, SaNet, load_checkpoint, read_checkpoint, save_checkpoint
from sanetkit.tensor import Tensor, no_grad

# Frozen parameter counts of the desk configuration; a change here is an architecture change.
DESK_PARAMS = {"baseline": 323478, "sfr": 364503, "dcfpn": 367295, "sanet": 408320}


def test_output_shape():
    model = SaNet(ModelConfig(), seed=0)
    with no_grad():
        out = model(Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64))))
    assert out.shape == (2, 6, 64, 64)
    assert np.all(np.isfinite(out.numpy()))


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_variant_flags_and_counts(variant):
    cfg = ModelConfig.variant(variant)
    assert cfg.variant_name == variant
    model = SaNet(cfg)
    assert (model.sfr is not None, model.dcfpn is not None) == VARIANTS[variant]
    assert (model.proj is None) == cfg.use_sfr
    assert model.num_parameters() == DESK_PARAMS[variant]


def test_unknown_variant():
    with pytest.raises(ConfigError):
        ModelConfig.variant("resnet")


def test_variants_share_backbone_census():
    base = [c for c in SaNet(ModelConfig.variant("baseline")).census() if c[0].startswith("backbone.")]
    full = [c for c in SaNet(ModelConfig.variant("sanet")).census() if c[0].startswith("backbone.")]
    assert base == full and base


def test_same_seed_same_weights():
    a, b = SaNet(seed=3).state_dict(), SaNet(seed=3).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = SaNet(seed=4).state_dict()
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_rejects_bad_input_size():
    with pytest.raises(ConfigError):
        SaNet()(Tensor(np.zeros((1, 3, 48, 48))))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_checkpoint_round_trip(tmp_path, dtype):
    src = SaNet(seed=1, dtype=dtype)
    path = tmp_path / "m.ckpt"
    save_checkpoint(src, path)
    assert path.read_bytes()[:8] == b"SANETKIT"
    dst = SaNet(seed=2, dtype=dtype)
    load_checkpoint(dst, path)
    for (n1, p1), (n2, p2) in zip(src.named_parameters(), dst.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
        assert p2.dtype == dtype


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    model = SaNet(ModelConfig.variant("baseline"))
    save_checkpoint(model, path)
    version, width, count = struct.unpack_from("<III", path.read_bytes(), 8)
    assert (version, width, count) == (1, 8, len(model.parameters()))
    names = [n for n, _ in read_checkpoint(path)]
    assert names == [n for n, _ in model.named_parameters()]


def test_census_mismatch_names_first_parameter(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(SaNet(ModelConfig.variant("baseline")), path)
    with pytest.raises(CheckpointError, match="sfr"):
        load_checkpoint(SaNet(ModelConfig.variant("sanet")), path)


def test_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(SaNet(ModelConfig(c_prime=16)), path)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(SaNet(ModelConfig(c_prime=32)), path)


def test_corrupt_checkpoints(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(SaNet(ModelConfig.variant("baseline")), path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTMODEL" + raw[8:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    (tmp_path / "tail.ckpt").write_bytes(raw + b"\0")
    for name, pattern in (("magic", "magic"), ("short", "truncated"), ("tail", "trailing")):
        with pytest.raises(CheckpointError, match=pattern):
            read_checkpoint(tmp_path / f"{name}.ckpt")
