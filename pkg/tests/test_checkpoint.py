import numpy as np
import pytest

from himix import checkpoint
from himix.decoder import ModelConfig, init_model, Model


def f32_model(**kw):
    m = init_model(ModelConfig(n_layers=2, d_model=8, d_vision=4, n_heads=2, **kw))
    return Model(m.cfg, {k: v.astype(np.float32) for k, v in m.params.items()})


def test_round_trip_is_bit_exact(tmp_path):
    model = f32_model(variant="himix-connector", pe_scheme="rotary", seed=5)
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path)
    back = checkpoint.load(path)
    assert back.cfg == model.cfg
    assert list(back.params) == list(model.params)
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert checkpoint.dumps(back) == path.read_bytes()


def test_header_is_canonical_json():
    data = checkpoint.dumps(f32_model())
    hlen = int.from_bytes(data[8:12], "little")
    assert data[12:12 + hlen].decode() == f32_model().cfg.to_json()


def test_bad_magic():
    data = bytearray(checkpoint.dumps(f32_model()))
    data[0] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(bytes(data))


@pytest.mark.parametrize("cut", [3, 20, 200, 1])
def test_truncated(cut):
    data = checkpoint.dumps(f32_model())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:-cut])


def test_trailing_bytes():
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.loads(checkpoint.dumps(f32_model()) + b"\0")
