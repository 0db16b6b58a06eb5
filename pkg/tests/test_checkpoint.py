import numpy as np
import pytest

from reroute.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from reroute.errors import CheckpointError
from reroute.layers import BatchNorm2d, Conv2d, Linear, Module
from reroute.tensor import Tensor


def test_bit_exact_roundtrip(tmp_path, rng):
    arrays = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.running_var": rng.standard_normal(7).astype(np.float64),
        "c.counter": np.array([3], dtype=np.int8),
    }
    meta = {"step": 42, "note": "x"}
    path = tmp_path / "ck.rrt"
    save_checkpoint(path, arrays, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2["step"] == 42
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].tobytes() == arrays[k].tobytes()


def test_magic_bytes_lead_the_file(tmp_path):
    path = tmp_path / "ck.rrt"
    save_checkpoint(path, {"x": np.zeros(2, np.float32)}, {})
    assert path.read_bytes()[:4] == MAGIC == b"RRT1"


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "ck.rrt"
    save_checkpoint(path, {"x": np.zeros(2, np.float32)}, {})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "ck.rrt"
    save_checkpoint(path, {"x": np.arange(8, dtype=np.float64)}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="overruns"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "ck.rrt"
    save_checkpoint(path, {"x": np.zeros(1, np.float32)}, {})
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_model_state_roundtrip_through_container(tmp_path, rng):
    class Toy(Module):
        def __init__(self, r):
            super().__init__()
            self.conv = Conv2d(3, 4, 3, rng=r)
            self.bn = BatchNorm2d(4)
            self.head = Linear(4, 2, rng=r)

    m1 = Toy(rng)
    m1.bn(Tensor(rng.standard_normal((4, 4, 5, 5)).astype(np.float32)))  # touch stats
    path = tmp_path / "model.rrt"
    save_checkpoint(path, m1.state_dict(), {"step": 7})
    m2 = Toy(np.random.default_rng(999))
    arrays, meta = load_checkpoint(path)
    m2.load_state_dict(arrays)
    for (n1, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert p1.data.tobytes() == p2.data.tobytes(), n1
    for (n1, b1), (_, b2) in zip(m1.named_buffers(), m2.named_buffers()):
        assert b1.tobytes() == b2.tobytes(), n1
