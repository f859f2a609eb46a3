import json
import struct

import pytest
import torch

import msumamba as m
from msumamba import CheckpointError
from msumamba.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from msumamba.network import build_model, tiny_config


@pytest.fixture
def model(tiny_cfg):
    return build_model(tiny_cfg)


def test_round_trip_bit_exact(model, tmp_path, gen):
    path = tmp_path / "model.msum"
    save_checkpoint(model, path)
    loaded, state = load_checkpoint(path)
    assert state is None
    for (na, pa), (nb, pb) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb), na
    x = torch.randn(1, 3, 64, 64, generator=gen)
    model.eval(), loaded.eval()
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))


def test_training_state_round_trip(model, tmp_path):
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = model(torch.zeros(1, 3, 64, 64), rng=torch.Generator().manual_seed(0)).sum()
    loss.backward()
    opt.step()
    path = tmp_path / "model.msum"
    save_checkpoint(model, path, training_state={"step": 41, "optimizer": opt.state_dict()})
    _, state = load_checkpoint(path)
    assert state["step"] == 41
    restored = state["optimizer"]
    original = opt.state_dict()
    assert set(restored["state"]) == set(original["state"])
    for k in original["state"]:
        for field, value in original["state"][k].items():
            got = restored["state"][k][field]
            if isinstance(value, torch.Tensor):
                assert torch.equal(got, value), (k, field)
            else:
                assert got == value


def test_truncated_file_rejected(model, tmp_path):
    path = tmp_path / "model.msum"
    save_checkpoint(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bogus.msum"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(model, tmp_path):
    path = tmp_path / "model.msum"
    save_checkpoint(model, path)
    data = bytearray(path.read_bytes())
    (head_len,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + head_len].decode())
    header["format_version"] = 999
    new_head = json.dumps(header).encode()
    path.write_bytes(bytes(data[:4]) + struct.pack("<Q", len(new_head)) + new_head
                     + bytes(data[12 + head_len:]))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_header_magic_layout(model, tmp_path):
    path = tmp_path / "model.msum"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"MSUM"
    (head_len,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    assert header["format_version"] == 1
    assert {"name", "dtype", "shape", "offset"} <= set(header["tensors"][0])
    assert header["config"]["base_dim"] == 16


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.msum")
