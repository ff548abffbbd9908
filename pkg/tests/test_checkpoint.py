import numpy as np
import pytest

from hicropl.checkpoint import (
    MAGIC,
    load_encoder,
    load_stack,
    read_blocks,
    save_encoder,
    save_stack,
    write_blocks,
)
from hicropl.encoders import DualEncoder, EncoderConfig
from hicropl.errors import CheckpointError
from hicropl.promptflow import FlowConfig, init_prompt_stack


def test_blocks_roundtrip(tmp_path, rng):
    blocks = {"scalar": np.array(3.5), "vec": rng.normal(size=4), "mat": rng.normal(size=(2, 3, 2)),
              "empty": np.zeros((0, 3))}
    write_blocks(tmp_path / "b", blocks)
    back = read_blocks(tmp_path / "b")
    assert list(back) == list(blocks)
    for name in blocks:
        assert back[name].shape == blocks[name].shape and np.array_equal(back[name], blocks[name])


def test_layout_header(tmp_path):
    write_blocks(tmp_path / "b", {"x": np.array([1.0])})
    raw = (tmp_path / "b").read_bytes()
    assert raw[:4] == MAGIC
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert len(raw) == 12 + 4 + 1 + 4 + 8 + 8


def test_writing_is_byte_stable(tmp_path, rng):
    blocks = {"a": rng.normal(size=(3, 3))}
    write_blocks(tmp_path / "1", blocks)
    write_blocks(tmp_path / "2", blocks)
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0",
                                    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:]])
def test_corrupt_files(tmp_path, mutate):
    write_blocks(tmp_path / "b", {"x": np.arange(4.0)})
    (tmp_path / "b").write_bytes(mutate((tmp_path / "b").read_bytes()))
    with pytest.raises(CheckpointError):
        read_blocks(tmp_path / "b")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_blocks(tmp_path / "nope")


def test_stack_roundtrip(tmp_path, rng):
    flow = FlowConfig(mechanism="bidir_IT_then_TI", compression="mlp")
    stack = init_prompt_stack(EncoderConfig(), 3, 4, flow, depth=6)
    for t in stack.parameters():
        t.data = rng.normal(size=t.shape)
    save_stack(stack, tmp_path / "p")
    back = load_stack(tmp_path / "p", EncoderConfig(), flow)
    assert back.boundary_k == 3 and back.depth == 6
    assert back.state_dict().keys() == stack.state_dict().keys()
    for name, arr in stack.state_dict().items():
        assert np.array_equal(back.state_dict()[name], arr)


def test_stack_with_wrong_flow(tmp_path):
    save_stack(init_prompt_stack(EncoderConfig(), 4, 0), tmp_path / "p")
    with pytest.raises(CheckpointError):
        load_stack(tmp_path / "p", EncoderConfig(), FlowConfig(compression="mlp"))
    with pytest.raises(CheckpointError):
        load_stack(tmp_path / "p", EncoderConfig(text_width=16), FlowConfig())


def test_encoder_roundtrip(tmp_path):
    enc = DualEncoder(EncoderConfig(), seed=9)
    save_encoder(enc, tmp_path / "e")
    back = load_encoder(tmp_path / "e", EncoderConfig())
    assert back.state_hash() == enc.state_hash() and back.frozen


def test_encoder_config_mismatch(tmp_path):
    save_encoder(DualEncoder(EncoderConfig()), tmp_path / "e")
    with pytest.raises(CheckpointError):
        load_encoder(tmp_path / "e", EncoderConfig(layers=4))
    with pytest.raises(CheckpointError):
        load_encoder(tmp_path / "e", EncoderConfig(text_width=16))
