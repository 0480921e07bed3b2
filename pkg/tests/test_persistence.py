import numpy as np
import pytest

from steamrec.data import Vocab
from steamrec.model import ModelConfig, ModelParameters
from steamrec.persistence import (
    MAGIC,
    CheckpointError,
    ConfigError,
    RunConfig,
    load_checkpoint,
    merge_config,
    params_from_checkpoint,
    parse_config_text,
    save_checkpoint,
)

VOCAB = Vocab(20)


def make(e=8):
    cfg = merge_config({"embed_dim": e, "max_raw_len": 10, "max_corrected_len": 12})
    params = ModelParameters.init(cfg.model_config(), VOCAB, np.random.default_rng(e))
    return cfg, params


def test_round_trip_at_32_bit(tmp_path):
    cfg, params = make()
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg.echo(), VOCAB, path)
    ckpt = load_checkpoint(path)
    assert ckpt.item_count == 20 and ckpt.total_rows == 23
    assert ckpt.config == cfg.echo()
    back = params_from_checkpoint(ckpt, merge_config(ckpt.config).model_config())
    for (n1, a), (n2, b) in zip(params.named(), back.named()):
        assert n1 == n2
        assert np.array_equal(a.data.astype(np.float32), b.data.astype(np.float32))
    assert not list(tmp_path.glob("*.tmp"))


def test_layout_header(tmp_path):
    cfg, params = make()
    save_checkpoint(params, cfg.echo(), VOCAB, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC == b"STEAMCKP"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_truncated_file_rejected(tmp_path):
    cfg, params = make()
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg.echo(), VOCAB, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_flipped_byte_rejected(tmp_path):
    cfg, params = make()
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg.echo(), VOCAB, path)
    data = bytearray(path.read_bytes())
    data[200] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_wrong_width_names_block(tmp_path):
    cfg, params = make(64)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg.echo(), VOCAB, path)
    small = make(32)[0].model_config()
    with pytest.raises(CheckpointError, match="item_emb.*64.*32"):
        params_from_checkpoint(load_checkpoint(path), small)


def test_layer_count_mismatch(tmp_path):
    cfg, params = make()
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg.echo(), VOCAB, path)
    deeper = ModelConfig(embed_dim=8, layers_encoder=2, max_raw_len=10, max_corrected_len=12)
    with pytest.raises(CheckpointError, match="encoder.1"):
        params_from_checkpoint(load_checkpoint(path), deeper)


def test_config_parsing_and_merge_order():
    text = "# comment\nembed_dim = 32  # inline\n\nvariant = dc_only\n"
    layer = parse_config_text(text)
    assert layer == {"embed_dim": "32", "variant": "dc_only"}
    cfg = merge_config(layer, {"embed_dim": 16, "seed": None})
    assert cfg.embed_dim == 16 and cfg.variant == "dc_only" and cfg.seed == 0
    assert RunConfig().learning_rate == 0.001 and RunConfig().batch_size == 256


@pytest.mark.parametrize("layer", [{"nonsense": "1"}, {"embed_dim": "wide"}])
def test_config_errors(layer):
    with pytest.raises(ConfigError):
        merge_config(layer)


def test_config_line_without_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a = 1\njunk\n")


def test_echo_excludes_paths():
    echo = merge_config({"dataset": "/data", "out": "/runs"}).echo()
    assert "dataset" not in echo and "out" not in echo and echo["embed_dim"] == "64"
