"""Checkpoint container: round trips, determinism, corruption handling."""

import numpy as np
import pytest

from sgcap.captioner import CaptionerConfig, CaptionerParams
from sgcap.checkpoint import (
    MAGIC,
    Checkpoint,
    atomic_write_bytes,
    load_captioner,
    load_checkpoint,
    load_vse,
    save_captioner,
    save_checkpoint,
    save_vse,
)
from sgcap.features import SPECIALS, FileFormatError, Vocabulary
from sgcap.vse import VseConfig, VseParams

VOCAB = Vocabulary(list(SPECIALS) + ["a", "red", "cube"])


def tiny_captioner(seed=0):
    config = CaptionerConfig(vocab_size=len(VOCAB), d_model=4, embed_dim=4,
                             heads=2, spatial_dim=5, max_len=6)
    return CaptionerParams.init(config, np.random.default_rng(seed))


def tiny_vse(seed=0):
    config = VseConfig(vocab_size=len(VOCAB), spatial_dim=5, embed_dim=4,
                       hidden_dim=4, space_dim=3)
    return VseParams.init(config, np.random.default_rng(seed))


class TestRoundTrip:
    def test_captioner_bit_identical(self, tmp_path):
        params = tiny_captioner()
        path = tmp_path / "model.sgck"
        save_captioner(path, params, VOCAB, seed=42)
        loaded, vocab, seed = load_captioner(path)
        assert seed == 42
        assert vocab.tokens == VOCAB.tokens
        assert loaded.config == params.config
        want = params.param_arrays()
        got = loaded.param_arrays()
        assert list(got) == list(want)  # manifest order preserved
        for name in want:
            assert got[name].tobytes() == want[name].tobytes(), name

    def test_vse_bit_identical(self, tmp_path):
        params = tiny_vse()
        path = tmp_path / "vse.sgck"
        save_vse(path, params, VOCAB, seed=7)
        loaded, vocab, seed = load_vse(path)
        assert seed == 7
        assert vocab.tokens == VOCAB.tokens
        assert loaded.config == params.config
        for name, arr in params.param_arrays().items():
            assert loaded.param_arrays()[name].tobytes() == arr.tobytes()

    def test_save_twice_is_byte_identical(self, tmp_path):
        params = tiny_captioner()
        a, b = tmp_path / "a.sgck", tmp_path / "b.sgck"
        save_captioner(a, params, VOCAB, seed=1)
        save_captioner(b, params, VOCAB, seed=1)
        assert a.read_bytes() == b.read_bytes()

    def test_double_round_trip_stable(self, tmp_path):
        params = tiny_vse(3)
        a, b = tmp_path / "a.sgck", tmp_path / "b.sgck"
        save_vse(a, params, VOCAB, seed=0)
        loaded, vocab, seed = load_vse(a)
        save_vse(b, loaded, vocab, seed)
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_arrays_are_writable_copies(self, tmp_path):
        path = tmp_path / "m.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        ck = load_checkpoint(path)
        name = next(iter(ck.arrays))
        ck.arrays[name][...] = 0.0  # must not raise (frombuffer is read-only)

    def test_generic_container_preserves_metadata(self, tmp_path):
        path = tmp_path / "g.sgck"
        arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(3)}
        save_checkpoint(path, "vse", {"embed_dim": 4}, arrays, 9, VOCAB.tokens)
        ck = load_checkpoint(path)
        assert isinstance(ck, Checkpoint)
        assert ck.kind == "vse"
        assert ck.config == {"embed_dim": 4}
        assert ck.seed == 9
        assert ck.vocab_tokens == VOCAB.tokens
        np.testing.assert_array_equal(ck.arrays["w"], arrays["w"])


class TestErrors:
    def test_unknown_kind_rejected_on_save(self, tmp_path):
        with pytest.raises(ValueError, match="kind"):
            save_checkpoint(tmp_path / "x.sgck", "resnet", {}, {}, 0, VOCAB.tokens)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.sgck"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(FileFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "x.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FileFormatError, match="payload|trailing"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "x.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FileFormatError, match="trailing"):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        path = tmp_path / "x.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        raw = bytearray(path.read_bytes())
        raw[16] = ord("!")  # first header byte: breaks the JSON object
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError, match="header"):
            load_checkpoint(path)

    def test_kind_mismatch_on_typed_load(self, tmp_path):
        path = tmp_path / "x.sgck"
        save_vse(path, tiny_vse(), VOCAB, seed=0)
        with pytest.raises(FileFormatError, match="captioner"):
            load_captioner(path)
        path2 = tmp_path / "y.sgck"
        save_captioner(path2, tiny_captioner(), VOCAB, seed=0)
        with pytest.raises(FileFormatError, match="vse"):
            load_vse(path2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.sgck")


class TestAtomicWrite:
    def test_no_temp_files_left_behind(self, tmp_path):
        atomic_write_bytes(tmp_path / "out.bin", b"payload")
        assert (tmp_path / "out.bin").read_bytes() == b"payload"
        assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

    def test_overwrites_existing(self, tmp_path):
        path = tmp_path / "out.bin"
        path.write_bytes(b"old")
        atomic_write_bytes(path, b"new")
        assert path.read_bytes() == b"new"

    def test_magic_is_first_bytes(self, tmp_path):
        path = tmp_path / "m.sgck"
        save_captioner(path, tiny_captioner(), VOCAB, seed=0)
        assert path.read_bytes()[:4] == MAGIC
