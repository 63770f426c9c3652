import numpy as np
import pytest

from seqdet.weights import MAGIC, load_weights, save_weights


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a.weight": rng.standard_normal((2, 3, 3, 3)),
            "a.bias": rng.standard_normal(2),
            "z": np.array([1e-300, np.pi, -0.0]),
        }
        path = tmp_path / "w.bin"
        save_weights(path, arrays, {"version": 1, "note": "x"})
        loaded, meta = load_weights(path)
        assert meta == {"version": 1, "note": "x"}
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert loaded[k].dtype == np.float64
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_bytes_are_deterministic(self, tmp_path):
        arrays = {"w": np.arange(12.0).reshape(1, 3, 2, 2)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_weights(p1, arrays, {"k": 1})
        save_weights(p2, arrays, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAWEIGHTFILE\n{}\n")
        with pytest.raises(ValueError, match="bad magic"):
            load_weights(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(path, {"w": np.ones(4)}, {})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(path)

    def test_magic_is_versioned(self):
        assert MAGIC.endswith("1")
