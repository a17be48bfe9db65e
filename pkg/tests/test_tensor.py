import numpy as np
import pytest

from vamkit.tensor import (Shape, ew_binary, parse_tensor_blob, read_tensor_blob, reduce_sum,
                           tensor_new, write_tensor_blob)


class TestTensorNew:
    def test_zero_fill(self):
        t = tensor_new((1, 1, 2, 2), 0.0)
        assert t.shape == (1, 1, 2, 2)
        assert t.dtype == np.float32
        assert np.all(t == 0.0)

    def test_ones_count(self):
        t = tensor_new((2, 3, 4, 4), 1.0)
        assert t.size == 96
        assert float(t.sum()) == 96.0

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError, match="zero extent"):
            tensor_new((1, 1, 1, 0), 0.0)

    def test_non_finite_fill_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            tensor_new((1, 1, 1, 1), float("nan"))


class TestEwBinary:
    def test_mul_halving(self):
        a = np.array([2.0, 4.0], np.float32).reshape(1, 1, 1, 2)
        b = np.full((1, 1, 1, 2), 0.5, np.float32)
        out = ew_binary(a, b, "mul")
        assert out.tolist() == [[[[1.0, 2.0]]]]

    def test_add_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        out = ew_binary(x, np.zeros_like(x), "add")
        assert np.array_equal(out, x)

    def test_shape_mismatch(self):
        a = tensor_new((1, 1, 1, 1), 1.0)
        b = tensor_new((1, 2, 1, 1), 1.0)
        with pytest.raises(ValueError, match="shape mismatch"):
            ew_binary(a, b, "add")

    def test_mul_commutative_with_ones_identity(self, rng):
        for _ in range(20):
            x = rng.uniform(-10, 10, (2, 2, 3, 3)).astype(np.float32)
            y = rng.uniform(-10, 10, (2, 2, 3, 3)).astype(np.float32)
            assert np.array_equal(ew_binary(x, y, "mul"), ew_binary(y, x, "mul"))
            assert np.array_equal(ew_binary(x, np.ones_like(x), "mul"), x)

    def test_inputs_unmodified(self):
        a = tensor_new((1, 1, 2, 2), 3.0)
        b = tensor_new((1, 1, 2, 2), 4.0)
        ew_binary(a, b, "sub")
        assert np.all(a == 3.0) and np.all(b == 4.0)


class TestReduceSum:
    def test_channel_sum(self):
        t = np.array([1.0, 2.0, 3.0], np.float32).reshape(1, 3, 1, 1)
        out = reduce_sum(t, ("c",))
        assert out.shape == (1, 1, 1, 1)
        assert out.flat[0] == 6.0

    def test_empty_axes_is_copy(self, rng):
        x = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
        out = reduce_sum(x, ())
        assert np.array_equal(out, x)
        assert out is not x

    def test_spatial_sum_of_ones(self):
        out = reduce_sum(tensor_new((1, 4, 2, 2), 1.0), ("h", "w"))
        assert out.shape == (1, 4, 1, 1)
        assert np.all(out == 4.0)

    def test_total_preserved(self, rng):
        x = rng.uniform(-1e3, 1e3, (3, 4, 5, 6)).astype(np.float32)
        out = reduce_sum(x, ("n", "c", "h", "w"))
        expected = float(x.astype(np.float64).sum())
        assert out.shape == (1, 1, 1, 1)
        assert abs(float(out.flat[0]) - expected) <= 1e-6 * max(abs(expected), 1.0)

    def test_unknown_axis(self):
        with pytest.raises(ValueError, match="unknown axis"):
            reduce_sum(tensor_new((1, 1, 1, 1), 1.0), ("z",))


class TestBlobFormat:
    def test_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.tns"
        write_tensor_blob(path, x)
        back = read_tensor_blob(path)
        assert np.array_equal(back, x)
        assert back.dtype == np.float32

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor_blob(path, tensor_new((1, 2, 3, 4), 0.5))
        raw = path.read_bytes()
        assert len(raw) == 16 + 24 * 4
        assert np.frombuffer(raw[:16], dtype="<u4").tolist() == [1, 2, 3, 4]
        assert np.frombuffer(raw[16:20], dtype="<f4")[0] == np.float32(0.5)

    def test_short_read(self, tmp_path):
        path = tmp_path / "t.tns"
        write_tensor_blob(path, tensor_new((1, 1, 2, 2), 1.0))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError, match="short read"):
            read_tensor_blob(path)

    def test_truncated_header(self):
        with pytest.raises(ValueError, match="short read"):
            parse_tensor_blob(b"\x01\x00", "stub")

    def test_zero_extent_header(self):
        raw = np.array([1, 0, 2, 2], dtype="<u4").tobytes()
        with pytest.raises(ValueError, match="zero extent"):
            parse_tensor_blob(raw, "stub")


def test_shape_equality():
    assert Shape(1, 2, 3, 4) == Shape(1, 2, 3, 4)
    assert Shape(1, 2, 3, 4) != Shape(1, 2, 4, 3)
    assert Shape(2, 3, 4, 5).size() == 120
