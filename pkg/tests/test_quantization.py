"""
Tests for absmax block quantization.

The property tests sweep a few hundred random tensors per run instead of
ten thousand; the invariants checked are the same.
"""

import unittest
import os
import sys

import numpy as np

# Add parent directory to path to import the grading modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from autodiff import Tensor
from errors import InvalidBlockSize, NonFiniteInput, ShapeMismatch, ValidationError
from quantization import (
    QuantizedTensor,
    dequantize,
    dequantize_array,
    pack_codes,
    quantize_absmax,
    roundtrip_error,
    unpack_codes,
)

PROPERTY_DRAWS = 300


def random_draws(count, seed=0):
    """(array, block_size) pairs with shapes up to 32x32 and block sizes {8, 64, whole}."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        shape = tuple(int(d) for d in rng.integers(1, 33, size=int(rng.integers(1, 3))))
        array = rng.normal(0.0, float(rng.uniform(0.01, 10.0)), size=shape)
        block_size = [8, 64, array.size][int(rng.integers(3))]
        yield array, block_size


class TestQuantizeAbsmax(unittest.TestCase):
    """Test quantize_absmax() against hand examples"""

    def test_hand_example(self):
        """[0.5, -1.0, 0.25] -> codes [4, -7, 2], scale 1.0"""
        q = quantize_absmax(np.array([0.5, -1.0, 0.25]), bits=4, block_size=64)
        self.assertEqual(q.codes.tolist(), [4, -7, 2])
        self.assertEqual(q.scales.tolist(), [1.0])

    def test_all_zero(self):
        """All-zero input stores scale 0 and zero codes, and dequantizes exactly"""
        q = quantize_absmax(np.zeros(10), bits=4, block_size=4)
        self.assertEqual(q.scales.tolist(), [0.0, 0.0, 0.0])
        self.assertEqual(q.codes.tolist(), [0] * 10)
        np.testing.assert_array_equal(dequantize(q).data, np.zeros(10))

    def test_extremes_hit_qmax(self):
        """+-absmax maps to +-Qmax for both widths"""
        for bits, qmax in ((4, 7), (8, 127)):
            q = quantize_absmax(np.array([2.0, -2.0, 0.3]), bits=bits, block_size=3)
            self.assertEqual(q.codes[:2].tolist(), [qmax, -qmax])

    def test_accepts_tensor(self):
        """A Tensor input keeps its shape"""
        q = quantize_absmax(Tensor(np.ones((3, 4))), bits=8, block_size=5)
        self.assertEqual(q.shape, (3, 4))
        self.assertEqual(q.scales.size, 3)

    def test_invalid_arguments(self):
        """Bad block size, bit width or non-finite input are rejected"""
        with self.assertRaises(InvalidBlockSize):
            quantize_absmax(np.ones(4), block_size=0)
        with self.assertRaises(ValidationError):
            quantize_absmax(np.ones(4), bits=3)
        with self.assertRaises(NonFiniteInput):
            quantize_absmax(np.array([1.0, np.inf]))


class TestDequantize(unittest.TestCase):
    """Test dequantize() and round-trip error"""

    def test_hand_example(self):
        """codes [4,-7,2], scale 1 -> [4/7, -1, 2/7]"""
        q = QuantizedTensor(np.array([4, -7, 2], dtype=np.int8), np.array([1.0]), 4, 64, (3,))
        np.testing.assert_allclose(dequantize(q).data, [4 / 7, -1.0, 2 / 7], rtol=0, atol=1e-15)

    def test_absmax_is_exact(self):
        """A single-element tensor round-trips exactly"""
        q = quantize_absmax(np.array([3.25]), bits=4, block_size=64)
        self.assertEqual(dequantize_array(q).tolist(), [3.25])

    def test_grid_values_are_exact(self):
        """Values on the int4 grid have zero round-trip error"""
        x = np.array([7.0, -3.0, 1.0, 0.0, 5.0])
        self.assertEqual(roundtrip_error(x, bits=4, block_size=64).max_abs, 0.0)


class TestQuantizationProperties(unittest.TestCase):
    """Random-tensor invariants of the quantizer"""

    def test_code_range_and_error_bound(self):
        """int4 codes stay in [-7,7]; per-element error <= block absmax / 14"""
        for array, block_size in random_draws(PROPERTY_DRAWS):
            q = quantize_absmax(array, bits=4, block_size=block_size)
            self.assertLessEqual(int(np.abs(q.codes).max()), 7)
            per_element = np.repeat(q.scales, block_size)[:array.size]
            error = np.abs(array.reshape(-1) - dequantize_array(q).reshape(-1))
            self.assertTrue(np.all(error <= per_element / 14 * (1 + 1e-12)))

    def test_positive_scale_invariance(self):
        """Scaling by any positive factor leaves the codes unchanged"""
        rng = np.random.default_rng(11)
        for array, block_size in random_draws(PROPERTY_DRAWS // 3, seed=1):
            base = quantize_absmax(array, bits=4, block_size=block_size).codes
            for factor in rng.uniform(0.01, 100.0, size=3):
                scaled = quantize_absmax(array * factor, bits=4, block_size=block_size).codes
                np.testing.assert_array_equal(scaled, base)

    def test_requantize_is_identity(self):
        """Quantizing a dequantized tensor reproduces its codes and scales exactly"""
        for bits in (4, 8):
            for array, block_size in random_draws(PROPERTY_DRAWS, seed=4):
                q = quantize_absmax(array, bits=bits, block_size=block_size)
                again = quantize_absmax(dequantize_array(q), bits=bits, block_size=block_size)
                np.testing.assert_array_equal(again.codes, q.codes)
                np.testing.assert_array_equal(again.scales, q.scales)

    def test_absmax_roundtrips_exactly(self):
        """A single value of any magnitude dequantizes back to itself"""
        rng = np.random.default_rng(5)
        values = rng.normal(0.0, 1.0, size=500) * 10.0 ** rng.uniform(-6, 6, size=500)
        for bits in (4, 8):
            for value in values:
                q = quantize_absmax(np.array([value]), bits=bits, block_size=64)
                self.assertEqual(dequantize_array(q)[0], value)

    def test_sign_symmetry(self):
        """quantize(-x).codes == -quantize(x).codes"""
        for array, block_size in random_draws(PROPERTY_DRAWS // 3, seed=2):
            positive = quantize_absmax(array, bits=4, block_size=block_size).codes
            negative = quantize_absmax(-array, bits=4, block_size=block_size).codes
            np.testing.assert_array_equal(negative, -positive)

    def test_int8_never_worse_than_int4(self):
        """int8 max error <= int4 max error on the same tensor"""
        for array, block_size in random_draws(PROPERTY_DRAWS // 3, seed=3):
            if array.size < 8:
                continue
            int4 = roundtrip_error(array, bits=4, block_size=block_size)
            int8 = roundtrip_error(array, bits=8, block_size=block_size)
            self.assertLessEqual(int8.max_abs, int4.max_abs)
            self.assertLessEqual(int4.max_abs, int4.bound * (1 + 1e-12))


class TestValidate(unittest.TestCase):
    """Test QuantizedTensor.validate()"""

    def test_wrong_scale_count(self):
        """Two scales for one block of codes is a ShapeMismatch"""
        q = QuantizedTensor(np.zeros(4, dtype=np.int8), np.zeros(2), 4, 64, (4,))
        with self.assertRaises(ShapeMismatch):
            q.validate()

    def test_code_out_of_range(self):
        """An int4 code of 9 is rejected"""
        q = QuantizedTensor(np.array([9], dtype=np.int8), np.ones(1), 4, 64, (1,))
        with self.assertRaises(ValidationError):
            q.validate()


class TestCodePacking(unittest.TestCase):
    """Test pack_codes() / unpack_codes()"""

    def test_int4_two_per_byte(self):
        """Five int4 codes pack into three bytes, low nibble first"""
        codes = np.array([-7, 7, 0, -1, 3], dtype=np.int8)
        payload = pack_codes(codes, 4)
        self.assertEqual(len(payload), 3)
        self.assertEqual(payload[0], (7 << 4) | 0x9)
        np.testing.assert_array_equal(unpack_codes(payload, 5, 4), codes)

    def test_int8_one_per_byte(self):
        """int8 codes are stored one per byte"""
        codes = np.array([-127, 0, 127], dtype=np.int8)
        self.assertEqual(len(pack_codes(codes, 8)), 3)
        np.testing.assert_array_equal(unpack_codes(pack_codes(codes, 8), 3, 8), codes)

    def test_wrong_payload_length(self):
        """A short payload raises ShapeMismatch"""
        with self.assertRaises(ShapeMismatch):
            unpack_codes(b'\x00', 4, 4)


if __name__ == '__main__':
    unittest.main()
