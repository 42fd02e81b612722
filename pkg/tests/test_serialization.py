"""
Tests for the versioned parameter file format
"""

import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from feddpg.errors import ContractError
from feddpg.serialization import (
    FORMAT_VERSION,
    MAGIC,
    deserialize_params,
    load_params,
    params_digest,
    save_params,
    serialize_params,
    serialized_size,
)
from feddpg.tensor import Tensor


class TestParameterFormat(unittest.TestCase):
    """Tests for parameter encoding"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        self.params = {
            "w1": Tensor(rng.normal(size=(3, 2))),
            "b1": Tensor(rng.normal(size=2)),
            "w2": Tensor(rng.normal(size=(2, 4))),
        }

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_prefix(self):
        blob = serialize_params(self.params, "generator")
        magic, version, header_len = struct.unpack_from("<4sHI", blob, 0)
        self.assertEqual(magic, MAGIC)
        self.assertEqual(version, FORMAT_VERSION)
        payload = 8 * (6 + 2 + 8)
        self.assertEqual(len(blob), struct.calcsize("<4sHI") + header_len + payload)

    def test_decode_preserves_kind_order_and_values(self):
        kind, arrays = deserialize_params(serialize_params(self.params, "generator"))
        self.assertEqual(kind, "generator")
        self.assertEqual(list(arrays), ["w1", "b1", "w2"])
        for name, tensor in self.params.items():
            self.assertTrue(np.array_equal(arrays[name], tensor.data))

    def test_size_and_digest_are_stable(self):
        self.assertEqual(
            serialized_size(self.params, "generator"),
            len(serialize_params(self.params, "generator")),
        )
        copy = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        self.assertEqual(params_digest(self.params, "generator"), params_digest(copy, "generator"))
        copy["b1"].data[0] += 1e-12
        self.assertNotEqual(
            params_digest(self.params, "generator"), params_digest(copy, "generator")
        )

    def test_bad_magic(self):
        blob = b"XXXX" + serialize_params(self.params, "generator")[4:]
        with self.assertRaises(ContractError):
            deserialize_params(blob)

    def test_truncated_and_trailing_bytes(self):
        blob = serialize_params(self.params, "generator")
        with self.assertRaises(ContractError):
            deserialize_params(blob[:-8])
        with self.assertRaises(ContractError):
            deserialize_params(blob + b"\x00")
        with self.assertRaises(ContractError):
            deserialize_params(blob[:5])

    def test_save_and_load(self):
        path = os.path.join(self.test_dir, "nested", "params.fdpg")
        nbytes = save_params(path, self.params, "encoder")
        self.assertEqual(nbytes, os.path.getsize(path))
        kind, arrays = load_params(path)
        self.assertEqual(kind, "encoder")
        self.assertTrue(np.array_equal(arrays["w2"], self.params["w2"].data))


if __name__ == "__main__":
    unittest.main()
