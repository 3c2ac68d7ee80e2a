import json
import tempfile
import pytest
import numpy as np
from pathlib import Path
from unittest import TestCase
from dynasty.storage import (
    BLOB_NAME,
    MANIFEST_NAME,
    content_hash,
    json_dump_pretty,
    read_bundle,
    write_bundle,
)
from dynasty.exceptions import DynastyDataError


ARRAYS = {
    "weights": np.array([[0.1, -2.5], [1e-300, np.pi]]),
    "scalar": np.array(7.0),
    "vector": np.arange(5, dtype=np.float64),
}
META = {"format": "test", "nested": {"a": [1, 2]}}


class BundleTestCase(TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)

    def test_round_trip(self):
        path = write_bundle(self.root / "bundle", ARRAYS, META)
        arrays, meta = read_bundle(path)

        self.assertEqual(list(arrays), list(ARRAYS))
        for name, array in ARRAYS.items():
            self.assertEqual(arrays[name].dtype, np.float64)
            np.testing.assert_array_equal(arrays[name], array)
        self.assertEqual(meta, META)

    def test_manifest_layout(self):
        path = write_bundle(self.root / "bundle", ARRAYS, META)
        manifest = json.loads((path / MANIFEST_NAME).read_text())

        offsets = [entry["offset"] for entry in manifest["tensors"]]
        self.assertEqual(offsets, [0, 32, 40])
        self.assertEqual((path / BLOB_NAME).stat().st_size, 80)
        self.assertTrue(all(entry["dtype"] == "<f8" for entry in manifest["tensors"]))

    def test_missing(self):
        with pytest.raises(FileNotFoundError):
            read_bundle(self.root / "nothing")

    def test_malformed(self):
        path = write_bundle(self.root / "bundle", ARRAYS, META)

        (path / MANIFEST_NAME).write_text("{")
        with pytest.raises(DynastyDataError):
            read_bundle(path)

        (path / MANIFEST_NAME).write_text("[]")
        with pytest.raises(DynastyDataError):
            read_bundle(path)

        entry = {"name": "x", "shape": [100], "dtype": "<f8", "offset": 0, "nbytes": 800}
        (path / MANIFEST_NAME).write_text(json.dumps({"tensors": [entry]}))
        with pytest.raises(DynastyDataError):
            read_bundle(path)

        entry = {"name": "x", "shape": [2], "dtype": "<f4", "offset": 0, "nbytes": 16}
        (path / MANIFEST_NAME).write_text(json.dumps({"tensors": [entry]}))
        with pytest.raises(DynastyDataError):
            read_bundle(path)


class HashTestCase(TestCase):
    def test_stable(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = write_bundle(Path(tmp, "a"), ARRAYS, META)
            second = write_bundle(Path(tmp, "b"), ARRAYS, META)
            self.assertEqual(content_hash([first]), content_hash([second]))

            changed = dict(ARRAYS, scalar=np.array(8.0))
            third = write_bundle(Path(tmp, "c"), changed, META)
            self.assertNotEqual(content_hash([first]), content_hash([third]))

    def test_pretty(self):
        self.assertEqual(json_dump_pretty({"b": 1, "a": 2}), '{\n    "a": 2,\n    "b": 1\n}')
