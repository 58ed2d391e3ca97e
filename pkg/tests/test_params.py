import numpy as np
import pytest

from fedbackdoor.errors import SchemaMismatchError
from fedbackdoor.params import (
    ModelParams,
    load_params,
    params_add,
    params_sub,
    save_params,
    weighted_sum,
)


def make(schema="toy:abc", fill=1.0):
    rng = np.random.default_rng(hash(fill) % 2**32)
    return ModelParams([rng.random((3, 4)).astype(np.float32) * fill, np.full(5, fill)], schema)


class TestArithmetic:
    def test_add_sub_roundtrip(self):
        a, b = make(fill=1.0), make(fill=2.0)
        back = params_sub(params_add(a, b), b)
        assert all(np.allclose(x, y, atol=1e-6) for x, y in zip(back.arrays, a.arrays))

    def test_schema_mismatch(self):
        with pytest.raises(SchemaMismatchError):
            params_add(make("a:1"), make("b:2"))

    def test_scaled_exact(self):
        p = make()
        tripled = p.scaled(3.0)
        for orig, out in zip(p.arrays, tripled.arrays):
            assert np.array_equal(out, orig * np.float32(3.0))

    def test_weighted_sum_matches_float64_oracle(self):
        items = [(0.3, make(fill=1.0)), (0.7, make(fill=2.0))]
        result = weighted_sum(items)
        for k in range(2):
            expect = sum(c * p.arrays[k].astype(np.float64) for c, p in items)
            assert np.array_equal(result.arrays[k], expect.astype(np.float32))

    def test_all_finite(self):
        p = make()
        assert p.all_finite()
        p.arrays[0][0, 0] = np.inf
        assert not p.all_finite()


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        p = make()
        save_params(tmp_path / "params.bin", p)
        q = load_params(tmp_path / "params.bin")
        assert q.schema == p.schema
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays, q.arrays))
