from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kontext import gradcheck
from kontext.errors import ContractError
from kontext.rope import (
    SOURCE,
    TARGET,
    TEXT,
    PositionGrid,
    RopeFreqs,
    TokenRole,
    apply_rope,
    collision_report,
    coords_for_role,
    reference,
)


@pytest.mark.parametrize("h,w", [(4, 4), (8, 8), (8, 16)])
@pytest.mark.parametrize("n", [1, 2])
def test_reference_and_source_coordinates_exact(h, w, n):
    tgt = coords_for_role(h, w, TARGET).coords
    ref = coords_for_role(h, w, reference(n)).coords
    src = coords_for_role(h, w, SOURCE).coords
    i, j = tgt[:, 0], tgt[:, 1]
    assert np.array_equal(ref, np.stack([i + w * n, j + h * n], 1))
    assert np.array_equal(src, np.stack([-i, -j], 1))
    assert ref[:, 0].min() == w * n and ref[:, 0].max() == w * n + w - 1
    assert ref[:, 1].min() == h * n and ref[:, 1].max() == h * n + h - 1


def test_row_major_layout():
    g = coords_for_role(2, 3, TARGET).coords
    assert g.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]


def test_collisions():
    t = coords_for_role(4, 4, TARGET)
    assert collision_report([t, coords_for_role(4, 4, reference(1))]) == set()
    assert collision_report([t, coords_for_role(4, 4, SOURCE)]) == {(0, 0)}
    assert len(collision_report([t, coords_for_role(4, 4, TARGET)])) == 16
    assert collision_report([coords_for_role(4, 4, reference(1)), coords_for_role(4, 4, reference(2))]) == set()


def test_text_tokens_at_origin():
    assert not coords_for_role(1, 5, TEXT).coords.any()


def test_role_parse_roundtrip():
    for r in (TARGET, SOURCE, reference(1), reference(2)):
        assert TokenRole.parse(str(r)) == r
    with pytest.raises(ContractError):
        TokenRole("reference", 0)
    with pytest.raises(ContractError):
        TokenRole("bogus")


def test_origin_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 2, 8)).astype(np.float32)
    out = apply_rope(x, np.zeros((3, 2), np.int64), RopeFreqs(8)).data
    assert np.array_equal(out, x)


def test_head_dim_checks():
    with pytest.raises(ContractError):
        RopeFreqs(6)
    with pytest.raises(ContractError):
        apply_rope(np.ones((2, 1, 7)), np.zeros((2, 2), np.int64), RopeFreqs(8))
    with pytest.raises(ContractError):
        apply_rope(np.ones((2, 1, 8)), np.zeros((3, 2), np.int64), RopeFreqs(8))


@settings(max_examples=50, deadline=None)
@given(st.integers(-64, 64), st.integers(-64, 64), st.integers(0, 10_000))
def test_norm_preserved(i, j, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 16))
    out = apply_rope(x, np.array([[i, j]]), RopeFreqs(16)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5, atol=1e-5)


def test_relative_shift_invariance():
    rng = np.random.default_rng(1)
    f = RopeFreqs(16)
    worst = 0.0
    for _ in range(100):
        q, k = rng.standard_normal((2, 1, 1, 16))
        c1, c2, d = rng.integers(-40, 40, size=(3, 2))
        a = (apply_rope(q, c1[None], f).data * apply_rope(k, c2[None], f).data).sum()
        b = (apply_rope(q, (c1 + d)[None], f).data * apply_rope(k, (c2 + d)[None], f).data).sum()
        worst = max(worst, abs(a - b))
    assert worst <= 1e-4


def test_distinct_coordinates_distinct_rotations():
    x = np.ones((1, 1, 16))
    f = RopeFreqs(16)
    seen = set()
    for c in [(i, j) for i in range(-8, 9) for j in range(-8, 9)]:
        seen.add(np.round(apply_rope(x, np.array([c]), f).data, 6).tobytes())
    assert len(seen) == 17 * 17


def test_apply_rope_gradient():
    rng = np.random.default_rng(3)
    grid = PositionGrid.concat([coords_for_role(2, 2, TARGET), coords_for_role(2, 2, reference(1))])
    err = gradcheck.check(lambda x: apply_rope(x, grid, RopeFreqs(8)), [rng.standard_normal((8, 2, 8))], rng)
    assert err <= 1e-3
