from __future__ import annotations

import pytest

from kontext.codec import PatchCodec, train_codec


@pytest.fixture(scope="session")
def trained_codec():
    codec = PatchCodec(seed=0)
    result = train_codec(codec, 2000, seed=0)
    return codec, result
