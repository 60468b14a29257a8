from __future__ import annotations

import pytest
from hypothesis import settings

from turnscribe import Segment

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def seg(speaker, start, end, text="", gender="unknown"):
    return Segment.at(speaker, start, end, text, gender)


@pytest.fixture
def make_seg():
    return seg
