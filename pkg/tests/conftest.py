import numpy as np
import pytest
from hypothesis import settings

from rapidrace.track import Track, straight_track, u_course

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def u_track():
    return u_course()


@pytest.fixture
def line_track():
    return Track(np.array([[0.0, 0.0], [10.0, 0.0]]), 1.0)


@pytest.fixture
def l_track():
    return Track(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 5.0]]), 1.0)


@pytest.fixture
def long_straight():
    return straight_track(length=30.0, half_width=0.6)
