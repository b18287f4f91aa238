import math

import pytest

from matchq.instance import Accuracy, Instance, Target


@pytest.fixture
def hard_instance() -> Instance:
    """Single supplier, three customer types; large-adaptivity-gap market."""
    return Instance([4.0], [2.4, 2.4, 7.2], [[0.0, 0.0, 1.0]])


@pytest.fixture
def hard_target() -> Target:
    return Target(cost_cap=math.inf, throughput_floor=3.0)


@pytest.fixture
def acc10() -> Accuracy:
    return Accuracy(0.1)
