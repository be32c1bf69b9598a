import pytest

from dfabricsim.config import validate_config

MIB = 1024 * 1024


def make_cfg(**overrides) -> dict:
    """Small two-rack config used across the transport tests."""
    raw = {
        "system": "dfabric",
        "seed": 1,
        "fabric": {"cxl_max_throughput": 150_000_000, "theta": 8},
        "workload": {"kind": "pingpong", "msg_size": 4096, "iters": 1,
                     "participants": [0, 1]},
    }
    for key, value in overrides.items():
        if (key != "workload" and isinstance(value, dict)
                and isinstance(raw.get(key), dict)):
            raw[key].update(value)
        else:
            raw[key] = value
    return validate_config(raw)


@pytest.fixture
def small_cfg():
    return make_cfg()
