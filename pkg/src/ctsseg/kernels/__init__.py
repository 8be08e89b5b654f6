"""Convolution kernels with two interchangeable lanes.

A compiled Cython lane and a pure numpy lane implement identical contracts;
one is selected once at import time. The environment variable CTS_KERNELS
picks the lane:

    auto  use the compiled lane if it imported, else numpy (default)
    cy    require the compiled lane, fail loudly if missing
    py    force the numpy lane

`lane_name()` reports the active lane; `available_lanes()` lists both lanes
as (name, module) pairs for the comparison benchmark, independent of which
one is active.
"""

import os

from ..errors import ConfigError
from . import _convnp

try:
    from . import _convcy
except ImportError:
    _convcy = None

_choice = os.environ.get("CTS_KERNELS", "auto")
if _choice not in ("auto", "cy", "py"):
    raise ConfigError(f"CTS_KERNELS must be auto, cy or py, got {_choice!r}")
if _choice == "cy" and _convcy is None:
    raise ConfigError("CTS_KERNELS=cy but the compiled kernel lane is not built")

if _choice == "py" or _convcy is None:
    _lane, _lane_name = _convnp, "py"
else:
    _lane, _lane_name = _convcy, "cy"

conv2d_forward = _lane.conv2d_forward
conv2d_grad_input = _lane.conv2d_grad_input
conv2d_grad_weight = _lane.conv2d_grad_weight


def lane_name() -> str:
    return _lane_name


def available_lanes():
    lanes = [("py", _convnp)]
    if _convcy is not None:
        lanes.append(("cy", _convcy))
    return lanes
