"""Dilated-convolution optical flow toolkit: network specs, ERF analysis, flow I/O and metrics."""

from ._core import (
    FlowError,
    aee,
    design_depth,
    erf,
    fl_all,
    flow_to_color,
    info,
    read_flo,
    run_cli,
    write_flo,
)

__all__ = [
    "FlowError",
    "aee",
    "design_depth",
    "erf",
    "fl_all",
    "flow_to_color",
    "info",
    "read_flo",
    "run_cli",
    "write_flo",
]
