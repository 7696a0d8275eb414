"""Dense rewrite of a strided network, receptive fields, and parameter transfer.

Rewriting from a pooling layer sets its stride to 1 and keeps going down the
network: every later strided conv or pool is also set to stride 1, and each
conv/pool from that point on has its tap spacing (est) and padding
multiplied by the product of the strides removed so far.  The rewritten
network demands exactly the same parameters as the original.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError, PlanError
from .network import IGNORE, NetworkSpec, check_params, infer_shapes, param_shapes


@dataclass(frozen=True)
class LayerAssignment:
    stride: int
    est: int
    pad: int


@dataclass(frozen=True)
class DensifyPlan:
    """What :func:`densify` changed.

    ``accumulated_est[l]`` is the est in force when layer ``l`` runs;
    ``accumulated_est[-1]`` is the value after the last layer.
    ``assignments[l]`` is the new (stride, est, pad) of conv/pool layer
    ``l`` and None for relu/gap.
    """

    from_pool: int
    assignments: tuple
    accumulated_est: tuple
    converted: tuple

    @property
    def grid_stride(self):
        return self.accumulated_est[-1]


def densify(net, from_pool):
    """Rewrite ``net`` for dense output starting at pooling layer ``from_pool``.

    ``from_pool`` may be a layer index or a layer name.
    """
    if isinstance(from_pool, str):
        try:
            from_pool = net.index_of(from_pool)
        except KeyError:
            raise PlanError(f"no layer named {from_pool!r}") from None
    if not 0 <= from_pool < len(net.layers):
        raise PlanError(f"layer index {from_pool} out of range")
    start = net.layers[from_pool]
    if start.kind != "pool":
        raise PlanError(f"layer {start.name} is a {start.kind}, not a pool")
    if start.pool.stride <= 1:
        raise PlanError(f"pool {start.name} already has stride 1")

    acc = 1
    acc_trace = []
    assignments = []
    converted = []
    new_layers = []
    for i, layer in enumerate(net.layers):
        acc_trace.append(acc)
        if layer.kind not in ("conv", "pool"):
            assignments.append(None)
            new_layers.append(layer)
            continue
        g = layer.geometry
        if i < from_pool:
            assignments.append(LayerAssignment(g.stride, g.est, g.pad))
            new_layers.append(layer)
            continue
        new_g = replace(g, stride=1, est=g.est * acc, pad=g.pad * acc)
        if g.stride > 1:
            converted.append(i)
            acc *= g.stride
        assignments.append(LayerAssignment(new_g.stride, new_g.est, new_g.pad))
        new_layers.append(replace(layer, **{layer.kind: new_g}))
    acc_trace.append(acc)
    dense = NetworkSpec(net.input_dims, tuple(new_layers))
    plan = DensifyPlan(from_pool, tuple(assignments), tuple(acc_trace), tuple(converted))
    return dense, plan


@dataclass(frozen=True)
class RFReport:
    """Receptive field of one layer's output grid, per axis ``(rows, cols)``.

    Output ``(i, j)`` sees input rows ``offset[0] + i * step[0]`` through
    ``offset[0] + i * step[0] + size[0] - 1``; offsets go negative when the
    field starts in the padding.
    """

    size: tuple
    step: tuple
    offset: tuple
    grid: tuple

    def field(self, i, j):
        top = self.offset[0] + i * self.step[0]
        left = self.offset[1] + j * self.step[1]
        return top, left, top + self.size[0] - 1, left + self.size[1] - 1

    def center(self, i, j):
        top, left, _, _ = self.field(i, j)
        return top + (self.size[0] - 1) // 2, left + (self.size[1] - 1) // 2


def receptive_field(net, layer=None):
    """Receptive field of the output of ``layer`` (index; default the last one)."""
    if layer is None:
        layer = len(net.layers) - 1
    if layer < 0:
        layer += len(net.layers)
    shapes = infer_shapes(net)
    size = [1, 1]
    step = [1, 1]
    offset = [0, 0]
    grid = net.input_dims[:2]
    for idx in range(layer + 1):
        spec = net.layers[idx]
        if spec.kind in ("conv", "pool"):
            g = spec.geometry
            for axis, k in enumerate((g.kernel_h, g.kernel_w)):
                offset[axis] -= g.pad * step[axis]
                size[axis] += (k - 1) * g.est * step[axis]
                step[axis] *= g.stride
        elif spec.kind == "gap":
            for axis in range(2):
                size[axis] += (grid[axis] - 1) * step[axis]
                step[axis] *= grid[axis]
        grid = shapes[idx][:2]
    return RFReport(tuple(size), tuple(step), tuple(offset), tuple(grid))


def interior_mask(net, layer=None):
    """Boolean (H', W') map of outputs whose field lies inside the unpadded input."""
    rf = receptive_field(net, layer)
    h, w = net.input_dims[:2]
    tops = rf.offset[0] + np.arange(rf.grid[0]) * rf.step[0]
    lefts = rf.offset[1] + np.arange(rf.grid[1]) * rf.step[1]
    rows_ok = (tops >= 0) & (tops + rf.size[0] - 1 <= h - 1)
    cols_ok = (lefts >= 0) & (lefts + rf.size[1] - 1 <= w - 1)
    return rows_ok[:, None] & cols_ok[None, :]


def valid_output_count(net):
    return int(interior_mask(net).sum())


def label_alignment(net):
    """Input pixel each output position is labelled from.

    Returns an int array ``(H', W', 2)`` of (row, col) field centres, with
    ``-1`` in both slots where the field leaves the image.  Works for the
    original and the densified network alike.
    """
    rf = receptive_field(net)
    rows = rf.offset[0] + np.arange(rf.grid[0]) * rf.step[0] + (rf.size[0] - 1) // 2
    cols = rf.offset[1] + np.arange(rf.grid[1]) * rf.step[1] + (rf.size[1] - 1) // 2
    out = np.empty(rf.grid + (2,), dtype=np.int64)
    out[:, :, 0] = rows[:, None]
    out[:, :, 1] = cols[None, :]
    out[~interior_mask(net)] = IGNORE
    return out


def aligned_labels(net, labels):
    """Sample a full-resolution (H, W) label map at each output's field centre."""
    align = label_alignment(net)
    ok = align[:, :, 0] != IGNORE
    out = np.full(align.shape[:2], IGNORE, dtype=np.int64)
    out[ok] = labels[align[ok, 0], align[ok, 1]]
    return out


def _copy_checked(params, net, direction):
    try:
        check_params(net, params)
    except ParameterError as exc:
        raise ParameterError(f"{direction}: {exc}") from None
    return {key: params[key].copy() for key in param_shapes(net)}


def init_dense_params(original_params, dense_net):
    """Initialise the dense network with the original network's parameters."""
    return _copy_checked(original_params, dense_net, "original -> dense")


def dpoa_transfer(dense_params, original_net):
    """Put parameters learned in the dense network back into the original one."""
    return _copy_checked(dense_params, original_net, "dense -> original")
