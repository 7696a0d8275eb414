"""Independent checks on the dense rewrite.

* :func:`check_equivalence` compares the dense output on the stride grid
  against the original output.
* :func:`fragments_forward` rebuilds the dense output by running the original
  strided layers on every phase-shifted fragment and interleaving the results.
* :func:`grad_check` compares back-propagated gradients with central
  differences.
* :func:`dependency_support` (brute-force tap walk) and
  :func:`gradient_support` (backward pass on an all-ones surrogate) find the
  input pixels an output depends on; both check the receptive-field
  recurrence.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from .densify import densify, interior_mask, receptive_field
from .errors import (
    ConsistencyError,
    CoverageError,
    RangeError,
    ShapeError,
    TieError,
    UnsupportedError,
)
from .network import (
    LayerSpec,
    NetworkSpec,
    backward,
    conv,
    forward,
    infer_shapes,
    loss_forward,
    param_shapes,
    pool,
    relu,
)
from .tensor import tensor_rand_uniform


@dataclass(frozen=True)
class EquivalenceReport:
    grid_stride: int
    positions_compared: int
    max_abs_diff: float
    bit_exact: bool
    passed: bool

    def line(self):
        return (
            f"equiv S={self.grid_stride} pos={self.positions_compared} "
            f"maxdiff={self.max_abs_diff!r} exact={int(self.bit_exact)} pass={int(self.passed)}"
        )


def _before_gap(net):
    for i, layer in enumerate(net.layers):
        if layer.kind == "gap":
            return NetworkSpec(net.input_dims, net.layers[:i])
    return net


def check_equivalence(original, dense, plan, params, x, tolerance=0.0, fast=False,
                      dense_params=None):
    """Compare dense outputs on the stride grid with the original outputs.

    Both networks run on ``params`` unless ``dense_params`` is given.  Only
    positions whose receptive field lies inside the unpadded input are
    compared.  A trailing global average pool is cut off first, since it
    averages over different position sets in the two networks.
    """
    original = _before_gap(original)
    dense = _before_gap(dense)
    out_o, _ = forward(original, params_subset(original, params), x, fast=fast)
    if dense_params is None:
        dense_params = params
    out_d, _ = forward(dense, params_subset(dense, dense_params), x, fast=fast)
    rf_o = receptive_field(original)
    rf_d = receptive_field(dense)
    s = plan.grid_stride
    if rf_o.size != rf_d.size or any(
        so != sd * s for so, sd in zip(rf_o.step, rf_d.step)
    ):
        raise ConsistencyError(
            f"dense field (size {rf_d.size}, step {rf_d.step}) does not match the original "
            f"(size {rf_o.size}, step {rf_o.step}) at grid stride {s}"
        )
    idx = []
    for axis in range(2):
        shift = rf_o.offset[axis] - rf_d.offset[axis]
        if shift % rf_d.step[axis]:
            raise ConsistencyError("original and dense grids are not aligned")
        idx.append(shift // rf_d.step[axis] + np.arange(rf_o.grid[axis]) * s)
    rows, cols = idx
    keep = interior_mask(original)
    keep &= ((rows >= 0) & (rows < out_d.shape[0]))[:, None]
    keep &= ((cols >= 0) & (cols < out_d.shape[1]))[None, :]
    n = int(keep.sum())
    if n == 0:
        raise CoverageError("no interior positions to compare; use a larger input")
    a, b = np.nonzero(keep)
    sub = out_d[rows[a], cols[b], :]
    ref = out_o[a, b, :]
    diff = float(np.abs(sub - ref).max())
    exact = bool(np.array_equal(sub, ref))
    return EquivalenceReport(s, n, diff, exact, diff <= tolerance)


def params_subset(net, params):
    return {key: params[key] for key in param_shapes(net) if key in params}


def subsample_dense(out_d, grid_stride, count):
    """Dense output on the stride grid (pad-free networks), shaped like the original."""
    return out_d[: grid_stride * (count[0] - 1) + 1 : grid_stride,
                 : grid_stride * (count[1] - 1) + 1 : grid_stride, :]


def _first_strided_pool(net):
    for i, layer in enumerate(net.layers):
        if layer.kind == "pool" and layer.pool.stride > 1:
            return i
    raise UnsupportedError("network has no strided pooling layer")


def fragment_count(net, from_pool=None):
    if from_pool is None:
        from_pool = _first_strided_pool(net)
    n = 1
    for layer in net.layers[from_pool:]:
        if layer.kind in ("conv", "pool"):
            n *= layer.geometry.stride ** 2
    return n


def _apply(layer, params, x, pad=None):
    if layer.kind == "relu":
        return L.relu_forward(x)
    if layer.kind == "gap":
        raise UnsupportedError("fragments are not defined through global pooling")
    g = layer.geometry
    if pad is not None:
        g = replace(g, pad=pad)
    if layer.kind == "conv":
        return L.conv_forward(x, params[f"{layer.name}.weight"],
                              params.get(f"{layer.name}.bias"), g)
    return L.pool_forward(x, g)[0]


def fragments_forward(original, params, x, from_pool=None):
    """Dense-equivalent output of ``original`` built from phase-shifted fragments.

    Every stride-2 conv/pool at or after ``from_pool`` splits each fragment
    into four, one per (row, col) phase.  The returned tensor has the dense
    network's output dims; positions no fragment reaches are NaN.
    """
    if from_pool is None:
        from_pool = _first_strided_pool(original)
    dense, _ = densify(original, from_pool)
    out_dims = infer_shapes(dense)[-1]
    for layer in original.layers[:from_pool]:
        x = _apply(layer, params, x)
    frags = [(x, 0, 0)]
    spacing = 1
    for layer in original.layers[from_pool:]:
        stride = layer.geometry.stride if layer.kind in ("conv", "pool") else 1
        new = []
        if stride == 1:
            for t, pr, pc in frags:
                try:
                    new.append((_apply(layer, params, t), pr, pc))
                except ShapeError:
                    pass
        elif stride == 2:
            p = layer.geometry.pad
            fill = -np.inf if layer.kind == "pool" else 0.0
            for t, pr, pc in frags:
                tp = np.pad(t, ((p, p), (p, p), (0, 0)), constant_values=fill) if p else t
                for a in range(2):
                    for b in range(2):
                        try:
                            out = _apply(layer, params, tp[a:, b:, :], pad=0)
                        except ShapeError:
                            continue
                        new.append((out, pr + a * spacing, pc + b * spacing))
            spacing *= 2
        else:
            raise UnsupportedError(f"fragments only handle stride 2, layer {layer.name} has {stride}")
        frags = new
    result = np.full(out_dims, np.nan)
    for t, pr, pc in frags:
        h = min(t.shape[0], (out_dims[0] - pr + spacing - 1) // spacing)
        w = min(t.shape[1], (out_dims[1] - pc + spacing - 1) // spacing)
        if h > 0 and w > 0:
            result[pr : pr + spacing * (h - 1) + 1 : spacing,
                   pc : pc + spacing * (w - 1) + 1 : spacing, :] = t[:h, :w, :]
    return result


def tie_margin(net, params, x):
    """Smallest nonzero gap between the two largest taps of any pool window,
    or smallest |value| entering a ReLU, whichever is less."""
    margin = np.inf
    for layer, inp in zip(net.layers, forward(net, params, x)[1].inputs):
        if layer.kind == "relu":
            mags = np.abs(inp)
            margin = min(margin, float(mags[mags > 0].min(initial=np.inf)))
        elif layer.kind == "pool":
            g = layer.pool
            out_h, out_w, _ = L.pool_output_dims(inp.shape, g)
            xp = np.pad(inp, ((g.pad, g.pad), (g.pad, g.pad), (0, 0)), constant_values=-np.inf)
            taps = []
            for a in range(g.kernel_h):
                for b in range(g.kernel_w):
                    rows, cols = L._tap_slices(a, b, g.est, g.stride, out_h, out_w)
                    taps.append(xp[rows, cols, :])
            if len(taps) < 2:
                continue
            top2 = np.sort(np.stack(taps), axis=0)[-2:]
            gaps = top2[1] - top2[0]
            # exact duplicates (clamped ReLU zeros, one source seen by two
            # overlapping windows) move together under perturbation
            gaps = gaps[np.isfinite(gaps) & (gaps > 0)]
            margin = min(margin, float(gaps.min(initial=np.inf)))
    return margin


def _activation_pattern(net, cache):
    pattern = []
    for layer, inp in zip(net.layers, cache.inputs):
        if layer.kind == "relu":
            pattern.append(inp > 0)
        elif layer.kind == "pool":
            am = cache.argmax[layer.name]
            pattern.extend((am.rows, am.cols))
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


class _KinkCrossed(Exception):
    pass


def _max_rel_error(net, params, x, labels, loss_kind, eps, coords, floor):
    out, cache = forward(net, params, x)
    _, g_out = loss_forward(out, labels, loss_kind)
    grads, _ = backward(net, params, cache, g_out)
    base = _activation_pattern(net, cache)

    def loss_at(p):
        out, c = forward(net, p, x)
        if not _same_pattern(base, _activation_pattern(net, c)):
            raise _KinkCrossed
        return loss_forward(out, labels, loss_kind)[0]

    worst = 0.0
    work = {key: v.copy() for key, v in params.items()}
    for key, k in coords:
        flat = work[key].reshape(-1)
        orig = flat[k]
        flat[k] = orig + eps
        plus = loss_at(work)
        flat[k] = orig - eps
        minus = loss_at(work)
        flat[k] = orig
        num = (plus - minus) / (2 * eps)
        ana = float(grads[key].reshape(-1)[k])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def grad_check(net, params, x, labels, loss_kind, eps=1e-5, rng=None,
               max_coords=200, margin=None, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  The input is redrawn
    from ``rng`` (uniform in [-1, 1), up to five times) when a pool window or
    ReLU input sits within ``margin`` (default ``10 * eps``) of a kink, or
    when a perturbed evaluation flips a ReLU or moves a pool argmax.
    """
    if not eps > 0:
        raise RangeError(f"finite-difference step must be positive, got {eps}")
    if margin is None:
        margin = 10 * eps
    coords = [(key, k) for key, shape in param_shapes(net).items()
              for k in range(int(np.prod(shape)))]
    if len(coords) > max_coords:
        if rng is None:
            raise RangeError(f"{len(coords)} coordinates exceed max_coords; pass an rng")
        coords = [coords[i] for i in sorted(rng.permutation(len(coords))[:max_coords])]
    for attempt in range(6):
        if attempt:
            if rng is None:
                raise TieError("input sits near a kink and there is no rng to redraw it")
            x = tensor_rand_uniform(x.shape, rng, -1.0, 1.0)
        if tie_margin(net, params, x) < margin:
            continue
        try:
            return _max_rel_error(net, params, x, labels, loss_kind, eps, coords, floor)
        except _KinkCrossed:
            continue
    raise TieError("near-ties persist after 5 regenerations")


def dependency_support(net, i, j, layer=None):
    """Input pixels that output ``(i, j)`` of ``layer`` structurally depends on.

    Brute force: walk backwards from one output element, marking every tap
    of every conv/pool window that lands inside the unpadded input.  Returns
    a boolean (H, W) mask.
    """
    if layer is None:
        layer = len(net.layers) - 1
    shapes = [net.input_dims] + infer_shapes(net)
    marked = {(i, j)}
    for idx in range(layer, -1, -1):
        spec = net.layers[idx]
        in_h, in_w = shapes[idx][:2]
        if spec.kind == "relu":
            continue
        if spec.kind == "gap":
            marked = {(r, c) for r in range(in_h) for c in range(in_w)}
            continue
        g = spec.geometry
        prev = set()
        for r, c in marked:
            for a in range(g.kernel_h):
                rr = r * g.stride + a * g.est - g.pad
                if not 0 <= rr < in_h:
                    continue
                for b in range(g.kernel_w):
                    cc = c * g.stride + b * g.est - g.pad
                    if 0 <= cc < in_w:
                        prev.add((rr, cc))
        marked = prev
    mask = np.zeros(net.input_dims[:2], dtype=bool)
    for r, c in marked:
        mask[r, c] = True
    return mask


def gradient_support(net, i, j, layer=None):
    """Input pixels with a nonzero gradient from output ``(i, j)`` of ``layer``.

    Runs the engine's own backward pass on a surrogate network: every conv
    and pool becomes an all-ones, bias-free conv with the same geometry and
    ReLUs are dropped, so no product can vanish and no max can route the
    gradient away.  Returns a boolean (H, W) mask.
    """
    if layer is None:
        layer = len(net.layers) - 1
    layers, params = [], {}
    for spec in net.layers[: layer + 1]:
        if spec.kind == "relu":
            continue
        if spec.kind == "gap":
            layers.append(spec)
            continue
        g = spec.geometry
        sc = L.ConvSpec(g.kernel_h, g.kernel_w, 1, 1, g.stride, g.pad, g.est, has_bias=False)
        layers.append(LayerSpec(spec.name, "conv", conv=sc))
        params[f"{spec.name}.weight"] = np.ones(sc.weight_dims)
    surrogate = NetworkSpec(net.input_dims[:2] + (1,), tuple(layers))
    out, cache = forward(surrogate, params, np.ones(surrogate.input_dims))
    seed = np.zeros_like(out)
    seed[i, j, 0] = 1.0
    _, g_in = backward(surrogate, params, cache, seed)
    return g_in[:, :, 0] > 0


def bounding_box(mask):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def random_network(rng, input_size, convs=(2, 4), pools=(1, 2), channels=(1, 3),
                   out_channels=None, relu_prob=0.5, pad=False, densify_check=True):
    """Draw a valid conv/pool network from a small family.

    Convs are 1x1 to 3x3 with stride 1; pools are 2x2 or 3x3 with stride 2.
    The first layer is always a conv; a ReLU may follow any conv but the
    last, whose outputs serve as logits.  Draws repeat until the network and its
    dense rewrite (from the first pool) infer shapes and have an interior
    output.
    """
    for _ in range(1000):
        n_conv = rng.randint(*convs)
        n_pool = rng.randint(*pools)
        slots = sorted(rng.randint(0, n_conv - 1) for _ in range(n_pool))
        layers = []
        ch = rng.randint(*channels)
        in_ch = ch
        for ci in range(n_conv):
            k = rng.randint(1, 3)
            last = ci == n_conv - 1
            out = out_channels if (last and out_channels) else rng.randint(*channels)
            p = rng.randint(0, k // 2) if pad else 0
            layers.append(conv(f"c{ci}", k, in_ch, out, pad=p, bias=rng.random() < 0.8))
            in_ch = out
            if rng.random() < relu_prob and not last:
                layers.append(relu(f"r{ci}"))
            for pi, slot in enumerate(slots):
                if slot == ci:
                    k_pool = rng.randint(2, 3)
                    p = rng.randint(0, 1) if pad and k_pool == 3 else 0
                    layers.append(pool(f"p{ci}_{pi}", k_pool, 2, pad=p))
        net = NetworkSpec((input_size, input_size, ch), tuple(layers))
        try:
            infer_shapes(net)
            if not interior_mask(net).any():
                continue
            if densify_check:
                dense, _ = densify(net, _first_strided_pool(net))
                infer_shapes(dense)
        except ShapeError:
            continue
        return net
    raise RuntimeError("could not draw a valid network")
