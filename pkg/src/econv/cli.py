"""Command-line interface and the network text format.

Network files are line oriented; ``#`` starts a comment::

    input 48 48 1
    conv c1 k=3x3 out=8 stride=1 pad=0
    relu r1
    pool p1 k=2x2 stride=2 pad=0
    conv c2 k=3x3 out=16 stride=1 pad=0 est=2 bias=1
    gap g

Exit codes: 0 success, 1 failed verification, 2 usage or input error.
"""

import argparse
import json
import sys

import numpy as np

from . import densify as D
from . import network as N
from . import synthdata as S
from .errors import ConsistencyError, EngineError, ParseError
from .layers import ConvSpec, PoolSpec
from .tensor import Rng, tensor_rand_uniform
from .train import evaluate, train
from .verify import check_equivalence

_REQUIRED = {"conv": ("k", "out", "stride", "pad"), "pool": ("k", "stride", "pad")}
_OPTIONAL = {"conv": ("est", "bias"), "pool": ("est",)}


def _int(value, key, lineno):
    try:
        return int(value)
    except ValueError:
        raise ParseError(lineno, f"{key}={value!r} is not an integer") from None


def _kernel(value, lineno):
    parts = value.split("x")
    if len(parts) != 2:
        raise ParseError(lineno, f"kernel must look like HxW, got {value!r}")
    return _int(parts[0], "k", lineno), _int(parts[1], "k", lineno)


def parse_net(text):
    input_dims = None
    layers = []
    names = set()
    channels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        directive = words[0]
        if directive == "input":
            if input_dims is not None:
                raise ParseError(lineno, "input given more than once")
            if layers:
                raise ParseError(lineno, "input must come before any layer")
            if len(words) != 4:
                raise ParseError(lineno, "expected: input H W C")
            input_dims = tuple(_int(w, "input", lineno) for w in words[1:])
            if min(input_dims) < 1:
                raise ParseError(lineno, "input dims must be positive")
            channels = input_dims[2]
            continue
        if directive not in N.KINDS:
            raise ParseError(lineno, f"unknown directive {directive!r}")
        if input_dims is None:
            raise ParseError(lineno, "missing input line before the first layer")
        if len(words) < 2:
            raise ParseError(lineno, f"{directive} needs a layer name")
        name = words[1]
        if name in names or "=" in name:
            raise ParseError(lineno, f"bad or duplicate layer name {name!r}")
        names.add(name)
        fields = {}
        for item in words[2:]:
            key, sep, value = item.partition("=")
            allowed = _REQUIRED.get(directive, ()) + _OPTIONAL.get(directive, ())
            if not sep or key not in allowed:
                raise ParseError(lineno, f"unexpected field {item!r} for {directive}")
            if key in fields:
                raise ParseError(lineno, f"field {key} given twice")
            fields[key] = value
        missing = [k for k in _REQUIRED.get(directive, ()) if k not in fields]
        if missing:
            raise ParseError(lineno, f"{directive} {name} is missing {', '.join(missing)}")
        try:
            if directive == "conv":
                kh, kw = _kernel(fields["k"], lineno)
                out = _int(fields["out"], "out", lineno)
                bias = _int(fields.get("bias", "1"), "bias", lineno)
                if bias not in (0, 1):
                    raise ParseError(lineno, "bias must be 0 or 1")
                spec = ConvSpec(kh, kw, channels, out,
                                _int(fields["stride"], "stride", lineno),
                                _int(fields["pad"], "pad", lineno),
                                _int(fields.get("est", "1"), "est", lineno), bool(bias))
                layers.append(N.LayerSpec(name, "conv", conv=spec))
                channels = out
            elif directive == "pool":
                kh, kw = _kernel(fields["k"], lineno)
                spec = PoolSpec(kh, kw, _int(fields["stride"], "stride", lineno),
                                _int(fields["pad"], "pad", lineno),
                                _int(fields.get("est", "1"), "est", lineno))
                layers.append(N.LayerSpec(name, "pool", pool=spec))
            else:
                layers.append(N.LayerSpec(name, directive))
        except ParseError:
            raise
        except EngineError as exc:
            raise ParseError(lineno, str(exc)) from None
    if input_dims is None:
        raise ParseError(0, "missing input line")
    return N.NetworkSpec(input_dims, tuple(layers))


def render_net(net):
    lines = ["input {} {} {}".format(*net.input_dims)]
    for layer in net.layers:
        if layer.kind == "conv":
            c = layer.conv
            lines.append(
                f"conv {layer.name} k={c.kernel_h}x{c.kernel_w} out={c.out_channels} "
                f"stride={c.stride} pad={c.pad} est={c.est} bias={int(c.has_bias)}"
            )
        elif layer.kind == "pool":
            p = layer.pool
            lines.append(
                f"pool {layer.name} k={p.kernel_h}x{p.kernel_w} stride={p.stride} "
                f"pad={p.pad} est={p.est}"
            )
        else:
            lines.append(f"{layer.kind} {layer.name}")
    return "\n".join(lines) + "\n"


def load_net(path):
    with open(path, encoding="utf-8") as fh:
        return parse_net(fh.read())


class VerificationFailed(Exception):
    pass


def cmd_rf(args):
    net = load_net(args.net)
    for i, layer in enumerate(net.layers):
        rf = D.receptive_field(net, i)
        print(f"layer={layer.name} size={rf.size[0]}x{rf.size[1]} "
              f"step={rf.step[0]}x{rf.step[1]} offset={rf.offset[0]}x{rf.offset[1]} "
              f"grid={rf.grid[0]}x{rf.grid[1]}")


def cmd_densify(args):
    net = load_net(args.net)
    dense, plan = D.densify(net, args.from_pool)
    N.infer_shapes(dense)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(render_net(dense))
    print(f"grid_stride={plan.grid_stride} converted="
          + ",".join(net.layers[i].name for i in plan.converted))


def recover_plan(original, dense):
    """The plan for rewriting ``original`` from the first pool ``dense`` made stride 1.

    ``dense`` only has to share layer names, kinds, kernel sizes and
    parameter shapes with ``original``; whether its strides, spacings and
    padding are right is what verification decides.
    """
    if len(original.layers) != len(dense.layers) or N.param_shapes(original) != N.param_shapes(dense):
        raise EngineError("the dense network does not have the original network's layers")
    start = None
    for i, (a, b) in enumerate(zip(original.layers, dense.layers)):
        if (a.name, a.kind) != (b.name, b.kind):
            raise EngineError(f"layer {i + 1}: {a.kind} {a.name} vs {b.kind} {b.name}")
        if a.kind in ("conv", "pool"):
            ga, gb = a.geometry, b.geometry
            if (ga.kernel_h, ga.kernel_w) != (gb.kernel_h, gb.kernel_w):
                raise EngineError(f"layer {a.name}: kernel sizes differ")
            if start is None and a.kind == "pool" and ga.stride > 1 and gb.stride == 1:
                start = i
    if start is None:
        raise EngineError("the dense network has no pool whose stride was set to 1")
    return D.densify(original, start)[1]


def cmd_verify(args):
    original = load_net(args.net)
    dense = load_net(args.dense)
    plan = recover_plan(original, dense)
    dims = (args.input_size, args.input_size, original.input_dims[2])
    original, dense = original.with_input(dims), dense.with_input(dims)
    params = N.load_params(args.params)
    x = tensor_rand_uniform(dims, Rng(args.seed), -1.0, 1.0)
    try:
        report = check_equivalence(original, dense, plan, params, x, args.tolerance, fast=args.fast)
    except ConsistencyError as exc:
        print(f"equiv S={plan.grid_stride} mismatch: {exc}")
        raise VerificationFailed(str(exc)) from None
    print(report.line())
    if not report.passed:
        raise VerificationFailed(report.line())


def cmd_init(args):
    net = load_net(args.net)
    N.save_params(args.output, N.init_params(net, Rng(args.seed)))


_LOSSES = {"pixel": N.PIXEL_CE, "global": N.GLOBAL_CE}


def cmd_train(args):
    net = load_net(args.net)
    samples = S.load_dataset(args.data)
    if not samples:
        raise EngineError(f"no samples in {args.data}")
    rng = Rng(args.seed)
    params = N.load_params(args.init) if args.init else N.init_params(net, rng)
    N.check_params(net, params)

    def log(epoch, loss):
        print(f"epoch={epoch} loss={loss!r}", flush=True)

    params, _ = train(net, params, samples, args.epochs, args.lr, rng,
                      loss_kind=_LOSSES[args.loss], batch_size=args.batch_size,
                      fast=args.fast, log=log)
    N.save_params(args.output, params)


def cmd_eval(args):
    net = load_net(args.net)
    params = N.load_params(args.params)
    samples = S.load_dataset(args.data)
    if not samples:
        raise EngineError(f"no samples in {args.data}")
    acc, miou = evaluate(net, params, samples, args.num_classes)
    print(f"pixel_accuracy={acc!r} mean_iou={miou!r}")


def cmd_transfer(args):
    original = load_net(args.original)
    dense_params = N.load_params(args.dense_params)
    N.save_params(args.output, D.dpoa_transfer(dense_params, original))


def cmd_gen(args):
    settings = {"image_size": 48, "num_classes": 3, "min_shapes": 1, "max_shapes": 3,
                "noise": 0.1}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise EngineError(f"{args.config}: {exc}") from None
        unknown = set(loaded) - set(settings)
        if unknown:
            raise EngineError(f"{args.config}: unknown keys {sorted(unknown)}")
        settings.update(loaded)
    for key in settings:
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    cfg = S.SynthConfig(int(settings["image_size"]), int(settings["num_classes"]),
                        (int(settings["min_shapes"]), int(settings["max_shapes"])),
                        float(settings["noise"]), args.seed)
    S.save_dataset(S.gen_dataset(cfg, args.count), args.output)


def build_parser():
    parser = argparse.ArgumentParser(prog="econv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rf", help="receptive field of every layer")
    p.add_argument("net")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("densify", help="rewrite a network for dense output")
    p.add_argument("net")
    p.add_argument("--from-pool", required=True, help="name of the first pool to convert")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("verify", help="check dense/original equivalence")
    p.add_argument("net")
    p.add_argument("dense")
    p.add_argument("params")
    p.add_argument("--input-size", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--fast", action="store_true", help="use the im2col kernels")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("init", help="random parameters for a network")
    p.add_argument("net")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="SGD training on a data directory")
    p.add_argument("net")
    p.add_argument("data")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--loss", choices=sorted(_LOSSES), default="pixel")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--init", help="start from this parameter file")
    p.add_argument("--fast", action="store_true", help="use the im2col kernels")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pixel accuracy and mean IoU")
    p.add_argument("net")
    p.add_argument("params")
    p.add_argument("data")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="dense parameters into the original network")
    p.add_argument("dense_params")
    p.add_argument("original")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("output")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON object with any of the settings below")
    p.add_argument("--image-size", type=int, help="default 48")
    p.add_argument("--num-classes", type=int, help="default 3")
    p.add_argument("--min-shapes", type=int, help="default 1")
    p.add_argument("--max-shapes", type=int, help="default 3")
    p.add_argument("--noise", type=float, help="noise sigma, default 0.1")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except VerificationFailed:
        return 1
    except (EngineError, OSError) as exc:
        print(f"econv {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
