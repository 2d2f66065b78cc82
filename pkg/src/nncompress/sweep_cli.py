"""Command-line front end: compress, decompress, size reports, toy training,
evaluation and the compression sweeps.

Every sweep row is produced by :func:`run_point`, which only calls library
functions, so a CSV value can be recomputed from Python with the same seeds.
"""

from __future__ import annotations

import argparse
import enum
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import codec, eval_metrics, model_store, nn_engine
from .codec import CompressionPlan, LayerPlan
from .errors import CompressionError, EmptyInput, InvariantViolation
from .model_store import LayerKind

CONV_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5")
FC_NAMES = ("fc6", "fc7")
TOY_FC = ("fc1", "fc2")
TOY_CONV = ("conv1",)

CSV_HEADER = (
    "plan_id",
    "target",
    "cf_nominal",
    "cf_effective",
    "payload_mib",
    "toy_cf_nominal",
    "toy_accuracy",
    "accuracy_delta",
)

FINAL_FC_KEEP = 32 / 102


class Target(enum.Enum):
    FC = "fc"
    CONV = "conv"
    BOTH = "both"

    def layer_names(self, shapes) -> list[str]:
        if self is Target.BOTH:
            return [s.name for s in shapes]
        kind = LayerKind.FC if self is Target.FC else LayerKind.CONV
        return [s.name for s in shapes if s.kind is kind]


@dataclass(frozen=True)
class GridPoint:
    """One sweep setting: a plan over the reference shapes and its toy analogue."""

    plan_id: str
    plan: CompressionPlan
    toy_plan: CompressionPlan


@dataclass(frozen=True)
class SweepSpec:
    target: Target
    grid: tuple[GridPoint, ...]
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if not self.grid:
            raise EmptyInput("sweep grid is empty")
        ids = [p.plan_id for p in self.grid]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("sweep plan ids must be unique")
        for p in self.grid:
            if "," in p.plan_id or not p.plan_id:
                raise InvariantViolation(f"bad plan id {p.plan_id!r}")

    @classmethod
    def from_json(cls, text: str, seed: int = 0, out: str | None = None) -> "SweepSpec":
        """``{"target": "fc", "points": [{"id", "plan", "toy_plan"}, ...]}``"""
        raw = json.loads(text)
        points = []
        for entry in raw.get("points", []):
            plan = CompressionPlan.from_json(json.dumps(entry.get("plan", {})))
            toy = CompressionPlan.from_json(json.dumps(entry.get("toy_plan", {})))
            points.append(GridPoint(str(entry["id"]), plan, toy))
        return cls(Target(raw.get("target", "both")), tuple(points), seed, out)


def _plan(entries) -> CompressionPlan:
    return CompressionPlan(entries)


def _same(names, lp: LayerPlan) -> CompressionPlan:
    return _plan({n: lp for n in names})


def table_conv_plan() -> CompressionPlan:
    """Final conv settings: conv1 at 9 bits, the rest 8 bits, conv3/conv4 also pruned by 2."""
    return _plan(
        {
            "conv1": LayerPlan(9),
            "conv2": LayerPlan(8),
            "conv3": LayerPlan(8, 2),
            "conv4": LayerPlan(8, 2),
            "conv5": LayerPlan(8),
        }
    )


def final_plan() -> CompressionPlan:
    plan = table_conv_plan()
    plan.update(_same(FC_NAMES, LayerPlan(1, 1 / FINAL_FC_KEEP)))
    return plan


CONV_QUANT_BITS = (9, 8, 6, 5, 4, 3)
CONV_PRUNE_VECTORS = ((1, 2, 2, 2), (2, 2, 2, 4), (2, 2, 4, 4))
FC_QUANT_BITS = (4, 3, 2, 1)
FC_PRUNE_FACTORS = (2, 4, 8, 16, 32)


def _fc_point(pid: str, lp: LayerPlan) -> GridPoint:
    return GridPoint(pid, _same(FC_NAMES, lp), _same(TOY_FC, lp))


def _grid_fc_quant():
    return Target.FC, [_fc_point(f"fc-q{b}", LayerPlan(b)) for b in FC_QUANT_BITS]


def _grid_fc_prune():
    return Target.FC, [_fc_point(f"fc-p{f}", LayerPlan(None, f)) for f in FC_PRUNE_FACTORS]


def _grid_fc_combined():
    return Target.FC, [
        _fc_point("fc-keep32of102-q1", LayerPlan(1, 1 / FINAL_FC_KEEP)),
        _fc_point("fc-p3-q1", LayerPlan(1, 3)),
        _fc_point("fc-p2-q2", LayerPlan(2, 2)),
        _fc_point("fc-p4-q2", LayerPlan(2, 4)),
    ]


def _grid_conv_quant():
    points = []
    for b in CONV_QUANT_BITS:
        plan = _plan({"conv1": LayerPlan(9), **{n: LayerPlan(b) for n in CONV_NAMES[1:]}})
        points.append(GridPoint(f"conv-q{b}", plan, _same(TOY_CONV, LayerPlan(b))))
    return Target.CONV, points


def _grid_conv_prune():
    # conv1 stays raw; the toy's single conv layer is pruned at the factor the
    # vector achieves over all reference conv layers
    shapes = model_store.alexnet_reference_shapes()
    points = []
    for vec in CONV_PRUNE_VECTORS:
        plan = _plan({n: LayerPlan(None, f) for n, f in zip(CONV_NAMES[1:], vec) if f > 1})
        cf = codec.size_report(shapes, plan).subtotal(CONV_NAMES).cf_nominal
        pid = "conv-p" + "-".join(str(f) for f in vec)
        points.append(GridPoint(pid, plan, _same(TOY_CONV, LayerPlan(None, cf))))
    return Target.CONV, points


def _grid_final():
    fc = LayerPlan(1, 1 / FINAL_FC_KEEP)
    toy = _plan({"conv1": LayerPlan(8), **{n: fc for n in TOY_FC}})
    return Target.BOTH, [GridPoint("final", final_plan(), toy)]


BUILTIN_GRIDS = {
    "fc-quant": _grid_fc_quant,
    "fc-prune": _grid_fc_prune,
    "fc-combined": _grid_fc_combined,
    "conv-quant": _grid_conv_quant,
    "conv-prune": _grid_conv_prune,
    "final": _grid_final,
}


def builtin_spec(name: str, seed: int = 0, out: str | None = None) -> SweepSpec:
    if name not in BUILTIN_GRIDS:
        raise InvariantViolation(f"unknown grid {name!r}; choose from {', '.join(BUILTIN_GRIDS)}")
    target, points = BUILTIN_GRIDS[name]()
    return SweepSpec(target, tuple(points), seed, out)


# -- sweep execution -------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    plan_id: str
    target: Target
    cf_nominal: float
    cf_effective: float
    payload_mib: float
    toy_cf_nominal: float
    toy_accuracy: float
    accuracy_delta: float

    def csv(self) -> str:
        vals = (
            self.cf_nominal,
            self.cf_effective,
            self.payload_mib,
            self.toy_cf_nominal,
            self.toy_accuracy,
            self.accuracy_delta,
        )
        return ",".join([self.plan_id, self.target.value] + [repr(float(v)) for v in vals])


@dataclass
class ToyContext:
    """A trained toy model and its data, shared read-only by all grid points."""

    dataset: nn_engine.ToyDataset
    model: model_store.Model
    seed: int
    baseline: float = field(init=False)

    def __post_init__(self):
        self.baseline = nn_engine.accuracy(self.model, self.dataset)

    @classmethod
    def train(cls, seed: int = 0) -> "ToyContext":
        data = nn_engine.make_toy_dataset(seed)
        return cls(data, nn_engine.train_toy(data, seed=seed), seed)


def run_point(point: GridPoint, target: Target, toy: ToyContext, shapes=None) -> SweepRow:
    shapes = shapes if shapes is not None else model_store.alexnet_reference_shapes()
    report = codec.size_report(shapes, point.plan)
    sub = report.subtotal(target.layer_names(shapes), point.plan_id)
    point.toy_plan.check_layers(toy.model.names)
    cm = codec.compress_model(toy.model, point.toy_plan, toy.seed)
    toy_names = target.layer_names(toy.model.headers())
    toy_cf = codec.measure(cm).subtotal(toy_names).cf_nominal
    acc = nn_engine.accuracy(codec.decompress_model(cm), toy.dataset)
    return SweepRow(point.plan_id, target, sub.cf_nominal, sub.cf_effective, sub.payload_mib, toy_cf, acc, toy.baseline - acc)


def run_sweep(spec: SweepSpec, toy: ToyContext | None = None, jobs: int = 1) -> list[SweepRow]:
    """Rows in grid order, whatever order the points finish in."""
    toy = toy or ToyContext.train(spec.seed)
    if jobs <= 1:
        return [run_point(p, spec.target, toy) for p in spec.grid]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: run_point(p, spec.target, toy), spec.grid))


def format_csv(rows) -> str:
    return "\n".join([",".join(CSV_HEADER)] + [r.csv() for r in rows]) + "\n"


# -- command plumbing --------------------------------------------------------------


class CliError(Exception):
    pass


def _write_atomic(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, so a failure leaves nothing behind."""
    path = Path(path)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        # mkstemp creates 0600 files; give the result the usual umask mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _load_plan(path) -> CompressionPlan:
    return CompressionPlan.load(path) if path else CompressionPlan()


def _load_any_model(args) -> model_store.Model:
    if args.reference_random:
        return model_store.random_model(model_store.alexnet_reference_shapes(), args.seed)
    if not args.model:
        raise CliError("give --model or --reference-random")
    return model_store.load_model(args.model)


def cmd_compress(args) -> int:
    if not args.out:
        raise CliError("compress needs --out")
    model = _load_any_model(args)
    plan = _load_plan(args.plan)
    plan.check_layers(model.names)
    cm = codec.compress_model(model, plan, args.seed, workers=args.jobs)
    _write_atomic(args.out, codec.write_compressed(cm))
    print(codec.measure(cm).format_table())
    return 0


def cmd_decompress(args) -> int:
    if not (args.model and args.out):
        raise CliError("decompress needs --model <file.nnc> and --out <file.nnw>")
    cm = codec.load_compressed(args.model)
    _write_atomic(args.out, model_store.write_model(codec.decompress_model(cm)))
    print(f"wrote {len(cm)} layers to {args.out}")
    return 0


def cmd_size_report(args) -> int:
    shapes = model_store.load_model(args.model).headers() if args.model else model_store.alexnet_reference_shapes()
    report = codec.size_report(shapes, _load_plan(args.plan))
    print(report.format_table())
    if args.out:
        cols = "layer,n_weights,n_kept,original_mib,stored_original_mib,payload_mib,codebook_bytes,map_bytes,cf_nominal,cf_effective"
        lines = [cols]
        for r in (*report.layers, report.total):
            lines.append(
                ",".join(
                    [r.name, str(r.n_weights), str(r.n_kept)]
                    + [repr(v) for v in (r.original_mib, r.stored_original_mib, r.payload_mib)]
                    + [str(r.codebook_bytes), str(r.map_bytes), repr(r.cf_nominal), repr(r.cf_effective)]
                )
            )
        _write_atomic(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_sweep(args) -> int:
    if bool(args.grid) == bool(args.spec):
        raise CliError("sweep needs exactly one of --grid <name> or --spec <file.json>")
    if args.grid:
        spec = builtin_spec(args.grid, args.seed, args.out)
    else:
        spec = SweepSpec.from_json(Path(args.spec).read_text(encoding="utf-8"), args.seed, args.out)
    toy = None
    if args.model:
        toy = ToyContext(nn_engine.make_toy_dataset(args.seed), model_store.load_model(args.model), args.seed)
    text = format_csv(run_sweep(spec, toy, args.jobs))
    if args.out:
        _write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train_toy(args) -> int:
    if not args.out:
        raise CliError("train-toy needs --out")
    data = nn_engine.make_toy_dataset(args.seed, args.samples)
    model = nn_engine.train_toy(data, epochs=args.epochs, lr=args.lr, seed=args.seed)
    _write_atomic(args.out, model_store.write_model(model))
    print(f"seed {args.seed}: test accuracy {nn_engine.accuracy(model, data):.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.detections or args.ground_truth:
        if not (args.detections and args.ground_truth):
            raise CliError("eval needs both --detections and --ground-truth")
        dets = eval_metrics.read_boxes(args.detections)
        gts = eval_metrics.read_boxes(args.ground_truth)
        curve, value = eval_metrics.evaluate(dets, gts, args.iou)
        if args.out:
            _write_atomic(args.out, "fppi,miss_rate\n" + "".join(f"{f!r},{m!r}\n" for f, m in curve.points))
        print(f"LAMR {value:.6f} over {len(curve)} curve points")
        return 0
    if not args.model:
        raise CliError("eval needs --detections/--ground-truth or --model <toy.nnw>")
    model = model_store.load_model(args.model)
    data = nn_engine.make_toy_dataset(args.seed)
    plan = _load_plan(args.plan)
    plan.check_layers(model.names)
    base = nn_engine.accuracy(model, data)
    delta = eval_metrics.accuracy_delta(model, plan, data, args.seed)
    print(f"accuracy {base:.4f}  compressed {base - delta:.4f}  delta {delta:+.4f}")
    return 0


COMMANDS = {
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "size-report": cmd_size_report,
    "sweep": cmd_sweep,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--out", help="output file")
    common.add_argument("--plan", help="JSON plan: layer name -> {bits, prune_factor | keep_fraction, order}")
    common.add_argument("--model", help="input model (.nnw, or .nnc for decompress)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")

    parser = argparse.ArgumentParser(prog="nncompress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", parents=[common], help="compress an NNW model into an NNC file")
    p.add_argument("--reference-random", action="store_true", help="use random weights in the AlexNet reference shapes")
    sub.add_parser("decompress", parents=[common], help="decode an NNC file back to NNW")
    sub.add_parser("size-report", parents=[common], help="storage table of a plan (AlexNet shapes unless --model)")

    p = sub.add_parser("sweep", parents=[common], help="run a compression grid, emit CSV")
    p.add_argument("--grid", help=f"builtin grid: {', '.join(BUILTIN_GRIDS)}")
    p.add_argument("--spec", help="JSON sweep spec instead of a builtin grid")

    p = sub.add_parser("train-toy", parents=[common], help="train the toy CNN, save it as NNW")
    p.add_argument("--epochs", type=int, default=nn_engine.DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=nn_engine.DEFAULT_LR)
    p.add_argument("--samples", type=int, default=nn_engine.DEFAULT_SAMPLES)

    p = sub.add_parser("eval", parents=[common], help="LAMR of a detection file, or toy accuracy under a plan")
    p.add_argument("--detections", help="text file: frame_id x y w h score")
    p.add_argument("--ground-truth", help="text file: frame_id x y w h")
    p.add_argument("--iou", type=float, default=eval_metrics.IOU_THRESHOLD)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.reference_random = getattr(args, "reference_random", False)
    try:
        return COMMANDS[args.command](args)
    except (CompressionError, CliError, OSError, json.JSONDecodeError, KeyError) as exc:
        name = type(exc).__name__
        print(f"nncompress {args.command}: {name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
