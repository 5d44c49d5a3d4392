"""Command line entry point: ``crosslayer {train,eval,ablate,export-gates,gradcheck}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import CrossLayerError, NoDataError
from .harness.checkpoint import load_checkpoint, save_checkpoint
from .harness.config import RunConfig


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.apply_overrides(args.set).validate()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (section.key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def cmd_train(args) -> int:
    from .harness.trainer import train

    cfg = _config(args)
    result = train(cfg, stream=sys.stdout)
    if args.out:
        save_checkpoint(result.checkpoint, args.out)
        print(f"saved best checkpoint (step {result.checkpoint.step}) to {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .harness.gates import export_gates
    from .harness.trainer import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config.apply_overrides(args.set)
    start = cfg.train.test_seed_start if args.seed_start is None else args.seed_start
    for kind in args.task:
        res = evaluate(ckpt, cfg, kind, args.samples, start)
        print(f"task={kind} accuracy={res.accuracy:.4f} n={res.n_samples}")
        if args.gates and res.trace is not None:
            path = Path(args.gates.format(task=kind))
            export_gates(res.trace, path, args.aggregation)
            print(f"gates written to {path}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .harness.ablation import run_ablation

    report = run_ablation(_config(args), args.sweep, args.seeds, eval_samples=args.samples)
    print(report.format())
    return 0


def cmd_export_gates(args) -> int:
    from .harness.gates import export_gates
    from .harness.trainer import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    start = ckpt.config.train.test_seed_start if args.seed_start is None else args.seed_start
    res = evaluate(ckpt, None, args.task, args.samples, start)
    if res.trace is None:
        raise NoDataError("checkpoint has no gated injection points (mode is not cli/single_k with agf)")
    n = export_gates(res.trace, args.out, args.aggregation)
    print(f"{n} rows written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check, perturb_parameters, sample_coordinates
    from .harness.trainer import build_model
    from .losses import cross_entropy_loss
    from .synth import TASK_KINDS, make_batch

    cfg = _config(args)
    cfg.train.precision = "float64"
    model = build_model(cfg)
    if args.perturb:
        # move off the zero-initialised adapters so every parameter has a generic gradient
        perturb_parameters(model, args.perturb, cfg.train.seed)
    kinds = [TASK_KINDS[i % 3] for i in range(args.batch)]
    batch = make_batch(range(args.batch), kinds, cfg.model.vocab)
    n_vis = cfg.model.num_visual_tokens

    def loss_fn():
        logits = model(batch.patches, batch.text)
        return cross_entropy_loss(logits[:, n_vis:], batch.targets, batch.answer_mask)

    params = dict(model.named_parameters())
    groups = {g: [n for n in names if params[n].requires_grad] for g, names in model.parameter_groups().items()}
    coords = sample_coordinates(params, args.coords, {g: n for g, n in groups.items() if n}, seed=cfg.train.seed)
    report = grad_check(params, loss_fn, coords, args.epsilon, args.tolerance)
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosslayer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration and stream metrics")
    _add_config_args(p)
    p.add_argument("--out", help="where to save the best checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out seeds")
    p.add_argument("checkpoint")
    p.add_argument("--task", action="append", choices=["detail", "semantic", "compositional"])
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--seed-start", type=int)
    p.add_argument("--gates", help="also export gates; may contain {task}")
    p.add_argument("--aggregation", choices=["mean", "raw"], default="mean")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a component or density sweep")
    _add_config_args(p)
    p.add_argument("--sweep", choices=["components", "density"], default="components")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--samples", type=int, default=2048)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-gates", help="write gate weights of an eval pass as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["detail", "semantic", "compositional"], default="detail")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed-start", type=int)
    p.add_argument("--aggregation", choices=["mean", "raw"], default="mean")
    p.set_defaults(func=cmd_export_gates)

    p = sub.add_parser("gradcheck", help="compare autograd against central differences")
    _add_config_args(p)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--perturb", type=float, default=0.3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "task", None) is None and args.command == "eval":
        args.task = ["detail", "semantic", "compositional"]
    try:
        return args.func(args)
    except CrossLayerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
