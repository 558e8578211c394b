"""Command line entry point ``isoneural``.

Set ``ISONEURAL_NUM_THREADS`` to cap the number of CPU threads used by torch.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_case, load_run_config
from .geometry import load_geometry
from .io import export_field, load_reference, relative_l2
from .topology import conformity_check, detect_interfaces

log = logging.getLogger("isoneural")

THREADS_ENV = "ISONEURAL_NUM_THREADS"


def _set_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def _phi(text: str | None):
    if text is None:
        return None
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --phi value {text!r}; expected e.g. -1,1") from None


def _load_case(args):
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None or getattr(args, "epochs", None) is not None:
        cfg = cfg.with_overrides(seed=getattr(args, "seed", None), epochs=getattr(args, "epochs", None))
    return build_case(cfg)


def _eval_phi(case, args):
    phi = _phi(getattr(args, "phi", None))
    if phi is None and case.ansatz.n_phi:
        phi = np.asarray(case.config.evaluation.get("phi", [0.0] * case.ansatz.n_phi), dtype=float)
    if phi is not None and phi.size != case.ansatz.n_phi:
        raise ConfigError(f"--phi needs {case.ansatz.n_phi} value(s)")
    return phi


def _reference(case):
    ev = case.config.evaluation
    if ev.get("reference"):
        return load_reference(ev["reference"], case.model)
    return case.exact


def _error_report(case, theta, phi) -> list[tuple[str, float]]:
    ref = _reference(case)
    if ref is None:
        return []
    ev = case.config.evaluation
    kw = {"mode": ev.get("mode", "grid"), "n_points": int(ev.get("n_points", 75000))}
    if "mesh_resolution" in ev:
        kw["mesh_resolution"] = int(ev["mesh_resolution"])
    rows = [("all", relative_l2(case.ansatz, ref, phi=phi, theta=theta, **kw))]
    for pid in case.model.patch_ids:
        try:
            rows.append((f"patch {pid}", relative_l2(case.ansatz, ref, region=pid, phi=phi, theta=theta, **kw)))
        except ValueError:
            rows.append((f"patch {pid}", float("nan")))
    return rows


# -- subcommands ---------------------------------------------------------------------------

def cmd_check_geometry(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        model = load_geometry(cfg.geometry)
        topo_opts = cfg.topology
    else:
        model = load_geometry(args.geometry)
        topo_opts = {}
    topo = detect_interfaces(model, geo_tol=topo_opts.get("geo_tol"),
                             subentities=args.subentities or topo_opts.get("subentities", "all"))
    print(f"model {model.name or '(unnamed)'}: {len(model.patches)} patches, dimension {model.dim}")
    print(f"{'entity':<22}{'patches':<14}{'dim':>4}  {'on_dirichlet':<13}{'point err':>11}{'tangent err':>13}  ok")
    ok = True
    for e in topo.entities:
        rep = conformity_check(model, e, n_samples=args.samples)
        ok &= rep.passed
        print(f"{e.name:<22}{str(e.multi_index):<14}{e.q:>4}  {str(e.on_dirichlet):<13}"
              f"{rep.max_point_mismatch:>11.2e}{rep.max_tangent_mismatch:>13.2e}  {'yes' if rep.passed else 'NO'}")
    for pid in model.patch_ids:
        print(f"J({pid}) = {{{', '.join(str(m) for m in topo.J[pid])}}}")
    print("conformity: " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_describe_ansatz(args) -> int:
    case = _load_case(args)
    print(case.ansatz.describe())
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainState, load_checkpoint, train

    case = _load_case(args)
    cfg = case.config.training
    state = None
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if args.resume:
        if ckpt is None:
            raise ConfigError("--resume needs --checkpoint")
        state = load_checkpoint(ckpt, case.ansatz)
    phi = _eval_phi(case, args)
    ref = _reference(case)
    hook = None
    if ref is not None:
        ev = case.config.evaluation
        kw = {"mode": ev.get("mode", "grid"), "n_points": int(ev.get("n_points", 75000))}

        def hook(epoch, st):
            return relative_l2(case.ansatz, ref, phi=phi, theta=st.theta, **kw)

    state = train(case.model, case.topology, case.ansatz, case.problem, cfg, state=state or
                  TrainState.fresh(case.ansatz.theta0), hook=hook, checkpoint_dir=ckpt,
                  checkpoint_every=args.checkpoint_every)
    first, last = state.history[0], state.history[-1]
    print(f"trained {case.config.name}: epochs {first['epoch']}..{last['epoch']}, "
          f"loss {first['loss']:.6e} -> {last['loss']:.6e}")
    errs = [h for h in state.history if "error" in h]
    if errs:
        print(f"relative L2 error at epoch {errs[-1]['epoch']}: {errs[-1]['error']:.4e}")
    if ckpt is not None:
        print(f"checkpoint written to {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    from .trainer import load_checkpoint

    case = _load_case(args)
    state = load_checkpoint(args.checkpoint, case.ansatz)
    phi = _eval_phi(case, args)
    rows = _error_report(case, state.theta, phi)
    if rows:
        print("relative L2 error" + (f" at phi={phi.tolist()}" if phi is not None else ""))
        for label, v in rows:
            print(f"  {label:<10} {v:.4e}")
    if hasattr(case.problem, "max_penetration") and case.problem.contact_facets:
        print(f"max penetration depth: {case.problem.max_penetration(case.ansatz, phi, state.theta):.4e}")
    if state.history:
        print(f"final training loss: {state.history[-1]['loss']:.6e} (epoch {state.history[-1]['epoch']})")
    return 0


def cmd_export_field(args) -> int:
    from .trainer import load_checkpoint

    case = _load_case(args)
    theta = load_checkpoint(args.checkpoint, case.ansatz).theta if args.checkpoint else None
    phi = _eval_phi(case, args)
    exp = export_field(case.ansatz, args.resolution, args.out, phi=phi, theta=theta)
    print(f"wrote {len(exp.files)} patch file(s) and manifest.json to {exp.directory}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isoneural", description="Multi-patch isogeometric neural solver")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("check-geometry", help="detect interfaces and check conformity")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="run configuration file")
    g.add_argument("--geometry", help="geometry JSON file")
    s.add_argument("--subentities", choices=("all", "shared"))
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(func=cmd_check_geometry)

    s = sub.add_parser("describe-ansatz", help="list every ansatz term and its parameters")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_describe_ansatz)

    s = sub.add_parser("train", help="train and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="checkpoint directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--phi", help="load vector used for error evaluation, e.g. -1,1")
    s.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="report errors of a trained checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--phi")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-field", help="write per-patch CSV grids of the trained field")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--resolution", type=int, default=50)
    s.add_argument("--phi")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_export_field)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
