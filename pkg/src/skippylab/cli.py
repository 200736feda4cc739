"""Command line entry point: generate, run, verify, constants."""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness, io


def _load_config(args):
    if args.config:
        cfg = harness.RunConfig.load(args.config)
    else:
        cfg = harness.RunConfig(harness.InstanceSpec(generator=args.instance, params=_params(args)))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.mode is not None:
        cfg.mode = args.mode
    if args.opt1 is not None:
        cfg.opt1 = args.opt1
    return cfg


def _params(args):
    return json.loads(args.params) if getattr(args, "params", None) else {}


def cmd_generate(args):
    spec = harness.InstanceSpec(generator=args.instance, params=_params(args))
    mdp, features, meta = harness.generate_instance(spec)
    os.makedirs(args.out or ".", exist_ok=True)
    base = os.path.join(args.out or ".", spec.name)
    io.save(base + ".json", mdp, features)
    with open(base + ".meta.json", "w") as fh:
        json.dump(harness.strip_enumeration(meta), fh, indent=1)
    print(f"wrote {base}.json  eta_hat={meta['eta_hat']}")
    return 0


def cmd_run(args):
    cfg = _load_config(args)
    rows = harness.run_experiment(cfg)
    sys.stdout.write(harness.table_text(harness.SUMMARY_HEADER, rows))
    return 0


def cmd_verify(args):
    from . import verify
    ok = verify.run_all(seed=args.seed or 0, quick=args.quick)
    return 0 if ok else 1


def cmd_constants(args):
    from .geometry import compute_constants
    overrides = json.loads(args.overrides) if args.overrides else None
    c = compute_constants(args.d, args.H, args.eps, args.zeta, args.L1, args.L2,
                          mode=args.mode or "theory", overrides=overrides)
    print(c.report())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="skippylab")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config JSON (schema skippylab.run v1)")
        sp.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
        sp.add_argument("--out", default=None, help="output directory (default runs)")
        sp.add_argument("--mode", choices=["theory", "practical"], default=None,
                        help="constant set (default practical for run, theory for constants)")
        sp.add_argument("--opt1", choices=["search", "oracle"], default=None,
                        help="optimistic estimation solver (default search)")

    g = sub.add_parser("generate", help="write an instance and its metadata")
    common(g)
    g.add_argument("instance", help="generator name")
    g.add_argument("--params", help="generator parameters as JSON")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run the learner")
    common(r)
    r.add_argument("--instance", default="two_path", help="generator when no config is given")
    r.add_argument("--params", help="generator parameters as JSON")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("verify", help="run the oracle suites")
    common(v)
    v.add_argument("--quick", action="store_true", help="smaller trial counts")
    v.set_defaults(fn=cmd_verify)

    c = sub.add_parser("constants", help="print a constant set")
    common(c)
    c.add_argument("--d", type=int, default=2)
    c.add_argument("--H", type=int, default=5)
    c.add_argument("--eps", type=float, default=0.1)
    c.add_argument("--zeta", type=float, default=0.1)
    c.add_argument("--L1", type=float, default=1.0)
    c.add_argument("--L2", type=float, default=1.0)
    c.add_argument("--overrides", help="practical-mode overrides as JSON")
    c.set_defaults(fn=cmd_constants)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
