"""Batch command-line interface.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure. Progress is
written to stderr as `iter=<k> dG=<v> dL=<v>` lines; errors are emitted as
one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import persistence, pipeline
from .errors import (
    ConvergenceError,
    DesignError,
    FormatError,
    GeometryError,
    HcicaError,
    NumericalError,
    RankError,
    SchemaError,
    TableParseError,
)
from .inference import ContrastSpec, VolumeMap, contrast_test, subpopulation_map

DATA_ERRORS = (FormatError, GeometryError, TableParseError, DesignError, SchemaError, FileNotFoundError)
NUMERICAL_ERRORS = (RankError, ConvergenceError, NumericalError)

# defaults a config file may override even though argparse already filled them
RUN_DEFAULTS = {
    "maxit": 100,
    "epsilon1": 1e-4,
    "epsilon2": 1e-3,
    "mog_components": 2,
    "seed": 0,
    "threads": 0,
}


def _progress_line(record):
    print(
        f"iter={record['iteration']} dG={record['delta_global']:.6g} dL={record['delta_local']:.6g}",
        file=sys.stderr,
        flush=True,
    )


def _config_values(path):
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        values = yaml.safe_load(text)
    else:
        values = json.loads(text)
    return {str(k).replace("-", "_").replace("numberOfPCs", "number_of_pcs"): v for k, v in values.items()}


def _float_list(text):
    return [float(x) for x in text.split(",")]


def build_parser():
    parser = argparse.ArgumentParser(prog="hcica", description="Hierarchical covariate-adjusted ICA")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full batch analysis")
    run.add_argument("--datadir")
    run.add_argument("--outdir")
    run.add_argument("--q", type=int, help="number of independent components")
    run.add_argument("--N", type=int, help="number of subjects")
    run.add_argument("--numberOfPCs", dest="number_of_pcs", type=int)
    run.add_argument("--maskf")
    run.add_argument("--covf")
    run.add_argument("--prefix")
    run.add_argument("--maxit", type=int, default=100)
    run.add_argument("--epsilon1", type=float, default=1e-4, help="global convergence threshold")
    run.add_argument("--epsilon2", type=float, default=1e-3, help="local convergence threshold")
    run.add_argument("--mog-components", dest="mog_components", type=int, default=2)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--threads", type=int, default=0, help="worker cap (0 = library default)")
    run.add_argument("--config", default=None, help="YAML/JSON file providing any of the flags")

    for name in ("contrast", "subpop", "export", "resume", "serve"):
        p = sub.add_parser(name)
        p.add_argument("--analysis", required=True, help="analysis directory (<outdir>/<prefix>)")
        if name == "contrast":
            p.add_argument("--lambda", dest="lam", required=True, type=_float_list)
            p.add_argument("--variance-mode", default="plug-in", choices=["plug-in", "empirical"])
        elif name == "subpop":
            p.add_argument("--x", dest="x_star", required=True, type=_float_list)
        elif name == "resume":
            p.add_argument("--maxit", type=int, default=100)
            p.add_argument("--epsilon1", type=float, default=1e-4)
            p.add_argument("--epsilon2", type=float, default=1e-3)
        elif name == "serve":
            p.add_argument("--port", type=int, default=8000)
            p.add_argument("--host", default="127.0.0.1")
    return parser


def cmd_run(args):
    if args.q > args.number_of_pcs:
        raise HcicaError(f"q={args.q} must be <= numberOfPCs={args.number_of_pcs}")
    if args.threads:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            print("threadpoolctl not installed; --threads ignored", file=sys.stderr)
    state, fitted, outpath = pipeline.run_analysis(
        args.datadir,
        args.outdir,
        args.q,
        args.N,
        args.number_of_pcs,
        args.maskf,
        args.covf,
        args.prefix,
        args.maxit,
        args.epsilon1,
        args.epsilon2,
        m=args.mog_components,
        seed=args.seed,
        progress_sink=_progress_line,
    )
    print(f"terminated: {state.termination} after {state.iteration} iterations")
    print(f"outputs in {outpath}")
    return 0


def _store(args):
    return pipeline.AnalysisStore(args.analysis)


def cmd_contrast(args):
    store = _store(args)
    fitted = store.fitted()
    spec = ContrastSpec(coefficients=np.asarray(args.lam), name="cli")
    result = contrast_test(fitted, spec, variance_mode=args.variance_mode)
    header = store.reference_header()
    prefix = store.runinfo.prefix
    for l in range(fitted.params.q):
        persistence.write_map_nifti(
            VolumeMap(result.z[:, l], "z", l, "contrast"),
            store.mask,
            header,
            Path(args.analysis) / persistence.map_filename(prefix, "contrastZ", l + 1),
        )
    print(f"wrote {fitted.params.q} contrast z maps to {args.analysis}")
    return 0


def cmd_subpop(args):
    store = _store(args)
    fitted = store.fitted()
    maps = subpopulation_map(fitted, np.asarray(args.x_star))
    header = store.reference_header()
    prefix = store.runinfo.prefix
    for vmap in maps:
        persistence.write_map_nifti(
            vmap,
            store.mask,
            header,
            Path(args.analysis) / persistence.map_filename(prefix, "subpop", vmap.ic + 1),
        )
    print(f"wrote {len(maps)} sub-population maps to {args.analysis}")
    return 0


def cmd_export(args):
    store = _store(args)
    fitted = store.fitted()
    pipeline.export_default_maps(
        fitted, store.mask, store.reference_header(), args.analysis, store.runinfo.prefix
    )
    print(f"re-exported default maps to {args.analysis}")
    return 0


def cmd_resume(args):
    store = _store(args)
    state, fitted = store.resume(
        args.maxit, args.epsilon1, args.epsilon2, progress_sink=_progress_line
    )
    pipeline.export_default_maps(
        fitted, store.mask, store.reference_header(), args.analysis, store.runinfo.prefix
    )
    print(f"terminated: {state.termination} after {state.iteration} total iterations")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(args.analysis)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


COMMANDS = {
    "run": cmd_run,
    "contrast": cmd_contrast,
    "subpop": cmd_subpop,
    "export": cmd_export,
    "resume": cmd_resume,
    "serve": cmd_serve,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # config file supplies defaults; explicit command-line flags win
        for key, value in _config_values(args.config).items():
            if getattr(args, key, None) in (None,) or (
                key in RUN_DEFAULTS and getattr(args, key) == RUN_DEFAULTS[key]
            ):
                setattr(args, key, value)
    if args.command == "run":
        missing = [f for f in ("datadir", "outdir", "q", "N", "number_of_pcs", "maskf", "covf", "prefix") if getattr(args, f) is None]
        if missing:
            parser.error(f"missing required options for run: {', '.join(missing)}")
    try:
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 4
    except DATA_ERRORS + (HcicaError,) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
