"""Command-line entry point: ``tgnn field|simulate|run|eval|transfer``.

Every command that writes files writes them under ``--out`` together with a
``manifest.json`` listing each artifact. Exit codes:

    0  success
    1  unexpected internal error
    2  usage or spec error
    3  numeric failure (solver, root finding, non-finite training loss)
    4  I/O failure
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .groundtruth import SolverError, load_solution, save_solution, simulate
from .kle import ConductivityField, RootFindingError
from .net import load_checkpoint
from .scenarios import (
    ScenarioSpec,
    SpecError,
    StageError,
    build_field,
    build_problem,
    load_spec,
    metrics_from_predictions,
    run_ensemble,
    run_scenario,
)
from .training import TrainingError

EXIT_OK, EXIT_INTERNAL, EXIT_SPEC, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"

log = logging.getLogger("tgnn")


@dataclass
class RunManifest:
    command: str
    out_dir: str
    spec_path: str | None = None
    spec_sha256: str | None = None
    tool_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None
    stages: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    @property
    def run_id(self) -> str:
        h = hashlib.sha256(f"{self.command}|{self.spec_sha256}|{self.started!r}".encode()).hexdigest()
        return f"{time.strftime('%Y%m%dT%H%M%S', time.gmtime(self.started))}-{h[:8]}"

    def add(self, paths) -> None:
        root = Path(self.out_dir)
        for p in paths:
            rel = str(Path(p).relative_to(root))
            if rel not in self.artifacts:
                self.artifacts.append(rel)

    def write(self) -> Path:
        rec = {"run_id": self.run_id, **{k: v for k, v in self.__dict__.items()}}
        path = Path(self.out_dir) / MANIFEST
        path.write_text(json.dumps(rec, indent=2, sort_keys=True))
        return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def exit_code_for(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, SpecError):
        return EXIT_SPEC
    if isinstance(cause, (SolverError, RootFindingError, TrainingError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(cause, OSError):
        return EXIT_IO
    if isinstance(cause, ValueError):
        return EXIT_SPEC
    return EXIT_INTERNAL


def _read_spec(args) -> tuple[ScenarioSpec, str | None]:
    if args.spec is None:
        spec = ScenarioSpec()
        digest = None
    else:
        spec = load_spec(args.spec)
        digest = file_sha256(args.spec)
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, field_seed=args.seed, ensemble_seeds=())
    return spec, digest


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _managed(command: str, args, body) -> int:
    """Run ``body(spec, out, manifest)`` with the manifest written whatever happens."""
    try:
        spec, digest = _read_spec(args)
    except (SpecError, ValueError) as e:
        print(f"tgnn {command}: spec error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except OSError as e:
        print(f"tgnn {command}: cannot read spec: {e}", file=sys.stderr)
        return EXIT_IO
    if getattr(args, "dry_run", False):
        print(f"spec ok: kind={spec.kind} name={spec.name} field_seed={spec.field_seed}"
              + (f" ensemble={len(spec.ensemble_seeds)}" if spec.ensemble_seeds else ""))
        return EXIT_OK
    try:
        out = _out_dir(args)
    except OSError as e:
        print(f"tgnn {command}: cannot create output directory: {e}", file=sys.stderr)
        return EXIT_IO
    manifest = RunManifest(command, str(out), None if args.spec is None else str(Path(args.spec).resolve()), digest)
    code = EXIT_OK
    try:
        body(spec, out, manifest)
        manifest.status = "ok"
    except Exception as e:  # noqa: BLE001 - mapped to an exit code and recorded in the manifest
        code = exit_code_for(e)
        stage = e.stage if isinstance(e, StageError) else command
        manifest.stages[stage] = "failed"
        manifest.status = "failed"
        manifest.error = f"[{stage}] {e}"
        print(f"tgnn {command}: [{stage}] {e}", file=sys.stderr)
    finally:
        manifest.finished = time.time()
        try:
            manifest.write()
        except OSError as e:
            print(f"tgnn {command}: cannot write manifest: {e}", file=sys.stderr)
            code = code or EXIT_IO
    return code


# ---------------------------------------------------------------- commands

def cmd_field(args) -> int:
    def body(spec, out, manifest):
        fld = build_field(spec)
        path = out / "field.txt"
        fld.save(path, spec.grid)
        manifest.stages["field"] = "ok"
        manifest.add([path])
        print(f"wrote {path}: {fld.basis.n_terms} terms, seed {fld.seed}, "
              f"captured variance fraction {fld.basis.captured_variance_fraction():.4f}")

    return _managed("field", args, body)


def cmd_simulate(args) -> int:
    def body(spec, out, manifest):
        try:
            fld = ConductivityField.load(args.field)
        except FileNotFoundError:
            raise FileNotFoundError(f"field file not found: {args.field}") from None
        problem = build_problem(spec, fld)
        try:
            sol = simulate(problem)
        except SolverError as e:
            raise StageError("simulate", e) from e
        manifest.stages["simulate"] = "ok"
        manifest.add(save_solution(sol, problem, out))
        mb = sol.mass_balance
        print(f"simulated {sol.n_steps} steps; mass-balance residual max {mb.max():.3e} mean {mb.mean():.3e}")

    return _managed("simulate", args, body)


def _report_line(tag, rep) -> str:
    return f"  {tag:<12} relative L2 {rep.relative_l2:.4e}  R2 {rep.r2:.5f}  ({rep.wall_time:.1f}s)"


def cmd_run(args) -> int:
    def body(spec, out, manifest):
        if len(spec.ensemble_seeds) >= 2:
            ens = run_ensemble(spec, out_dir=out, parallel=args.parallel)
            for seed, st in ens.status.items():
                manifest.stages[f"realization:{seed}"] = "ok" if st == "ok" else "failed"
            manifest.add(p for r in ens.results.values() for p in r.artifacts)
            manifest.add([out / "ensemble.json"])
            for model, s in ens.stats().items():
                print(f"  {model:<12} mean L2 {s['relative_l2_mean']:.4e} (var {s['relative_l2_var']:.2e})  "
                      f"mean R2 {s['r2_mean']:.5f}")
            if any(st != "ok" for st in ens.status.values()):
                failed = [s for s, st in ens.status.items() if st != "ok"]
                raise StageError("ensemble", TrainingError(f"realizations failed: {failed}"))
        else:
            res = run_scenario(spec, out)
            manifest.stages.update({f"model:{k}": "ok" for k in res.reports})
            manifest.add(res.artifacts)
            print(f"scenario {spec.name} ({spec.kind}), field seed {spec.field_seed}")
            for tag, rep in res.reports.items():
                print(_report_line(tag, rep))

    return _managed("run", args, body)


def cmd_transfer(args) -> int:
    def body(spec, out, manifest):
        if spec.kind != "transfer":
            raise SpecError(f"kind: transfer command needs kind = transfer, got {spec.kind}")
        try:
            pre = load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}") from None
        res = run_scenario(spec, out, pretrained=pre)
        manifest.stages.update({f"model:{k}": "ok" for k in res.reports})
        manifest.add(res.artifacts)
        for tag, rep in res.reports.items():
            print(_report_line(tag, rep))

    return _managed("transfer", args, body)


def cmd_eval(args) -> int:
    try:
        paths = [Path(p) for p in args.predictions]
        if args.out:
            paths += sorted(Path(args.out).glob("predictions_*.csv"))
        if not paths:
            print("tgnn eval: no prediction files given", file=sys.stderr)
            return EXIT_SPEC
        rec = {}
        for p in paths:
            rep = metrics_from_predictions(p, model=p.stem.removeprefix("predictions_"))
            rec[rep.model] = rep.metrics()
    except OSError as e:
        print(f"tgnn eval: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"tgnn eval: malformed prediction file: {e}", file=sys.stderr)
        return EXIT_SPEC
    print(json.dumps(rec, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgnn", description="Theory-guided neural networks for 2-D transient groundwater flow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def spec_arg(q, required=False):
        q.add_argument("--spec", required=required, help="scenario spec file (key = value lines)")

    q = sub.add_parser("field", help="generate a conductivity realization")
    spec_arg(q)
    q.add_argument("--seed", type=int, help="seed of the random coordinates (overrides field_seed)")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--dry-run", action="store_true", help="validate the spec and exit")
    q.set_defaults(func=cmd_field)

    q = sub.add_parser("simulate", help="finite-difference reference heads for a field file")
    spec_arg(q)
    q.add_argument("--field", required=True, help="field file written by 'tgnn field'")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--dry-run", action="store_true", help="validate the spec and exit")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("run", help="run a scenario (or an ensemble when the spec lists ensemble_seeds)")
    spec_arg(q, required=True)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int, help="run a single realization with this field seed")
    q.add_argument("--parallel", type=int, default=1, help="ensemble worker processes (default 1)")
    q.add_argument("--dry-run", action="store_true", help="validate the spec and exit")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("eval", help="recompute metrics from stored prediction CSVs")
    q.add_argument("predictions", nargs="*", help="prediction CSV files")
    q.add_argument("--out", help="run directory whose predictions_*.csv are evaluated")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("transfer", help="run the transfer protocol from a pretrained checkpoint")
    spec_arg(q, required=True)
    q.add_argument("--checkpoint", required=True, help="pretrained network checkpoint")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--dry-run", action="store_true", help="validate the spec and exit")
    q.set_defaults(func=cmd_transfer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "parallel", 1) < 1:
        parser.error("--parallel must be >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
