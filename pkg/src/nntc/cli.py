"""Command-line interface: ``nntc <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input (bad flags, malformed
files, failed validation) and 2 when a run fails at runtime.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import fileio
from .inner_solver import InnerConfig
from .outer_solver import SolverConfig, reconstruct, solve
from .tensor_core import SparseTensor, project_omega

log = logging.getLogger("nntc")

DEFAULT_RANK_3 = (10, 10, 5)


class UsageError(Exception):
    """Invalid command-line input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def _solver_flags(p: argparse.ArgumentParser) -> None:
    d = SolverConfig(rank=(1, 1))
    di = d.inner
    p.add_argument("--rank", type=_ints, default=None,
                   help=f"solver rank r_1,...,r_K (default {DEFAULT_RANK_3} for order 3)")
    p.add_argument("--lambda", dest="lam", type=_floats, default=None,
                   help="weights lam_1,...,lam_K (default 1/K each)")
    p.add_argument("--C", dest="c", type=float, default=d.c, help=f"data-fit weight (default {d.c})")
    p.add_argument("--tau", type=float, default=d.tau, help=f"gradient-norm tolerance (default {d.tau})")
    p.add_argument("--max-iters", type=int, default=d.max_outer_iters)
    p.add_argument("--inner-cg-tol", type=float, default=di.cg_tol)
    p.add_argument("--inner-nnls-tol", type=float, default=di.nnls_tol)
    p.add_argument("--alternations", type=int, default=di.alternations)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nntc", description="Nonnegative low-rank tensor completion.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("complete", help="complete a partially observed tensor")
    p.add_argument("--input", default="truth.nntc", help="observed tensor (default truth.nntc)")
    p.add_argument("--mask", help="observation mask (.nntc); default: support of a sparse input, "
                                  "else mask.nntc if present")
    p.add_argument("--fraction", type=float, help="sample the mask from a dense input instead")
    p.add_argument("--truth", help="ground truth for held-out RMSE in the report")
    p.add_argument("--seed", type=int, default=0)
    _solver_flags(p)
    p.add_argument("--output", default="completion.nntc", help="reconstruction (default completion.nntc)")
    p.add_argument("--model-out", help="model (.json)")
    p.add_argument("--report", help="per-iteration trace (.csv)")
    p.add_argument("--slices-out", help="directory for graymap slices (order-3 only)")

    p = sub.add_parser("synth", help="write a synthetic nonnegative low-rank tensor")
    p.add_argument("--shape", type=_ints, required=True)
    p.add_argument("--rank", type=_ints, required=True, help="core rank")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="truth.nntc")
    p.add_argument("--fraction", type=float, help="also sample a mask with this fraction")
    p.add_argument("--mask", help="where to write the sampled mask (default mask.nntc)")

    p = sub.add_parser("mask", help="sample an observation mask")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--input", help="take the shape from this tensor (default truth.nntc)")
    g.add_argument("--shape", type=_ints)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="mask.nntc")

    p = sub.add_parser("eval", help="RMSE and sign statistics of an estimate against a reference")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--mask", help="report the RMSE on entries outside this mask as well")

    p = sub.add_parser("gradcheck", help="finite-difference check of the outer gradient")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--directions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)

    p = sub.add_parser("oracle", help="compare the solvers with the reference oracles")
    p.add_argument("--suite", choices=("lemma1", "inner", "nnls", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _path(text: str, what: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise UsageError(f"{what} file not found: {text}")
    return path


def _dense(t) -> np.ndarray:
    return t.to_dense() if isinstance(t, SparseTensor) else t


def _cmd_complete(a) -> int:
    t = fileio.read_tensor(_path(a.input, "input"))
    if a.mask and a.fraction is not None:
        raise UsageError("--mask and --fraction are mutually exclusive")
    if a.mask:
        omega = fileio.read_mask(_path(a.mask, "mask"))
        if omega.shape != t.shape:
            raise UsageError(f"mask shape {omega.shape} differs from input shape {t.shape}")
    elif a.fraction is not None:
        omega = ev.sample_mask(t.shape, a.fraction, a.seed)
    elif isinstance(t, SparseTensor):
        omega = t.support()
    elif Path("mask.nntc").is_file():
        omega = fileio.read_mask("mask.nntc")
        if omega.shape != t.shape:
            raise UsageError(f"mask.nntc shape {omega.shape} differs from input shape {t.shape}")
    else:
        raise UsageError("a dense input needs --mask or --fraction")
    if len(omega) == 0:
        raise UsageError("the observation mask is empty")
    y = project_omega(t, omega)
    truth = None
    if a.truth:
        truth = _dense(fileio.read_tensor(_path(a.truth, "truth")))
        if truth.shape != t.shape:
            raise UsageError(f"truth shape {truth.shape} differs from input shape {t.shape}")
    if a.slices_out and len(t.shape) != 3:
        raise UsageError("--slices-out needs an order-3 tensor")
    rank = a.rank
    if rank is None:
        if len(t.shape) != 3:
            raise UsageError("--rank is required for tensors of order other than 3")
        rank = tuple(min(r, n) for r, n in zip(DEFAULT_RANK_3, t.shape))
    inner = InnerConfig(cg_tol=a.inner_cg_tol, nnls_tol=a.inner_nnls_tol, alternations=a.alternations)
    cfg = SolverConfig(rank=rank, lam=a.lam, c=a.c, tau=a.tau, max_outer_iters=a.max_iters,
                       seed=a.seed, inner=inner)
    if len(cfg.rank) != len(t.shape):
        raise UsageError(f"--rank has {len(cfg.rank)} entries for an order-{len(t.shape)} tensor")
    if any(r > n for r, n in zip(cfg.rank, t.shape)):
        raise UsageError(f"rank {cfg.rank} exceeds the shape {t.shape}")

    try:
        model, state = solve(y, omega, cfg, truth=truth)
        w = reconstruct(model)
    except ValueError as exc:
        raise RuntimeError(str(exc)) from exc
    if a.output:
        fileio.write_tensor(w, a.output, "dense")
    if a.model_out:
        fileio.write_model(model, a.model_out)
    if a.report:
        fileio.write_report(state.trace, a.report)
    if a.slices_out:
        fileio.export_slices(w, 2, a.slices_out, model)
        if w.shape[2] == 3:
            fileio.export_color(w, Path(a.slices_out) / "composite.ppm")
    print(f"status {state.status}")
    print(f"iterations {state.iteration}")
    print(f"cost {state.cost!r}")
    print(f"grad_norm {state.grad_norm!r}")
    if truth is not None:
        held = ~omega.dense_mask()
        if not held.any():
            held[...] = True
        err = float(np.sqrt(np.mean((w - truth)[held] ** 2)))
        print(f"heldout_rmse {err!r}")
    return 0


def _check_fraction(f) -> None:
    if f is not None and not 0 < f <= 1:
        raise UsageError(f"--fraction must lie in (0, 1], got {f}")


def _cmd_synth(a) -> int:
    _check_fraction(a.fraction)
    spec = ev.SyntheticSpec(a.shape, a.rank, a.seed, a.noise)
    t = ev.synth_nonneg_lowrank(spec)
    fileio.write_tensor(t, a.output, "dense")
    print(f"wrote {a.output}")
    if a.fraction is not None or a.mask:
        omega = ev.sample_mask(t.shape, 1.0 if a.fraction is None else a.fraction, a.seed)
        fileio.write_mask(omega, a.mask or "mask.nntc")
        print(f"wrote {a.mask or 'mask.nntc'}")
    return 0


def _cmd_mask(a) -> int:
    _check_fraction(a.fraction)
    if a.shape is not None:
        shape = a.shape
    else:
        shape = fileio.read_tensor(_path(a.input or "truth.nntc", "input")).shape
    omega = ev.sample_mask(shape, a.fraction, a.seed)
    fileio.write_mask(omega, a.output)
    print(f"wrote {a.output} ({len(omega)} entries)")
    return 0


def _cmd_eval(a) -> int:
    est = _dense(fileio.read_tensor(_path(a.estimate, "estimate")))
    ref = _dense(fileio.read_tensor(_path(a.reference, "reference")))
    if est.shape != ref.shape:
        raise UsageError(f"shape mismatch: {est.shape} != {ref.shape}")
    m = ev.metrics(est, ref)
    scale = math.sqrt(float(np.mean(ref * ref)))
    print(f"rmse {m.rmse!r}")
    print(f"relative_rmse {(m.rmse / scale if scale else math.nan)!r}")
    if a.mask:
        omega = fileio.read_mask(_path(a.mask, "mask"))
        if omega.shape != ref.shape:
            raise UsageError("mask shape mismatch")
        held = ~omega.dense_mask()
        if held.any():
            err = float(np.sqrt(np.mean((est - ref)[held] ** 2)))
            print(f"heldout_rmse {err!r}")
            print(f"heldout_relative_rmse {(err / scale if scale else math.nan)!r}")
    print(f"negative_fraction {m.negative_fraction!r}")
    print(f"min_entry {m.min_entry!r}")
    return 0


def _cmd_gradcheck(a) -> int:
    if a.instances < 1 or a.directions < 1 or not a.h > 0:
        raise UsageError("--instances, --directions and --h must be positive")
    errs = ev.gradient_check_suite(a.instances, a.directions, a.seed, a.h)
    print(f"checks {len(errs)}")
    print(f"max_relative_error {max(errs)!r}")
    return 0


def _cmd_oracle(a) -> int:
    suites = ("lemma1", "inner", "nnls") if a.suite == "all" else (a.suite,)
    runners = {
        "lemma1": lambda: ev.lemma1_suite(seed=a.seed),
        "inner": lambda: ev.z_oracle_suite(seed=a.seed),
        "nnls": lambda: ev.nnls_oracle_suite(seed=a.seed),
    }
    for name in suites:
        errs = runners[name]()
        print(f"{name} instances {len(errs)} max_error {max(errs)!r}")
    return 0


COMMANDS = {
    "complete": _cmd_complete,
    "synth": _cmd_synth,
    "mask": _cmd_mask,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except (UsageError, fileio.TensorFormatError, ValueError) as exc:
        print(f"nntc {a.command}: error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, MemoryError, OSError) as exc:
        print(f"nntc {a.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
