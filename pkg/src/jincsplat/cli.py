"""Command-line entry point: ``jincsplat <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error (including failed
checks in ``gradcheck`` and ``selfcheck``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

import numpy as np

from . import __version__

log = logging.getLogger("jincsplat")

KERNEL_NAMES = ("Delta", "Gaussian", "Exponential", "StudentT", "Jinc",
                "ModulatedGaussian", "ModulatedStudentT")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _kind(name, omega=None, f0=None):
    from .kernels import KernelKind, KernelTag

    lookup = {n.lower(): n for n in KERNEL_NAMES}
    key = name.lower().replace("-", "").replace("_", "")
    if key not in lookup:
        raise UsageError(f"unknown kernel {name!r}; choose from {', '.join(KERNEL_NAMES)}")
    tag = KernelTag[lookup[key]]
    if tag in (KernelTag.ModulatedGaussian, KernelTag.ModulatedStudentT):
        return KernelKind(tag, omega=omega, f0=f0)
    return KernelKind(tag)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.6g}"


def cmd_analyze(args, out) -> int:
    from .kernels import RadialKernel
    from .spectral import Domain, sample_profile

    k = RadialKernel(_kind(args.kernel, args.omega, args.f0), args.sigma)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["domain", "r", "magnitude"])
    r_sp = np.linspace(0.0, args.r_max * args.sigma, args.samples)
    r_fr = np.linspace(0.0, args.r_max / args.sigma, args.samples)
    for dom, radii in ((Domain.Spatial, r_sp), (Domain.Frequency, r_fr)):
        prof = sample_profile(k, dom, radii)
        for r, a in zip(prof.radii, prof.magnitudes):
            w.writerow([dom.value, f"{r:.8g}", f"{a:.10g}"])
    return 0


def table1_rows():
    """Calibrated r95 rows for every kernel kind, plus the calibration.

    Divergent energy integrals are reported as inf.
    """
    from .kernels import KernelKind, KernelTag, RadialKernel
    from .spectral import (
        TABLE1_FREQUENCY,
        TABLE1_SPATIAL,
        ConvergenceError,
        Domain,
        calibrate_convention,
        energy_radius_95,
        normalized_sigma,
    )

    cal = calibrate_convention()
    rows = []
    for tag in KernelTag:
        kind = KernelKind(tag)
        if tag == KernelTag.Delta:
            # all spatial energy at the origin, flat spectrum
            vals = [0.0, math.inf]
        else:
            try:
                sigma = normalized_sigma(kind, cal.normalization, cal.weighting)
            except ConvergenceError:
                sigma = math.nan
            vals = []
            for d in (Domain.Spatial, Domain.Frequency):
                try:
                    vals.append(energy_radius_95(RadialKernel(kind, sigma), d, cal.weighting))
                except ConvergenceError:
                    vals.append(math.inf)
        rows.append((tag.name, vals[0], vals[1], TABLE1_SPATIAL.get(tag), TABLE1_FREQUENCY.get(tag)))
    return cal, rows


def cmd_table1(args, out) -> int:
    cal, rows = table1_rows()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["kernel", "weighting", "normalization", "spatial_r95", "frequency_r95",
                "published_spatial", "published_frequency"])
    for name, sp, fr, ps, pf in rows:
        w.writerow([name, cal.weighting.name, cal.normalization.name, _fmt(sp), _fmt(fr),
                    "" if ps is None else ps, "" if pf is None else pf])
    return 0


def cmd_render(args, out) -> int:
    from .io import load_camera, load_scene, write_image
    from .rasterizer import NegativeLobes, RenderConfig, render

    ps = load_scene(args.scene)
    cam = load_camera(args.camera)
    if args.kernel_override:
        from .fit import convert_kind

        ps = convert_kind(ps, _kind(args.kernel_override))
    cfg = RenderConfig(
        alpha_cutoff_q=args.q,
        negative_lobes=NegativeLobes.Signed if args.signed_lobes else NegativeLobes.Clamp,
    )
    img = render(ps, cam, cfg)
    write_image(args.out, img)
    print(f"wrote {args.out} ({img.width}x{img.height}, {img.stats.n_visible} visible)", file=out)
    return 0


def cmd_fit(args, out) -> int:
    from .fit import FitConfig, convert_kind, default_init, fit, make_synthetic_scene, perturb, render_targets
    from .io import save_scene

    kind = _kind(args.kernel)
    target_kind = _kind(args.target_kernel) if args.target_kernel else kind
    gt, cams = make_synthetic_scene(args.scene_seed, args.primitives, target_kind,
                                    args.resolution, args.resolution)
    targets = render_targets(gt, cams)
    if args.init == "perturbed":
        init = perturb(convert_kind(gt, kind), args.seed)
    else:
        init = default_init(args.seed, args.primitives, kind)
    cfg = FitConfig(iterations=args.iters, seed=args.seed, log_every=args.log_every)
    rep = fit(targets, init, cfg, callback=lambda c: log.info("iter %d psnr %.3f", c.iteration, c.psnr_db))
    with open(args.out_report, "w") as fh:
        fh.write(rep.to_csv())
    if args.out_scene:
        save_scene(args.out_scene, rep.final)
    print(f"final psnr {rep.final_psnr:.3f} dB", file=out)
    if rep.aborted:
        print(f"aborted: {rep.message}", file=sys.stderr)
        return 2
    return 0


def cmd_gradcheck(args, out) -> int:
    from .gradients import run_gradcheck

    rows = run_gradcheck(args.seed, args.cases)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["op", "max_rel_err", "status", "worst_case"])
    ok = True
    for r in rows:
        passed = r.passed(args.tol)
        ok &= passed
        case = ";".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in r.worst_case.items())
        w.writerow([r.op, f"{r.max_rel_err:.3e}", "PASS" if passed else "FAIL", case])
    return 0 if ok else 2


def cmd_selfcheck(args, out) -> int:
    from .special import accuracy_reports, switchover_jumps

    if args.target != "special-functions":
        raise UsageError(f"unknown selfcheck target {args.target!r}")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["function_name", "max_abs_err", "max_rel_err", "domain_lo", "domain_hi"])
    ok = True
    for r in accuracy_reports():
        w.writerow([r.function_name, f"{r.max_abs_err:.3e}", f"{r.max_rel_err:.3e}",
                    r.domain[0], r.domain[1]])
        if r.function_name in ("bessel_j0", "bessel_j1"):
            ok &= r.max_rel_err <= 1e-10
    ok &= max(switchover_jumps().values()) <= 1e-12
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jincsplat", description="Jinc and modulated splatting kernels.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    a = sub.add_parser("analyze", help="sample a kernel's spatial and frequency profiles as CSV")
    a.add_argument("--kernel", required=True)
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--omega", type=float, default=None)
    a.add_argument("--f0", type=float, default=None)
    a.add_argument("--samples", type=int, default=201)
    a.add_argument("--r-max", type=float, default=10.0, help="extent in units of sigma (or 1/sigma)")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("table1", help="95%% energy radii under the calibrated convention")
    t.set_defaults(func=cmd_table1)

    r = sub.add_parser("render", help="render a scene file to an image")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--out", required=True, help=".ppm for 8-bit, anything else for raw float32")
    r.add_argument("--kernel-override", default=None)
    r.add_argument("--q", type=float, default=30.0)
    r.add_argument("--signed-lobes", action="store_true")
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fit", help="fit a synthetic scene from its rendered views")
    f.add_argument("--scene-seed", type=int, required=True)
    f.add_argument("--primitives", type=int, required=True)
    f.add_argument("--kernel", required=True)
    f.add_argument("--iters", type=int, required=True)
    f.add_argument("--out-report", required=True)
    f.add_argument("--out-scene", default=None)
    f.add_argument("--target-kernel", default=None, help="kernel of the ground-truth scene")
    f.add_argument("--init", choices=("perturbed", "default"), default="perturbed")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--log-every", type=int, default=50)
    f.add_argument("--resolution", type=int, default=64)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference derivatives")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=200)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selfcheck", help="accuracy self-checks")
    s.add_argument("target", choices=("special-functions",))
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
