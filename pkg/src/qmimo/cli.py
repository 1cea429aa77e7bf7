"""Command-line harness: run-mc, run-se, sweep-mixed, report.

Exit codes: 0 success, 2 configuration error, 3 acceptance-threshold
failure in report --check mode.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace

from .experiments import (ExperimentConfig, curve_from_rows,
                          interpolate_snr_at_ser, parse_experiment_ini,
                          parse_snr_grid, read_csv, run_mc, run_se,
                          sweep_mixed_adc, write_csv)
from .system import ConfigError, SystemConfig


def _add_common(p):
    p.add_argument("--config", help="experiment config file (INI grammar, see README)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per SNR point")
    p.add_argument("--snr", help="SNR grid, 'start:step:stop' or comma list (dB)")
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.add_argument("--quick", action="store_true",
                   help="CI mode: cap trials at 1000 and SE draws at 25")
    p.add_argument("--detectors", help="comma list from gecsr,lmmse,gamp,se-only")
    p.add_argument("--workers", type=int, help="worker processes (default 1)")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds per cell (off by default so "
                        "repeated runs emit identical bytes)")
    path = p.add_mutually_exclusive_group()
    path.add_argument("--fast-path", dest="fast_path", action="store_true", default=None,
                      help="FFT per-subcarrier realization (default)")
    path.add_argument("--exact-path", dest="fast_path", action="store_false",
                      help="dense/SVD realization (small systems; cross-check)")
    # system overrides for config-less invocations
    p.add_argument("--nt", type=int, help="transmit RF chains")
    p.add_argument("--nr", type=int, help="receive RF chains")
    p.add_argument("--nc", type=int, help="subcarriers (power of two)")
    p.add_argument("--taps", type=int, default=None, help="channel taps (default 4)")
    p.add_argument("--constellation", default=None, help="qpsk|16qam|64qam")
    p.add_argument("--adc-bits", default=None,
                   help="comma list per receive chain, entries 1|2|3|inf")


def _experiment_from_args(args) -> ExperimentConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            exp = parse_experiment_ini(fh.read())
    else:
        required = (args.nt, args.nr, args.nc, args.snr)
        if any(v is None for v in required):
            raise ConfigError("without --config, need --nt, --nr, --nc and --snr")
        system = SystemConfig(
            n_t=args.nt, n_r=args.nr, n_c=args.nc,
            taps_l=args.taps if args.taps is not None else 4,
            constellation=args.constellation or "qpsk",
            adc_bits=tuple(b.strip() for b in args.adc_bits.split(",")) if args.adc_bits else None,
        )
        exp = ExperimentConfig(system=system, snr_grid_db=parse_snr_grid(args.snr))
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.snr is not None:
        overrides["snr_grid_db"] = parse_snr_grid(args.snr)
    if args.out is not None:
        overrides["out"] = args.out
    if args.detectors is not None:
        overrides["detectors"] = tuple(d.strip() for d in args.detectors.split(",") if d.strip())
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.fast_path is not None:
        overrides["fast_path"] = args.fast_path
    if args.timing:
        overrides["record_timing"] = True
    if args.config is None and args.nt is not None:
        pass
    exp = replace(exp, **overrides) if overrides else exp
    if args.quick:
        exp = replace(exp, trials=min(exp.trials, 1000),
                      se_realizations=min(exp.se_realizations, 25))
    return exp


def _emit(rows, exp, maybe_plot_path=None):
    if exp.out:
        write_csv(rows, exp.out)
    else:
        write_csv(rows, sys.stdout)
    if maybe_plot_path:
        _render_plot(rows, maybe_plot_path)


def _render_plot(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.2))
    dets = sorted({r.detector for r in rows})
    for det in dets:
        curve = curve_from_rows(rows, det)
        if not curve:
            continue
        snr = [p[0] for p in curve]
        ser = [max(p[1], 1e-12) for p in curve]
        ax.semilogy(snr, ser, marker="o", label=det)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("SER")
    ax.grid(True, which="both", alpha=0.4)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_run_mc(args) -> int:
    exp = _experiment_from_args(args)
    rows = run_mc(exp)
    _emit(rows, exp, args.plot)
    return 0


def cmd_run_se(args) -> int:
    exp = _experiment_from_args(args)
    if "se-only" not in exp.detectors:
        exp = replace(exp, detectors=("se-only",))
    rows = run_se(exp)
    _emit(rows, exp, args.plot)
    return 0


def cmd_sweep_mixed(args) -> int:
    exp = _experiment_from_args(args)
    rows = sweep_mixed_adc(exp, args.scenario)
    _emit(rows, exp, args.plot)
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        rows.extend(read_csv(path))
    dets = sorted({r["detector"] for r in rows})
    target = args.ser
    print(f"SNR (dB) at SER = {target:g}")
    crossings = {}
    for det in dets:
        curve = curve_from_rows(rows, det)
        try:
            snr = interpolate_snr_at_ser(curve, target)
            crossings[det] = snr
            print(f"  {det:30s} {snr:7.2f}")
        except ValueError as err:
            print(f"  {det:30s} (no crossing: {err})")
    if len(crossings) > 1:
        ref = args.reference or sorted(crossings)[0]
        if ref not in crossings:
            print(f"reference {ref!r} has no crossing", file=sys.stderr)
            return 2
        print(f"gaps vs {ref}:")
        for det, snr in sorted(crossings.items()):
            if det != ref:
                print(f"  {det:30s} {crossings[ref] - snr:+7.2f} dB")
    failures = 0
    for expr in args.check or []:
        # gap:DET_A:DET_B:TARGET_DB:TOL_DB  asserts |(snr(A)-snr(B)) - TARGET| <= TOL
        parts = expr.split(":")
        if len(parts) != 5 or parts[0] != "gap":
            print(f"bad --check expression {expr!r}", file=sys.stderr)
            return 2
        _, det_a, det_b, target_db, tol_db = parts
        if det_a not in crossings or det_b not in crossings:
            print(f"check {expr}: missing curve", file=sys.stderr)
            failures += 1
            continue
        gap = crossings[det_a] - crossings[det_b]
        ok = abs(gap - float(target_db)) <= float(tol_db)
        print(f"check {expr}: gap={gap:+.3f} dB -> {'PASS' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    return 3 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qmimo",
                                 description="Quantized MIMO-OFDM detection experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p_mc = sub.add_parser("run-mc", help="Monte Carlo detector sweep")
    _add_common(p_mc)
    p_mc.add_argument("--plot", help="also render an SVG/PDF of the SER curves")
    p_mc.set_defaults(func=cmd_run_mc)

    p_se = sub.add_parser("run-se", help="state-evolution prediction sweep")
    _add_common(p_se)
    p_se.add_argument("--plot", help="also render an SVG/PDF of the SER curves")
    p_se.set_defaults(func=cmd_run_se)

    p_sw = sub.add_parser("sweep-mixed", help="mixed-ADC allocation sweep")
    _add_common(p_sw)
    p_sw.add_argument("--scenario", required=True,
                      choices=("replace-with-highres", "add-lowres-chains"))
    p_sw.add_argument("--plot", help="also render an SVG/PDF of the SER curves")
    p_sw.set_defaults(func=cmd_sweep_mixed)

    p_rep = sub.add_parser("report", help="read CSVs, print SNR-at-SER gap table")
    p_rep.add_argument("csv", nargs="+", help="result CSV files")
    p_rep.add_argument("--ser", type=float, default=1e-3, help="target SER (default 1e-3)")
    p_rep.add_argument("--reference", help="detector id used as the gap reference")
    p_rep.add_argument("--check", action="append",
                       help="gap:DET_A:DET_B:TARGET_DB:TOL_DB (exit 3 on failure)")
    p_rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
