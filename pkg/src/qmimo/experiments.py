"""Batch experiment runner: seeded Monte Carlo trials and SE sweeps.

Every trial draws its own seed from the master seed through a documented
SplitMix64 mixing chain, so aggregates are independent of how trials are
grouped into batches or distributed across workers.  Results stream out as
versioned CSV rows; error-count aggregation is a commutative monoid, so
worker completion order cannot change the output.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import gamp_detect_batch, lmmse_detect
from .constellation import constellation_points, draw_symbols, hard_decision
from .detector import DetectorOptions, detect_batch
from .system import (ChannelOperator, ConfigError, DenseOperator, Spectrum,
                     SystemConfig, dense_sensing_matrix, draw_channel,
                     midrise_quantize, quantizer_steps)
from . import state_evolution as se

SCHEMA_LINE = "# qmimo-results-v1"
CSV_FIELDS = ("detector", "snr_db", "iteration", "mse", "ser", "ser_ci95",
              "trials", "elapsed_seconds", "seed")

KNOWN_DETECTORS = ("gecsr", "lmmse", "gamp", "se-only")

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 mixer (public-domain reference constants)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, *indices: int) -> int:
    """Counter-based 64-bit seed: fold each index into the running state.

    trial seed = derive_seed(master, snr_index, trial_index); the chain is
    splitmix64(state XOR splitmix64(index)) per index.
    """
    state = splitmix64(master_seed & _MASK)
    for ix in indices:
        state = splitmix64(state ^ splitmix64(ix & _MASK))
    return state


@dataclass(frozen=True)
class ExperimentConfig:
    """One reproducible experiment: a system, an SNR grid and trial budget."""

    system: SystemConfig
    snr_grid_db: tuple
    trials: int = 10_000
    detectors: tuple = ("gecsr",)
    master_seed: int = 1
    out: str | None = None
    fast_path: bool = True
    batch_size: int = 200
    workers: int = 1
    se_realizations: int = 100
    per_iteration: bool = False
    record_timing: bool = False
    t_max: int = 10
    tol: float = 1e-6
    damping: float = 0.0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.snr_grid_db:
            raise ConfigError("snr grid must be nonempty")
        for d in self.detectors:
            if d not in KNOWN_DETECTORS:
                raise ConfigError(f"unknown detector {d!r}; expected {KNOWN_DETECTORS}")
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "detectors", tuple(self.detectors))


@dataclass
class ResultRow:
    """One aggregated (detector, SNR[, iteration]) cell."""

    detector: str
    snr_db: float
    iteration: str
    mse: float
    ser: float
    ser_ci95: float
    trials: int
    elapsed_seconds: float
    seed: int

    def as_tuple(self):
        return (self.detector, f"{self.snr_db:.6g}", self.iteration,
                f"{self.mse:.10e}", f"{self.ser:.10e}", f"{self.ser_ci95:.4e}",
                str(self.trials), f"{self.elapsed_seconds:.3f}", str(self.seed))


def write_csv(rows, path_or_file) -> None:
    """Versioned, deterministic CSV: schema comment, header, data rows."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        fh.write(SCHEMA_LINE + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow(row.as_tuple())
    finally:
        if own:
            fh.close()


def read_csv(path):
    """Rows back as dicts with floats where sensible."""
    out = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise ConfigError(f"missing schema line in {path}")
        reader = csv.DictReader(fh)
        for rec in reader:
            rec["snr_db"] = float(rec["snr_db"])
            rec["mse"] = float(rec["mse"])
            rec["ser"] = float(rec["ser"])
            rec["ser_ci95"] = float(rec["ser_ci95"])
            rec["trials"] = int(rec["trials"])
            out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo core


def _draw_trial_batch(cfg: SystemConfig, seeds):
    """Per-trial channels, symbols and quantized observations.

    Each trial consumes its own generator in a fixed draw order (channel,
    symbols, noise), so batching cannot change any trial's data.
    """
    chans, xs, ys = [], [], []
    sigma = math.sqrt(cfg.sigma2 / 2.0)
    for s in seeds:
        rng = np.random.default_rng(s)
        ch = draw_channel(cfg, rng)
        x = draw_symbols(cfg.constellation, cfg.n, rng)
        noise = sigma * (rng.standard_normal(cfg.m) + 1j * rng.standard_normal(cfg.m))
        chans.append(ch)
        xs.append(x)
        ys.append(noise)
    x = np.stack(xs)
    op = ChannelOperator(
        np.stack([c.freq_response for c in chans]),
        np.stack([c.fbb_permutation for c in chans]),
        chans[0].norm,
    )
    y = op.apply(x) + np.stack(ys)
    y_q = y.copy()
    p_z = op.p_z(cfg.p_x)
    for bits, chains in cfg.adc_groups():
        if math.isinf(bits):
            continue
        step = quantizer_steps(cfg, int(bits), p_z)[:, None]
        comp = (chains[:, None] * cfg.n_c + np.arange(cfg.n_c)).ravel()
        y_q[:, comp] = (midrise_quantize(y[:, comp].real, int(bits), step)
                        + 1j * midrise_quantize(y[:, comp].imag, int(bits), step))
    return op, chans, x, y_q


def _exact_operator(chans):
    return DenseOperator(np.stack([dense_sensing_matrix(c) for c in chans]))


@dataclass
class _CellAccum:
    """Order-independent error accumulator for one (detector, snr) cell."""

    symbol_errors: int = 0
    symbols: int = 0
    sq_error: float = 0.0
    trials: int = 0
    elapsed: float = 0.0
    per_iter_sq: np.ndarray | None = None
    per_iter_err: np.ndarray | None = None

    def merge(self, other: "_CellAccum"):
        self.symbol_errors += other.symbol_errors
        self.symbols += other.symbols
        self.sq_error += other.sq_error
        self.trials += other.trials
        self.elapsed += other.elapsed
        for name in ("per_iter_sq", "per_iter_err"):
            mine, theirs = getattr(self, name), getattr(other, name)
            if theirs is not None:
                setattr(self, name, theirs if mine is None else mine + theirs)


def _run_work_item(args):
    """One (snr index, trial chunk) unit; safe to run in any process."""
    exp, snr_index, trial_indices = args
    cfg = exp.system.replace(snr_db=exp.snr_grid_db[snr_index])
    seeds = [derive_seed(exp.master_seed, snr_index, t) for t in trial_indices]
    op, chans, x_true, y_q = _draw_trial_batch(cfg, seeds)
    if not exp.fast_path:
        op = _exact_operator(chans)
    opts = DetectorOptions(t_max=exp.t_max, tol=0.0 if exp.per_iteration else exp.tol,
                           damping=exp.damping)
    points = constellation_points(cfg.constellation)

    out = {}
    for det in exp.detectors:
        if det == "se-only":
            continue
        t0 = time.perf_counter()
        if det == "gecsr":
            res = detect_batch(y_q, op, cfg, opts, x_true=x_true)
            x_hat = res.x_hat
        elif det == "lmmse":
            x_hat = lmmse_detect(y_q, op, cfg)
            res = None
        elif det == "gamp":
            x_hat, _ = gamp_detect_batch(y_q, op, cfg)
            res = None
        hard = points[np.argmin(np.abs(x_hat[..., None] - points) ** 2, axis=-1)]
        acc = _CellAccum(
            symbol_errors=int(np.count_nonzero(hard != x_true)),
            symbols=x_true.size,
            sq_error=float(np.sum(np.abs(x_hat - x_true) ** 2)),
            trials=len(trial_indices),
            elapsed=time.perf_counter() - t0,
        )
        if det == "gecsr" and exp.per_iteration and res is not None:
            # pad converged-early runs by carrying the last sweep forward
            sq = res.per_iter_mse * x_true.shape[1]
            if sq.shape[0] < exp.t_max:
                pad = np.repeat(sq[-1:], exp.t_max - sq.shape[0], axis=0)
                sq = np.concatenate([sq, pad])
            acc.per_iter_sq = sq.sum(axis=1)
        out[det] = acc
    return snr_index, out


def _chunks(trials, batch_size):
    for lo in range(0, trials, batch_size):
        yield list(range(lo, min(lo + batch_size, trials)))


def run_mc(exp: ExperimentConfig):
    """Monte Carlo sweep; yields ResultRow per (detector, snr) cell.

    Deterministic for a fixed master seed regardless of worker count: trial
    seeds depend only on (master_seed, snr_index, trial_index) and the
    chunking depends only on batch_size.
    """
    mc_detectors = [d for d in exp.detectors if d != "se-only"]
    rows = []
    if mc_detectors:
        work = [(exp, si, chunk)
                for si in range(len(exp.snr_grid_db))
                for chunk in _chunks(exp.trials, exp.batch_size)]
        cells: dict = {}
        if exp.workers > 1:
            with ProcessPoolExecutor(max_workers=exp.workers) as pool:
                results = pool.map(_run_work_item, work)
                for snr_index, out in results:
                    for det, acc in out.items():
                        cells.setdefault((det, snr_index), _CellAccum()).merge(acc)
        else:
            for item in work:
                snr_index, out = _run_work_item(item)
                for det, acc in out.items():
                    cells.setdefault((det, snr_index), _CellAccum()).merge(acc)

        for det in mc_detectors:
            for si, snr in enumerate(exp.snr_grid_db):
                acc = cells[(det, si)]
                ser = acc.symbol_errors / acc.symbols
                ci = 1.96 * math.sqrt(max(ser * (1.0 - ser), 0.0) / acc.symbols)
                rows.append(ResultRow(
                    detector=det, snr_db=snr, iteration="final",
                    mse=acc.sq_error / acc.symbols, ser=ser, ser_ci95=ci,
                    trials=acc.trials,
                    elapsed_seconds=acc.elapsed if exp.record_timing else 0.0,
                    seed=exp.master_seed,
                ))
                if det == "gecsr" and exp.per_iteration and acc.per_iter_sq is not None:
                    for it in range(acc.per_iter_sq.shape[0]):
                        rows.append(ResultRow(
                            detector=det, snr_db=snr, iteration=str(it + 1),
                            mse=acc.per_iter_sq[it] / acc.symbols, ser=ser,
                            ser_ci95=ci, trials=acc.trials,
                            elapsed_seconds=0.0, seed=exp.master_seed,
                        ))
    if "se-only" in exp.detectors:
        rows.extend(run_se(exp))
    return rows


def run_se(exp: ExperimentConfig):
    """SE sweep over the SNR grid, averaged over drawn channel spectra.

    One recursion runs per spectrum; MSE/SER are averaged across spectra
    (the Monte Carlo averages over channel realizations the same way).
    """
    rows = []
    spectra = []
    for r in range(exp.se_realizations):
        # spectra live in their own seed stream, away from the trial indices
        ch = draw_channel(exp.system, derive_seed(exp.master_seed, 0xA5E, r))
        op = ChannelOperator(ch.freq_response[None], ch.fbb_permutation[None], ch.norm)
        spectra.append(Spectrum(np.sort(op.eigenvalues[0].ravel())))
    for si, snr in enumerate(exp.snr_grid_db):
        cfg = exp.system.replace(snr_db=snr)
        t0 = time.perf_counter()
        mse_mat, ser_mat = se.se_run_ensemble(cfg, spectra, max_iter=max(exp.t_max, 50))
        elapsed = time.perf_counter() - t0
        rows.append(ResultRow(
            detector="se-only", snr_db=snr, iteration="final",
            mse=float(mse_mat[:, -1].mean()), ser=float(ser_mat[:, -1].mean()),
            ser_ci95=0.0, trials=exp.se_realizations,
            elapsed_seconds=elapsed if exp.record_timing else 0.0,
            seed=exp.master_seed,
        ))
        if exp.per_iteration:
            for it in range(min(exp.t_max, mse_mat.shape[1])):
                rows.append(ResultRow(
                    detector="se-only", snr_db=snr, iteration=str(it + 1),
                    mse=float(mse_mat[:, it].mean()), ser=float(ser_mat[:, it].mean()),
                    ser_ci95=0.0, trials=exp.se_realizations,
                    elapsed_seconds=0.0, seed=exp.master_seed,
                ))
    return rows


def sweep_mixed_adc(exp: ExperimentConfig, scenario: str):
    """Mixed-ADC study sweeps; one labeled curve per ADC allocation.

    replace-with-highres: swap 0..4 chains of the low-resolution receiver
    for unquantized ones.  add-lowres-chains: add 1..2 low-resolution chains
    to an all-unquantized receiver (plus the grown all-unquantized limit).
    """
    base = exp.system
    allocations = []
    if scenario == "replace-with-highres":
        low_bits = min(b for b in base.adc_bits if not math.isinf(b))
        for n_inf in range(0, 5):
            bits = (low_bits,) * (base.n_r - n_inf) + (math.inf,) * n_inf
            allocations.append((f"{n_inf}inf", base.replace(adc_bits=bits)))
    elif scenario == "add-lowres-chains":
        low_bits = [b for b in base.adc_bits if not math.isinf(b)]
        kappa = low_bits[0] if low_bits else 1
        allocations.append(("base", base.replace(
            n_r=base.n_t, adc_bits=(math.inf,) * base.n_t)))
        for extra in (1, 2):
            bits = (math.inf,) * base.n_t + (kappa,) * extra
            allocations.append((f"+{extra}x{kappa}b", base.replace(
                n_r=base.n_t + extra, adc_bits=bits)))
        allocations.append(("limit", base.replace(
            n_r=base.n_t + 2, adc_bits=(math.inf,) * (base.n_t + 2))))
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")

    rows = []
    for label, system in allocations:
        sub = replace(exp, system=system)
        for row in run_mc(sub):
            row.detector = f"{row.detector}[{label}]"
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Config file grammar: INI sections [system] and [experiment], key = value.


def _format_bits(b):
    return "inf" if math.isinf(b) else str(int(b))


def format_experiment_ini(exp: ExperimentConfig) -> str:
    sys_cfg = exp.system
    cp = configparser.ConfigParser()
    cp["system"] = {
        "n_t": str(sys_cfg.n_t),
        "n_r": str(sys_cfg.n_r),
        "n_c": str(sys_cfg.n_c),
        "taps_l": str(sys_cfg.taps_l),
        "snr_db": repr(sys_cfg.snr_db),
        "constellation": sys_cfg.constellation,
        "adc_bits": ",".join(_format_bits(b) for b in sys_cfg.adc_bits),
        "seed": str(sys_cfg.seed),
    }
    if sys_cfg.quantizer_scale is not None:
        cp["system"]["quantizer_scale"] = repr(sys_cfg.quantizer_scale)
    cp["experiment"] = {
        "snr_grid_db": ",".join(repr(s) for s in exp.snr_grid_db),
        "trials": str(exp.trials),
        "detectors": ",".join(exp.detectors),
        "master_seed": str(exp.master_seed),
        "fast_path": str(exp.fast_path).lower(),
        "batch_size": str(exp.batch_size),
        "workers": str(exp.workers),
        "se_realizations": str(exp.se_realizations),
        "per_iteration": str(exp.per_iteration).lower(),
        "record_timing": str(exp.record_timing).lower(),
        "t_max": str(exp.t_max),
        "tol": repr(exp.tol),
        "damping": repr(exp.damping),
    }
    if exp.out:
        cp["experiment"]["out"] = exp.out
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_snr_grid(text: str) -> tuple:
    """Either 'start:step:stop' (inclusive endpoints) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[1] <= 0:
            raise ConfigError(f"bad SNR range {text!r}; want start:step:stop")
        start, step, stop = parts
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        if count < 1:
            raise ConfigError(f"empty SNR range {text!r}")
        return tuple(start + i * step for i in range(count))
    return tuple(float(p) for p in text.split(",") if p.strip())


def parse_experiment_ini(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        s = cp["system"]
        system = SystemConfig(
            n_t=s.getint("n_t"),
            n_r=s.getint("n_r"),
            n_c=s.getint("n_c"),
            taps_l=s.getint("taps_l", 4),
            snr_db=s.getfloat("snr_db", 10.0),
            constellation=s.get("constellation", "qpsk"),
            adc_bits=tuple(b.strip() for b in s.get("adc_bits").split(",")),
            seed=s.getint("seed", 0),
            quantizer_scale=s.getfloat("quantizer_scale", fallback=None),
        )
        e = cp["experiment"]
        return ExperimentConfig(
            system=system,
            snr_grid_db=parse_snr_grid(e.get("snr_grid_db")),
            trials=e.getint("trials", 10_000),
            detectors=tuple(d.strip() for d in e.get("detectors", "gecsr").split(",") if d.strip()),
            master_seed=e.getint("master_seed", 1),
            out=e.get("out", fallback=None),
            fast_path=e.getboolean("fast_path", True),
            batch_size=e.getint("batch_size", 200),
            workers=e.getint("workers", 1),
            se_realizations=e.getint("se_realizations", 100),
            per_iteration=e.getboolean("per_iteration", False),
            record_timing=e.getboolean("record_timing", False),
            t_max=e.getint("t_max", 10),
            tol=e.getfloat("tol", 1e-6),
            damping=e.getfloat("damping", 0.0),
        )
    except (configparser.Error, KeyError, TypeError, ValueError, AttributeError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid experiment config: {err}") from err


# ---------------------------------------------------------------------------
# Curve utilities


def _pav_decreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators fit of a nonincreasing sequence."""
    vals = list(map(float, y))
    weights = [1.0] * len(vals)
    blocks = []
    for v, w in zip(vals, weights):
        blocks.append([v, w])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            v2, w2 = blocks.pop()
            blocks[-1][0] = (blocks[-1][0] * blocks[-1][1] + v2 * w2) / (blocks[-1][1] + w2)
            blocks[-1][1] += w2
        # blocks stay nonincreasing
    out = []
    for v, w in blocks:
        out.extend([v] * int(round(w)))
    return np.array(out)


def interpolate_snr_at_ser(curve, target_ser: float) -> float:
    """SNR (dB) where a monotone-cleaned SER curve crosses target_ser.

    curve: iterable of (snr_db, ser) points.  Log-linear interpolation in
    SER; zero-SER points are dropped (below any positive target).  Raises
    ValueError when the target lies outside the measured range.
    """
    pts = sorted((float(s), float(e)) for s, e in curve)
    if not pts or target_ser <= 0:
        raise ValueError("need a nonempty curve and a positive target")
    snr = np.array([p[0] for p in pts])
    ser = _pav_decreasing(np.array([p[1] for p in pts]))
    keep = ser > 0
    snr, ser = snr[keep], ser[keep]
    if snr.size < 2 or not (ser.min() <= target_ser <= ser.max()):
        raise ValueError(
            f"target SER {target_ser:g} outside measured range "
            f"[{ser.min() if ser.size else math.nan:g}, {ser.max() if ser.size else math.nan:g}]")
    log_t = math.log10(target_ser)
    log_s = np.log10(ser)
    for i in range(snr.size - 1):
        lo, hi = log_s[i + 1], log_s[i]
        if lo <= log_t <= hi:
            if hi == lo:
                return float(snr[i])
            frac = (hi - log_t) / (hi - lo)
            return float(snr[i] + frac * (snr[i + 1] - snr[i]))
    # exact hit on an endpoint
    idx = int(np.argmin(np.abs(log_s - log_t)))
    return float(snr[idx])


def curve_from_rows(rows, detector: str):
    """(snr, ser) pairs of the final-iteration rows for one detector id."""
    sel = [(r["snr_db"] if isinstance(r, dict) else r.snr_db,
            r["ser"] if isinstance(r, dict) else r.ser)
           for r in rows
           if (r["detector"] if isinstance(r, dict) else r.detector) == detector
           and (r["iteration"] if isinstance(r, dict) else r.iteration) == "final"]
    return sorted(sel)
