"""Experiment harness and the ``headmac`` command line.

Verbs:

    run SPEC        run an experiment spec (or a single scenario config) to CSV
    trf-min         minimum realtime frame for a range of call counts
    validate        analytic vs simulated realtime loss, nonzero exit on misses
    oracle          counting formula vs brute-force contention table
"""

from __future__ import annotations

import argparse
import io
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .analytic import CapacityExceeded, LossCurve, min_frame_duration
from .contention import oracle_diff_table
from .core import PARAM_FIELDS, ConfigError, ProtocolParams
from .sim.metrics import CSV_HEADER, fmt
from .sim.scenario import PROTOCOLS, VOICE_SWITCHING, ScenarioConfig, parse_config_text, run_scenario

CSV_VERSION = "headmac-csv/1"

EXPERIMENT_KINDS = ("throughput_vs_load", "energy_vs_load", "delay_vs_load",
                    "loss_vs_Trf", "min_Trf_vs_N", "mixed_traffic")
SIM_KINDS = ("throughput_vs_load", "energy_vs_load", "delay_vs_load", "mixed_traffic")
CONTENTION_MODELS = ("formula", "exact")

SIM_COLUMNS = "row," + CSV_HEADER + ",nrt_throughput,total_power_W"
LOSS_COLUMNS = "row,N,T_rf_minislots,seed,delta_mac,delta_sim,abs_diff,tolerance,within"
TRF_COLUMNS = "N,T_rf_minislots,T_rf_ms,delta_mac,T_rf_per_node_minislots"
VALIDATE_COLUMNS = "N,T_rf_minislots,delta_mac,delta_sim,sim_stderr,abs_diff,tolerance,flagged,monotone"
ORACLE_COLUMNS = ("n1,W,t_q,regime,T_cp,raw_mass,max_abs_diff,max_abs_diff_raw,"
                  "max_abs_diff_exact,flagged,oracle_pmf,formula_pmf")


def loss_tolerance(delta_mac: float) -> float:
    """Allowed |sim - analysis| gap for realtime loss."""
    return max(0.005, 0.25 * delta_mac)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    protocols: tuple = ("proposed", "psm", "dcf")
    loads: tuple = (100.0, 400.0, 800.0, 1600.0)
    K: tuple = (10,)
    N: tuple = (0,)
    atim_ms: tuple = (2.0, 4.0, 6.0, 8.0, 10.0)
    T_rf_slots: tuple = ()
    reps: int = 5
    seed: int = 1
    duration_s: float = 20.0
    warmup_s: float = 2.0
    delta_star: float = 0.01
    contention: str = "formula"
    voice_switching: str = "auto"     # "beacon" for loss_vs_Trf, "continuous" otherwise
    jobs: int = 1
    params: ProtocolParams = field(default_factory=ProtocolParams)

    def validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.contention not in CONTENTION_MODELS:
            raise ConfigError(f"contention must be one of {CONTENTION_MODELS}")
        if self.voice_switching != "auto" and self.voice_switching not in VOICE_SWITCHING:
            raise ConfigError(f"voice_switching must be auto or one of {VOICE_SWITCHING}")
        if not self.N or any(n < 0 for n in self.N):
            raise ConfigError("N grid must be non-empty and non-negative")
        if self.kind in SIM_KINDS:
            if not self.loads or not self.K or not self.protocols:
                raise ConfigError("load, K and protocol grids must be non-empty")
            bad = [p for p in self.protocols if p not in PROTOCOLS]
            if bad:
                raise ConfigError(f"unknown protocols {bad}")
            if "psm" in self.protocols and not self.atim_ms:
                raise ConfigError("psm needs a non-empty ATIM grid")
            for k in self.K:
                for n in self.N:
                    for load in self.loads:
                        for proto in self.protocols:
                            self._scenario(proto, k, n, load, self.atim_ms[0] if proto == "psm" else None,
                                           self.seed).validate()
        if self.kind == "loss_vs_Trf":
            if not self.T_rf_slots:
                raise ConfigError("loss_vs_Trf needs a non-empty T_rf_slots grid")
            if not self.K:
                raise ConfigError("K grid must be non-empty")
        return self

    @property
    def switching(self):
        if self.voice_switching != "auto":
            return self.voice_switching
        return "beacon" if self.kind == "loss_vs_Trf" else "continuous"

    def _scenario(self, protocol, K, N, load, atim, seed, T_rf_ms=None):
        return ScenarioConfig(protocol=protocol, K=K, N=N, load=load, seed=seed,
                              duration_s=self.duration_s, warmup_s=self.warmup_s, atim_ms=atim,
                              T_rf_ms=T_rf_ms, delta_star=self.delta_star,
                              voice_switching=self.switching, params=self.params)


_LIST_KEYS = {"protocols": str, "loads": float, "K": int, "N": int, "atim_ms": float, "T_rf_slots": int}
_SCALAR_KEYS = {"kind": str, "reps": int, "seed": int, "duration_s": float, "warmup_s": float,
                "delta_star": float, "contention": str, "voice_switching": str, "jobs": int}


def parse_experiment_text(text: str) -> ExperimentSpec:
    """``key = value`` lines; grid keys take comma-separated lists. Protocol
    parameter names may be given to override their defaults."""
    kw, pkw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        try:
            if key in _LIST_KEYS:
                typ = _LIST_KEYS[key]
                kw[key] = tuple(typ(v.strip()) for v in val.split(",") if v.strip())
            elif key in _SCALAR_KEYS:
                kw[key] = _SCALAR_KEYS[key](val)
            elif key in PARAM_FIELDS:
                typ = str(PARAM_FIELDS[key])
                pkw[key] = int(val) if typ.startswith("int") else float(val)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    if "kind" not in kw:
        raise ConfigError("experiment spec needs a kind")
    if ("T_rb_ms" in pkw or "beta" in pkw) and "T_nb_ms" not in pkw:
        pkw["T_nb_ms"] = pkw.get("T_rb_ms", ProtocolParams.T_rb_ms) * pkw.get("beta", ProtocolParams.beta)
    try:
        params = ProtocolParams(**pkw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentSpec(params=params, **kw).validate()


# ---------------------------------------------------------------------------
# running


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def simulate_many(configs, jobs=1):
    """Run scenarios, results in input order."""
    return _pool_map(run_scenario, configs, jobs)


def _mean_std(xs):
    xs = [float(x) for x in xs]
    if any(math.isinf(x) for x in xs):
        return math.inf, math.inf
    if len(xs) == 1:
        return xs[0], 0.0
    return statistics.fmean(xs), statistics.stdev(xs)


_SIM_FIELDS = ("throughput", "energy_per_packet", "mean_delay", "realtime_loss_rate", "total_energy",
               "nrt_throughput", "total_power")


def _sim_row(tag, proto, K, N, load, atim, seed, vals):
    cells = [tag, proto, str(K), str(N), fmt(load), fmt(atim), str(seed)]
    cells += [fmt(vals[f]) for f in _SIM_FIELDS]
    return ",".join(cells)


def _summary_rows(proto, K, N, load, atim, seed, runs):
    stats = {f: _mean_std([getattr(r, f) for r in runs]) for f in _SIM_FIELDS}
    return [_sim_row("mean", proto, K, N, load, atim, seed, {f: v[0] for f, v in stats.items()}),
            _sim_row("std", proto, K, N, load, atim, seed, {f: v[1] for f, v in stats.items()})]


def pick_best_atim(throughput_by_atim: dict) -> float:
    """Throughput-maximising ATIM window; ties go to the smaller window."""
    return min(throughput_by_atim, key=lambda a: (-throughput_by_atim[a], a))


def _run_sim_experiment(spec: ExperimentSpec) -> list:
    points = []
    for K in spec.K:
        for N in spec.N:
            for load in spec.loads:
                for proto in spec.protocols:
                    for atim in (spec.atim_ms if proto == "psm" else (None,)):
                        points.append((proto, K, N, load, atim))
    configs = [spec._scenario(proto, K, N, load, atim, spec.seed + r)
               for proto, K, N, load, atim in points for r in range(spec.reps)]
    results = simulate_many(configs, spec.jobs)
    lines = []
    psm_groups = {}
    for gi, (proto, K, N, load, atim) in enumerate(points):
        runs = results[gi * spec.reps:(gi + 1) * spec.reps]
        for r in runs:
            lines.append(_sim_row("rep", proto, K, N, load, r.atim_ms, r.seed,
                                  {f: getattr(r, f) for f in _SIM_FIELDS}))
        lines += _summary_rows(proto, K, N, load, atim or 0.0, spec.seed, runs)
        if proto == "psm":
            psm_groups.setdefault((K, N, load), {})[atim] = runs
            if len(psm_groups[(K, N, load)]) == len(spec.atim_ms):
                groups = psm_groups[(K, N, load)]
                thr = {a: statistics.fmean(r.throughput for r in rs) for a, rs in groups.items()}
                best = pick_best_atim(thr)
                lines += _summary_rows("best-psm", K, N, load, best, spec.seed, groups[best])
    return [SIM_COLUMNS] + lines


def _run_loss_experiment(spec: ExperimentSpec) -> list:
    points = [(N, T) for N in spec.N for T in spec.T_rf_slots]
    K = spec.K[0]
    configs = [spec._scenario("proposed", max(K, N, 2), N, 0.0, None, spec.seed + r,
                              T_rf_ms=T * spec.params.mini_slot_us / 1000)
               for N, T in points for r in range(spec.reps)]
    results = simulate_many(configs, spec.jobs)
    curves = {N: LossCurve(spec.params, N, spec.contention) for N in spec.N}
    lines = [LOSS_COLUMNS]
    for gi, (N, T) in enumerate(points):
        d = curves[N](T)
        tol = loss_tolerance(d)
        runs = results[gi * spec.reps:(gi + 1) * spec.reps]
        for r in runs:
            lines.append(",".join(["rep", str(N), str(T), str(r.seed), fmt(d), fmt(r.realtime_loss_rate),
                                   fmt(abs(r.realtime_loss_rate - d)), fmt(tol), ""]))
        m, s = _mean_std([r.realtime_loss_rate for r in runs])
        lines.append(",".join(["mean", str(N), str(T), str(spec.seed), fmt(d), fmt(m), fmt(abs(m - d)),
                               fmt(tol), str(abs(m - d) <= tol)]))
        lines.append(",".join(["std", str(N), str(T), str(spec.seed), fmt(d), fmt(s), "", fmt(tol), ""]))
    return lines


def trf_min_rows(params: ProtocolParams, N_values, delta_star=0.01, contention="formula"):
    """[(N, T_rf* mini-slots or inf, loss at T_rf*)]"""
    out = []
    for N in N_values:
        curve = LossCurve(params, N, contention)
        try:
            T = min_frame_duration(params, N, delta_star, contention, curve=curve)
            out.append((N, T, curve(T)))
        except CapacityExceeded:
            out.append((N, math.inf, math.inf))
    return out


def _trf_lines(params, rows):
    lines = [TRF_COLUMNS]
    for N, T, d in rows:
        per_node = T / N if N and not math.isinf(T) else (math.inf if math.isinf(T) else 0.0)
        T_ms = T * params.mini_slot_us / 1000 if not math.isinf(T) else math.inf
        lines.append(",".join([str(N), fmt(T), fmt(T_ms), fmt(d), fmt(per_node)]))
    return lines


def run_experiment(spec: ExperimentSpec, out=None) -> str:
    """Run ``spec`` and return the CSV text; also written to ``out`` if given."""
    spec.validate()
    if out is not None:
        # fail on an unwritable path before spending time on runs
        open(out, "w").close()
    if spec.kind in SIM_KINDS:
        lines = _run_sim_experiment(spec)
    elif spec.kind == "loss_vs_Trf":
        lines = _run_loss_experiment(spec)
    else:
        lines = _trf_lines(spec.params, trf_min_rows(spec.params, spec.N, spec.delta_star, spec.contention))
    text = f"# {CSV_VERSION} kind={spec.kind}\n" + "\n".join(lines) + "\n"
    if out is not None:
        with open(out, "w") as fh:
            fh.write(text)
    return text


def best_psm(K, load, atim_grid, reps=5, seed=1, duration_s=20.0, warmup_s=2.0, params=None, jobs=1):
    """Sweep PSM over ``atim_grid``; return (best ATIM, {atim: mean throughput})."""
    atim_grid = tuple(atim_grid)
    if not atim_grid:
        raise ConfigError("ATIM grid must be non-empty")
    params = params or ProtocolParams()
    configs = [ScenarioConfig(protocol="psm", K=K, N=0, load=load, seed=seed + r, duration_s=duration_s,
                              warmup_s=warmup_s, atim_ms=a, params=params)
               for a in atim_grid for r in range(reps)]
    res = simulate_many(configs, jobs)
    thr = {a: statistics.fmean(m.throughput for m in res[i * reps:(i + 1) * reps])
           for i, a in enumerate(atim_grid)}
    return pick_best_atim(thr), thr


@dataclass
class ValidationRow:
    N: int
    T_rf: int
    delta_mac: float
    delta_sim: float
    sim_stderr: float
    abs_diff: float
    tolerance: float
    flagged: bool
    monotone: bool

    def csv(self):
        return ",".join([str(self.N), str(self.T_rf), fmt(self.delta_mac), fmt(self.delta_sim),
                         fmt(self.sim_stderr), fmt(self.abs_diff), fmt(self.tolerance),
                         str(self.flagged), str(self.monotone)])


def validate_analysis(N_grid, T_rf_grid, reps=5, seed=1, duration_s=20.0, warmup_s=2.0, params=None,
                      contention="formula", voice_switching="beacon", K=10, jobs=1):
    """Analytic loss against simulated realtime loss on an (N, T_rf) grid.

    ``monotone`` records whether the analytic loss did not rise from the
    previous T_rf of the same N.
    """
    params = params or ProtocolParams()
    points = [(N, T) for N in N_grid for T in T_rf_grid]
    configs = [ScenarioConfig(protocol="proposed", K=max(K, N, 2), N=N, load=0.0, seed=seed + r,
                              duration_s=duration_s, warmup_s=warmup_s,
                              T_rf_ms=T * params.mini_slot_us / 1000 if N else None,
                              voice_switching=voice_switching, params=params)
               for N, T in points for r in range(reps)]
    res = simulate_many(configs, jobs)
    rows = []
    prev = {}
    for gi, (N, T) in enumerate(points):
        d = LossCurve(params, N, contention)(T)
        sims = [m.realtime_loss_rate for m in res[gi * reps:(gi + 1) * reps]]
        mean, sd = _mean_std(sims)
        tol = loss_tolerance(d)
        mono = N not in prev or d <= prev[N] + 1e-12
        prev[N] = d
        rows.append(ValidationRow(N, T, d, mean, sd / math.sqrt(len(sims)), abs(mean - d), tol,
                                  abs(mean - d) > tol, mono))
    return rows


def oracle_lines(n1_max=4, W_values=(1, 2, 4, 8), t_q=3):
    lines = [ORACLE_COLUMNS]
    for r in oracle_diff_table(range(0, n1_max + 1), W_values, t_q):
        lines.append(",".join([
            str(r["n1"]), str(r["W"]), str(r["t_q"]), r["regime"], str(r["T_cp"]), fmt(r["raw_mass"]),
            fmt(r["max_abs_diff"]), fmt(r["max_abs_diff_raw"]), fmt(r["max_abs_diff_exact"]),
            str(r["flagged"]), ";".join(fmt(x) for x in r["oracle"]),
            ";".join(fmt(x) for x in r["formula"]),
        ]))
    return lines


# ---------------------------------------------------------------------------
# command line


def _int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _float_list(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser():
    ap = argparse.ArgumentParser(prog="headmac", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, sim=True):
        p.add_argument("--seed", type=int, default=None, help="base seed (replication r uses seed + r)")
        p.add_argument("--out", default=None, help="CSV output path (default stdout)")
        if sim:
            p.add_argument("--duration-s", type=float, default=None)
            p.add_argument("--reps", type=int, default=None)
            p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("run", help="run an experiment spec or a single scenario config")
    p.add_argument("spec")
    common(p)

    p = sub.add_parser("trf-min", help="minimum realtime frame per call count")
    p.add_argument("--n", type=_int_list, default=[2, 4, 6, 8, 10], help="comma-separated call counts")
    p.add_argument("--delta-star", type=float, default=0.01)
    p.add_argument("--contention", choices=CONTENTION_MODELS, default="formula")
    common(p, sim=False)

    p = sub.add_parser("validate", help="analytic vs simulated realtime loss")
    p.add_argument("--n", type=_int_list, default=[4, 6])
    p.add_argument("--trf", type=_int_list, required=True, help="realtime frame grid in mini-slots")
    p.add_argument("--contention", choices=CONTENTION_MODELS, default="formula")
    p.add_argument("--voice-switching", choices=VOICE_SWITCHING, default="beacon")
    common(p)

    p = sub.add_parser("oracle", help="contention formula vs enumeration")
    p.add_argument("--n1-max", type=int, default=4)
    p.add_argument("--w", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--t-q", type=int, default=3)
    common(p, sim=False)
    return ap


def _run_verb(args):
    with open(args.spec) as fh:
        text = fh.read()
    is_experiment = any(line.split("#", 1)[0].split("=", 1)[0].strip() == "kind"
                        for line in text.splitlines())
    if not is_experiment:
        cfg = parse_config_text(text)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.duration_s is not None:
            over["duration_s"] = args.duration_s
        cfg = cfg.with_(**over).validate() if over else cfg
        reps = args.reps or 1
        res = simulate_many([cfg.with_(seed=cfg.seed + r) for r in range(reps)], args.jobs)
        _emit(CSV_HEADER + "\n" + "".join(m.csv_row() + "\n" for m in res), args.out)
        return 0
    spec = parse_experiment_text(text)
    over = {"jobs": args.jobs}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.duration_s is not None:
        over["duration_s"] = args.duration_s
    if args.reps is not None:
        over["reps"] = args.reps
    spec = replace(spec, **over).validate()
    text = run_experiment(spec, args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            return _run_verb(args)
        if args.verb == "trf-min":
            params = ProtocolParams()
            rows = trf_min_rows(params, args.n, args.delta_star, args.contention)
            _emit("\n".join(_trf_lines(params, rows)) + "\n", args.out)
            return 0
        if args.verb == "validate":
            seed = 1 if args.seed is None else args.seed
            rows = validate_analysis(args.n, args.trf, reps=args.reps or 5, seed=seed,
                                     duration_s=args.duration_s or 20.0, contention=args.contention,
                                     voice_switching=args.voice_switching, jobs=args.jobs)
            buf = io.StringIO()
            buf.write(VALIDATE_COLUMNS + "\n")
            for r in rows:
                buf.write(r.csv() + "\n")
            _emit(buf.getvalue(), args.out)
            bad = [r for r in rows if r.flagged or not r.monotone]
            if bad:
                print(f"{len(bad)} of {len(rows)} rows outside tolerance or non-monotone", file=sys.stderr)
                return 1
            return 0
        if args.verb == "oracle":
            _emit("\n".join(oracle_lines(args.n1_max, tuple(args.w), args.t_q)) + "\n", args.out)
            return 0
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
