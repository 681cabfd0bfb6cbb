"""Command-line entry point: ``chanpred <subcommand> [options]``.

Settings come from built-in defaults, then an INI-style config file
(``--config``), then ``--set section.key=value`` overrides.  Sections are
``[sim]``, ``[generate]``, ``[model]``, ``[train]`` and ``[estimation]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import io
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io as lio
from .channel import (EstimationConfig, NumericalError, SimConfig, generate_sequence,
                      sample_covariance, sample_path_set)
from .evaluation import (MetricsReport, bench_inference, bench_paired, count_table,
                         linear_extrap_baseline, mrt_capacity, per_frame_mse, persistence_baseline,
                         write_svg_plot)
from .model import ModelConfig, init_params, permute_weights, predict
from .seeding import substream
from .training import (TrainConfig, WindowDataset, noisy_mmse_batch, shuffle_ablation, train,
                       unpack_complex)

log = logging.getLogger("chanpred")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class GenerateConfig:
    num_speeds: int = 1
    speed_min_kmh: float | None = None
    speed_max_kmh: float | None = None
    delay_spread_min_ns: float = 50.0
    delay_spread_max_ns: float = 300.0
    test_frames: int = 1000


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(dtype="float32"))
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    seed: int = 0
    out: Path = Path(".")


def _convert(section, key, type_name, raw: str):
    t = str(type_name).replace(" ", "")
    text = raw.strip()
    try:
        if text.lower() == "none" and "None" in t:
            return None
        if t.startswith("int"):
            return int(text)
        if t.startswith("float"):
            return float(text)
        if t.startswith("bool"):
            if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes", "on")
        if t.startswith("tuple"):
            lo, hi = (float(v) for v in text.split(","))
            return (lo, hi)
    except ValueError as exc:
        raise UsageError(f"invalid value for {section}.{key}: {raw!r}") from exc
    return text


def _apply(obj, section: str, values: dict):
    types = {f.name: f.type for f in fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in types or key == "seed":
            raise UsageError(f"unknown config key {section}.{key}")
        changes[key] = _convert(section, key, types[key], raw)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{section}] settings: {exc}") from exc


SECTIONS = ("sim", "generate", "model", "train", "estimation")


def load_run_config(config_path=None, overrides=(), seed=None, out=None) -> RunConfig:
    """Merge defaults, config file and ``section.key=value`` overrides (later wins)."""
    layers = {s: {} for s in SECTIONS}
    if config_path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(config_path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config file {config_path}: {exc}") from exc
        for sec in cp.sections():
            if sec not in layers:
                raise UsageError(f"unknown config section [{sec}]")
            layers[sec].update(cp[sec])
    for item in overrides:
        key, eq, value = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not eq or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if sec not in layers:
            raise UsageError(f"unknown config section in override {key!r}")
        layers[sec][name] = value
    rc = RunConfig()
    for sec in SECTIONS:
        setattr(rc, sec, _apply(getattr(rc, sec), sec, layers[sec]))
    if seed is not None:
        rc.seed = int(seed)
    rc.sim = replace(rc.sim, seed=rc.seed)
    rc.train = replace(rc.train, seed=rc.seed)
    if out is not None:
        rc.out = Path(out)
    return rc


# ---------------------------------------------------------------- helpers


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    lio.atomic_write_text(path, buf.getvalue())
    return buf.getvalue()


def _load_sequences(path) -> list:
    data = lio.read_lcp1(path)
    return [s.astype(np.complex128) for s in data]


def _model_cfg_for(rc: RunConfig, seqs) -> ModelConfig:
    R, T = seqs[0].shape[1:]
    if (R, T) != (rc.model.R, rc.model.T):
        log.info("model antenna dims taken from data: R=%d, T=%d", R, T)
    return rc.model.replace(R=int(R), T=int(T))


def _covariance(rc: RunConfig, seqs) -> np.ndarray:
    R, T = seqs[0].shape[1:]
    if rc.estimation.cov_source == "identity":
        return np.eye(R * T, dtype=complex)
    return sample_covariance(seqs)


# ---------------------------------------------------------------- commands


def cmd_generate(rc: RunConfig, args):
    g = rc.generate
    if g.test_frames >= rc.sim.num_frames:
        raise UsageError("generate.test_frames must be smaller than sim.num_frames")
    rng = substream(rc.seed, "sim")
    vmin = rc.sim.speed_kmh if g.speed_min_kmh is None else g.speed_min_kmh
    vmax = vmin if g.speed_max_kmh is None else g.speed_max_kmh
    trains, tests, metas = [], [], []
    for _ in range(g.num_speeds):
        speed = float(rng.uniform(vmin, vmax)) if vmax > vmin else float(vmin)
        spread = float(rng.uniform(g.delay_spread_min_ns, g.delay_spread_max_ns))
        cfg = replace(rc.sim, speed_kmh=speed, delay_spread_ns=spread)
        seq = generate_sequence(cfg, sample_path_set(cfg, rng)).data
        split = cfg.num_frames - g.test_frames
        trains.append(seq[:split])
        tests.append(seq[split:])
        metas.append(cfg.to_dict())
    out = rc.out
    train_path, test_path = out / "train.lcp1", out / "test.lcp1"
    base = {"samples": metas, "seed": rc.seed, "test_frames": g.test_frames}
    lio.write_lcp1(train_path, np.stack(trains), {**base, "split": "train"})
    lio.write_lcp1(test_path, np.stack(tests), {**base, "split": "test"})
    print(f"wrote {train_path} ({len(trains)} x {trains[0].shape[0]} frames) and "
          f"{test_path} ({len(tests)} x {tests[0].shape[0]} frames)")


def _train_paths(rc, args):
    train_path = Path(args.train or rc.out / "train.lcp1")
    test_path = Path(args.test or rc.out / "test.lcp1")
    return train_path, test_path


def _datasets(rc, args):
    train_path, test_path = _train_paths(rc, args)
    tr_seqs = _load_sequences(train_path)
    te_seqs = _load_sequences(test_path) if test_path.exists() else None
    mc = _model_cfg_for(rc, tr_seqs)
    tr = WindowDataset.from_sequences(tr_seqs, mc.N_P, mc.N_L)
    te = WindowDataset.from_sequences(te_seqs, mc.N_P, mc.N_L) if te_seqs else None
    return mc, tr, te, tr_seqs


def _history_rows(history):
    return [[h["epoch"], h["train_loss"], h.get("test_loss", ""), h["lr"]] for h in history]


def cmd_train(rc: RunConfig, args):
    mc, tr, te, tr_seqs = _datasets(rc, args)
    cov = _covariance(rc, tr_seqs)
    res = train(mc, tr, te, rc.train, cov=cov)
    best = res.predictor.with_params(res.best_params)
    lio.save_checkpoint(rc.out / "model.lckp", best)
    lio.save_checkpoint(rc.out / "model_final.lckp", res.predictor)
    _write_rows(rc.out / "metrics.csv", ["epoch", "train_loss", "test_loss", "lr"],
                _history_rows(res.history))
    if res.history and not args.no_plot:
        series = {"train": [h["train_loss"] for h in res.history]}
        if "test_loss" in res.history[0]:
            series["test"] = [h["test_loss"] for h in res.history]
        write_svg_plot(rc.out / "loss.svg", series, "epoch", f"{rc.train.loss} loss")
    print(f"trained {len(res.history)} epochs; best epoch {res.best_epoch}; "
          f"checkpoint {rc.out / 'model.lckp'}")


def _predict_with(name, predictor, past, N_L):
    if name == "model":
        return predictor.predict(past)
    if name == "persistence":
        return persistence_baseline(past, N_L)
    if name == "linear":
        return linear_extrap_baseline(past, N_L)
    raise UsageError(f"unknown predictor {name!r}")


def _eval_report(predictor, ds, rc, snr_db, which="model", cov=None, seed_name="test_noise"):
    idx = np.arange(len(ds))
    clean_past, future = ds.past(idx), ds.future(idx)
    past = clean_past
    if snr_db is not None:
        past = noisy_mmse_batch(clean_past, snr_db, cov, substream(rc.seed, seed_name))
    N_L = ds.N_L
    if which == "oracle":
        preds = future.copy()
    else:
        preds = _predict_with(which, predictor, past, N_L)
    cap = mrt_capacity(preds, future, rc.estimation.snr_db)
    baselines = {"persistence": per_frame_mse(persistence_baseline(past, N_L), future),
                 "linear": per_frame_mse(linear_extrap_baseline(past, N_L), future)}
    return MetricsReport(per_frame_mse(preds, future), capacity=cap.mean,
                         capacity_skipped=cap.skipped, baselines=baselines)


def cmd_eval(rc: RunConfig, args):
    predictor = lio.load_checkpoint(args.checkpoint) if args.checkpoint else None
    if predictor is None and args.predictor == "model":
        raise UsageError("eval --predictor model needs --checkpoint")
    seqs = _load_sequences(args.data)
    mc = predictor.cfg if predictor else _model_cfg_for(rc, seqs)
    if predictor and tuple(seqs[0].shape[1:]) != (mc.R, mc.T):
        raise ValueError(f"data antennas {seqs[0].shape[1:]} do not match checkpoint ({mc.R}, {mc.T})")
    ds = WindowDataset.from_sequences(seqs, mc.N_P, mc.N_L)
    cov = None
    if args.snr is not None:
        cov = _covariance(rc, _load_sequences(args.cov_data) if args.cov_data else seqs)
    rep = _eval_report(predictor, ds, rc, args.snr, args.predictor, cov)
    lio.atomic_write_text(rc.out / "report.csv", rep.to_csv())
    if not args.no_plot:
        series = {args.predictor: rep.per_frame_db}
        series.update({k: 10 * np.log10(v) for k, v in rep.baselines.items()})
        write_svg_plot(rc.out / "mse.svg", series, "future frame", "MSE (dB)")
    print(rep.to_csv(), end="")


def cmd_ablate(rc: RunConfig, args):
    if args.mode != "shuffle":
        raise UsageError(f"unknown ablation mode {args.mode!r}")
    if args.checkpoint:
        rc.model = lio.load_checkpoint(args.checkpoint).cfg
    mc, tr, te, tr_seqs = _datasets(rc, args)
    if te is None:
        raise UsageError("ablate needs a test dataset")
    cov = _covariance(rc, tr_seqs)
    rows = []
    reports = {}
    for tag in ("unshuffled", "shuffled"):
        trd, ted = tr, te
        if tag == "shuffled":
            trd, ted = shuffle_ablation(tr, rc.seed), shuffle_ablation(te, rc.seed)
        res = train(mc, trd, ted, rc.train, cov=cov)
        rep = _eval_report(res.predictor, ted, rc, rc.train.test_snr_db, "model", cov)
        lio.atomic_write_text(rc.out / f"report_{tag}.csv", rep.to_csv())
        reports[tag] = (res, rep)
        rows.append([tag, rep.mean_mse, res.history[-1]["test_loss"] if res.history else ""])
    if mc.mixer == "tmlp":
        res = reports["unshuffled"][0]
        perm = substream(rc.seed, "perm").permutation(mc.N_P)
        x = res.predictor.features(te.past(np.arange(min(len(te), 64))))
        moved = permute_weights(res.predictor.params, perm, mc)
        gap = float(np.max(np.abs(predict(x[:, perm], moved, mc) - predict(x, res.predictor.params, mc))))
        rows.append(["permute_weights_max_abs_diff", gap, ""])
    text = _write_rows(rc.out / "ablation.csv", ["run", "mean_test_mse", "final_test_loss"], rows)
    print(text, end="")


def cmd_count(rc: RunConfig, args):
    rows = count_table(rc.model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value"])
    w.writerows(rows)
    if args.write:
        lio.atomic_write_text(rc.out / "count.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    if not dict(rows)["complexity_match"]:
        raise NumericalError("instrumented multiplication tally differs from the closed form")


def cmd_bench(rc: RunConfig, args):
    rows = []
    if args.checkpoint:
        pred = lio.load_checkpoint(args.checkpoint, dtype=np.float32)
        st = bench_inference(pred.params, pred.cfg, repeats=args.repeats)
        rows.append([pred.cfg.mixer, st.median_ms, st.p95_ms, st.mults_per_ms])
        if args.compare:
            cfg = pred.cfg.replace(mixer="attention" if pred.cfg.mixer == "tmlp" else "tmlp")
            other = init_params(cfg, substream(rc.seed, "init"), dtype=np.float32)
            st = bench_inference(other, cfg, repeats=args.repeats)
            rows.append([cfg.mixer, st.median_ms, st.p95_ms, st.mults_per_ms])
    else:
        stats = bench_paired(rc.model, repeats=args.repeats, seed=rc.seed)
        rows = [[k, s.median_ms, s.p95_ms, s.mults_per_ms] for k, s in stats.items()]
    header = ["mixer", "median_ms", "p95_ms", "mults_per_ms"]
    text = _write_rows(rc.out / "bench.csv", header, rows)
    print(text, end="")


def cmd_dump_weights(rc: RunConfig, args):
    pred = lio.load_checkpoint(args.checkpoint)
    if pred.cfg.mixer != "tmlp":
        raise UsageError("dump-weights needs a tmlp checkpoint")
    out_dir = Path(args.out_dir or rc.out / "weights")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(pred.cfg.N_enc):
        for w in ("W1", "W2"):
            buf = io.StringIO()
            np.savetxt(buf, pred.params[f"layers.{i}.tmlp.{w}"].data, delimiter=",", fmt="%.8g")
            path = out_dir / f"layer{i}_{w}.csv"
            lio.atomic_write_text(path, buf.getvalue())
            written.append(path)
    print("\n".join(str(p) for p in written))


def read_csi_csv(path, R: int, T: int) -> np.ndarray:
    """Frames as rows of ``2RT`` numbers [Re h11, Im h11, Re h12, ...]; a header row is skipped."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if lines and not _is_numeric_row(lines[0]):
        lines = lines[1:]
    data = np.loadtxt(lines, delimiter=",", ndmin=2)
    if data.shape[1] != 2 * R * T:
        raise ValueError(f"{path}: expected {2 * R * T} columns for R={R}, T={T}, got {data.shape[1]}")
    return unpack_complex(data, R, T)


def _is_numeric_row(line: str) -> bool:
    try:
        [float(v) for v in line.split(",")]
    except ValueError:
        return False
    return True


def cmd_import(rc: RunConfig, args):
    R, T = args.dims
    if args.format == "csv":
        frames = read_csi_csv(args.input, R, T)
    else:
        raw = np.fromfile(args.input, dtype="<c8")
        if raw.size % (R * T):
            raise ValueError(f"{args.input}: {raw.size} complex values is not a multiple of R*T={R * T}")
        frames = raw.reshape(-1, R, T)
    fps = args.frames_per_sample or frames.shape[0]
    n = frames.shape[0] // fps
    if n == 0:
        raise ValueError(f"{args.input}: {frames.shape[0]} frames is fewer than frames_per_sample={fps}")
    if n * fps != frames.shape[0]:
        log.warning("dropping %d trailing frames", frames.shape[0] - n * fps)
    samples = frames[: n * fps].reshape(n, fps, R, T)
    out = Path(args.output or rc.out / "imported.lcp1")
    lio.write_lcp1(out, samples, {"source": str(args.input), "format": args.format, "R": R, "T": T})
    print(f"wrote {out} ({n} x {fps} frames, R={R}, T={T})")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI-style config file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory (default .)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")

    parser = _Parser(prog="chanpred", description="MIMO channel prediction laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="simulate train/test datasets")

    p = sub.add_parser("train", parents=[common], help="train a predictor")
    p.add_argument("--train", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or reference predictor")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--snr", type=float, help="input SNR in dB (default: clean inputs)")
    p.add_argument("--cov-data", type=Path, help="dataset for the MMSE covariance (default: --data)")
    p.add_argument("--predictor", choices=["model", "persistence", "linear", "oracle"], default="model")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("ablate", parents=[common], help="paired shuffled/unshuffled training")
    p.add_argument("--mode", default="shuffle")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--train", type=Path)
    p.add_argument("--test", type=Path)

    p = sub.add_parser("count", parents=[common], help="parameter and multiplication counts")
    p.add_argument("--write", action="store_true", help="also write count.csv to --out")

    p = sub.add_parser("bench", parents=[common], help="batch-1 inference latency")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--compare", action="store_true", help="with --checkpoint, also time the other mixer")

    p = sub.add_parser("dump-weights", parents=[common], help="write TMLP weights as CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("import", parents=[common], help="convert measured CSI to LCP1")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=["csv", "raw"], default="csv")
    p.add_argument("--dims", type=int, nargs=2, metavar=("R", "T"), required=True)
    p.add_argument("--frames-per-sample", type=int)
    p.add_argument("--output", type=Path)
    return parser


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "count": cmd_count, "bench": cmd_bench, "dump-weights": cmd_dump_weights, "import": cmd_import,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_run_config(args.config, args.overrides, args.seed, args.out)
        rc.out.mkdir(parents=True, exist_ok=True)
        sink = io.StringIO() if args.quiet else sys.stdout
        with contextlib.redirect_stdout(sink):
            COMMANDS[args.command](rc, args)
    except UsageError as exc:
        print(f"chanpred: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"chanpred: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"chanpred: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
