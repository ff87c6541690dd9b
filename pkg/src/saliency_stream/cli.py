"""Command-line entry point: ``saliency-stream {vod,live,train,metrics,synth}``.

Exit codes: 0 ok, 2 configuration/data error, 3 oracle error, 4 training
error, 5 simulation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import abr, forecast, live
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import DatasetError, load_dataset, save_dataset, split_videos
from .model import MetricReport, VideoRecord, macro_average, metric_report
from .perception import ResponseCache, raw_weights, run_perception
from .ranking import rank_video, recurrence_T
from .rater import HttpOracle, HttpOracleConfig, MockOracle, MockOracleConfig, Oracle, OracleError
from .synth import synth_dataset, synth_trace

log = logging.getLogger("saliency_stream")

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_TRAINING, EXIT_SIMULATION = 0, 2, 3, 4, 5


class SimulationError(RuntimeError):
    pass


# --- shared plumbing ------------------------------------------------------------------


def make_oracle(cfg: ExperimentConfig, video: VideoRecord) -> Oracle:
    if cfg.oracle == "http":
        return HttpOracle(video, HttpOracleConfig(cfg.endpoint, cfg.model_name, cfg.api_key_env, cfg.timeout_s))
    return MockOracle(
        video,
        MockOracleConfig(
            window_bias_amplitude=cfg.window_bias_amplitude,
            rating_noise_std=cfg.rating_noise_std,
            comparator_swap_prob=cfg.comparator_swap_prob,
            latency_mean_s=cfg.latency_mean_s,
            latency_std_s=cfg.latency_std_s,
            rng_seed=cfg.rng_seed,
        ),
    )


def load_videos(cfg: ExperimentConfig) -> list[VideoRecord]:
    if cfg.dataset:
        return load_dataset(cfg.dataset, cfg.rng_seed, cfg.embed_dim)
    return synth_dataset(cfg.synth_videos, cfg.synth_chunks, cfg.rng_seed, cfg.embed_dim)


def load_traces(cfg: ExperimentConfig) -> list[tuple[str, abr.NetworkTrace]]:
    if cfg.traces:
        return [(Path(p).stem, abr.NetworkTrace.load(p)) for p in cfg.traces]
    out = []
    for k in range(cfg.n_traces):
        arr = synth_trace(cfg.trace_seconds, cfg.rng_seed * 1000 + k, cfg.trace_mean_kbps)
        out.append((f"synth{k}", abr.NetworkTrace(arr[:, 0], arr[:, 1])))
    return out


def header(cfg: ExperimentConfig, extra: str = "") -> str:
    return f"# saliency-stream {cfg.mode} seed={cfg.rng_seed} m={cfg.m}{(' ' + extra) if extra else ''}\n"


def write_csv(path: Path, rows: Sequence[dict], head: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(head)
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _map_videos(cfg: ExperimentConfig, fn, videos):
    if cfg.workers == 1:
        return [fn(v) for v in videos]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(fn, videos))


def _metric_cols(prefix: str, r: MetricReport | dict) -> dict:
    row = r if isinstance(r, dict) else r.as_row()
    keep = ("plcc", "srcc", "map50", "map15", "mae", "rmse")
    return {f"{prefix}_{k}": row[k] for k in keep}


# --- vod ------------------------------------------------------------------------------


def vod_one(cfg: ExperimentConfig, video: VideoRecord, cache: ResponseCache | None = None) -> dict:
    oracle = make_oracle(cfg, video)
    p = run_perception(video, cfg.m, oracle, cache)
    res = rank_video(p, oracle, cfg.sigma, cfg.kernel_size or None)
    gt = video.gt()
    raw = raw_weights(p)
    reports = {
        "raw": metric_report(raw, gt),
        "ranked": metric_report(res.normalized_weights, gt),
        "smoothed": metric_report(res.smoothed_weights, gt),
    }
    k = len(p.requests)
    return {
        "video": video,
        "reports": reports,
        "ledger": {
            "video_id": video.video_id,
            "D": len(video),
            "m": cfg.m,
            "perception_calls": oracle.ledger.rate_calls,
            "ranking_calls": res.sort_calls_used,
            "groups": k,
            "T_bound": recurrence_T(k),
            "tokens_estimate": oracle.ledger.total_tokens_estimate,
        },
        "curves": [
            {"video_id": video.video_id, "chunk": i, "raw": float(raw[i]), "ranked": float(res.normalized_weights[i]),
             "smoothed": float(res.smoothed_weights[i]), "gt": float(gt[i])}
            for i in range(len(video))
        ],
    }


def run_vod(cfg: ExperimentConfig) -> int:
    videos = load_videos(cfg)
    out = Path(cfg.out_dir)
    cache = ResponseCache(cfg.cache) if cfg.cache else None

    def job(v):
        try:
            return vod_one(cfg, v, cache)
        except OracleError as exc:
            log.error("video %s failed: %s", v.video_id, exc)
            return None

    results = [r for r in _map_videos(cfg, job, videos) if r is not None]
    if not results:
        raise OracleError("every video failed")
    metric_rows = []
    for r in results:
        rep = r["reports"]
        row = {"video_id": r["video"].video_id}
        for name in ("raw", "ranked", "smoothed"):
            row.update(_metric_cols(name, rep[name]))
        row["ranked_beats_raw"] = bool(rep["smoothed"].plcc > rep["raw"].plcc)
        metric_rows.append(row)
    mean = {"video_id": "mean"}
    for name in ("raw", "ranked", "smoothed"):
        mean.update(_metric_cols(name, macro_average([r["reports"][name] for r in results])))
    mean["ranked_beats_raw"] = all(r["ranked_beats_raw"] for r in metric_rows)
    metric_rows.append(mean)
    head = header(cfg, f"videos={len(results)}/{len(videos)}")
    write_csv(out / "vod_metrics.csv", metric_rows, head)
    write_csv(out / "vod_calls.csv", [r["ledger"] for r in results], head)
    write_csv(out / "vod_curves.csv", [c for r in results for c in r["curves"]], head)
    print(head.strip())
    print(f"mean PLCC raw={mean['raw_plcc']:.3f} smoothed={mean['smoothed_plcc']:.3f}; reports in {out}")
    return EXIT_OK if len(results) == len(videos) else EXIT_ORACLE


# --- train ----------------------------------------------------------------------------


def model_path(model_dir: str | Path, l_out: int) -> Path:
    return Path(model_dir) / f"forecaster_Lout{l_out}.json"


def train_one(cfg: ExperimentConfig, train_v, val_v, l_out: int, kind: str | None = None, lam: float | None = None):
    lam = cfg.lam if lam is None else lam
    embed_dim = train_v[0].embed_dim
    hyper = forecast.ForecastHyper(cfg.m, l_out, cfg.d_model, cfg.heads, embed_dim, lam, kind or cfg.kind)
    train_set = forecast.dataset_from_videos(train_v, cfg.m, l_out, cfg.stride)
    val_set = forecast.dataset_from_videos(val_v, cfg.m, l_out, cfg.stride) if val_v else None
    model = forecast.build_model(hyper, cfg.rng_seed)
    probe = train_set.subset(np.arange(min(4, len(train_set))))
    errors = forecast.gradient_check(model, probe, lam)
    worst = max(errors, key=errors.get)
    if errors[worst] >= 1e-4:
        raise forecast.TrainingError(f"gradient check failed for {worst}: relative error {errors[worst]:.2e}", worst)
    tc = forecast.TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.rng_seed, lam)
    result = forecast.train(model, train_set, val_set, tc)
    vplcc = forecast.validation_plcc(result.model, val_set) if val_set is not None else float("nan")
    return result, errors, vplcc


def run_train(cfg: ExperimentConfig) -> int:
    videos = load_videos(cfg)
    train_v, val_v, test_v = split_videos(videos, cfg.rng_seed)
    model_dir = Path(cfg.model_dir or Path(cfg.out_dir) / "models")
    model_dir.mkdir(parents=True, exist_ok=True)
    curve_rows, grad_report = [], {"seed": cfg.rng_seed, "tolerance": 1e-4, "models": {}}
    summary = []
    for l_out in cfg.outputs:
        result, errors, vplcc = train_one(cfg, train_v, val_v, l_out)
        forecast.save_model(model_path(model_dir, l_out), result.model)
        grad_report["models"][str(l_out)] = {"max_relative_error": max(errors.values()), "per_parameter": errors}
        for c in result.curve:
            curve_rows.append({"L_out": l_out, "epoch": c["epoch"], "train_loss": c["train_loss"], "val_loss": c["val_loss"]})
        summary.append({"L_out": l_out, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                        "val_plcc": vplcc, "path": str(model_path(model_dir, l_out))})
    head = header(cfg, f"split={len(train_v)}/{len(val_v)}/{len(test_v)}")
    out = Path(cfg.out_dir)
    write_csv(out / "train_curves.csv", curve_rows, head)
    write_csv(out / "train_summary.csv", summary, head)
    (out / "gradient_check.json").write_text(json.dumps(grad_report, indent=1, sort_keys=True))
    print(head.strip())
    for s in summary:
        print(f"L_out={s['L_out']}: best epoch {s['best_epoch']}, val loss {s['best_val_loss']:.4f}, val PLCC {s['val_plcc']:.3f}")
    return EXIT_OK


# --- live -----------------------------------------------------------------------------


def make_forecaster(cfg: ExperimentConfig):
    if cfg.forecaster == "none":
        return None
    if cfg.forecaster == "persistence":
        return live.PersistenceForecaster()
    model_dir = Path(cfg.model_dir or Path(cfg.out_dir) / "models")
    missing = [l for l in cfg.outputs if not model_path(model_dir, l).exists()]
    if missing:
        raise ConfigError(f"no trained model for L_out {missing} in {model_dir} (run the train subcommand first)")
    return live.ModelBank({l: forecast.load_model(model_path(model_dir, l)) for l in cfg.outputs})


def live_one(cfg, video, trace_name, trace, forecaster) -> dict:
    lcfg = live.LiveConfig(cfg.d, cfg.m, cfg.N, cfg.outputs, cfg.forecast_latency_est_s,
                           None, cfg.forecast_latency_std_s, cfg.ewma_alpha, cfg.rng_seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", live.ShortfallWarning)
        tl = live.run_session(video, make_oracle(cfg, video), forecaster, lcfg)
    problems = live.check_causality(tl, cfg.d)
    if problems:
        raise SimulationError(f"{video.video_id}: {problems[0]}")
    n = len(video)
    dw = live.decision_weights(tl, n, cfg.N)
    ladder = abr.BitrateLadder(tuple(cfg.ladder_kbps))
    params = abr.QoeParams(cfg.rebuffer_penalty, cfg.smoothness_penalty, cfg.quality_map, cfg.weight_scope)
    gt = video.gt()
    sims = {}
    for name, weighted in (("weighted", True), ("unweighted", False)):
        ctl = abr.MPCController(ladder, params, weighted)
        sims[name] = abr.simulate_session(n, trace, ctl, dw, gt, ladder, params, video.chunk_duration,
                                          cfg.N, cfg.buffer_cap_s, cfg.rng_seed)
    return {
        "timeline": tl,
        "row": {
            "video_id": video.video_id,
            "trace": trace_name,
            "utility": live.utility(tl),
            "utility_next_chunk": live.utility(tl, horizon="next"),
            "forecast_plcc": live.forecast_plcc(tl, gt),
            "shortfall_warnings": len(caught),
            "qoe_gt_weighted_mpc": sims["weighted"].weighted_qoe,
            "qoe_gt_unweighted_mpc": sims["unweighted"].weighted_qoe,
            "qoe_plain_weighted_mpc": sims["weighted"].unweighted_qoe,
            "qoe_plain_unweighted_mpc": sims["unweighted"].unweighted_qoe,
            "rebuffer_s_weighted_mpc": sims["weighted"].total_rebuffer_s,
        },
        "report": sims["weighted"],
    }


def run_live(cfg: ExperimentConfig) -> int:
    videos = load_videos(cfg)
    if cfg.dataset or len(videos) > 2:
        _, _, test_v = split_videos(videos, cfg.rng_seed)
        videos = test_v or videos
    traces = load_traces(cfg)
    forecaster = make_forecaster(cfg)
    out = Path(cfg.out_dir)
    (out / "timelines").mkdir(parents=True, exist_ok=True)
    jobs = [(v, name, tr) for v in videos for name, tr in traces]
    results = _map_videos(cfg, lambda j: live_one(cfg, j[0], j[1], j[2], forecaster), jobs)
    rows = []
    for r in results:
        row = r["row"]
        stem = f"{row['video_id']}__{row['trace']}"
        r["timeline"].save(out / "timelines" / f"{stem}.jsonl")
        (out / "timelines" / f"{stem}.session.json").write_text(r["report"].to_json())
        rows.append(row)
    head = header(cfg, f"forecaster={cfg.forecaster} L_out={cfg.outputs}")
    write_csv(out / "live_sessions.csv", rows, head)
    print(head.strip())
    print(f"mean utility {np.mean([r['utility'] for r in rows]):.3f} over {len(rows)} sessions; reports in {out}")
    return EXIT_OK


# --- metrics / synth ------------------------------------------------------------------


def run_metrics(cfg: ExperimentConfig) -> int:
    if not cfg.predictions:
        raise ConfigError("metrics mode needs a predictions CSV (video_id, chunk_index, weight)")
    videos = {v.video_id: v for v in load_videos(cfg)}
    preds: dict[str, dict[int, float]] = {}
    for lineno, r in enumerate(read_csv(cfg.predictions), 2):
        try:
            preds.setdefault(r["video_id"], {})[int(r["chunk_index"])] = float(r["weight"])
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{cfg.predictions}:{lineno}: {exc}") from None
    rows, reports = [], []
    for vid, p in sorted(preds.items()):
        if vid not in videos:
            raise DatasetError(f"{cfg.predictions}: unknown video {vid}")
        v = videos[vid]
        if sorted(p) != list(range(len(v))):
            raise DatasetError(f"{cfg.predictions}: video {vid} needs one weight per chunk")
        rep = metric_report(np.array([p[i] for i in range(len(v))]), v.gt())
        reports.append(rep)
        rows.append({"video_id": vid, **rep.as_row()})
    mean = macro_average(reports)
    rows.append({"video_id": "mean", **{k: v for k, v in mean.items() if k in rows[0]}})
    head = header(cfg)
    write_csv(Path(cfg.out_dir) / "metrics.csv", rows, head)
    print(head.strip())
    for r in rows:
        print(f"{r['video_id']}: PLCC {r['plcc']:.3f} SRCC {r['srcc']:.3f} mAP50 {r['map50']:.3f} mAP15 {r['map15']:.3f}")
    return EXIT_OK


def run_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    videos = synth_dataset(args.videos, args.chunks, args.seed, args.embed_dim)
    save_dataset(out / "dataset.csv", videos)
    for k in range(args.traces):
        arr = synth_trace(args.chunks * 2.0, args.seed * 1000 + k)
        abr.NetworkTrace(arr[:, 0], arr[:, 1]).save(out / f"trace{k}.txt")
    print(f"wrote {len(videos)} videos and {args.traces} traces to {out}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saliency-stream", description="Content-aware saliency weighting for adaptive streaming.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("vod", "rate, rank and smooth whole videos"),
                           ("live", "simulate live sessions with forecast weights feeding MPC"),
                           ("train", "train one forecaster per output length"),
                           ("metrics", "score a predictions CSV against ground truth")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--m", type=int, help="window length")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="per-chunk dataset CSV")
        p.add_argument("--workers", type=int)
        if name == "live":
            p.add_argument("--forecaster", choices=("model", "persistence", "none"))
            p.add_argument("--model-dir")
        if name == "train":
            p.add_argument("--model-dir")
            p.add_argument("--epochs", type=int)
        if name == "metrics":
            p.add_argument("--predictions")
    p = sub.add_parser("synth", help="write a synthetic dataset CSV and traces")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--chunks", type=int, default=120)
    p.add_argument("--traces", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "synth":
        return run_synth(args)
    try:
        cfg = load_config(
            args.config,
            mode=args.command,
            m=args.m,
            rng_seed=args.seed,
            out_dir=args.out,
            dataset=args.dataset,
            workers=args.workers,
            forecaster=getattr(args, "forecaster", None),
            model_dir=getattr(args, "model_dir", None),
            epochs=getattr(args, "epochs", None),
            predictions=getattr(args, "predictions", None),
        )
        runner = {"vod": run_vod, "live": run_live, "train": run_train, "metrics": run_metrics}[cfg.mode]
        return runner(cfg)
    except (ConfigError, DatasetError, abr.TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except forecast.TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (SimulationError, ValueError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
