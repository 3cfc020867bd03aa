"""Command-line entry point: ``vodkit <command> [flags]``.

Every command writes its files into ``--out`` (default ``$VODKIT_OUT`` or
``./out``) together with ``run.json``, the fully resolved configuration.
``--config run.json`` replays a run. Outputs are staged and moved into place
only when the command succeeds, so a failed run leaves nothing behind.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 data validation, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, adfilter, evalx, ingest, market, matest, synth, tensor, vod
from .errors import DataError, VodkitError

log = logging.getLogger("vodkit")

OUT_ENV = "VODKIT_OUT"
EXIT_USAGE, EXIT_IO = 2, 3
# keys that never go into run.json
_NOT_ECHOED = {"config", "func", "out", "verbose"}


def stream_seed(seed: int, *names: str) -> int:
    """Seed for a named random stream, e.g. ``stream_seed(7, "synth", "model")``.

    Streams are keyed by name, not creation order, so adding a stage never
    shifts the numbers another stage sees.
    """
    key = [zlib.crc32(n.encode()) for n in names]
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), *key]).generate_state(1, np.uint64)[0])


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


class Staging:
    """Collects outputs in a scratch directory; ``commit`` moves them to ``out``."""

    def __init__(self, out: Path):
        self.out = out
        out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".vodkit-", dir=out.parent))
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(_dump(obj), encoding="utf-8")
        return p

    def commit(self) -> list[Path]:
        self.out.mkdir(parents=True, exist_ok=True)
        moved = []
        for src in sorted(self.dir.rglob("*")):
            if src.is_file():
                dst = self.out / src.relative_to(self.dir)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
                moved.append(dst)
        return moved

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


@contextmanager
def staged(out: Path):
    st = Staging(out)
    try:
        yield st
        st.commit()
    finally:
        st.discard()


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _als_config(a, stage: str) -> matest.AlsConfig:
    return matest.AlsConfig(
        rank=a.rank, lam=a.lam, max_iters=a.max_iters, tol=a.tol,
        seed=stream_seed(a.seed, a.command, stage), threads=a.threads,
    )


def _load_matrix(a) -> tuple[ingest.ObservationMatrix, ingest.ClickLogReader]:
    reader = ingest.read_click_log(a.input, max_malformed=a.max_malformed)
    obs = ingest.aggregate(reader, a.min_exposures)
    log.info("loaded %s: %d x %d, %d observed cells", a.input, *obs.shape, obs.n_observed)
    return obs, reader


def _threshold(a, obs):
    if a.tau >= 1:
        return obs, 1.0
    kept, retention = ingest.threshold_filter(obs, a.tau)
    log.info("threshold %.4g kept %d of %d rows (%.2f%% of exposures)", a.tau, kept.shape[0], obs.shape[0], 100 * retention)
    return kept, retention


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(a, st: Staging) -> dict:
    model = synth.generate_model(
        a.m, a.n, a.rank, k=a.intents, seed=stream_seed(a.seed, "synth", "model"),
        link=a.link, spread=a.spread,
    )
    cfg = synth.SamplingConfig(
        rho=a.rho, exposures_per_observed_cell=a.exposures, seed=stream_seed(a.seed, "synth", "sample"),
        botfraction=a.bot_fraction, heterogeneous_exposures=a.heterogeneous_exposures,
    )
    smp = synth.sample_tensor(model, cfg) if a.intents else synth.sample(model, cfg)
    st.path("clicks.csv")
    st.path("truth.csv")
    info = synth.write_dataset(st.dir, smp)
    return {"records": info["rows"], "observed_cells": int(smp.obs.mask.sum()), "bots": int(smp.is_bot.sum())}


def cmd_estimate(a, st: Staging) -> dict:
    obs, reader = _load_matrix(a)
    kept, retention = _threshold(a, obs)
    cfg = _als_config(a, "fit")
    sp = evalx.split(kept, a.holdout, stream_seed(a.seed, "estimate", "split"))
    r2_in, r2_out, _ = evalx.evaluate(sp, a.algo, _als_config(a, "holdout-fit"))
    est = matest.estimate(kept, a.algo, cfg)
    est.write(st.path("estimate.csv"))
    st.path("estimate.json")
    metrics = {
        "algorithm": a.algo, "rank": a.rank, "lambda": a.lam,
        "rows_in": obs.shape[0], "rows_kept": kept.shape[0], "columns": obs.shape[1],
        "records": reader.rows, "malformed_rows": reader.malformed,
        "observed_cells": kept.n_observed, "exposure_retention": retention,
        "holdout_fraction": a.holdout, "test_cells": len(sp.test_values),
        "r2_in": r2_in, "r2_out": r2_out,
        "iterations": est.iterations, "final_objective": est.final_objective,
    }
    st.write_json("metrics.json", metrics)
    if a.spectrum:
        rows = ingest.singular_spectrum(obs, a.spectrum)
        with open(st.path("spectrum.csv"), "w", encoding="utf-8") as fh:
            k = min(obs.shape)
            fh.write("tau,retention," + ",".join(f"sigma{i + 1}" for i in range(k)) + "\n")
            for r in rows:
                fh.write(",".join([repr(r.tau), repr(r.retention), *(repr(float(x)) for x in r.singular_values)]) + "\n")
    return metrics


def cmd_vod(a, st: Staging) -> dict:
    obs, _ = _load_matrix(a)
    kept, _ = _threshold(a, obs)
    if a.estimate:
        est = matest.read_estimate(a.estimate)
        if est.shape != kept.shape or est.col_keys != kept.col_keys or est.row_keys != kept.row_keys:
            raise DataError(f"estimate {a.estimate} does not match the filtered observations")
    else:
        est = matest.estimate(kept, a.algo, _als_config(a, "fit"))
    rep = vod.vod(est, kept)
    rep.write(st.path("vod_per_category.csv"), quantiles_of=est.values)
    rep.write_pairs(st.path("vod_pairs.csv"))
    sn = vod.signal_noise(kept, est)
    sn.write(st.path("signal_noise.csv"))
    norm = rep.per_category_norm
    ok = norm[np.isfinite(norm)]
    return {
        "categories": len(norm), "undefined_categories": [rep.col_keys[j] for j in rep.undefined],
        "vod_norm_min": float(ok.min()) if ok.size else None,
        "vod_norm_max": float(ok.max()) if ok.size else None,
        "median_mu_diff": float(np.nanmedian(sn.mu_diff)), "median_var_diff": float(np.nanmedian(sn.var_diff)),
    }


_VARY = {"fill": "fill_fraction", "data": "data_points", "holdout": "holdout_fraction"}


def cmd_sweep(a, st: Staging) -> dict:
    obs, _ = _load_matrix(a)
    kept, _ = _threshold(a, obs)
    grid = list(a.grid)
    sweep = _VARY[a.vary]
    values = grid
    if sweep == "data_points":
        # grid given as shares of all records
        total = int(kept.counts.sum())
        if any(not 0 < g <= 1 for g in grid):
            raise DataError("--vary data takes record shares in (0, 1]")
        values = [max(1, int(round(g * total))) for g in grid]
    cfg = _als_config(a, "fit")
    res = evalx.run_sweep(
        kept, a.algos, sweep, values, cfg, seed=stream_seed(a.seed, "sweep", "grid"),
        holdout=a.holdout, workers=a.threads,
    )
    out = {}
    for algo in a.algos:
        name = f"sweep_{a.vary}_{algo.replace('+', '_')}.csv"
        evalx.ExperimentResult(res.for_algorithm(algo)).write(st.path(name))
        out[algo] = name
    if a.emit_plots_data:
        series = {
            algo: {
                "x": grid,
                "r2_in": [r.r2_in for r in res.for_algorithm(algo)],
                "r2_out": [r.r2_out for r in res.for_algorithm(algo)],
            }
            for algo in a.algos
        }
        st.write_json(f"plot_r2_vs_{a.vary}.json", {"sweep": sweep, "series": series})
    return {"files": out, "points": len(grid)}


def cmd_tensor(a, st: Staging) -> dict:
    reader = ingest.read_click_log(a.input, max_malformed=a.max_malformed)
    t = ingest.aggregate_tensor(reader, a.min_exposures)
    train, test, truth = tensor.tensor_split(t, a.holdout, stream_seed(a.seed, "tensor", "split"))
    cfg = _als_config(a, "fit")
    flat = tensor.estimate_flattened(train, cfg, a.algo)
    per = tensor.estimate_per_slice(train, cfg, a.algo)
    metrics = {
        "shape": list(t.shape), "observed_cells": int(t.mask.sum()), "test_cells": int(len(truth)),
        "rank": a.rank, "lambda": a.lam, "algorithm": a.algo,
        "r2_out_flattened": tensor.out_of_sample_r2(flat, test, truth),
        "r2_out_per_slice": tensor.out_of_sample_r2(per, test, truth),
        "cold_slices": [t.intent_keys[l] for l in per.cold_slices],
    }
    st.write_json("tensor_metrics.json", metrics)
    full = tensor.estimate_flattened(t, cfg, a.algo)
    for name in full.write_slices(st.dir / "slices"):
        st.path(str(Path("slices") / name.name))
    return metrics


def _load_vod_report(path) -> vod.VodReport:
    mat, rows, cols = vod.read_matrix(path)
    if np.isnan(mat).any() or (mat < 0).any() or (mat > 1).any():
        raise DataError(f"{path}: VoD values must lie in [0, 1]")
    return vod.VodReport(mat, np.full(mat.shape[1], np.nan), np.full(mat.shape[1], np.nan), None, cols, rows)


def cmd_market(a, st: Staging) -> dict:
    contracts = market.load_contracts(a.contracts)
    report = _load_vod_report(a.vod)
    rng_users = np.random.default_rng(stream_seed(a.seed, "market", "users"))
    rng_tokens = np.random.default_rng(stream_seed(a.seed, "market", "tokens"))
    observers = [f"observer{i}" for i in range(a.observers)]
    sessions: dict[int, market.SessionState] = {}
    transcript: list = []
    n_users = len(report.row_keys)
    pay_rows, seen = [], []
    for page in range(a.pages):
        row = int(rng_users.integers(n_users))
        s = sessions.get(row) or market.open_session(report.row_keys[row], rng_tokens)
        sessions[row] = s
        start = len(transcript)
        payments, _ = market.simulate_page_load(s, contracts, report, row, rng_tokens, observers, transcript)
        seen.append([e.token for e in transcript[start:] if e.party in observers])
        for p in payments:
            pay_rows.append((page, p.advertiser_id, p.token, p.chosen_category, p.paid, json.dumps(p.vod, sort_keys=True)))
    with open(st.path("payments.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("page", "advertiser_id", "token", "chosen_category", "paid", "vod"))
        w.writerows((pg, ad, tok, cat, repr(paid), v) for pg, ad, tok, cat, paid, v in pay_rows)
    # session numbers, not user ids: the audit never exports real ids
    with open(st.path("id_history.csv"), "w", encoding="utf-8") as fh:
        fh.write("session,page_load_seq,token\n")
        for n, row in enumerate(sorted(sessions)):
            for seq, tok in sessions[row].id_history:
                fh.write(f"{n},{seq},{tok}\n")
    tokens = [t for s in sessions.values() for _, t in s.id_history]
    summary = {
        "pages": a.pages, "advertisers": len(contracts), "observers": len(observers),
        "payments": len(pay_rows), "total_paid": float(sum(r[4] for r in pay_rows)),
        "sessions": len(sessions), "tokens_issued": len(tokens),
        "distinct_tokens": len(set(tokens)),
        "linkable_identities": market.linkable_identities(seen),
    }
    st.write_json("market_summary.json", summary)
    return summary


def cmd_serve(a, st: Staging) -> dict:
    contracts = market.load_contracts(a.contracts)
    report = _load_vod_report(a.vod)
    broker = market.Broker(contracts, report, seed=stream_seed(a.seed, "serve", "tokens"))
    n = len(report.row_keys) if a.users is None else min(a.users, len(report.row_keys))
    tokens = {report.row_keys[i]: broker.open(report.row_keys[i], i) for i in range(n)}
    st.write_json("sessions.json", tokens)
    server = market.ProtocolServer(broker, a.host, a.port)
    st.commit()
    host, port = server.address
    print(f"listening {host}:{port}", flush=True)
    try:
        if a.max_connections is None:
            server.serve_forever()
        else:
            # finish every open conversation before returning
            server.daemon_threads = False
            for _ in range(a.max_connections):
                server.handle_request()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"host": host, "port": port, "sessions": n}


def cmd_filter(a, st: Staging) -> dict:
    rl = adfilter.load_rules(a.rules)
    urls = list(a.url or [])
    if a.urls:
        with open(a.urls, encoding="utf-8") as fh:
            urls += [ln.strip() for ln in fh if ln.strip()]
    if not urls:
        raise DataError("give at least one --url or a --urls file")
    verdicts = []
    for u in urls:
        v = adfilter.classify_url(a.page_host, u, rl.rules, a.keywords)
        verdicts.append({"url": u, **v.to_json()})
    st.write_json("verdicts.json", verdicts)
    st.write_json("rule_diagnostics.json", {
        "counts": rl.counts,
        "skipped": [{"line": d.lineno, "reason": d.code, "text": d.text} for d in rl.diagnostics],
    })
    if len(verdicts) == 1:
        print(json.dumps(verdicts[0], sort_keys=True))
    return {"urls": len(urls), "ads": sum(v["is_ad"] for v in verdicts)}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
    g.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    g.add_argument("--config", type=Path, default=None, help="replay a run.json")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _fit_flags(p, algo="als"):
    p.add_argument("--algo", choices=matest.ALGORITHMS, default=algo)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8)


def _input_flags(p, tau=True):
    p.add_argument("--input", type=Path, required=True, help="click log CSV")
    p.add_argument("--min-exposures", type=int, default=1)
    p.add_argument("--max-malformed", type=float, default=0.01)
    if tau:
        p.add_argument("--tau", type=float, default=ingest.HUMAN_CTR_CEILING, help="row CTR ceiling (1 disables)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="vodkit", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"vodkit {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[common], help="synthetic click log from a latent model")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--n", type=int, default=31)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--intents", type=int, default=None, help="number of intent slices (tensor data)")
    p.add_argument("--rho", type=float, default=0.4)
    p.add_argument("--exposures", type=int, default=1000, help="exposures per observed cell")
    p.add_argument("--bot-fraction", type=float, default=0.0)
    p.add_argument("--link", choices=synth.LINKS, default="dot")
    p.add_argument("--spread", choices=("uniform", "heterogeneous"), default="uniform")
    p.add_argument("--heterogeneous-exposures", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", parents=[common], help="threshold, estimate, score")
    _input_flags(p)
    _fit_flags(p)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--spectrum", type=_floats, default=None, help="taus for a singular spectrum table")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("vod", parents=[common], help="value of data per user and category")
    _input_flags(p)
    _fit_flags(p)
    p.add_argument("--estimate", type=Path, default=None, help="reuse an estimate.csv")
    p.set_defaults(func=cmd_vod)

    p = sub.add_parser("sweep", parents=[common], help="R^2 against fill, data or holdout")
    _input_flags(p)
    _fit_flags(p)
    p.add_argument("--vary", choices=sorted(_VARY), default="fill")
    p.add_argument("--grid", type=_floats, default=[0.1, 0.2, 0.4, 0.8])
    p.add_argument("--algos", type=_words, default=list(matest.ALGORITHMS))
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--emit-plots-data", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tensor", parents=[common], help="flattened vs per-slice intent estimation")
    _input_flags(p, tau=False)
    _fit_flags(p)
    p.set_defaults(rank=tensor.FLAT_RANK)
    p.add_argument("--holdout", type=float, default=0.2)
    p.set_defaults(func=cmd_tensor)

    p = sub.add_parser("market", parents=[common], help="simulate page loads against contracts")
    p.add_argument("--contracts", type=Path, required=True)
    p.add_argument("--vod", type=Path, required=True, help="vod_pairs.csv from the vod command")
    p.add_argument("--pages", type=int, default=50)
    p.add_argument("--observers", type=int, default=1, help="non-contracted advertisers")
    p.set_defaults(func=cmd_market)

    p = sub.add_parser("serve", parents=[common], help="line-protocol broker server")
    p.add_argument("--contracts", type=Path, required=True)
    p.add_argument("--vod", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--users", type=int, default=None, help="open sessions for the first N users")
    p.add_argument("--max-connections", type=int, default=None, help="exit after serving N connections")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("filter", parents=[common], help="classify links as ads")
    p.add_argument("--rules", type=Path, required=True)
    p.add_argument("--keywords", type=_words, default=[])
    p.add_argument("--page-host", required=True)
    p.add_argument("--url", action="append")
    p.add_argument("--urls", type=Path, default=None, help="file with one URL per line")
    p.set_defaults(func=cmd_filter)
    return ap


def _with_config(argv: list[str], ap: argparse.ArgumentParser) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return ap.parse_args(argv)
    try:
        cfg = json.loads(known.config.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{known.config}: not valid JSON ({exc.msg})") from exc
    command = cfg.pop("command", None)
    cfg.pop("version", None)
    names = set(ap._subparsers._group_actions[0].choices)
    if not any(x in names for x in argv):
        if command is None:
            ap.error(f"{known.config} names no command")
        argv = [command, *argv]
    sub = ap._subparsers._group_actions[0].choices[command or next(x for x in argv if x in names)]
    for key in ("input", "estimate", "contracts", "vod", "rules", "urls"):
        if cfg.get(key) is not None:
            cfg[key] = Path(cfg[key])
    unknown = sorted(set(cfg) - {act.dest for act in sub._actions})
    if unknown:
        raise DataError(f"{known.config}: unknown keys {unknown}")
    for act in sub._actions:
        if act.dest in cfg:
            act.required = False
    sub.set_defaults(**cfg)
    return ap.parse_args(argv)


def _resolved(a) -> dict:
    cfg = {"command": a.command, "version": __version__}
    for k, v in sorted(vars(a).items()):
        if k in _NOT_ECHOED or k == "command":
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        a = _with_config(argv, ap)
    except VodkitError as exc:
        print(f"vodkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vodkit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not getattr(a, "command", None):
        ap.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(a.verbose, 2), format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if a.threads < 1:
        ap.error("--threads must be at least 1")
    out = a.out or Path(os.environ.get(OUT_ENV, "out"))
    try:
        with staged(out) as st:
            st.write_json("run.json", _resolved(a))
            summary = a.func(a, st)
        log.info("%s: %s", a.command, summary)
    except VodkitError as exc:
        print(f"vodkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vodkit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
