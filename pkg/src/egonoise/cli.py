"""Command-line pipeline: simulate, train-vae, train-ego, enhance, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed files), 4 numerical failure.
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
import json
import logging
import os
import sys
import time

import numpy as np

from . import mcem, metrics, mnmf, scenes, vae
from ._validation import NumericalError
from .checkpoint import CheckpointError
from .config import load_config
from .dsp import WavFormatError, read_wav, stft, write_wav
from .mcem import ConfigError, MissingCheckpointError
from .wiener import wiener_filter

logger = logging.getLogger("egonoise")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
TABLE_HEADER = "# egonoise metric table v1"
TABLE_COLUMNS = ("kind", "scheme", "K", "K_B", "K_E", "scene_id", "n",
                 "input_db", "output_db", "delta_db", "delta_ci95_db")


class DataError(Exception):
    pass


def ego_checkpoint_path(ego_dir, K_E):
    return os.path.join(ego_dir, f"ego_K{K_E}.ckpt")


def run_dir(enhanced_dir, scheme, K):
    return os.path.join(enhanced_dir, f"{scheme}_K{K}")


def _write_lines(path, lines):
    with open(path, "w") as fh:
        for ln in lines:
            fh.write(ln + "\n")


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------- commands

def cmd_simulate(cfg):
    manifest = cfg.path("manifest")
    out_dir = os.path.dirname(os.path.abspath(manifest))
    testset = scenes.build_testset(cfg.data.n_scenes, cfg.data.scenario, cfg.seed,
                                   base=cfg.scene_spec(), snr_ego_db=cfg.data.snr_ego_db)
    try:
        path = scenes.save_testset(testset, out_dir, os.path.basename(manifest))
    except OSError as exc:
        raise DataError(f"cannot write scenes to {out_dir}: {exc}") from exc
    avg = np.mean([s.meta["input_snr_db"] for s in testset])
    print(f"wrote {len(testset)} {cfg.data.scenario} scenes to {path} "
          f"(average input SNR {avg:.2f} dB)")
    return path


def cmd_train_vae(cfg):
    spec = cfg.scene_spec()
    corpus = scenes.speech_corpus(cfg.data.speech_utterances, cfg.seed, base=spec)
    if not corpus:
        raise DataError("empty speech corpus")
    power = np.concatenate([stft(c).power()[0].T for c in corpus])
    model = vae.init_model(power.shape[1], cfg.data.vae_latent_dim, seed=cfg.seed)
    model, history = vae.train(model, power, cfg.training)
    path = cfg.path("vae")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    vae.save_model(path, model, history)
    print(f"trained VAE for {len(history.train_loss)} epochs "
          f"(best epoch {history.best_epoch}); wrote {path}")
    return path


def _needed_ego_sizes(cfg):
    sizes = set()
    for scheme in cfg.mcem.schemes:
        for K in cfg.mcem.dict_sizes:
            sc = cfg.scheme_config(scheme, K)
            if sc.needs_ego:
                sizes.add(sc.K_E)
    return sorted(sizes)


def cmd_train_ego(cfg):
    sizes = _needed_ego_sizes(cfg)
    if not sizes:
        print("no scheme in the configuration needs a pre-trained ego-noise model")
        return []
    clip = scenes.ego_training_clip(cfg.scene_spec(), cfg.data.ego_duration,
                                    cfg.data.ego_gating_rate, seed=cfg.seed)
    spec = stft(clip)
    ego_dir = cfg.path("ego_dir")
    os.makedirs(ego_dir, exist_ok=True)
    paths = []
    for K_E in sizes:
        model, history = mnmf.train_ego(spec, K_E, iters=cfg.data.ego_sweeps, seed=cfg.seed)
        path = ego_checkpoint_path(ego_dir, K_E)
        mnmf.save_ego(path, model, history)
        print(f"K_E={K_E}: {len(history) - 1} sweeps, loss {history[0]:.6g} -> "
              f"{history[-1]:.6g}; wrote {path}")
        paths.append(path)
    return paths


def _load_ego_for(sc, ego_dir):
    if not sc.needs_ego:
        return None
    path = ego_checkpoint_path(ego_dir, sc.K_E)
    if not os.path.exists(path):
        raise MissingCheckpointError(
            f"scheme {sc.scheme!r} with K={sc.K} needs a pre-trained ego-noise model with "
            f"K_E={sc.K_E} at {path}; run 'egonoise train-ego' first")
    W, R = mnmf.load_ego(path)
    if W.shape[1] != sc.K_E:
        raise ConfigError(f"{path} holds {W.shape[1]} atoms, scheme needs K_E={sc.K_E}")
    return W, R


def enhance_scene(row, sc, vae_model, ego, out_dir):
    """Enhance one manifest scene; writes WAVs, the iteration log and diagnostics."""
    sid = row["scene_id"]
    mixture = read_wav(row["mixture"])
    spec = stft(mixture)
    model = mcem.build_joint_model(vae_model, spec, sc, ego)
    model, state = mcem.run_mcem(spec, model, sc)
    result = wiener_filter(spec, model, state)
    write_wav(os.path.join(out_dir, f"{sid}_enhanced.wav"), result.speech_clip)
    write_wav(os.path.join(out_dir, f"{sid}_enhanced_ch0.wav"), result.mono)
    lines = []
    for it, (loss, rate) in enumerate(zip(state.loss_history, state.acceptance), 1):
        lines.append(_json({"event": "iteration", "iter": it, "neg_q": round(loss, 6),
                            "acceptance": round(rate, 6)}))
    lines.append(_json({"event": "final_e_step", "acceptance": round(state.acceptance[-1], 6)}))
    _write_lines(os.path.join(out_dir, f"{sid}.log.jsonl"), lines)
    diag = result.diagnostics
    sidecar = {
        "scene_id": sid, "scheme": sc.scheme, "K": sc.K, "K_B": sc.K_B, "K_E": sc.K_E,
        "em_iters_run": len(state.loss_history), "mean_acceptance": float(np.mean(state.acceptance)),
        "gain_mean": float(np.mean(state.g)), "input_scale": float(state.scale),
        "speech_var_per_frame": [round(float(v), 9) for v in diag["speech_var_per_frame"]],
        "noise_var_per_frame": [round(float(v), 9) for v in diag["noise_var_per_frame"]],
    }
    with open(os.path.join(out_dir, f"{sid}.diagnostics.json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    return sid, len(state.loss_history)


def _enhance_job(args):
    return enhance_scene(*args)


def _read_rows(cfg):
    path = cfg.path("manifest")
    if not os.path.exists(path):
        raise DataError(f"scene manifest {path} not found; run 'egonoise simulate' first")
    rows = scenes.read_manifest(path)
    if not rows:
        raise DataError(f"scene manifest {path} lists no scenes")
    return rows


def cmd_enhance(cfg):
    rows = _read_rows(cfg)
    vae_path = cfg.path("vae")
    if not os.path.exists(vae_path):
        raise MissingCheckpointError(f"VAE checkpoint {vae_path} not found; run 'egonoise train-vae'")
    vae_model = vae.load_model(vae_path)
    # validate every run before any compute starts
    runs = []
    for scheme in cfg.mcem.schemes:
        for K in cfg.mcem.dict_sizes:
            sc = cfg.scheme_config(scheme, K)
            runs.append((sc, _load_ego_for(sc, cfg.path("ego_dir"))))
    for sc, ego in runs:
        out_dir = run_dir(cfg.path("enhanced"), sc.scheme, sc.K)
        os.makedirs(out_dir, exist_ok=True)
        jobs = [(row, sc, vae_model, ego, out_dir) for row in rows]
        t0 = time.time()
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                done = list(pool.map(_enhance_job, jobs))
        else:
            done = [_enhance_job(j) for j in jobs]
        for sid, n_iter in done:
            logger.info("%s %s K=%d: %d EM iterations", sid, sc.scheme, sc.K, n_iter)
        print(f"{sc.scheme} K={sc.K} (K_B={sc.K_B}, K_E={sc.K_E}): enhanced {len(done)} scenes "
              f"into {out_dir} in {time.time() - t0:.1f} s")
    return cfg.path("enhanced")


def evaluate_runs(rows, enhanced_dir, runs):
    """Per-scene and aggregated SI-SDR rows plus the list of missing outputs."""
    table, missing = [], []
    inputs = {}
    for sc in runs:
        report = metrics.MetricReport(f"{sc.scheme}_K{sc.K}")
        for row in rows:
            sid = row["scene_id"]
            est_path = os.path.join(run_dir(enhanced_dir, sc.scheme, sc.K), f"{sid}_enhanced_ch0.wav")
            if not os.path.exists(est_path):
                missing.append(est_path)
                continue
            speech = read_wav(row["speech"])
            if sid not in inputs:
                inputs[sid] = metrics.si_sdr(speech, read_wav(row["mixture"]))
            out_db = metrics.si_sdr(speech, read_wav(est_path))
            report.add(sid, inputs[sid], out_db)
            table.append(("scene", sc.scheme, sc.K, sc.K_B, sc.K_E, sid, 1,
                          inputs[sid], out_db, out_db - inputs[sid], None))
        if report.n >= 2:
            s = report.summary()
            table.append(("summary", sc.scheme, sc.K, sc.K_B, sc.K_E, "*", report.n,
                          s["input"][0], s["output"][0], s["delta"][0], s["delta"][1]))
        elif report.n == 1:
            d = float(report.deltas[0])
            table.append(("summary", sc.scheme, sc.K, sc.K_B, sc.K_E, "*", 1,
                          report.input_sdr[0], report.output_sdr[0], d, None))
    return table, missing


def format_table(table, missing=()):
    def cell(v):
        if v is None:
            return "na"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = [TABLE_HEADER,
             "# metric=si_sdr_db on channel 0; ci95=1.96*sd/sqrt(n) with population sd"]
    lines += [f"# missing\t{m}" for m in missing]
    lines.append("\t".join(TABLE_COLUMNS))
    lines += ["\t".join(cell(v) for v in r) for r in table]
    return lines


def read_table(path):
    """Rows of a metric table as dicts (numbers parsed, ``na`` -> None)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != TABLE_HEADER:
        raise DataError(f"{path}: not a metric table")
    body = [ln for ln in lines if not ln.startswith("#")]
    header = body[0].split("\t")
    out = []
    for ln in body[1:]:
        row = dict(zip(header, ln.split("\t")))
        for k in ("K", "K_B", "K_E", "n"):
            row[k] = int(row[k])
        for k in ("input_db", "output_db", "delta_db", "delta_ci95_db"):
            row[k] = None if row[k] == "na" else float(row[k])
        out.append(row)
    return out


def cmd_evaluate(cfg):
    rows = _read_rows(cfg)
    runs = [cfg.scheme_config(s, K) for s in cfg.mcem.schemes for K in cfg.mcem.dict_sizes]
    table, missing = evaluate_runs(rows, cfg.path("enhanced"), runs)
    path = os.path.join(cfg.paths.out, "metrics.tsv")
    os.makedirs(cfg.paths.out, exist_ok=True)
    _write_lines(path, format_table(table, missing))
    print(f"{'scheme':<9} {'K':>4} {'K_B':>4} {'K_E':>4} {'n':>4} {'in dB':>8} {'out dB':>8} "
          f"{'delta dB':>9} {'ci95':>6}")
    for r in table:
        if r[0] == "summary":
            ci = "na" if r[10] is None else f"{r[10]:.2f}"
            print(f"{r[1]:<9} {r[2]:>4} {r[3]:>4} {r[4]:>4} {r[6]:>4} {r[7]:>8.2f} {r[8]:>8.2f} "
                  f"{r[9]:>9.2f} {ci:>6}")
    print(f"wrote {path}")
    if missing:
        for m in missing:
            print(f"missing enhanced output: {m}", file=sys.stderr)
        raise DataError(f"{len(missing)} enhanced outputs missing; partial table written to {path}")
    return path


COMMANDS = {"simulate": cmd_simulate, "train-vae": cmd_train_vae, "train-ego": cmd_train_ego,
            "enhance": cmd_enhance, "evaluate": cmd_evaluate}


def _comma_list(conv):
    def parse(text):
        try:
            return tuple(conv(v) for v in text.split(",") if v)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--scheme", type=_comma_list(str),
                        help="comma-separated schemes (fixed, adaptive, partial)")
    common.add_argument("--dict-size", type=_comma_list(int), help="comma-separated total dictionary sizes K")
    common.add_argument("--scenario", choices=scenes.SCENARIOS)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="egonoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic test set")
    p.add_argument("--n-scenes", type=int)
    p = sub.add_parser("train-vae", parents=[common], help="train the speech VAE")
    p.add_argument("--epochs", type=int)
    sub.add_parser("train-ego", parents=[common], help="pre-train ego-noise dictionaries")
    for name, text in (("enhance", "enhance every scene of a manifest"),
                       ("evaluate", "SI-SDR table for enhanced outputs")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest")
        p.add_argument("--vae")
        p.add_argument("--ego-dir")
        p.add_argument("--enhanced")
    return parser


def _overrides(args):
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {"run.seed": get("seed"), "run.workers": get("workers"), "paths.out": get("out"),
            "mcem.scheme": get("scheme"), "mcem.dict_size": get("dict_size"),
            "scenes.scenario": get("scenario"), "scenes.n_scenes": get("n_scenes"),
            "vae.max_epochs": get("epochs"), "paths.manifest": get("manifest"),
            "paths.vae": get("vae"), "paths.ego_dir": get("ego_dir"),
            "paths.enhanced": get("enhanced")}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, WavFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
