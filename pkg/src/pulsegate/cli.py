"""Command-line pipeline driver.

Every command resolves its configuration from defaults, then an optional
JSON config file, then explicit flags (later wins). The seed falls back to
the PULSEGATE_SEED environment variable. Each run writes a JSON manifest
recording inputs, outputs, the effective config and its hash, and wall
time; metric artifacts embed the same hash so `report` can refuse to mix
runs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import beats as beats_mod
from . import identify, rpeak, signal_io, verify

DEFAULTS = {
    "synth": {"subjects": 10, "beats": 200, "fs": 500.0, "seed": None,
              "sessions": 1, "noise_sigma": None, "drift": 0.05,
              "prefix": "s", "out": None},
    "ingest": {"input": None, "format": "csv", "fs": None, "gain": None,
               "subject_id": None, "session_id": 0, "target_fs": None,
               "seed": None, "out": None},
    "train-detector": {"corpus": None, "epochs": 100, "batch_size": 8,
                       "lr": 1e-3, "val_fraction": 0.2, "seed": None,
                       "deep_supervision": True, "out": None},
    "detect": {"model": None, "record": None, "threshold": 0.5,
               "min_distance": 100, "seed": None, "out": None},
    "segment": {"record": None, "peaks": None, "width": 256,
                "subject_id": None, "session_id": 0, "seed": None,
                "out": None},
    "train-id": {"beats": None, "scheme": "60-20-20", "epochs": 500,
                 "batch_size": 32, "lr": 3e-4, "fold_count": 10,
                 "eval_fold": 0, "patience": None, "seed": None, "out": None},
    "identify": {"model": None, "beats": None, "fusion_k": 1, "seed": None,
                 "out": None},
    "cross-session": {"beats": None, "epochs": 50, "batch_size": 32,
                      "lr": 3e-4, "seed": None, "out": None},
    "train-siamese": {"embedder": None, "beats": None, "epochs": 75,
                      "matched_per_subject": 10, "mismatch_multiple": 21.5,
                      "smote_ratio": 21.5, "k_neighbors": 5, "lr": 1e-3,
                      "seed": None, "out": None},
    "enroll": {"embedder": None, "beats": None, "seed": None, "out": None},
    "verify": {"embedder": None, "head": None, "templates": None,
               "beats": None, "backend": "siamese", "seed": None,
               "out": None},
    "evaluate": {"scheme": None, "beats": None, "epochs": 30,
                 "batch_size": 32, "lr": 3e-4, "fold_count": 10,
                 "embedder": None, "head": None, "backend": "siamese",
                 "enroll_fraction": 0.4, "fusion_k": 1, "seed": None,
                 "out": None},
    "report": {"inputs": None, "force": False, "seed": None, "out": None},
}


class CliError(Exception):
    """Raised for contract violations; printed as a one-line diagnostic."""


def canonical_config(command, cfg) -> str:
    return json.dumps({"command": command, **cfg}, sort_keys=True)


def config_hash(command, cfg) -> str:
    return hashlib.sha256(canonical_config(command, cfg).encode()).hexdigest()


def resolve_config(command, args) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys for {command}: {unknown}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("seed") is None:
        cfg["seed"] = int(os.environ.get("PULSEGATE_SEED", "0"))
    return cfg


def write_manifest(path, command, cfg, inputs, outputs, started) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(command, cfg),
        "seed": cfg.get("seed"),
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "versions": {"pulsegate": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _need(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            flag = "--" + key.replace("_", "-")
            raise CliError(f"missing required option {flag}")


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg, chash):
    _need(cfg, "out")
    records = signal_io.synth_corpus(
        cfg["subjects"], cfg["beats"], fs=cfg["fs"], seed=cfg["seed"],
        sessions=cfg["sessions"], noise_sigma=cfg["noise_sigma"],
        amplitude_drift=cfg["drift"], subject_prefix=cfg["prefix"])
    manifest = signal_io.save_corpus(records, cfg["out"], config_hash=chash)
    return [], [manifest]


def cmd_ingest(cfg, chash):
    _need(cfg, "input", "out")
    if cfg["format"] == "csv":
        record = signal_io.load_csv(cfg["input"], subject_id=cfg["subject_id"],
                                    session_id=cfg["session_id"])
    elif cfg["format"] in ("int16", "float32"):
        if cfg["fs"] is None:
            raise CliError(f"--fs is required for {cfg['format']} input")
        record = signal_io.load_raw(cfg["input"], cfg["fs"], cfg["format"],
                                    gain=cfg["gain"],
                                    subject_id=cfg["subject_id"])
    else:
        raise CliError(f"unknown input format {cfg['format']!r}")
    if cfg["target_fs"] is not None:
        record = signal_io.resample(record, cfg["target_fs"])
    signal_io.save_csv(record, cfg["out"], config_hash=chash)
    return [cfg["input"]], [cfg["out"]]


def cmd_train_detector(cfg, chash):
    _need(cfg, "corpus", "out")
    records = signal_io.load_corpus(cfg["corpus"])
    windows = []
    for rec in records:
        windows.extend(rpeak.make_windows(rec))
    aux = None if cfg["deep_supervision"] else {}
    graph, history = rpeak.train_detector(
        windows, epochs=cfg["epochs"], seed=cfg["seed"], aux_weights=aux,
        batch_size=cfg["batch_size"], lr=cfg["lr"],
        val_fraction=cfg["val_fraction"])
    from .engine import save_model
    save_model(graph, cfg["out"])
    hist_path = cfg["out"] + ".history.json"
    _write_json(hist_path, {"config_hash": chash, "seed": cfg["seed"],
                            "epochs": history})
    return [cfg["corpus"]], [cfg["out"], hist_path]


def cmd_detect(cfg, chash):
    _need(cfg, "model", "record", "out")
    from .engine import load_model
    graph = load_model(cfg["model"])
    record = signal_io.load_csv(cfg["record"])
    peaks = rpeak.detect_rpeaks(graph, record, threshold=cfg["threshold"],
                                min_distance=cfg["min_distance"])
    rpeak.save_peaks(peaks, cfg["out"], config_hash=chash)
    return [cfg["model"], cfg["record"]], [cfg["out"]]


def cmd_segment(cfg, chash):
    _need(cfg, "record", "out")
    if os.path.isdir(cfg["record"]):
        if cfg["peaks"]:
            raise CliError("--peaks applies to a single record, not a corpus")
        records = signal_io.load_corpus(cfg["record"])
        beats, skipped = beats_mod.segment_corpus(records, w=cfg["width"])
    else:
        record = signal_io.load_csv(cfg["record"], subject_id=cfg["subject_id"],
                                    session_id=cfg["session_id"])
        peaks = rpeak.load_peaks(cfg["peaks"]) if cfg["peaks"] else None
        beats, skipped = beats_mod.segment(record, peaks, w=cfg["width"])
    if not beats:
        raise CliError("no beats survived segmentation")
    beats_mod.save_beats(beats, cfg["out"], config_hash=chash)
    inputs = [cfg["record"]] + ([cfg["peaks"]] if cfg["peaks"] else [])
    print(f"segmented {len(beats)} beats ({skipped} peaks skipped)")
    return inputs, [cfg["out"], cfg["out"] + ".json"]


def _train_identify_from_cfg(beats, cfg):
    plan = identify.make_split(beats, cfg["scheme"], seed=cfg["seed"],
                               fold_count=cfg.get("fold_count", 10))
    model = identify.build_identify_model(
        len({b.subject_id for b in beats}), seed=cfg["seed"],
        beat_width=beats[0].samples.size)
    eval_fold = cfg.get("eval_fold") if cfg["scheme"] == "stratified-10-fold" \
        else None
    model, history = identify.train_identify(
        model, beats, plan, epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
        eval_fold=eval_fold, patience=cfg.get("patience"))
    return model, plan, history


def cmd_train_id(cfg, chash):
    _need(cfg, "beats", "out")
    beats = beats_mod.load_beats(cfg["beats"])
    model, _, history = _train_identify_from_cfg(beats, cfg)
    identify.save_identify(model, cfg["out"])
    hist_path = cfg["out"] + ".history.json"
    _write_json(hist_path, {"config_hash": chash, "seed": cfg["seed"],
                            "epochs": history})
    return [cfg["beats"]], [cfg["out"], cfg["out"] + ".json", hist_path]


def cmd_identify(cfg, chash):
    _need(cfg, "model", "beats", "out")
    model = identify.load_identify(cfg["model"])
    beats = beats_mod.load_beats(cfg["beats"])
    probs = identify.predict_proba(model, beats)
    preds = probs.argmax(axis=1)
    with open(cfg["out"], "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "subject_id", "predicted", "probability"])
        for i, b in enumerate(beats):
            writer.writerow([i, b.subject_id, model.classes[preds[i]],
                             repr(float(probs[i, preds[i]]))])
    outputs = [cfg["out"]]
    labeled = all(b.subject_id for b in beats)
    if labeled:
        summary = {"config_hash": chash, "seed": cfg["seed"],
                   "single_beat_accuracy":
                       identify.fused_accuracy(model, beats, 1)}
        if cfg["fusion_k"] > 1:
            summary[f"fused_accuracy_k{cfg['fusion_k']}"] = \
                identify.fused_accuracy(model, beats, cfg["fusion_k"])
        path = cfg["out"] + ".metrics.json"
        _write_json(path, summary)
        outputs.append(path)
    return [cfg["model"], cfg["beats"]], outputs


def cmd_cross_session(cfg, chash):
    _need(cfg, "beats", "out")
    beats = beats_mod.load_beats(cfg["beats"])
    accs = identify.cross_session_evaluate(
        beats, epochs=cfg["epochs"], seed=cfg["seed"],
        batch_size=cfg["batch_size"], lr=cfg["lr"])
    _write_json(cfg["out"], {"config_hash": chash, "seed": cfg["seed"],
                             "accuracy": accs})
    return [cfg["beats"]], [cfg["out"]]


def cmd_train_siamese(cfg, chash):
    _need(cfg, "embedder", "beats", "out")
    embedder = identify.load_identify(cfg["embedder"])
    beats = beats_mod.load_beats(cfg["beats"])
    matched, mismatched = verify.make_training_pairs(
        embedder, beats, seed=cfg["seed"],
        matched_per_subject=cfg["matched_per_subject"],
        mismatch_multiple=cfg["mismatch_multiple"])
    pairs = verify.smote_pairs(matched, mismatched, ratio=cfg["smote_ratio"],
                               k_neighbors=cfg["k_neighbors"],
                               seed=cfg["seed"])
    head, history = verify.train_siamese(embedder, pairs,
                                         epochs=cfg["epochs"],
                                         seed=cfg["seed"], lr=cfg["lr"])
    verify.save_head(head, cfg["out"])
    hist_path = cfg["out"] + ".history.json"
    _write_json(hist_path, {"config_hash": chash, "seed": cfg["seed"],
                            "epochs": history})
    return [cfg["embedder"], cfg["beats"]], [cfg["out"], hist_path]


def cmd_enroll(cfg, chash):
    _need(cfg, "embedder", "beats", "out")
    embedder = identify.load_identify(cfg["embedder"])
    beats = beats_mod.load_beats(cfg["beats"])
    verify._check_disjoint(embedder, {b.subject_id for b in beats})
    os.makedirs(cfg["out"], exist_ok=True)
    outputs = []
    for subject in sorted({b.subject_id for b in beats}):
        own = [b for b in beats if b.subject_id == subject]
        template = verify.enroll(subject, identify.embed_many(embedder, own))
        path = os.path.join(cfg["out"], f"{subject}.tpl")
        verify.save_template(template, path)
        outputs.append(path)
    index = os.path.join(cfg["out"], "templates.json")
    _write_json(index, {"config_hash": chash, "seed": cfg["seed"],
                        "subjects": sorted({b.subject_id for b in beats})})
    return [cfg["embedder"], cfg["beats"]], outputs + [index]


def cmd_verify(cfg, chash):
    _need(cfg, "embedder", "templates", "beats", "out")
    embedder = identify.load_identify(cfg["embedder"])
    beats = beats_mod.load_beats(cfg["beats"])
    head = verify.load_head(cfg["head"]) if cfg["head"] else None
    if cfg["backend"] == "siamese" and head is None:
        raise CliError("siamese backend needs --head")
    templates = {}
    for subject in sorted({b.subject_id for b in beats}):
        path = os.path.join(cfg["templates"], f"{subject}.tpl")
        if not os.path.exists(path):
            raise CliError(f"no template for subject {subject!r} in "
                           f"{cfg['templates']}")
        templates[subject] = verify.load_template(path)
    emb = identify.embed_many(embedder, beats)
    with open(cfg["out"], "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "subject_id", "peak_index", "score"])
        for i, b in enumerate(beats):
            s = verify.score(templates[b.subject_id], emb[i],
                             backend=cfg["backend"], head=head)
            writer.writerow([i, b.subject_id, b.peak_index, repr(s)])
    inputs = [cfg["embedder"], cfg["templates"], cfg["beats"]]
    if cfg["head"]:
        inputs.append(cfg["head"])
    return inputs, [cfg["out"]]


def _evaluate_folds(beats, cfg, chash, out_dir):
    rows = []
    for fold in range(cfg["fold_count"]):
        fold_cfg = dict(cfg, scheme="stratified-10-fold", eval_fold=fold)
        model, plan, _ = _train_identify_from_cfg(beats, fold_cfg)
        _, _, test_idx = plan.partitions(eval_fold=fold)
        _, metrics = identify.evaluate_identify(
            model, [beats[i] for i in test_idx])
        rows.append({"fold": fold, **metrics})
    names = ("accuracy", "precision", "recall", "f1")
    mean = {m: float(np.mean([r[m] for r in rows])) for m in names}
    std = {m: float(np.std([r[m] for r in rows])) for m in names}
    csv_path = os.path.join(out_dir, "folds.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["fold", *names])
        for r in rows:
            writer.writerow([r["fold"]] + [repr(r[m]) for m in names])
        writer.writerow(["summary"] +
                        [f"{mean[m]:.4f}±{std[m]:.4f}" for m in names])
    json_path = os.path.join(out_dir, "metrics.json")
    _write_json(json_path, {"config_hash": chash, "seed": cfg["seed"],
                            "scheme": "stratified-10-fold", "folds": rows,
                            "mean": mean, "std": std})
    return [csv_path, json_path]


def _evaluate_split(beats, cfg, chash, out_dir):
    split_cfg = dict(cfg, scheme="60-20-20")
    model, plan, _ = _train_identify_from_cfg(beats, split_cfg)
    _, _, test_idx = plan.partitions()
    test_beats = [beats[i] for i in test_idx]
    cm, metrics = identify.evaluate_identify(model, test_beats)
    fusion = {}
    for k in sorted({1, 3, 5, cfg["fusion_k"]}):
        try:
            fusion[str(k)] = identify.fused_accuracy(model, test_beats, k)
        except ValueError:
            break
    cm_path = os.path.join(out_dir, "confusion.csv")
    with open(cm_path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["true\\pred", *cm.classes])
        for i, cls in enumerate(cm.classes):
            writer.writerow([cls, *cm.counts[i].tolist()])
    json_path = os.path.join(out_dir, "metrics.json")
    _write_json(json_path, {"config_hash": chash, "seed": cfg["seed"],
                            "scheme": "60-20-20", "single_beat": metrics,
                            "fusion": fusion})
    return [cm_path, json_path]


def _evaluate_verification(beats, cfg, chash, out_dir):
    _need(cfg, "embedder")
    embedder = identify.load_identify(cfg["embedder"])
    head = verify.load_head(cfg["head"]) if cfg["head"] else None
    if cfg["backend"] == "siamese" and head is None:
        raise CliError("siamese backend needs --head")
    curve, stats = verify.verification_experiment(
        embedder, beats, head=head,
        enrollment_fraction=cfg["enroll_fraction"], k=cfg["fusion_k"],
        backend=cfg["backend"])
    curve_path = os.path.join(out_dir, "far_frr.csv")
    with open(curve_path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "frr"])
        for t, fa, fr in zip(curve.thresholds, curve.far, curve.frr):
            writer.writerow([repr(float(t)), repr(float(fa)), repr(float(fr))])
    json_path = os.path.join(out_dir, "metrics.json")
    _write_json(json_path, {
        "config_hash": chash, "seed": cfg["seed"], "scheme": "verification",
        "backend": cfg["backend"], "eer": curve.eer,
        "eer_threshold": curve.eer_threshold, "auc": curve.auc,
        "n_genuine": curve.n_genuine, "n_imposter": curve.n_imposter,
        **stats})
    return [curve_path, json_path]


def cmd_evaluate(cfg, chash):
    _need(cfg, "scheme", "beats", "out")
    beats = beats_mod.load_beats(cfg["beats"])
    os.makedirs(cfg["out"], exist_ok=True)
    if cfg["scheme"] == "10fold":
        outputs = _evaluate_folds(beats, cfg, chash, cfg["out"])
    elif cfg["scheme"] == "split":
        outputs = _evaluate_split(beats, cfg, chash, cfg["out"])
    elif cfg["scheme"] == "verification":
        outputs = _evaluate_verification(beats, cfg, chash, cfg["out"])
    else:
        raise CliError(f"unknown evaluation scheme {cfg['scheme']!r}; "
                       "use 10fold, split, or verification")
    inputs = [cfg["beats"]]
    if cfg["scheme"] == "verification":
        inputs.append(cfg["embedder"])
        if cfg["head"]:
            inputs.append(cfg["head"])
    return inputs, outputs


def _artifact_hash(path):
    if path.endswith(".json"):
        with open(path) as fh:
            try:
                return json.load(fh).get("config_hash")
            except json.JSONDecodeError:
                return None
    try:
        with open(path) as fh:
            first = fh.readline()
    except UnicodeDecodeError:
        return None
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1].strip()
    return None


def cmd_report(cfg, chash):
    _need(cfg, "inputs", "out")
    paths = cfg["inputs"]
    hashes = {}
    for p in paths:
        h = _artifact_hash(p)
        if h:
            hashes.setdefault(h, []).append(p)
    if len(hashes) > 1 and not cfg["force"]:
        raise CliError(f"inputs come from {len(hashes)} different runs; "
                       "pass --force to combine them")
    os.makedirs(cfg["out"], exist_ok=True)
    outputs = []

    combined = {}
    for p in paths:
        if p.endswith(".json"):
            with open(p) as fh:
                combined[p] = json.load(fh)
    report_json = os.path.join(cfg["out"], "report.json")
    _write_json(report_json, {"config_hash": chash,
                              "source_hashes": sorted(hashes),
                              "artifacts": combined})
    outputs.append(report_json)

    rows = []
    for key, payload in combined.items():
        if not isinstance(payload, dict):
            continue
        for metric in ("eer", "auc"):
            if metric in payload:
                rows.append((key, metric, payload[metric]))
        for metric, value in payload.get("single_beat", {}).items():
            rows.append((key, f"single_beat_{metric}", value))
        for k, value in payload.get("fusion", {}).items():
            rows.append((key, f"fused_accuracy_k{k}", value))
        accuracy = payload.get("accuracy")
        if isinstance(accuracy, dict):
            for name, value in accuracy.items():
                rows.append((key, f"accuracy_{name}", value))
    report_csv = os.path.join(cfg["out"], "report.csv")
    with open(report_csv, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["artifact", "metric", "value"])
        for row in rows:
            writer.writerow(row)
    outputs.append(report_csv)

    outputs.extend(_report_plots(paths, combined, cfg["out"]))
    return list(paths), outputs


def _report_plots(paths, combined, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "pulsegate"
    outputs = []

    fusion_sets = [(key, payload["fusion"]) for key, payload in combined.items()
                   if isinstance(payload, dict) and payload.get("fusion")]
    if fusion_sets:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for key, fusion in fusion_sets:
            ks = sorted(int(k) for k in fusion)
            ax.plot(ks, [fusion[str(k)] for k in ks], marker="o",
                    label=os.path.basename(os.path.dirname(key)) or key)
        ax.set_xlabel("beats fused")
        ax.set_ylabel("accuracy")
        ax.legend(fontsize=7)
        path = os.path.join(out_dir, "accuracy_vs_beats.svg")
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        outputs.append(path)

    curve_files = [p for p in paths if p.endswith(".csv")
                   and os.path.basename(p) == "far_frr.csv"]
    if curve_files:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for p in curve_files:
            th, far, frr = [], [], []
            with open(p) as fh:
                for row in csv.reader(r for r in fh if not r.startswith("#")):
                    if row[0] == "threshold":
                        continue
                    th.append(float(row[0]))
                    far.append(float(row[1]))
                    frr.append(float(row[2]))
            ax.plot(th, far, label=f"FAR {os.path.basename(p)}")
            ax.plot(th, frr, label=f"FRR {os.path.basename(p)}")
        ax.set_xlabel("threshold")
        ax.set_ylabel("rate")
        ax.legend(fontsize=7)
        path = os.path.join(out_dir, "far_frr.svg")
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        outputs.append(path)
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-detector": cmd_train_detector,
    "detect": cmd_detect,
    "segment": cmd_segment,
    "train-id": cmd_train_id,
    "identify": cmd_identify,
    "cross-session": cmd_cross_session,
    "train-siamese": cmd_train_siamese,
    "enroll": cmd_enroll,
    "verify": cmd_verify,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _add_common(sp):
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulsegate",
        description="ECG biometrics: R-peak detection, identification, "
                    "verification")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--beats", type=int)
    sp.add_argument("--fs", type=float)
    sp.add_argument("--sessions", type=int)
    sp.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    sp.add_argument("--drift", type=float)
    sp.add_argument("--prefix", help="subject id prefix (default s)")
    _add_common(sp)

    sp = sub.add_parser("ingest", help="convert a record to the CSV format")
    sp.add_argument("--input")
    sp.add_argument("--format", choices=["csv", "int16", "float32"])
    sp.add_argument("--fs", type=float)
    sp.add_argument("--gain", type=float)
    sp.add_argument("--subject-id", dest="subject_id")
    sp.add_argument("--session-id", type=int, dest="session_id")
    sp.add_argument("--target-fs", type=float, dest="target_fs")
    _add_common(sp)

    sp = sub.add_parser("train-detector", help="train the R-peak detector")
    sp.add_argument("--corpus")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--val-fraction", type=float, dest="val_fraction")
    sp.add_argument("--no-deep-supervision", action="store_false",
                    dest="deep_supervision", default=None)
    _add_common(sp)

    sp = sub.add_parser("detect", help="detect R-peaks in a record")
    sp.add_argument("--model")
    sp.add_argument("--record")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--min-distance", type=int, dest="min_distance")
    _add_common(sp)

    sp = sub.add_parser("segment", help="cut beats around R-peaks")
    sp.add_argument("--record", help="record CSV or a corpus directory")
    sp.add_argument("--peaks")
    sp.add_argument("--width", type=int)
    sp.add_argument("--subject-id", dest="subject_id")
    sp.add_argument("--session-id", type=int, dest="session_id")
    _add_common(sp)

    sp = sub.add_parser("train-id", help="train the identification model")
    sp.add_argument("--beats")
    sp.add_argument("--scheme", choices=["60-20-20", "stratified-10-fold"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--fold-count", type=int, dest="fold_count")
    sp.add_argument("--eval-fold", type=int, dest="eval_fold")
    sp.add_argument("--patience", type=int)
    _add_common(sp)

    sp = sub.add_parser("identify", help="classify beats with a trained model")
    sp.add_argument("--model")
    sp.add_argument("--beats")
    sp.add_argument("--fusion-k", type=int, dest="fusion_k")
    _add_common(sp)

    sp = sub.add_parser("cross-session", help="train on one session, test on "
                                              "the other, both ways")
    sp.add_argument("--beats")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    _add_common(sp)

    sp = sub.add_parser("train-siamese", help="train the verification head")
    sp.add_argument("--embedder")
    sp.add_argument("--beats")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--matched-per-subject", type=int,
                    dest="matched_per_subject")
    sp.add_argument("--mismatch-multiple", type=float,
                    dest="mismatch_multiple")
    sp.add_argument("--smote-ratio", type=float, dest="smote_ratio")
    sp.add_argument("--k-neighbors", type=int, dest="k_neighbors")
    sp.add_argument("--lr", type=float)
    _add_common(sp)

    sp = sub.add_parser("enroll", help="build per-subject templates")
    sp.add_argument("--embedder")
    sp.add_argument("--beats")
    _add_common(sp)

    sp = sub.add_parser("verify", help="score probe beats against templates")
    sp.add_argument("--embedder")
    sp.add_argument("--head")
    sp.add_argument("--templates")
    sp.add_argument("--beats")
    sp.add_argument("--backend", choices=list(verify.BACKENDS))
    _add_common(sp)

    sp = sub.add_parser("evaluate", help="run a full evaluation protocol")
    sp.add_argument("--scheme", choices=["10fold", "split", "verification"])
    sp.add_argument("--beats")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--fold-count", type=int, dest="fold_count")
    sp.add_argument("--embedder")
    sp.add_argument("--head")
    sp.add_argument("--backend", choices=list(verify.BACKENDS))
    sp.add_argument("--enroll-fraction", type=float, dest="enroll_fraction")
    sp.add_argument("--fusion-k", type=int, dest="fusion_k")
    _add_common(sp)

    sp = sub.add_parser("report", help="combine artifacts into CSV/JSON/SVG")
    sp.add_argument("--inputs", nargs="+")
    sp.add_argument("--force", action="store_true", default=None)
    _add_common(sp)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    started = time.time()
    try:
        cfg = resolve_config(command, args)
        chash = config_hash(command, cfg)
        inputs, outputs = COMMANDS[command](cfg, chash)
        manifest_path = _manifest_location(cfg)
        write_manifest(manifest_path, command, cfg, inputs, outputs, started)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(f"pulsegate {command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def _manifest_location(cfg) -> str:
    out = cfg.get("out")
    if out and os.path.isdir(out):
        return os.path.join(out, "run_manifest.json")
    if out:
        return out + ".manifest.json"
    return "run_manifest.json"


if __name__ == "__main__":
    sys.exit(main())
