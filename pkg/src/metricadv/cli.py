"""Command-line front end: gen-data, train, attack, sweep, eval, serve, verify.

Every subcommand reads an optional JSON config (``--config``) carrying a
``"version"`` field. Precedence, lowest to highest: built-in defaults, config
file, command-line flags. All outputs go under ``--out``; each run writes a
timestamp-free ``run-manifest.json`` and a separate ``timings.json``.

Exit codes: 0 ok, 1 runtime failure, 2 usage / bad config.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, PRESETS, export_outcome, preset, run_attack
from .diffnet import load_weights, save_weights
from .embedding import LabeledImage, ReferenceSet, accuracy, train
from .images import load_float, load_image, save_float, save_image
from .models import ARCHITECTURES, make_network, train_config
from .pipeline import BoundingBox, Photo, apply_cropped, apply_uncropped, crop, resize_bilinear
from .service import (Calibration, LocalVictim, VictimClient, VictimService, calibrate,
                      calibration_pairs)
from .synth import SynthSpec, gen_identities, make_photo, split
from .transfer import SweepGrid, all_pairs, run_sweep, top_n_accuracy, write_csv

log = logging.getLogger("metricadv")

CONFIG_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- config handling -----------------------------------------------------------------

DEFAULTS = {
    "gen-data": {"identities": 10, "per_identity": 20, "height": 16, "width": 16, "shift": 1,
                 "noise": 0.03, "n_train": 10, "n_gallery": 5, "photo_scale": 3,
                 "photo_pad": [5, 7, 4, 9]},
    "train": {"data": None, "arch": "conv_small", "train": {}},
    "attack": {"data": None, "model": None, "source": None, "target": None,
               "photo": None, "box": None, "attack": "cw_l2", "preset": None, "kappa": 0.0,
               "alpha": 1.0, "iters": None, "overrides": {}},
    "sweep": {"data": None, "surrogate": None, "victims": [], "grid": {}, "base_config": {},
              "jobs": 1, "all_pairs": False, "kappa": None},
    "eval": {"data": None, "victim": None, "attack_dir": None, "top_n": [1, 3]},
    "serve": {"data": None, "victim": None, "host": "127.0.0.1", "port": 8750},
    "verify": {"data": None, "victim": None, "images": []},
}

FLAG_KEYS = ("alpha", "kappa", "iters", "attack", "target", "victim", "jobs")


def load_config(command: str, path: str | None, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path is not None:
        p = Path(path)
        if not p.exists() or p.is_dir():
            raise UsageError(f"config file {path} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a JSON object")
        version = doc.pop("version", None)
        if version != CONFIG_VERSION:
            raise UsageError(f"config {path}: expected \"version\": {CONFIG_VERSION}, got {version!r}")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
        cfg.update(doc)
    for key in FLAG_KEYS:
        val = getattr(args, key, None)
        if val is None:
            continue
        if key not in cfg:
            raise UsageError(f"--{key} does not apply to {command}")
        cfg[key] = [val] if key == "victim" and command == "sweep" else val
    if getattr(args, "images", None):
        cfg["images"] = args.images
    if getattr(args, "port", None) is not None:
        cfg["port"] = args.port
    return cfg


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, "", []):
            raise UsageError(f"missing required setting {k!r}")


# -- dataset directory ---------------------------------------------------------------

def write_dataset(out: Path, spec: SynthSpec, n_train: int, n_gallery: int,
                  photo_scale: int, photo_pad) -> dict:
    """Write per-label PNGs, one full photo + box per probe, and manifest.json."""
    train_items, gallery_items, probes = split(gen_identities(spec), n_train, n_gallery)
    manifest = {"version": CONFIG_VERSION, "synth": spec.__dict__, "labels": {}}
    for split_name, items in (("train", train_items), ("gallery", gallery_items), ("probe", probes)):
        counters: dict = {}
        for item in items:
            k = counters.get(item.label, 0)
            counters[item.label] = k + 1
            rel = f"{item.label}/{split_name}_{k:03d}.png"
            (out / item.label).mkdir(parents=True, exist_ok=True)
            save_image(item.pixels, out / rel)
            entry = manifest["labels"].setdefault(item.label, {"train": [], "gallery": [], "probe": [], "photos": []})
            entry[split_name].append(rel)
            if split_name == "probe":
                seed = spec.seed * 1000 + len(manifest["labels"]) * 37 + k
                photo, box = make_photo(item.pixels, photo_scale, tuple(photo_pad), seed=seed)
                prel = f"{item.label}/photo_{k:03d}.png"
                save_image(photo, out / prel)
                (out / f"{item.label}/photo_{k:03d}.box.json").write_text(json.dumps(box, sort_keys=True))
                entry["photos"].append(prel)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise UsageError(f"{self.root} has no manifest.json")
        self.manifest = json.loads(path.read_text())

    def items(self, split_name: str) -> list[LabeledImage]:
        out = []
        for label in sorted(self.manifest["labels"]):
            for rel in self.manifest["labels"][label][split_name]:
                out.append(LabeledImage(load_image(self.root / rel), label))
        return out

    def gallery(self) -> ReferenceSet:
        return ReferenceSet(self.items("gallery"))

    def photo(self, label: str, k: int = 0) -> tuple[Path, BoundingBox]:
        rel = self.manifest["labels"][label]["photos"][k]
        return self.root / rel, BoundingBox.load(self.root / rel.replace(".png", ".box.json"))

    @property
    def labels(self) -> list:
        return sorted(self.manifest["labels"])


def load_model_dir(path: str | Path):
    d = Path(path)
    net, extra = load_weights(d / "model.mnet")
    cal_path = d / "calibration.json"
    cal = Calibration.from_dict(json.loads(cal_path.read_text())) if cal_path.is_file() else None
    return net, extra, cal


def open_victim(spec: str, data: Dataset | None):
    """A URL gives a service client; anything else is a trained model directory."""
    if spec.startswith("http://") or spec.startswith("https://"):
        return VictimClient(spec, name=spec)
    if data is None:
        raise UsageError("a local victim needs the dataset (\"data\") for its gallery")
    net, _, cal = load_model_dir(spec)
    if cal is None:
        raise UsageError(f"{spec} has no calibration.json")
    return LocalVictim(net, data.gallery(), cal, name=Path(spec).name)


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(cfg, args, out: Path, timer):
    spec = SynthSpec(identities=cfg["identities"], per_identity=cfg["per_identity"],
                     height=cfg["height"], width=cfg["width"], shift=cfg["shift"],
                     noise=cfg["noise"], seed=args.seed)
    with timer("generate"):
        manifest = write_dataset(out, spec, cfg["n_train"], cfg["n_gallery"],
                                 cfg["photo_scale"], cfg["photo_pad"])
    log.info("wrote %d labels to %s", len(manifest["labels"]), out)


def cmd_train(cfg, args, out: Path, timer):
    _require(cfg, "data")
    if cfg["arch"] not in ARCHITECTURES:
        raise UsageError(f"unknown arch {cfg['arch']!r}; choose from {sorted(ARCHITECTURES)}")
    data = Dataset(cfg["data"])
    train_items, gallery = data.items("train"), data.gallery()
    shape = train_items[0].pixels.shape
    tcfg = train_config(cfg["arch"], args.seed, **cfg["train"])
    history: list = []
    with timer("train"):
        net = train(make_network(cfg["arch"], shape, seed=args.seed), train_items, tcfg, history=history)
    save_weights(net, out / "model.mnet", extra={"arch": cfg["arch"], "seed": args.seed})
    net, _ = load_weights(out / "model.mnet")  # calibrate what is actually shipped
    with timer("calibrate"):
        genuine, impostor = calibration_pairs(gallery.items, seed=args.seed)
        cal = calibrate(net, genuine, impostor)
    (out / "calibration.json").write_text(json.dumps(cal.to_dict(), sort_keys=True))
    probes = data.items("probe")
    summary = {"history": history, "probe_top1": accuracy(net, gallery, probes)}
    (out / "history.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    log.info("probe top-1 accuracy %.3f", summary["probe_top1"])


def _attack_config(cfg, target) -> AttackConfig:
    name = cfg["preset"] or cfg["attack"]
    if name not in PRESETS:
        raise UsageError(f"unknown attack/preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(cfg["overrides"])
    kw.update(kappa=float(cfg["kappa"]), alpha=float(cfg["alpha"]),
              targeted=target is not None, target=target)
    if cfg["iters"] is not None:
        kw["iterations"] = int(cfg["iters"])
    try:
        return preset(name, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid attack config: {exc}") from None


def cmd_attack(cfg, args, out: Path, timer):
    _require(cfg, "data", "model", "source")
    data = Dataset(cfg["data"])
    source = cfg["source"]
    if source not in data.labels:
        raise UsageError(f"unknown source label {source!r}")
    if cfg["target"] is not None and cfg["target"] not in data.labels:
        raise UsageError(f"unknown target label {cfg['target']!r}")
    acfg = _attack_config(cfg, cfg["target"])
    net, _, _ = load_model_dir(cfg["model"])
    if cfg["photo"] is not None:
        photo_path = Path(cfg["photo"])
        if cfg["box"] is None:
            raise UsageError("an explicit photo needs a box")
        box = BoundingBox.from_dict(cfg["box"]) if isinstance(cfg["box"], dict) else BoundingBox.load(cfg["box"])
    else:
        photo_path, box = data.photo(source)
    photo = Photo.load(photo_path)
    h, w = net.input_shape[:2]
    with timer("crop"):
        face = resize_bilinear(crop(photo, box), h, w)
    with timer("attack"):
        outcome = run_attack(net, face, data.gallery(), acfg, source=source)
    alpha = acfg.alpha
    outcome = outcome.with_alpha(alpha)
    with timer("apply"):
        cropped = apply_cropped(face, outcome.delta, alpha)
        info: dict = {}
        uncropped = apply_uncropped(photo, box, outcome.delta, alpha, info)
    save_image(face, out / "face.png")
    save_float(face, out / "face.npy")
    save_image(cropped, out / "cropped.png")
    save_float(cropped, out / "cropped.npy")
    save_image(uncropped.pixels, out / "uncropped.png")
    save_float(uncropped.pixels, out / "uncropped.npy")
    save_float(photo.pixels, out / "photo.npy")
    (out / "box.json").write_text(json.dumps(box.to_dict(), sort_keys=True))
    export_outcome(outcome, out)
    meta = {"config": json.loads(acfg.to_json()), "clipped_fraction": info["clipped_fraction"],
            "outcome": outcome.metadata()}
    (out / "attack.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    log.info("attack %s: feasible=%s l2=%.4f", acfg.attack, outcome.feasible, outcome.l2)


def cmd_sweep(cfg, args, out: Path, timer):
    _require(cfg, "data", "surrogate", "victims")
    data = Dataset(cfg["data"])
    grid_doc = dict(cfg["grid"])
    if cfg["all_pairs"] or "pairs" not in grid_doc:
        grid_doc["pairs"] = all_pairs(data.labels)
    if cfg["kappa"] is not None:
        grid_doc["kappas"] = [cfg["kappa"]]
    try:
        grid = SweepGrid.from_dict(grid_doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid sweep grid: {exc}") from None
    unknown = [a for a in grid.attacks if a not in PRESETS]
    if unknown:
        raise UsageError(f"unknown attack presets {unknown}")
    surrogate, _, _ = load_model_dir(cfg["surrogate"])
    victims = {}
    for v in cfg["victims"]:
        victim = open_victim(v, data)
        victims[victim.name] = victim
    probes = {}
    for item in data.items("probe"):
        probes.setdefault(item.label, item.pixels)
    failures: list = []
    with timer("sweep"):
        records = run_sweep(grid, surrogate, victims, data.gallery(), probes,
                            base_config=cfg["base_config"], jobs=int(cfg["jobs"]), failures=failures)
    write_csv(records, out / "results.csv", timings_path=out / "cell-timings.csv")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1))
    log.info("wrote %d rows (%d failed cells)", len(records), len(failures))


def cmd_eval(cfg, args, out: Path, timer):
    _require(cfg, "data", "victim")
    data = Dataset(cfg["data"])
    victim = open_victim(cfg["victim"], data)
    probes = data.items("probe")
    report: dict = {"victim": str(cfg["victim"])}
    with timer("accuracy"):
        for n in cfg["top_n"]:
            report[f"top{n}"] = top_n_accuracy(victim, [(p.pixels, p.label) for p in probes], int(n))
    if cfg["attack_dir"] is not None:
        adir = Path(cfg["attack_dir"])
        meta = json.loads((adir / "outcome.json").read_text())
        face, adv = load_float(adir / "face.npy"), load_float(adir / "cropped.npy")
        # reference: a clean gallery image of the attacked identity
        ref_img = data.gallery().members(meta["source"])[0]
        with timer("verify"):
            clean = victim.verify(face, ref_img)
            attacked = victim.verify(adv, ref_img)
            self_pair = victim.verify(adv, face)
        report["attack"] = {"source": meta["source"], "target": meta["target"],
                            "clean_confidence": clean.confidence,
                            "adversarial_confidence": attacked.confidence,
                            "adversarial_vs_original_confidence": self_pair.confidence,
                            "confidence_drop": clean.confidence - attacked.confidence,
                            "victim_label": victim.predict(adv)}
    (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def cmd_serve(cfg, args, out: Path, timer):
    _require(cfg, "data", "victim")
    victim = open_victim(cfg["victim"], Dataset(cfg["data"]))
    if not isinstance(victim, LocalVictim):
        raise UsageError("serve needs a local model directory, not a URL")
    service = VictimService(victim, cfg["host"], int(cfg["port"])).start()
    print(f"serving on {service.url}", flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.close()


def cmd_verify(cfg, args, out: Path, timer):
    _require(cfg, "victim")
    if len(cfg["images"]) != 2:
        raise UsageError("verify needs exactly two images")
    data = Dataset(cfg["data"]) if cfg["data"] else None
    victim = open_victim(cfg["victim"], data)
    a, b = (load_float(p) if str(p).endswith(".npy") else load_image(p) for p in cfg["images"])
    with timer("verify"):
        verdict = victim.verify(a, b)
    (out / "verify.json").write_text(json.dumps(verdict.to_dict(), sort_keys=True))
    print(json.dumps(verdict.to_dict(), sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep,
    "eval": cmd_eval, "serve": cmd_serve, "verify": cmd_verify,
}


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metricadv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config with a \"version\" field")
        p.add_argument("--out", required=name != "serve", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name in ("attack", "sweep"):
            p.add_argument("--kappa", type=float)
        if name == "attack":
            p.add_argument("--alpha", type=float)
            p.add_argument("--iters", type=int)
            p.add_argument("--attack", choices=("pgd", "cw_l2", "cw_linf"))
            p.add_argument("--target")
        if name == "sweep":
            p.add_argument("--jobs", type=int)
        if name in ("sweep", "eval", "serve", "verify"):
            p.add_argument("--victim", help="service URL or trained model directory")
        if name == "serve":
            p.add_argument("--port", type=int)
        if name == "verify":
            p.add_argument("images", nargs="*")
    return parser


class _Timer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.stages: dict = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0


def _manifest(args, cfg) -> dict:
    return {
        "command": args.command, "seed": args.seed, "config": cfg,
        "versions": {"metricadv": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args)
        out = Path(args.out) if args.out else None
        if out is not None:
            if (out / "run-manifest.json").exists():
                raise RuntimeError(f"{out} already holds a run; outputs are write-once")
            out.mkdir(parents=True, exist_ok=True)
        timer = _Timer()
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, args, out, timer)
        timer.stages["total"] = time.perf_counter() - t0
        if out is not None:
            (out / "run-manifest.json").write_text(json.dumps(_manifest(args, cfg), indent=1, sort_keys=True))
            (out / "timings.json").write_text(json.dumps(timer.stages, indent=1, sort_keys=True))
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
