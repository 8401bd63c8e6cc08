"""Surrogate-to-victim transferability experiments and their metrics."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .attacks import PRESETS, AttackConfig, amplify, preset, run_attack
from .diffnet import ArgumentError, EmbeddingNetwork, ShapeError, forward
from .embedding import (DatasetError, EmbeddedGallery, LabeledImage, LookupFailure,
                        ReferenceSet, TrainConfig, accuracy, train)
from .models import make_network, train_config
from .service import LocalVictim, calibrate, calibration_pairs
from .synth import SynthSpec, gen_identities, split

log = logging.getLogger(__name__)

CSV_COLUMNS = ("attack", "p", "kappa", "epsilon", "alpha", "N", "pair_source", "pair_target",
               "l2_norm", "linf_norm", "surrogate_label", "victim_id", "victim_label",
               "victim_confidence", "feasible", "seconds")


@dataclass
class TrialRecord:
    attack: str
    p: str
    kappa: float
    epsilon: float | None
    alpha: float
    N: int
    pair_source: str
    pair_target: str | None
    l2_norm: float
    linf_norm: float
    surrogate_label: str
    victim_id: str
    victim_label: str
    victim_confidence: float
    feasible: bool
    seconds: float = 0.0

    @property
    def targeted(self) -> bool:
        return self.pair_target is not None


@dataclass
class SweepGrid:
    kappas: Sequence[float] = (0.0,)
    alphas: Sequence[float] = (1.0,)
    iterations: Sequence[int] = (100,)
    attacks: Sequence[str] = ("cw_small",)
    pairs: Sequence[tuple] = ()
    epsilons: Sequence[float] = (0.1,)
    targeted: bool = True

    def __post_init__(self):
        for name in ("kappas", "alphas", "iterations", "attacks", "pairs", "epsilons"):
            if len(getattr(self, name)) == 0:
                raise ArgumentError(f"sweep axis {name!r} is empty")
        if min(self.alphas) < 1:
            raise ArgumentError("alpha values must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        d = dict(d)
        if "pairs" in d:
            d["pairs"] = [tuple(p) for p in d["pairs"]]
        return cls(**d)


# -- metrics -------------------------------------------------------------------

def success_targeted(records: Sequence[TrialRecord]) -> float:
    """Fraction of records whose victim label is the intended target."""
    if not records:
        raise ArgumentError("no records")
    if any(not r.targeted for r in records):
        raise ArgumentError("success_targeted needs targeted records")
    return sum(r.victim_label == r.pair_target for r in records) / len(records)


def success_untargeted(records: Sequence[TrialRecord]) -> float:
    """One minus the fraction of records still labelled as their source."""
    if not records:
        raise ArgumentError("no records")
    return 1.0 - sum(r.victim_label == r.pair_source for r in records) / len(records)


class NetVictim:
    """Adapter giving a bare (network, gallery) pair the victim ``top_n`` interface."""

    def __init__(self, net: EmbeddingNetwork, ref: ReferenceSet):
        self.net = net
        self.gallery = EmbeddedGallery(net, ref)

    def top_n(self, img, n: int) -> list:
        return self.gallery.top_n_embedding(forward(self.net, img), n)

    def predict(self, img):
        return self.top_n(img, 1)[0]


def top_n_accuracy(victim, queries: Sequence[tuple], n: int, ref: ReferenceSet | None = None) -> float:
    """Fraction of ``(image, true_label)`` queries whose label is in the victim's top ``n``.

    ``victim`` is anything with ``top_n(image, n)`` (local victim, service
    client) or a bare network together with ``ref``.
    """
    if isinstance(victim, EmbeddingNetwork):
        if ref is None:
            raise ArgumentError("a bare network needs a reference set")
        victim = NetVictim(victim, ref)
    if not queries:
        raise ArgumentError("no queries")
    hits = sum(label in victim.top_n(img, n) for img, label in queries)
    return hits / len(queries)


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation; a constant series counts as 0 (no trend)."""
    if len(set(ys)) <= 1 or len(set(xs)) <= 1:
        return 0.0
    return float(spearmanr(xs, ys).statistic)


# -- embedding-shift analysis ------------------------------------------------------

def shift_r(x, delta, alpha, net: EmbeddingNetwork, source, ref) -> float:
    """Change in distance to the source centroid caused by ``x + alpha * delta`` (unclipped)."""
    if alpha < 1:
        raise ArgumentError("alpha must be >= 1")
    gal = ref if isinstance(ref, EmbeddedGallery) and ref.net is net else EmbeddedGallery(net, _as_ref(ref))
    beta = gal.centroid(source)
    x = np.asarray(x, dtype=np.float64)
    pert = net.forward_batch(np.stack([x + alpha * np.asarray(delta), x]))
    return float(np.linalg.norm(pert[0] - beta) - np.linalg.norm(pert[1] - beta))


def _as_ref(ref):
    return ref.ref if isinstance(ref, EmbeddedGallery) else ref


def expected_shift_R(samples: Sequence[tuple], alpha, net, ref) -> float:
    """Mean of :func:`shift_r` over ``(x, delta, source)`` samples."""
    if not samples:
        raise ArgumentError("no samples")
    gal = EmbeddedGallery(net, _as_ref(ref))
    return float(np.mean([shift_r(x, d, alpha, net, s, gal) for x, d, s in samples]))


@dataclass
class BoundReport:
    delta_max: float
    alphas: list
    r_margins: dict = field(default_factory=dict)   # alpha -> per-sample r_g - (r_f - 4*Delta)
    R_f: dict = field(default_factory=dict)
    R_g: dict = field(default_factory=dict)
    violations: int = 0

    @property
    def R_margins(self) -> dict:
        return {a: self.R_g[a] - (self.R_f[a] - 4 * self.delta_max) for a in self.alphas}


def similarity_bound_check(f: EmbeddingNetwork, g: EmbeddingNetwork, samples: Sequence[tuple],
                           ref: ReferenceSet, alphas: Iterable[float], tol: float = 1e-6) -> BoundReport:
    """Check ``r_g >= r_f - 4*Delta`` per sample and ``R_g >= R_f - 4*Delta``.

    ``Delta`` is the largest ``|g(p) - f(p)|`` over every evaluated point:
    clean samples, their perturbed versions, and all gallery members.
    """
    if f.input_shape != g.input_shape or f.embedding_dim != g.embedding_dim:
        raise ShapeError("f and g must share input shape and embedding size")
    if not samples:
        raise ArgumentError("no samples")
    alphas = [float(a) for a in alphas]
    ref = _as_ref(ref)
    points = [np.asarray(x, dtype=np.float64) for x, _, _ in samples]
    points += [np.asarray(x) + a * np.asarray(d) for a in alphas for x, d, _ in samples]
    points += [item.pixels for item in ref.items]
    pts = np.stack(points)
    delta_max = float(np.max(np.linalg.norm(f.forward_batch(pts) - g.forward_batch(pts), axis=1)))

    gal_f, gal_g = EmbeddedGallery(f, ref), EmbeddedGallery(g, ref)
    report = BoundReport(delta_max=delta_max, alphas=alphas)
    for a in alphas:
        rf = np.array([shift_r(x, d, a, f, s, gal_f) for x, d, s in samples])
        rg = np.array([shift_r(x, d, a, g, s, gal_g) for x, d, s in samples])
        margins = rg - (rf - 4 * delta_max)
        report.r_margins[a] = margins.tolist()
        report.R_f[a] = float(rf.mean())
        report.R_g[a] = float(rg.mean())
        report.violations += int(np.sum(margins < -tol))
        if report.R_g[a] < report.R_f[a] - 4 * delta_max - tol:
            report.violations += 1
    return report


# -- experiment setup --------------------------------------------------------------

@dataclass
class Experiment:
    train: list
    gallery: ReferenceSet
    probes: list
    surrogate: EmbeddingNetwork
    victims: dict

    def probe_for(self, label) -> np.ndarray:
        for item in self.probes:
            if item.label == label:
                return item.pixels
        raise LookupFailure(f"no probe image for {label!r}")

    @property
    def labels(self) -> list:
        return self.gallery.labels


def calibrated_victim(net: EmbeddingNetwork, gallery: ReferenceSet, name: str, seed: int = 0) -> LocalVictim:
    genuine, impostor = calibration_pairs(gallery.items, seed=seed)
    return LocalVictim(net, gallery, calibrate(net, genuine, impostor), name=name)


def build_experiment(spec: SynthSpec = SynthSpec(), surrogate_arch: str = "conv_small",
                     victim_archs: Sequence[str] = ("conv_wide", "mlp"), seed: int = 0,
                     n_train: int = 10, n_gallery: int = 5) -> Experiment:
    """Generate identities, then train and calibrate a surrogate and victims.

    Victims differ from the surrogate in architecture and initialisation /
    shuffling seed; all models see the same training split.
    """
    data = gen_identities(spec)
    train_items, gallery_items, probes = split(data, n_train, n_gallery)
    gallery = ReferenceSet(gallery_items)
    shape = (spec.height, spec.width, 3)
    sur0 = make_network(surrogate_arch, shape, seed=seed)
    surrogate = train(sur0, train_items, train_config(surrogate_arch, seed))
    victims = {}
    for k, arch in enumerate(victim_archs):
        vseed = seed + 101 * (k + 1)
        net = train(make_network(arch, shape, seed=vseed), train_items, train_config(arch, vseed))
        name = f"{arch}-{k}"
        victims[name] = calibrated_victim(net, gallery, name, seed=seed)
    return Experiment(train_items, gallery, probes, surrogate, victims)


# -- sweeps ------------------------------------------------------------------------

def _cell_configs(grid: SweepGrid, base: dict):
    for attack, n_iter, kappa in itertools.product(grid.attacks, grid.iterations, grid.kappas):
        eps_axis = grid.epsilons if PRESETS[attack]["attack"] == "pgd" else (None,)
        for eps in eps_axis:
            for pair in grid.pairs:
                yield attack, n_iter, kappa, eps, tuple(pair), base


def _run_cell(job):
    (attack, n_iter, kappa, eps, pair, base), surrogate, gallery, probe, victims, alphas, targeted = job
    source, target = pair[0], (pair[1] if targeted else None)
    overrides = dict(base)
    overrides.update(iterations=n_iter, kappa=kappa, targeted=targeted, target=target)
    if eps is not None:
        overrides["perturbation_bound"] = eps
    cfg = preset(attack, **overrides)
    t0 = time.perf_counter()
    outcome = run_attack(surrogate, probe, gallery, cfg, source=source)
    seconds = time.perf_counter() - t0
    sur_gal = gallery if isinstance(gallery, EmbeddedGallery) else EmbeddedGallery(surrogate, gallery)
    rows = []
    for alpha in alphas:
        out = outcome.with_alpha(alpha)
        adv = amplify(probe, out.delta, alpha)
        sur_label = sur_gal.predict_embedding(forward(surrogate, adv))
        for vid, victim in victims:
            rows.append(TrialRecord(
                attack=attack, p=cfg.norm, kappa=float(kappa),
                epsilon=float(eps) if eps is not None else None, alpha=float(alpha), N=int(n_iter),
                pair_source=str(source), pair_target=None if target is None else str(target),
                l2_norm=out.l2, linf_norm=out.linf, surrogate_label=str(sur_label),
                victim_id=vid, victim_label=str(victim.predict(adv)),
                victim_confidence=float(victim.verify(adv, probe).confidence),
                feasible=bool(outcome.feasible), seconds=seconds))
    return rows


def run_sweep(grid: SweepGrid, surrogate: EmbeddingNetwork, victims: dict, gallery: ReferenceSet,
              probes: dict, base_config: dict | None = None, jobs: int = 1,
              failures: list | None = None) -> list[TrialRecord]:
    """Craft one perturbation per (pair, attack, N, kappa, eps) and score every alpha on every victim.

    ``probes`` maps a source label to the image attacked for it. Records come
    back in grid order regardless of ``jobs``. A failing cell is logged and
    appended to ``failures`` (if given) instead of aborting the sweep.
    """
    if not victims:
        raise ArgumentError("need at least one victim")
    base = dict(base_config or {})
    victim_items = sorted(victims.items())
    sur_gal = EmbeddedGallery(surrogate, gallery)
    jobs_list = [(cell, surrogate, sur_gal, probes[cell[4][0]], victim_items, list(grid.alphas), grid.targeted)
                 for cell in _cell_configs(grid, base)]

    def collect(results):
        records = []
        for cell_job, res in zip(jobs_list, results):
            if isinstance(res, Exception):
                log.warning("sweep cell %s failed: %s", cell_job[0][:5], res)
                if failures is not None:
                    failures.append((cell_job[0][:5], repr(res)))
                continue
            records.extend(res)
        return records

    if jobs <= 1:
        return collect(_safe(_run_cell, j) for j in jobs_list)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_cell, j) for j in jobs_list]
        return collect(_result_or_exc(f) for f in futures)


def _safe(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:  # recorded per cell, sweep continues
        return exc


def _result_or_exc(fut):
    try:
        return fut.result()
    except Exception as exc:
        return exc


def all_pairs(labels: Sequence) -> list[tuple]:
    return [(s, t) for s in labels for t in labels if s != t]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(records: Sequence[TrialRecord], path: str | Path, inline_seconds: bool = False,
              timings_path: str | Path | None = None) -> None:
    """Write the fixed-column report.

    Wall-clock seconds vary run to run, so unless ``inline_seconds`` is set
    the ``seconds`` column is left empty and timings go to ``timings_path``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            row = asdict(r)
            if not inline_seconds:
                row["seconds"] = None
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    if timings_path is not None:
        with open(timings_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("row", "seconds"))
            for i, r in enumerate(records):
                w.writerow((i, repr(r.seconds)))


def read_csv(path: str | Path) -> list[TrialRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrialRecord(
                attack=row["attack"], p=row["p"], kappa=float(row["kappa"]),
                epsilon=float(row["epsilon"]) if row["epsilon"] else None,
                alpha=float(row["alpha"]), N=int(row["N"]), pair_source=row["pair_source"],
                pair_target=row["pair_target"] or None, l2_norm=float(row["l2_norm"]),
                linf_norm=float(row["linf_norm"]), surrogate_label=row["surrogate_label"],
                victim_id=row["victim_id"], victim_label=row["victim_label"],
                victim_confidence=float(row["victim_confidence"]), feasible=row["feasible"] == "1",
                seconds=float(row["seconds"]) if row["seconds"] else 0.0))
    return out


def confidence_curve(records: Sequence[TrialRecord], victim_id: str, norm: str = "l2") -> list[tuple]:
    """``(norm, kappa or epsilon, confidence)`` points, sorted, for plotting elsewhere."""
    pts = []
    for r in records:
        if r.victim_id != victim_id:
            continue
        knob = r.epsilon if r.attack.startswith("pgd") else r.kappa
        pts.append((r.l2_norm if norm == "l2" else r.linf_norm, knob, r.victim_confidence))
    return sorted(pts)


def write_curve_csv(points: Sequence[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("norm", "kappa_or_epsilon", "confidence"))
        for p in points:
            w.writerow([_fmt(v) for v in p])


def success_by_alpha(records: Sequence[TrialRecord], victim_id: str, kappa: float | None = None) -> list[tuple]:
    """Targeted success per alpha for one victim (optionally one kappa)."""
    groups: dict = {}
    for r in records:
        if r.victim_id == victim_id and (kappa is None or r.kappa == kappa):
            groups.setdefault(r.alpha, []).append(r)
    return [(a, success_targeted(groups[a])) for a in sorted(groups)]


# -- adversarial training -----------------------------------------------------------

@dataclass
class AdversarialTrainingReport:
    base_natural: float
    at_natural: float
    base_adversarial: float
    at_adversarial: float

    def table(self) -> dict:
        """Columns laid out like a Base / AT accuracy table (2-norm inference)."""
        return {"Base (l2)": self.base_natural, "AT (l2)": self.at_natural,
                "Base adversarial (l2)": self.base_adversarial,
                "AT adversarial (l2)": self.at_adversarial}


def _craft_set(net, items, gallery, cfg: AttackConfig, seed: int):
    """Perturb ``items`` against ``net``; targets drawn uniformly from the other labels."""
    rng = np.random.default_rng(seed)
    labels = gallery.labels
    gal = EmbeddedGallery(net, gallery)
    out = []
    for item in items:
        c = cfg
        if cfg.targeted:
            others = [y for y in labels if y != item.label]
            c = replace(cfg, target=others[rng.integers(len(others))])
        outcome = run_attack(net, item.pixels, gal, c, source=item.label)
        out.append(LabeledImage(amplify(item.pixels, outcome.delta, cfg.alpha), item.label))
    return out


def adversarial_training(net: EmbeddingNetwork, train_items: Sequence[LabeledImage], gallery: ReferenceSet,
                         eval_items: Sequence[LabeledImage], attack_cfg: AttackConfig, epochs: int,
                         train_cfg=None, seed: int = 0):
    """Compare natural training with training on a 50/50 clean/adversarial mix.

    Both runs start from ``net`` with the same SGD settings. The adversarial
    half of the training set is crafted against the naturally trained model;
    adversarial accuracy for both models is measured on one fixed set crafted
    from ``eval_items`` against that same model.

    Returns ``(adversarially_trained_net, report)``.
    """
    if len(train_items) < 4 or not eval_items:
        raise DatasetError("adversarial training needs a training and an evaluation split")
    cfg = train_cfg or TrainConfig()
    cfg = replace(cfg, epochs=epochs)
    base = train(net, train_items, cfg)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_items))
    half = set(order[: len(train_items) // 2].tolist())
    chosen = [train_items[i] for i in sorted(half)]
    crafted = iter(_craft_set(base, chosen, gallery, attack_cfg, seed))
    mixed = [next(crafted) if i in half else item for i, item in enumerate(train_items)]
    at_net = train(net, mixed, cfg)

    adv_eval = _craft_set(base, eval_items, gallery, attack_cfg, seed + 1)
    report = AdversarialTrainingReport(
        base_natural=accuracy(base, gallery, eval_items),
        at_natural=accuracy(at_net, gallery, eval_items),
        base_adversarial=accuracy(base, gallery, adv_eval),
        at_adversarial=accuracy(at_net, gallery, adv_eval),
    )
    return at_net, report
