"""Attacks on centroid-based metric embeddings.

The attack objectives are built from the mean embedding distance between a
point and every gallery member of one label. Untargeted PGD maximises that
distance for the source label; targeted attacks minimise the hinge loss

    G(z, t) = [d'(z, A_t) - max_{y != t} d'(z, A_y) + kappa]_+

or the plain target loss d'(z, A_t).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .diffnet import ArgumentError, EmbeddingNetwork, ShapeError, embed_and_grad
from .embedding import EmbeddedGallery, Label, LookupFailure, ReferenceSet
from .images import save_float, save_image

ATTACKS = ("pgd", "cw_l2", "cw_linf")
LOSSES = ("hinge", "target")
Callback = Callable[[int, np.ndarray], None]


class AttackConfigError(ArgumentError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    attack: str = "pgd"
    norm: str = "2"
    iterations: int = 20
    learning_rate: float = 0.1
    perturbation_bound: float = 0.1
    search_steps: int = 8
    initial_const: float = 0.3
    kappa: float = 0.0
    targeted: bool = False
    target: Optional[Label] = None
    loss: str = "hinge"
    box: Optional[tuple] = (0.0, 1.0)
    tau_init: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.box is not None:
            object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        self.validate()

    def validate(self):
        if self.attack not in ATTACKS:
            raise AttackConfigError(f"unknown attack {self.attack!r}")
        expected = "inf" if self.attack == "cw_linf" else "2"
        if str(self.norm) != expected:
            raise AttackConfigError(f"{self.attack} uses norm {expected}, got {self.norm}")
        if self.iterations < 1:
            raise AttackConfigError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise AttackConfigError("learning_rate must be > 0")
        if self.attack == "pgd" and self.perturbation_bound <= 0:
            raise AttackConfigError("perturbation_bound must be > 0 for pgd")
        if self.attack != "pgd":
            if self.search_steps < 1:
                raise AttackConfigError("search_steps must be >= 1")
            if not self.targeted:
                raise AttackConfigError(f"{self.attack} is a targeted attack")
            if self.initial_const <= 0:
                raise AttackConfigError("initial_const must be > 0")
        if self.kappa < 0:
            raise AttackConfigError("kappa must be >= 0")
        if self.targeted and self.target is None:
            raise AttackConfigError("targeted attack needs a target label")
        if self.loss not in LOSSES:
            raise AttackConfigError(f"unknown loss {self.loss!r}")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise AttackConfigError("box must satisfy low < high")
        if self.tau_init <= 0:
            raise AttackConfigError("tau_init must be > 0")
        if self.alpha < 1:
            raise AttackConfigError("alpha must be >= 1")

    def to_json(self) -> str:
        d = asdict(self)
        d["box"] = list(self.box) if self.box is not None else None
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise AttackConfigError(f"unknown attack config keys: {sorted(extra)}")
        d = dict(d)
        if "norm" in d:
            d["norm"] = str(d["norm"])
        if d.get("box") is not None:
            d["box"] = tuple(d["box"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "AttackConfig":
        return cls.from_dict(json.loads(text))


# Table-style presets: PGD (few/many iterations), CW-inf, CW-small, CW-large.
PRESETS = {
    "pgd": dict(attack="pgd", norm="2", iterations=20),
    "pgd_many": dict(attack="pgd", norm="2", iterations=200),
    "cw_inf": dict(attack="cw_linf", norm="inf", iterations=100, search_steps=10),
    "cw_small": dict(attack="cw_l2", norm="2", iterations=100, search_steps=8),
    "cw_large": dict(attack="cw_l2", norm="2", iterations=800, search_steps=15),
}
PRESETS["cw_l2"] = PRESETS["cw_small"]
PRESETS["cw_linf"] = PRESETS["cw_inf"]


def preset(name: str, **overrides) -> AttackConfig:
    base = dict(learning_rate=0.1, perturbation_bound=0.1, initial_const=0.3)
    base.update(PRESETS[name])
    base.update(overrides)
    return AttackConfig(**base)


@dataclass
class PerturbationOutcome:
    x: np.ndarray
    delta: np.ndarray
    alpha: float
    l2: float
    linf: float
    trace: list = field(default_factory=list)
    feasible: bool = False
    attack: str = ""
    source: Optional[Label] = None
    target: Optional[Label] = None

    @classmethod
    def build(cls, x, delta, alpha=1.0, **kw) -> "PerturbationOutcome":
        scaled = alpha * delta
        return cls(x=x, delta=delta, alpha=float(alpha),
                   l2=float(np.linalg.norm(scaled.ravel())),
                   linf=float(np.max(np.abs(scaled))) if scaled.size else 0.0, **kw)

    def with_alpha(self, alpha: float) -> "PerturbationOutcome":
        if alpha < 1:
            raise ArgumentError("alpha must be >= 1")
        scaled = alpha * self.delta
        return replace(self, alpha=float(alpha),
                       l2=float(np.linalg.norm(scaled.ravel())),
                       linf=float(np.max(np.abs(scaled))) if scaled.size else 0.0)

    @property
    def adversarial(self) -> np.ndarray:
        return amplify(self.x, self.delta, self.alpha)

    def norms_consistent(self, tol: float = 1e-9) -> bool:
        scaled = self.alpha * self.delta
        return (abs(np.linalg.norm(scaled.ravel()) - self.l2) <= tol
                and abs(np.max(np.abs(scaled)) - self.linf) <= tol)

    def metadata(self) -> dict:
        return {
            "attack": self.attack,
            "source": self.source,
            "target": self.target,
            "alpha": self.alpha,
            "l2_norm": self.l2,
            "linf_norm": self.linf,
            "feasible": self.feasible,
            "iterations_recorded": len(self.trace),
            "final_objective": self.trace[-1] if self.trace else None,
        }


# -- objectives ----------------------------------------------------------------

def _gallery(net: EmbeddingNetwork, ref) -> EmbeddedGallery:
    if isinstance(ref, EmbeddedGallery) and ref.net is net:
        return ref
    if isinstance(ref, EmbeddedGallery):
        ref = ref.ref
    return EmbeddedGallery(net, ref)


def _mean_dist(emb: np.ndarray, members: np.ndarray):
    diff = emb - members
    d = np.linalg.norm(diff, axis=1)
    nz = d > 0
    unit = np.zeros_like(diff)
    unit[nz] = diff[nz] / d[nz, None]
    return float(d.mean()), unit.mean(axis=0)


def _hinge(emb, gal: EmbeddedGallery, t, kappa):
    if len(gal.labels) < 2:
        raise ArgumentError("hinge loss needs at least two labels")
    dt, gt = _mean_dist(emb, gal.members(t))
    best = None
    for y in gal.labels:
        if y == t:
            continue
        d, g = _mean_dist(emb, gal.members(y))
        if best is None or d > best[0]:
            best = (d, g)
    raw = dt - best[0] + kappa
    if raw > 0:
        return raw, gt - best[1]
    return 0.0, np.zeros_like(emb)


def mean_distance(net, z, ref, label) -> float:
    """Mean embedding distance from ``z`` to every gallery member of ``label``."""
    return mean_distance_grad(net, z, ref, label)[0]


def mean_distance_grad(net, z, ref, label):
    gal = _gallery(net, ref)
    members = gal.members(label)
    value, gz, _ = embed_and_grad(net, z, lambda e: _mean_dist(e, members))
    return value, gz


def target_loss(net, z, t, ref) -> float:
    return mean_distance(net, z, ref, t)


def target_loss_grad(net, z, t, ref):
    return mean_distance_grad(net, z, ref, t)


def hinge_loss(net, z, t, ref, kappa: float) -> float:
    return hinge_loss_grad(net, z, t, ref, kappa)[0]


def hinge_loss_grad(net, z, t, ref, kappa: float):
    gal = _gallery(net, ref)
    if t not in gal:
        raise LookupFailure(f"label {t!r} not in reference set")
    value, gz, _ = embed_and_grad(net, z, lambda e: _hinge(e, gal, t, kappa))
    return value, gz


def amplify(x: np.ndarray, delta: np.ndarray, alpha: float) -> np.ndarray:
    """``clip(x + alpha * delta, 0, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {delta.shape}")
    if alpha < 1:
        raise ArgumentError("alpha must be >= 1")
    return np.clip(x + alpha * delta, 0.0, 1.0)


# -- attack loops -----------------------------------------------------------------

def _check_inputs(net, x, cfg, kind, gal, source):
    if cfg.attack != kind:
        raise AttackConfigError(f"config is for {cfg.attack}, not {kind}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    if cfg.targeted:
        if cfg.target not in gal:
            raise LookupFailure(f"target {cfg.target!r} not in reference set")
    elif source not in gal:
        raise LookupFailure(f"untargeted attack needs a known source label, got {source!r}")
    return x


def _box_clip(x, delta, box):
    if box is None:
        return delta
    return np.clip(x + delta, box[0], box[1]) - x


def _project_l2(delta, eps):
    n = np.linalg.norm(delta.ravel())
    if n > eps:
        delta = delta * (eps / n)
    return delta


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, w, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return w - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def pgd_attack(net: EmbeddingNetwork, x, ref, cfg: AttackConfig, source=None,
               callback: Callback | None = None) -> PerturbationOutcome:
    """Projected normalised-gradient attack inside an l2 ball of radius epsilon.

    Untargeted mode ascends the mean distance to the source label; targeted
    mode descends the configured loss. Every iterate is projected onto the
    ball and then onto the pixel box. The best iterate seen is returned.
    """
    gal = _gallery(net, ref)
    x = _check_inputs(net, x, cfg, "pgd", gal, source)
    if cfg.targeted:
        members = gal.members(cfg.target)
        if cfg.loss == "hinge":
            def fn(e):
                return _hinge(e, gal, cfg.target, cfg.kappa)
        else:
            def fn(e):
                return _mean_dist(e, members)
        sign = -1.0
    else:
        members = gal.members(source)

        def fn(e):
            return _mean_dist(e, members)
        sign = 1.0

    eps, eta = cfg.perturbation_bound, cfg.learning_rate
    delta = np.zeros_like(x)
    value, grad, _ = embed_and_grad(net, x + delta, fn)
    trace = [value]
    best_val, best_delta = value, delta.copy()
    for it in range(cfg.iterations):
        gnorm = np.linalg.norm(grad.ravel())
        if gnorm > 0:
            delta = delta + sign * eta * grad / gnorm
        delta = _project_l2(delta, eps)
        delta = _box_clip(x, delta, cfg.box)
        if callback is not None:
            callback(it, delta)
        value, grad, _ = embed_and_grad(net, x + delta, fn)
        trace.append(value)
        if sign * (value - best_val) > 0:
            best_val, best_delta = value, delta.copy()

    feasible = False
    if cfg.targeted:
        feasible = hinge_loss(net, x + best_delta, cfg.target, gal, cfg.kappa) <= 0.0
    return PerturbationOutcome.build(x, best_delta, cfg.alpha, trace=trace, feasible=feasible,
                                     attack="pgd", source=source, target=cfg.target)


def _target_objective(gal, cfg):
    members = gal.members(cfg.target)

    def fn(e):
        h, gh = _hinge(e, gal, cfg.target, cfg.kappa)
        if cfg.loss == "hinge":
            return (h, h), gh
        d, gd = _mean_dist(e, members)
        return (d, h), gd
    return fn


def _eval(net, z, fn):
    """Returns (objective loss, hinge value, d loss / dz)."""
    (loss, hinge), gz, _ = embed_and_grad(net, z, fn)
    return loss, hinge, gz


def cw_l2_attack(net: EmbeddingNetwork, x, ref, cfg: AttackConfig, source=None,
                 callback: Callback | None = None) -> PerturbationOutcome:
    """Penalty attack ``min |delta|_2^2 + c * loss`` with a binary search on ``c``.

    With a pixel box the iterate is ``low + (high - low) * (tanh(w) + 1) / 2``.
    The smallest feasible perturbation over all search steps is returned;
    when no step is feasible, the iterate with the lowest hinge value is.
    """
    gal = _gallery(net, ref)
    x = _check_inputs(net, x, cfg, "cw_l2", gal, source)
    fn = _target_objective(gal, cfg)

    if cfg.box is not None:
        lo, hi = cfg.box
        scaled = np.clip((x - lo) / (hi - lo) * 2.0 - 1.0, -1.0, 1.0)
        w0 = np.arctanh(scaled * 0.999999)

        def to_img(w):
            return lo + (hi - lo) * (np.tanh(w) + 1.0) / 2.0

        def jac(w):
            return (hi - lo) / 2.0 * (1.0 - np.tanh(w) ** 2)
    else:
        w0 = x.copy()

        def to_img(w):
            return w

        def jac(w):
            return 1.0

    const, lower, upper = cfg.initial_const, 0.0, 1e10
    best_norm, best_delta = np.inf, None
    fallback = (np.inf, np.inf, None)
    trace = []
    it_global = 0
    for _ in range(cfg.search_steps):
        w = w0.copy()
        opt = _Adam(w.shape, cfg.learning_rate)
        found = False
        for it in range(cfg.iterations + 1):
            z = to_img(w)
            delta = z - x
            loss, hinge, gz = _eval(net, z, fn)
            n2 = float(np.sum(delta * delta))
            trace.append(n2 + const * loss)
            if hinge <= 0.0:
                found = True
                if n2 < best_norm:
                    best_norm, best_delta = n2, delta.copy()
            elif (hinge, n2) < fallback[:2]:
                fallback = (hinge, n2, delta.copy())
            if it == cfg.iterations:
                break
            grad_w = (2.0 * delta + const * gz) * jac(w)
            w = opt.step(w, grad_w)
            if callback is not None:
                callback(it_global, to_img(w) - x)
            it_global += 1
        if found:
            upper = min(upper, const)
            const = (lower + upper) / 2.0
        else:
            lower = max(lower, const)
            const = (lower + upper) / 2.0 if upper < 1e9 else const * 10.0

    feasible = best_delta is not None
    delta = best_delta if feasible else fallback[2]
    return PerturbationOutcome.build(x, delta, cfg.alpha, trace=trace, feasible=feasible,
                                     attack="cw_l2", source=source, target=cfg.target)


def cw_linf_attack(net: EmbeddingNetwork, x, ref, cfg: AttackConfig, source=None,
                   callback: Callback | None = None) -> PerturbationOutcome:
    """Bound-shrinking l-infinity penalty attack.

    Each round runs Adam on ``c * loss + sum([|delta_i| - tau]_+)``, warm
    started from the previous round. A feasible round shrinks ``tau`` to 0.9
    times the best feasible l-infinity norm; an infeasible one doubles ``c``.
    Iterates never leave ``[-tau_init, tau_init]`` or the pixel box.
    """
    gal = _gallery(net, ref)
    x = _check_inputs(net, x, cfg, "cw_linf", gal, source)
    fn = _target_objective(gal, cfg)
    tau0 = cfg.tau_init
    tau, const = tau0, cfg.initial_const
    delta = np.zeros_like(x)
    best_norm, best_delta = np.inf, None
    fallback = (np.inf, np.inf, None)
    trace = []
    it_global = 0
    for _ in range(cfg.search_steps):
        opt = _Adam(delta.shape, cfg.learning_rate)
        round_best = np.inf
        for it in range(cfg.iterations + 1):
            loss, hinge, gz = _eval(net, x + delta, fn)
            excess = np.abs(delta) - tau
            penalty = float(np.sum(np.maximum(excess, 0.0)))
            trace.append(const * loss + penalty)
            ninf = float(np.max(np.abs(delta))) if delta.size else 0.0
            if hinge <= 0.0:
                round_best = min(round_best, ninf)
                if ninf < best_norm:
                    best_norm, best_delta = ninf, delta.copy()
            elif (hinge, ninf) < fallback[:2]:
                fallback = (hinge, ninf, delta.copy())
            if it == cfg.iterations:
                break
            grad = const * gz + np.sign(delta) * (excess > 0)
            delta = opt.step(delta, grad)
            delta = np.clip(delta, -tau0, tau0)
            delta = _box_clip(x, delta, cfg.box)
            if callback is not None:
                callback(it_global, delta)
            it_global += 1
        if np.isfinite(round_best):
            tau = min(tau, best_norm) * 0.9
        else:
            const *= 2.0

    feasible = best_delta is not None
    delta = best_delta if feasible else fallback[2]
    return PerturbationOutcome.build(x, delta, cfg.alpha, trace=trace, feasible=feasible,
                                     attack="cw_linf", source=source, target=cfg.target)


def run_attack(net, x, ref, cfg: AttackConfig, source=None, callback=None) -> PerturbationOutcome:
    fn = {"pgd": pgd_attack, "cw_l2": cw_l2_attack, "cw_linf": cw_linf_attack}[cfg.attack]
    return fn(net, x, ref, cfg, source=source, callback=callback)


# -- export ------------------------------------------------------------------------

def export_outcome(outcome: PerturbationOutcome, out_dir: str | Path, stem: str = "mask") -> dict:
    """Write the mask as a min/max-remapped PNG, a float sidecar, and metadata JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    delta = outcome.delta
    lo, hi = float(delta.min()), float(delta.max())
    span = hi - lo
    remapped = (delta - lo) / span if span > 0 else np.zeros_like(delta)
    save_image(remapped, out_dir / f"{stem}.png")
    save_float(delta, out_dir / f"{stem}.npy")
    side = {"min": lo, "max": hi, "shape": list(delta.shape)}
    (out_dir / f"{stem}.json").write_text(json.dumps(side, indent=2, sort_keys=True))
    meta = outcome.metadata()
    (out_dir / "outcome.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return meta
