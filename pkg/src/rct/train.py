"""Losses, schedules, Adam and the strategy-parameterised mean-teacher training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from .errors import ConfigError, DomainError, NumericalError, ShapeError
from .model import ModelConfig, Predictions, backward, ema_update, forward, init_params, predict, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "vanilla-mixup", "hard-mixup", "randwarp", "rct", "ict", "sct", "ict-sct")

# augmentation branches (after the original) and the unsupervised terms per strategy
_BRANCHES = {
    "baseline": (),
    "vanilla-mixup": ("vmix",),
    "hard-mixup": ("hardmix",),
    "randwarp": ("hardmix", "warp"),
    "rct": ("hardmix", "warp"),
    "ict": ("hardmix", "warp"),
    "sct": ("shift",),
    "ict-sct": ("hardmix", "shift"),
}
_USES_ICT = {"ict", "sct", "ict-sct"}
_USES_SC = {"rct"}

BCE_CLIP = 1e-7
METRICS_HEADER = "epoch,step,supervised,meanteacher,self_consistency,total,val_bce,lr,r"


@dataclass
class TrainConfig:
    n_classes: int = 4
    batch_weak: int = 6
    batch_strong: int = 6
    batch_unlabeled: int = 12
    epochs: int = 40
    warmup_epochs: int = 10
    steps_per_epoch: int = 0  # 0: one pass over the larger labelled split
    lr_max: float = 1e-3
    consistency_max: float = 2.0
    d_max: int = 5
    ema_decay: float = 0.99
    mix_three_prob: float = 0.5
    mixup_alpha: float = 0.2
    strategy: str = "rct"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    channels: str = "16,32,64"
    time_pools: str = "2,2,1"
    freq_pools: str = "8,4,2"
    gru_hidden: int = 32
    gru_layers: int = 1
    block_norm: bool = True
    n_frames: int = 624
    n_mels: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("batch_weak", "batch_strong", "batch_unlabeled", "steps_per_epoch", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("n_classes", "epochs", "lr_max", "gru_hidden", "gru_layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.consistency_max < 0:
            raise ConfigError("consistency_max must be non-negative")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs cannot exceed epochs")
        if not 1 <= self.d_max <= 9:
            raise ConfigError(f"d_max must be in 1..9, got {self.d_max}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule and batch composition (200 epochs, 12/12/24, warmup 50)."""
        base = dict(batch_weak=12, batch_strong=12, batch_unlabeled=24, epochs=200,
                    warmup_epochs=50, ema_decay=0.999, gru_layers=2)
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        ints = lambda s: tuple(int(v) for v in str(s).split(","))  # noqa: E731
        return ModelConfig(n_classes=self.n_classes, n_mels=self.n_mels, n_frames=self.n_frames,
                           channels=ints(self.channels), time_pools=ints(self.time_pools),
                           freq_pools=ints(self.freq_pools), gru_hidden=self.gru_hidden,
                           gru_layers=self.gru_layers, block_norm=self.block_norm)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                values[key] = raw.lower() in ("true", "1")
            else:
                values[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------- schedules

def ramp(step, warmup_steps, max_w):
    """Linear ramp from 0 to ``max_w`` over ``warmup_steps``, constant afterwards."""
    if warmup_steps <= 0:
        return float(max_w)
    return float(max_w) * min(1.0, step / warmup_steps)


def lr_schedule(step, warmup_steps, lr_max):
    return ramp(step, warmup_steps, lr_max)


def adam_init(params):
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs are not modified."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
        if g.shape != state["m"][k].shape:
            raise ShapeError(f"{k}: gradient {g.shape} vs state {state['m'][k].shape}")
    t = state["t"] + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        new_params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        m_new[k], v_new[k] = m, v
    return new_params, {"t": t, "m": m_new, "v": v_new}


# ---------------------------------------------------------------- losses

def _kinds_masks(kinds):
    kinds = np.asarray(kinds)
    return (kinds == "weak") | (kinds == "strong"), kinds == "strong"


def _bce(p, y):
    p = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _bce_grad(p, y):
    clipped = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    g = (clipped - y) / (clipped * (1.0 - clipped))
    return np.where((p > BCE_CLIP) & (p < 1.0 - BCE_CLIP), g, 0.0)


def supervised_loss(preds: Predictions, weak_labels, strong_labels, kinds, with_grad=False):
    """Binary cross-entropy on labelled samples.

    Weak and strong clips both supervise the weak head (strong clips through
    their frame-wise max); strong clips also supervise every frame. The loss is
    the mean over contributing weak elements plus the mean over contributing
    frame elements; unlabeled clips contribute nothing.
    """
    weak_labels = np.asarray(weak_labels, dtype=float)
    strong_labels = np.asarray(strong_labels, dtype=float)
    for y in (weak_labels, strong_labels):
        if np.any((y < 0) | (y > 1)):
            raise DomainError("labels must lie in [0, 1]")
    wmask, smask = _kinds_masks(kinds)
    value = 0.0
    d_weak = np.zeros_like(preds.weak)
    d_strong = np.zeros_like(preds.strong)
    if wmask.any():
        n = wmask.sum() * preds.weak.shape[-1]
        value += _bce(preds.weak[wmask], weak_labels[wmask]).sum() / n
        d_weak[wmask] = _bce_grad(preds.weak[wmask], weak_labels[wmask]) / n
    if smask.any():
        n = smask.sum() * preds.strong.shape[-1] * preds.strong.shape[-2]
        value += _bce(preds.strong[smask], strong_labels[smask]).sum() / n
        d_strong[smask] = _bce_grad(preds.strong[smask], strong_labels[smask]) / n
    value = float(value)
    return (value, d_strong, d_weak) if with_grad else value


def _pair_mse(weak_a, strong_a, weak_b, strong_b):
    """mean((a-b)^2) at clip level plus at frame level, and d/da of that sum."""
    dw = weak_a - weak_b
    ds = strong_a - strong_b
    value = float(np.mean(dw**2) + np.mean(ds**2)) if dw.size else 0.0
    gw = 2.0 * dw / max(dw.size, 1)
    gs = 2.0 * ds / max(ds.size, 1)
    return value, gs, gw


def meanteacher_loss(student, teacher, unlabeled_mask, r, with_grad=False):
    """Ramp-weighted mean over branches of the student/teacher MSE on unlabeled clips.

    ``student`` and ``teacher`` are lists of per-branch Predictions for the same
    inputs; teacher outputs are treated as constants.
    """
    if len(student) != len(teacher):
        raise ShapeError("student and teacher branch counts differ")
    mask = np.asarray(unlabeled_mask, dtype=bool)
    total = 0.0
    grads = []
    for s, t in zip(student, teacher):
        if s.strong.shape != t.strong.shape or s.weak.shape != t.weak.shape:
            raise ShapeError("student and teacher predictions differ in shape")
        gs = np.zeros_like(s.strong)
        gw = np.zeros_like(s.weak)
        if mask.any():
            v, gs_m, gw_m = _pair_mse(s.weak[mask], s.strong[mask], t.weak[mask], t.strong[mask])
            total += v
            gs[mask], gw[mask] = gs_m, gw_m
        grads.append((gs, gw))
    k = max(len(student), 1)
    value = r * total / k
    if not with_grad:
        return value
    return value, [(r * gs / k, r * gw / k) for gs, gw in grads]


def self_consistency_loss(orig: Predictions, augmented: Predictions, transform, r, with_grad=False):
    """r * (mean sq. error of weak outputs + mean sq. error of strong outputs).

    The original predictions pass through ``transform`` (the label transform of
    the augmentation) before comparison; gradients reach both operands.
    """
    transform = transform or aug.LabelTransform("identity")
    tw = transform.weak(orig.weak)
    ts = transform.strong(orig.strong)
    value, gs, gw = _pair_mse(tw, ts, augmented.weak, augmented.strong)
    value *= r
    if not with_grad:
        return value
    d_orig = (transform.vjp(orig.strong, r * gs, strong=True), transform.vjp(orig.weak, r * gw, strong=False))
    d_aug = (-r * gs, -r * gw)
    return value, d_orig, d_aug


def ict_consistency_loss(teacher_orig: Predictions, student_aug: Predictions, transform, r, with_grad=False):
    """Same formula as the self-consistency term, with teacher predictions as fixed targets."""
    transform = transform or aug.LabelTransform("identity")
    tw = transform.weak(teacher_orig.weak)
    ts = transform.strong(teacher_orig.strong)
    value, gs, gw = _pair_mse(student_aug.weak, student_aug.strong, tw, ts)
    value *= r
    if not with_grad:
        return value
    return value, (r * gs, r * gw)


# ---------------------------------------------------------------- data

@dataclass
class TrainData:
    """Cropped feature batch arrays plus labels for every training clip."""

    x: np.ndarray          # (n, T, K) normalised features
    lo: np.ndarray         # (n,)
    hi: np.ndarray         # (n,)
    weak: np.ndarray       # (n, C)
    strong: np.ndarray     # (n, T', C)
    kinds: np.ndarray      # (n,) of "weak" | "strong" | "unlabeled"
    clip_ids: list = field(default_factory=list)

    def indices(self, kind):
        return np.flatnonzero(self.kinds == kind)

    def __len__(self):
        return len(self.kinds)


def build_data(annotations, clips, n_classes, n_frames=624, pool_factor=4, dtype=np.float32) -> TrainData:
    """Assemble TrainData from ClipAnnotations and a clip_id -> MelClip mapping."""
    from .synthdata import labels_from_annotation

    n_out = n_frames // pool_factor
    n = len(annotations)
    x = np.empty((n, n_frames, clips[annotations[0].clip_id].values.shape[1]) if n else (0, n_frames, 128),
                 dtype=dtype)
    lo, hi = np.empty(n), np.empty(n)
    weak = np.zeros((n, n_classes))
    strong = np.zeros((n, n_out, n_classes))
    kinds = np.empty(n, dtype=object)
    for i, ann in enumerate(annotations):
        clip = clips[ann.clip_id]
        x[i] = clip.values[:n_frames]
        lo[i], hi[i] = clip.norm_lo, clip.norm_hi
        kinds[i] = ann.split
        if ann.split != "unlabeled":
            weak[i], strong[i] = labels_from_annotation(ann, n_out, n_classes)
    return TrainData(x, lo, hi, weak, strong, kinds.astype(str), [a.clip_id for a in annotations])


def rng_stream(seed, name):
    """Independent named random stream derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class BatchSampler:
    """Cycles through shuffled index lists of each annotation split."""

    def __init__(self, data: TrainData, sizes: dict, rng):
        self.rng = rng
        self.pools = {k: data.indices(k) for k in ("weak", "strong", "unlabeled")}
        self.sizes = {k: (sizes[k] if len(self.pools[k]) else 0) for k in self.pools}
        self.queues = {k: [] for k in self.pools}

    def _take(self, kind, n):
        out = []
        while len(out) < n:
            if not self.queues[kind]:
                self.queues[kind] = list(self.rng.permutation(self.pools[kind]))
            out.append(self.queues[kind].pop())
        return out

    def next(self):
        return np.array([i for k in ("weak", "strong", "unlabeled") for i in self._take(k, self.sizes[k])], dtype=int)

    def steps_per_epoch(self):
        counts = [math.ceil(len(self.pools[k]) / self.sizes[k]) for k in ("weak", "strong") if self.sizes[k]]
        if not counts and self.sizes["unlabeled"]:
            counts = [math.ceil(len(self.pools["unlabeled"]) / self.sizes["unlabeled"])]
        return max(counts) if counts else 0


# ---------------------------------------------------------------- branches

@dataclass
class Branch:
    name: str
    x: np.ndarray
    weak: np.ndarray
    strong: np.ndarray
    transform: aug.LabelTransform


def build_branches(strategy, x, lo, hi, weak, strong, kinds, cfg: TrainConfig, rng):
    """Original branch plus the augmented branches used by ``strategy``."""
    groups = [np.flatnonzero(kinds == k) for k in ("weak", "strong", "unlabeled")]
    groups = [g for g in groups if len(g)]
    branches = [Branch("orig", x, weak, strong, aug.LabelTransform("identity"))]
    for name in _BRANCHES[strategy]:
        if name == "hardmix":
            sets = aug.draw_mix_sets(groups, rng, cfg.mix_three_prob)
            xm, _, _ = aug.hard_mix_arrays(x, lo, hi, sets)
            tr = aug.label_transform_for(sets)
            branches.append(Branch(name, xm.astype(x.dtype),
                                   np.stack([aug.or_labels(weak[list(s)]) for s in sets]),
                                   np.stack([aug.or_labels(strong[list(s)]) for s in sets]), tr))
        elif name == "vmix":
            partner, lam = aug.draw_pairs(groups, rng, cfg.mixup_alpha)
            lx = lam[:, None, None]
            xv = (lx * x + (1.0 - lx) * x[partner]).astype(x.dtype)
            branches.append(Branch(name, xv, lam[:, None] * weak + (1 - lam[:, None]) * weak[partner],
                                   lx * strong + (1 - lx) * strong[partner], aug.LabelTransform("identity")))
        elif name in ("warp", "shift"):
            if name == "warp":
                choice = aug.draw_warp(cfg.d_max, rng)
            else:
                choice = aug.WarpChoice("time_shift", int(rng.integers(1, cfg.d_max + 1)))
            xw = aug.apply_warp(x, choice, rng).astype(x.dtype)
            tr = aug.label_transform_for(choice)
            branches.append(Branch(name, xw, weak, tr.strong(strong), tr))
    return branches


# ---------------------------------------------------------------- training loop

@dataclass
class LossReport:
    step: int
    epoch: int
    supervised: float
    meanteacher: float
    self_consistency: float
    total: float
    lr: float
    r: float
    n_branches: int = 1
    batch_size: int = 0


@dataclass
class TrainResult:
    student: dict
    teacher: dict
    reports: list
    val_curve: list
    model_config: ModelConfig
    best_epoch: int = -1
    checkpoints: dict = field(default_factory=dict)


def compute_step(student, teacher, batch_idx, data: TrainData, cfg: TrainConfig, mcfg: ModelConfig,
                 strategy: str, r: float, rng):
    """Loss components and student gradients for one mini-batch."""
    x = data.x[batch_idx]
    kinds = data.kinds[batch_idx]
    branches = build_branches(strategy, x, data.lo[batch_idx], data.hi[batch_idx],
                              data.weak[batch_idx], data.strong[batch_idx], kinds, cfg, rng)
    n = len(batch_idx)
    nb = len(branches)
    preds, cache = forward(student, np.concatenate([b.x for b in branches]), mcfg)
    per = [preds[slice(i * n, (i + 1) * n)] for i in range(nb)]
    d_strong = np.zeros_like(preds.strong, dtype=np.float64)
    d_weak = np.zeros_like(preds.weak, dtype=np.float64)

    def add(i, gs, gw):
        d_strong[i * n:(i + 1) * n] += gs
        d_weak[i * n:(i + 1) * n] += gw

    sup, gs, gw = supervised_loss(
        preds, np.concatenate([b.weak for b in branches]), np.concatenate([b.strong for b in branches]),
        np.tile(kinds, nb), with_grad=True)
    d_strong += gs
    d_weak += gw

    mt = sc = 0.0
    unl = kinds == "unlabeled"
    if strategy in _USES_ICT:
        t_orig = _teacher_predict(teacher, x, mcfg)
        for i in range(1, nb):
            v, (gs, gw) = ict_consistency_loss(t_orig, per[i], branches[i].transform, r, with_grad=True)
            mt += v / (nb - 1)
            add(i, gs / (nb - 1), gw / (nb - 1))
    else:
        if unl.any():
            t_preds = [_teacher_predict(teacher, b.x[unl], mcfg) for b in branches]
            s_preds = [p_[np.flatnonzero(unl)] for p_ in per]
            mt, grads = meanteacher_loss(s_preds, t_preds, np.ones(unl.sum(), bool), r, with_grad=True)
            for i, (gs, gw) in enumerate(grads):
                gs_full = np.zeros_like(per[i].strong, dtype=np.float64)
                gw_full = np.zeros_like(per[i].weak, dtype=np.float64)
                gs_full[unl], gw_full[unl] = gs, gw
                add(i, gs_full, gw_full)
        if strategy in _USES_SC:
            for i in range(1, nb):
                v, (gso, gwo), (gsa, gwa) = self_consistency_loss(per[0], per[i], branches[i].transform, r,
                                                                    with_grad=True)
                sc += v / (nb - 1)
                add(0, gso / (nb - 1), gwo / (nb - 1))
                add(i, gsa / (nb - 1), gwa / (nb - 1))
    grads = backward(student, cache, d_strong, d_weak, mcfg)
    return (sup, float(mt), float(sc)), grads, nb


def _teacher_predict(teacher, x, mcfg):
    p, _ = forward(teacher, x, mcfg)
    return Predictions(p.strong.astype(np.float64), p.weak.astype(np.float64))


def validation_bce(params, x_val, strong_val, mcfg, batch_size=32) -> float:
    """Frame-level BCE of strong predictions on strongly labelled validation clips."""
    if len(x_val) == 0:
        return float("nan")
    p = predict(params, x_val, mcfg, batch_size)
    return float(_bce(p.strong.astype(np.float64), strong_val).mean())


def train(cfg: TrainConfig, data: TrainData, val: TrainData | None = None, strategy: str | None = None,
          out_dir=None, on_epoch=None) -> TrainResult:
    """Train a student/teacher pair; returns parameters, per-step reports and the validation curve."""
    strategy = strategy or cfg.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    mcfg = cfg.model_config()
    dtype = np.dtype(cfg.dtype)
    data = dataclasses.replace(data, x=data.x.astype(dtype, copy=False))
    student = init_params(mcfg, rng_stream(cfg.seed, "init"), dtype)
    teacher = {k: v.copy() for k, v in student.items()}
    opt = adam_init(student)
    sampler = BatchSampler(data, {"weak": cfg.batch_weak, "strong": cfg.batch_strong,
                                  "unlabeled": cfg.batch_unlabeled}, rng_stream(cfg.seed, "batch-order"))
    aug_rng = rng_stream(cfg.seed, "augment")
    spe = cfg.steps_per_epoch or sampler.steps_per_epoch()
    if spe == 0:
        raise ConfigError("training data is empty")
    warmup = cfg.warmup_epochs * spe
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports, curve = [], []
    best = (math.inf, -1)
    checkpoints = {}
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(spe):
            r = ramp(step, warmup, cfg.consistency_max)
            lr = lr_schedule(step, warmup, cfg.lr_max)
            idx = sampler.next()
            try:
                with np.errstate(invalid="ignore", over="ignore"):
                    (sup, mt, sc), grads, nb = compute_step(student, teacher, idx, data, cfg, mcfg, strategy, r,
                                                            aug_rng)
                total = sup + mt + sc
                if not math.isfinite(total):
                    raise NumericalError(f"non-finite loss at step {step}")
                new_student, opt = adam_step(student, grads, opt, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            except NumericalError:
                if out is not None:
                    checkpoints["last_good"] = out / "last_good.ckpt"
                    save_checkpoint(checkpoints["last_good"], mcfg, student, teacher, {"step": step})
                log.error("aborting at step %d: non-finite values", step)
                raise
            reports.append(LossReport(step, epoch, sup, mt, sc, total, lr, r, nb, nb * len(idx)))
            log.debug("step %d epoch %d branches=%d batch=%d total=%.5f", step, epoch, nb, nb * len(idx), total)
            student = new_student
            # mean-teacher warm-up: plain average until 1 - 1/(t+1) exceeds the decay
            teacher = ema_update(teacher, student, min(cfg.ema_decay, 1.0 - 1.0 / (step + 1)))
            step += 1
        vb = validation_bce(student, val.x, val.strong, mcfg) if val is not None and len(val) else float("nan")
        curve.append(vb)
        log.info("epoch %d/%d strategy=%s total=%.4f val_bce=%.4f", epoch + 1, cfg.epochs, strategy,
                 reports[-1].total, vb)
        if out is not None and math.isfinite(vb) and vb < best[0]:
            checkpoints["best"] = out / "best.ckpt"
            save_checkpoint(checkpoints["best"], mcfg, student, teacher, {"epoch": epoch, "val_bce": vb})
        if math.isfinite(vb) and vb < best[0]:
            best = (vb, epoch)
        if on_epoch is not None:
            on_epoch(epoch, reports, curve)
    if out is not None:
        checkpoints["final"] = out / "final.ckpt"
        save_checkpoint(checkpoints["final"], mcfg, student, teacher, {"epoch": cfg.epochs - 1})
    return TrainResult(student, teacher, reports, curve, mcfg, best[1], checkpoints)


def write_metrics(path, reports, val_curve) -> None:
    """One CSV row per step; ``val_bce`` is filled on the last step of each epoch."""
    last_of_epoch = {}
    for rep in reports:
        last_of_epoch[rep.epoch] = rep.step
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for rep in reports:
            vb = ""
            if last_of_epoch[rep.epoch] == rep.step and rep.epoch < len(val_curve):
                vb = repr(float(val_curve[rep.epoch]))
            f.write(f"{rep.epoch},{rep.step},{rep.supervised!r},{rep.meanteacher!r},{rep.self_consistency!r},"
                    f"{rep.total!r},{vb},{rep.lr!r},{rep.r!r}\n")
