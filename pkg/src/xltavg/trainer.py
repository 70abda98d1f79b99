"""Deterministic desk-scale trainer.

Two model families, both softmax classifiers with closed-form gradients:

``linear``
    logits = x @ W + b; no body, everything is classifier.
``mlp``
    h = tanh(x @ W1 + b1) is the body, logits = h @ W2 + b2 the classifier.

Training uses AdamW with decoupled weight decay, a linear warmup/decay
schedule, batches with a fixed quota of examples per language scored by the
equal-weight mean of per-language losses, and optionally gradient surgery
against a randomly held-out language. A seed fixes every random choice, so
two runs with the same config write bitwise-identical snapshots.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from xltavg.averaging import RunSet, SnapshotSet
from xltavg.policy import SnapshotSchedule, make_schedule
from xltavg.rng import SplitMix64
from xltavg.synth import DatasetSplit
from xltavg.tensorstore import (
    Checkpoint,
    CheckpointRef,
    load_checkpoint,
    open_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)

FAMILIES = ("linear", "mlp")
BODY, CLASSIFIER = "body", "classifier"
STEP_TENSOR = "train.step"
MANIFEST = "manifest.json"


class TrainingError(ValueError):
    pass


@dataclass
class ModelParams:
    """Parameters split into a body (feature transform) and a classifier head.

    Tensor names are ``body.weight``, ``body.bias``, ``classifier.weight`` and
    ``classifier.bias``; the prefix is the partition tag.
    """

    body: dict[str, np.ndarray]
    classifier: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for part, tensors in ((BODY, self.body), (CLASSIFIER, self.classifier)):
            for name in tensors:
                if not name.startswith(part + "."):
                    raise ValueError(f"tensor {name!r} filed under {part!r}")

    @property
    def family(self) -> str:
        return "mlp" if self.body else "linear"

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.body, **self.classifier}

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.body.items()},
            {k: v.copy() for k, v in self.classifier.items()},
        )

    def to_checkpoint(self, step: int | None = None, metadata: Mapping[str, str] | None = None) -> Checkpoint:
        tensors = {name: value.copy() for name, value in self.tensors().items()}
        if step is not None:
            tensors[STEP_TENSOR] = np.array(step, dtype=np.int64)
        return Checkpoint(tensors, dict(metadata or {}))

    @classmethod
    def from_checkpoint(cls, source) -> "ModelParams":
        """From a Checkpoint or CheckpointRef; tensors outside the two partitions are ignored."""
        body, classifier = {}, {}
        for name in source.specs:
            if name.startswith(BODY + "."):
                body[name] = np.asarray(source.read_tensor(name)[1], dtype=np.float64)
            elif name.startswith(CLASSIFIER + "."):
                classifier[name] = np.asarray(source.read_tensor(name)[1], dtype=np.float64)
        if "classifier.weight" not in classifier:
            raise TrainingError("checkpoint has no classifier.weight")
        return cls(body, classifier)


def init_params(family: str, feature_dim: int, n_classes: int, hidden_dim: int = 16,
                body_seed: int = 0, classifier_seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, as torch.nn.Linear does.

    Body and classifier draw from separate seeds so runs can share a body
    initialization (the "pretrained" starting point) while their classifier
    heads differ.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")

    def linear(rng, fan_in, fan_out, prefix):
        bound = 1.0 / math.sqrt(fan_in)
        return {
            f"{prefix}.weight": rng.uniform((fan_in, fan_out), -bound, bound),
            f"{prefix}.bias": rng.uniform(fan_out, -bound, bound),
        }

    head_rng = SplitMix64.derived(classifier_seed, "init", CLASSIFIER)
    if family == "linear":
        return ModelParams({}, linear(head_rng, feature_dim, n_classes, CLASSIFIER))
    body_rng = SplitMix64.derived(body_seed, "init", BODY)
    return ModelParams(
        linear(body_rng, feature_dim, hidden_dim, BODY),
        linear(head_rng, hidden_dim, n_classes, CLASSIFIER),
    )


def _features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if not params.body:
        return x
    return np.tanh(x @ params.body["body.weight"] + params.body["body.bias"])


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _features(params, x) @ params.classifier["classifier.weight"] + params.classifier["classifier.bias"]


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


def forward_loss_and_grad(params: ModelParams, x, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the examples and its gradient for every tensor."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(y)
    if n == 0 or len(x) != n:
        raise TrainingError(f"need a non-empty example list, got {len(x)} inputs and {n} labels")
    w = params.classifier["classifier.weight"]
    in_dim = params.body["body.weight"].shape[0] if params.body else w.shape[0]
    if x.shape[1] != in_dim:
        raise TrainingError(f"feature dimension {x.shape[1]} does not match model input {in_dim}")
    if y.min() < 0 or y.max() >= w.shape[1]:
        raise TrainingError("label out of range")

    h = _features(params, x)
    z = h @ w + params.classifier["classifier.bias"]
    z_max = z.max(axis=1, keepdims=True)
    shifted = z - z_max
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, y]))

    dz = np.exp(shifted - log_norm[:, None])
    dz[rows, y] -= 1.0
    dz /= n
    grads = {"classifier.weight": h.T @ dz, "classifier.bias": dz.sum(axis=0)}
    if params.body:
        da = (dz @ w.T) * (1.0 - h * h)
        grads["body.weight"] = x.T @ da
        grads["body.bias"] = da.sum(axis=0)
    return loss, grads


def balanced_loss(per_language_losses: Mapping[str, float]) -> float:
    """Equal-weight mean of per-language losses."""
    if not per_language_losses:
        raise ValueError("no language losses to average")
    values = list(per_language_losses.values())
    if not all(math.isfinite(v) for v in values):
        raise ValueError("non-finite language loss")
    return math.fsum(values) / len(values)


def project_conflicts(grads: Mapping[str, np.ndarray], holdout: str) -> dict[str, np.ndarray]:
    """Project each non-holdout gradient off the holdout gradient when the two conflict.

    A gradient g with g . g_h < 0 becomes g - (g . g_h / |g_h|^2) g_h; others
    pass through unchanged.
    """
    if len(grads) < 2:
        raise ValueError("gradient surgery needs at least two languages")
    if holdout not in grads:
        raise KeyError(f"holdout language {holdout!r} has no gradient")
    g_h = np.asarray(grads[holdout], dtype=np.float64)
    norm_sq = float(g_h @ g_h)
    out = {}
    if norm_sq == 0.0:
        warnings.warn(f"holdout {holdout!r} has a zero gradient; skipping projection", RuntimeWarning, stacklevel=2)
    for lang in sorted(grads):
        if lang == holdout:
            continue
        g = np.asarray(grads[lang], dtype=np.float64)
        dot = float(g @ g_h)
        out[lang] = g - (dot / norm_sq) * g_h if norm_sq > 0.0 and dot < 0.0 else g.copy()
    return out


def gs_project(grads: Mapping[str, np.ndarray], holdout: str | None = None,
               rng: SplitMix64 | None = None) -> np.ndarray:
    """Mean of the non-holdout gradients after projecting out conflicts with the holdout.

    The holdout is drawn uniformly with ``rng`` when not given. Its own
    gradient does not enter the mean.
    """
    if len(grads) < 2:
        raise ValueError("gradient surgery needs at least two languages")
    if holdout is None:
        if rng is None:
            raise ValueError("pass a holdout language or an rng to draw one")
        langs = sorted(grads)
        holdout = langs[rng.below(len(langs))]
    projected = project_conflicts(grads, holdout)
    return np.mean(np.stack([projected[lang] for lang in sorted(projected)]), axis=0)


@dataclass
class TrainConfig:
    total_steps: int = 400
    snapshots: int = 10
    peak_lr: float = 0.03
    warmup_fraction: float = 0.1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    per_language_quota: int = 4
    seed: int = 42
    gradient_surgery: bool = False
    # path or in-memory Checkpoint holding the classifier to freeze
    freeze_classifier_from: str | Checkpoint | None = None
    scheduler: bool = True
    model: str = "mlp"
    hidden_dim: int = 32
    # seed of the shared body initialization (the stand-in for pretrained weights)
    init_seed: int = 0
    # path or Checkpoint to start every tensor from instead of init_seed/seed
    init_from: str | Checkpoint | None = None

    def __post_init__(self) -> None:
        if self.total_steps < 1 or self.snapshots < 1:
            raise ValueError("total_steps and snapshots must be positive")
        if self.snapshots > self.total_steps:
            raise ValueError("snapshots must not exceed total_steps")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.per_language_quota < 1:
            raise ValueError("per_language_quota must be >= 1")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be non-negative")
        if self.model not in FAMILIES:
            raise ValueError(f"model must be one of {FAMILIES}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for key in ("freeze_classifier_from", "init_from"):
            if isinstance(out[key], Checkpoint):
                out[key] = "<memory>"
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def warmup_steps(config: TrainConfig) -> int:
    warm = int(math.floor(config.warmup_fraction * config.total_steps + 0.5))
    # keep at least one decay step so the rate reaches 0 at T
    return min(warm, config.total_steps - 1)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup over the first W = round(warmup_fraction * T) steps, then linear decay to 0 at T."""
    total = config.total_steps
    if not 1 <= step <= total:
        raise ValueError(f"step {step} outside 1..{total}")
    if not config.scheduler:
        return config.peak_lr
    warm = warmup_steps(config)
    if step <= warm:
        return config.peak_lr * step / warm
    return config.peak_lr * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, config: TrainConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update, in place, for every tensor in ``grads``.

    Decoupled decay (-lr * wd * theta, from the pre-update theta) applies to
    weight tensors only, never to ``*.bias``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        theta = params[name]
        if g.shape != theta.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match {name!r} {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        if config.weight_decay and not name.endswith(".bias"):
            update += lr * config.weight_decay * theta
        theta -= update
    return params, state


def _resolve_checkpoint(source: str | Checkpoint) -> Checkpoint:
    return source if isinstance(source, Checkpoint) else load_checkpoint(source)


def initial_params(config: TrainConfig, feature_dim: int, n_classes: int) -> ModelParams:
    if config.init_from is not None:
        params = ModelParams.from_checkpoint(_resolve_checkpoint(config.init_from))
    else:
        params = init_params(config.model, feature_dim, n_classes, config.hidden_dim,
                             body_seed=config.init_seed, classifier_seed=config.seed)
    if config.freeze_classifier_from is not None:
        frozen = ModelParams.from_checkpoint(_resolve_checkpoint(config.freeze_classifier_from))
        for name, value in frozen.classifier.items():
            if name not in params.classifier or params.classifier[name].shape != value.shape:
                raise TrainingError(f"frozen classifier tensor {name!r} does not fit the model")
            params.classifier[name] = value.copy()
    return params


def _flatten(grads: Mapping[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in names])


def _unflatten(flat: np.ndarray, like: Mapping[str, np.ndarray], names: Sequence[str]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = flat[pos:pos + size].reshape(like[n].shape)
        pos += size
    return out


def train_run(config: TrainConfig, data: DatasetSplit, schedule: SnapshotSchedule | None = None,
              out_dir: str | os.PathLike | None = None, run_id: str | None = None) -> SnapshotSet:
    """Train for ``config.total_steps`` steps and snapshot at every scheduled step.

    Each step draws ``per_language_quota`` examples from every language in
    ``data``. One epoch is one pass over the smallest language; every epoch
    starts with a fresh Fisher-Yates shuffle of each language. Snapshots are
    written to ``out_dir`` (with a manifest) or kept in memory.
    """
    schedule = schedule or make_schedule(config.total_steps, config.snapshots)
    if schedule.total_steps != config.total_steps:
        raise ValueError("schedule and config disagree on total_steps")
    run_id = run_id or f"seed{config.seed}"
    per_lang = data.by_language()
    languages = sorted(per_lang)
    quota = config.per_language_quota
    smallest = min(len(y) for _, y in per_lang.values())
    if smallest < quota:
        raise TrainingError(f"smallest language has {smallest} examples, fewer than one batch quota of {quota}")
    steps_per_epoch = smallest // quota

    params = initial_params(config, data.feature_dim, data.n_classes)
    frozen = config.freeze_classifier_from is not None
    tensors = params.tensors()
    trainable = sorted(params.body) + ([] if frozen else sorted(params.classifier))
    state = OptimizerState()
    batch_rng = SplitMix64.derived(config.seed, "batches")
    gs_rng = SplitMix64.derived(config.seed, "gradient-surgery")
    use_gs = config.gradient_surgery and len(languages) >= 2

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    wanted = set(schedule.steps)
    snapshots: list[tuple[int, Checkpoint | CheckpointRef]] = []
    manifest_entries = []
    orders: dict[str, np.ndarray] = {}

    for step in range(1, config.total_steps + 1):
        pos = (step - 1) % steps_per_epoch
        if pos == 0:
            orders = {lang: batch_rng.permutation(len(per_lang[lang][1])) for lang in languages}
        losses, lang_grads = {}, {}
        for lang in languages:
            x, y = per_lang[lang]
            idx = orders[lang][pos * quota:(pos + 1) * quota]
            losses[lang], lang_grads[lang] = forward_loss_and_grad(params, x[idx], y[idx])

        if not trainable:
            grads = {}
        elif use_gs:
            flat = {lang: _flatten(lang_grads[lang], trainable) for lang in languages}
            grads = _unflatten(gs_project(flat, rng=gs_rng), tensors, trainable)
        else:
            grads = {n: np.mean(np.stack([lang_grads[lang][n] for lang in languages]), axis=0)
                     for n in trainable}
        if grads:
            adamw_step(tensors, grads, state, lr_at(step, config), config)

        if step in wanted:
            cp = params.to_checkpoint(step, {"run_id": run_id, "step": str(step)})
            if out_dir is None:
                snapshots.append((step, cp))
            else:
                path = out_dir / f"step-{step:06d}.safetensors"
                write_checkpoint(cp, path)
                snapshots.append((step, open_checkpoint(path)))
                manifest_entries.append({"step": step, "file": path.name})
            log.debug("run %s step %d loss %.4f", run_id, step, balanced_loss(losses))

    config_dict = config.to_dict()
    if out_dir is not None:
        manifest = {"run_id": run_id, "total_steps": config.total_steps,
                    "config": config_dict, "snapshots": manifest_entries}
        (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return SnapshotSet(run_id, config.total_steps, snapshots, config=config_dict)


def load_run(run_dir: str | os.PathLike) -> SnapshotSet:
    """Re-open a run directory written by :func:`train_run`."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST if run_dir.is_dir() else run_dir
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    snapshots = [(int(e["step"]), open_checkpoint(base / e["file"])) for e in manifest["snapshots"]]
    return SnapshotSet(manifest["run_id"], int(manifest["total_steps"]), snapshots,
                       config=manifest.get("config", {}))


def final_checkpoint(run: SnapshotSet) -> Checkpoint:
    last = run.last
    return last if isinstance(last, Checkpoint) else last.load()


def aligned_ensemble_curriculum(base_config: TrainConfig, runs: int, data: DatasetSplit,
                                out_dir: str | os.PathLike | None = None,
                                anchor: SnapshotSet | None = None) -> RunSet:
    """Train an anchor run, then ``runs`` more runs whose classifier is frozen to the anchor's final one.

    The anchor uses ``base_config.seed`` (pass ``anchor`` to reuse a run
    trained with that config); frozen run i uses seed + i. The anchor is kept
    on ``RunSet.anchor``.
    """
    if runs < 1:
        raise ValueError("need at least one frozen run")
    sub = (lambda name: Path(out_dir) / name) if out_dir is not None else (lambda name: None)
    if anchor is None:
        anchor_cfg = base_config.replace(freeze_classifier_from=None)
        anchor = train_run(anchor_cfg, data, out_dir=sub("anchor"), run_id=f"anchor-seed{anchor_cfg.seed}")
    head = final_checkpoint(anchor)
    frozen = []
    for i in range(1, runs + 1):
        cfg = base_config.replace(seed=base_config.seed + i, freeze_classifier_from=head)
        frozen.append(train_run(cfg, data, out_dir=sub(f"frozen-{i}"), run_id=f"frozen-seed{cfg.seed}"))
    return RunSet(frozen, anchor=anchor)


def independent_runs(base_config: TrainConfig, runs: int, data: DatasetSplit,
                     out_dir: str | os.PathLike | None = None) -> RunSet:
    """Plain runs with seeds seed+1 .. seed+runs and their own random classifiers."""
    sub = (lambda name: Path(out_dir) / name) if out_dir is not None else (lambda name: None)
    out = []
    for i in range(1, runs + 1):
        cfg = base_config.replace(seed=base_config.seed + i, freeze_classifier_from=None)
        out.append(train_run(cfg, data, out_dir=sub(f"run-{i}"), run_id=f"seed{cfg.seed}"))
    return RunSet(out)


def classifier_cosine(a, b) -> float:
    """Cosine of the flattened classifier weights (biases excluded).

    Accepts ModelParams, Checkpoints or CheckpointRefs.
    """
    def flat(obj):
        params = obj if isinstance(obj, ModelParams) else ModelParams.from_checkpoint(obj)
        names = sorted(n for n in params.classifier if not n.endswith(".bias"))
        return names, np.concatenate([params.classifier[n].ravel() for n in names])

    names_a, va = flat(a)
    names_b, vb = flat(b)
    if names_a != names_b or va.shape != vb.shape:
        raise ValueError("classifier shapes differ")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero classifier")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def accuracy_by_language(model, split: DatasetSplit) -> dict[str, float]:
    """Per-language accuracy of a ModelParams or checkpoint on a split."""
    params = model if isinstance(model, ModelParams) else ModelParams.from_checkpoint(model)
    out = {}
    for lang, (x, y) in split.by_language().items():
        out[lang] = float(np.mean(predict(params, x) == y))
    return out
