"""SGD training with the three-stage curriculum.

Stage 1 trains depth and segmentation with the attention module fed the
ideal (label-derived) map; stage 2 switches to the learned map and adds the
attention loss; stage 3 adds the consistency loss under polynomial decay.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .autograd.tensor import DomainError, NonFiniteError
from .blocks import EncoderConfig
from .context import attention_loss, ideal_attention_map
from .data import augment_hflip, stack
from .losses import LossWeights
from .metrics import DepthAccumulator, SegAccumulator, build_report
from .model import CINetParams, ModelConfig, forward, save_checkpoint

log = logging.getLogger(__name__)

STAGE_TERMS = (("depth", "seg"), ("depth", "seg", "att"), ("depth", "seg", "att", "con"))
SCHEDULES = ("constant", "poly")
CLIP_MODES = ("global", "tensor")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    lr: float
    terms: tuple
    schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.epochs < 0:
            raise ConfigError("stage epochs must be non-negative")
        if self.lr < 0:
            raise ConfigError("stage lr must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        unknown = set(self.terms) - set(losses.TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")


def desk_stages():
    return (
        StageConfig(30, 6e-3, STAGE_TERMS[0]),
        StageConfig(20, 2e-3, STAGE_TERMS[1]),
        StageConfig(20, 2e-3, STAGE_TERMS[2], "poly"),
    )


def full_scale_stages():
    """Epochs and learning rates used for the full-size NYU-Depth-v2 schedule."""
    return (
        StageConfig(300, 6e-4, STAGE_TERMS[0]),
        StageConfig(200, 2e-4, STAGE_TERMS[1]),
        StageConfig(200, 2e-4, STAGE_TERMS[2], "poly"),
    )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 7
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    stages: tuple = field(default_factory=desk_stages)
    block: str = "fsm"
    use_sum: bool = True
    use_consistency: bool = True
    attention_loss: bool = True
    hflip: bool = False
    grad_clip: float | None = 0.5
    clip_mode: str = "tensor"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if len(stages) != 3:
            raise ConfigError("training has exactly three stages")
        for i, (stage, expected) in enumerate(zip(stages, STAGE_TERMS)):
            if set(stage.terms) != set(expected):
                raise ConfigError(f"stage {i + 1} terms must be {list(expected)}, got {list(stage.terms)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.clip_mode not in CLIP_MODES:
            raise ConfigError(f"clip_mode must be one of {CLIP_MODES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.weight_decay < 0 or self.poly_power < 0:
            raise ConfigError("weight_decay and poly_power must be non-negative")
        if self.model.block != self.block or self.model.use_sum != self.use_sum:
            object.__setattr__(self, "model", ModelConfig(**{**self.model.to_dict(), "block": self.block, "use_sum": self.use_sum}))

    def replace(self, **changes):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["stages"] = [{**asdict(s), "terms": list(s.terms)} for s in self.stages]
        d["loss_weights"] = self.loss_weights.to_dict()
        model = self.model.to_dict()
        d["model"] = {k: model[k] for k in MODEL_KEYS}
        return d

    @classmethod
    def from_dict(cls, d):
        """Strict parse: every field must be present and no unknown keys allowed."""
        _require(d, TOP_KEYS, "")
        unknown = set(d) - set(TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        stages = d["stages"]
        if not isinstance(stages, list):
            raise ConfigError("config field 'stages' must be a list")
        for i, s in enumerate(stages):
            _require(s, ("epochs", "lr", "terms", "schedule"), f"stages[{i}].")
        _require(d["loss_weights"], tuple(LossWeights.__dataclass_fields__), "loss_weights.")
        _require(d["model"], MODEL_KEYS, "model.")
        model = dict(d["model"])
        model["encoder"] = EncoderConfig.from_dict(model["encoder"])
        try:
            return cls(
                seed=int(d["seed"]),
                batch_size=int(d["batch_size"]),
                momentum=float(d["momentum"]),
                weight_decay=float(d["weight_decay"]),
                poly_power=float(d["poly_power"]),
                stages=tuple(StageConfig(int(s["epochs"]), float(s["lr"]), tuple(s["terms"]), s["schedule"]) for s in stages),
                block=d["block"],
                use_sum=bool(d["use_sum"]),
                use_consistency=bool(d["use_consistency"]),
                attention_loss=bool(d["attention_loss"]),
                hflip=bool(d["hflip"]),
                grad_clip=None if d["grad_clip"] is None else float(d["grad_clip"]),
                clip_mode=d["clip_mode"],
                loss_weights=LossWeights(**d["loss_weights"]),
                model=ModelConfig(block=d["block"], use_sum=bool(d["use_sum"]), **model),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


TOP_KEYS = (
    "seed", "batch_size", "momentum", "weight_decay", "poly_power", "stages", "block",
    "use_sum", "use_consistency", "attention_loss", "hflip", "grad_clip", "clip_mode", "loss_weights", "model",
)
MODEL_KEYS = ("n_classes", "image_size", "encoder", "decoder_channels")


def _require(d, keys, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"config field '{prefix.rstrip('.') or 'root'}' must be an object")
    for key in keys:
        if key not in d:
            raise ConfigError(f"missing config field '{prefix}{key}'")


def load_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = TrainConfig.from_dict(d)
    env_seed = os.environ.get("CINET_SEED")
    if env_seed is not None:
        cfg = cfg.replace(seed=int(env_seed))
    return cfg


# -- optimisation -------------------------------------------------------------------

class OptimizerState:
    """Per-parameter momentum buffers and a step counter."""

    def __init__(self):
        self.velocity = {}
        self.step = 0

    def reset(self):
        self.velocity.clear()
        self.step = 0


def sgd_step(params, state, lr, momentum=0.9, weight_decay=5e-4):
    """``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.

    ``params`` maps names to tensors whose ``grad`` backward has filled.
    """
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name} has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise TrainingError(f"velocity shape mismatch for {name}")
        v = momentum * v + p.grad + weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - lr * v
    state.step += 1


def clip_gradients(params, max_norm, mode="global"):
    """Rescale gradients to L2 norm at most ``max_norm``; returns the joint norm before clipping.

    ``mode="global"`` scales all gradients by one factor, ``"tensor"`` clips
    each parameter's gradient on its own.
    """
    norms = {name: float(np.sqrt(np.sum(p.grad ** 2))) for name, p in params.items() if p.grad is not None}
    total = float(np.sqrt(sum(n * n for n in norms.values())))
    if max_norm is None:
        return total
    for name, n in norms.items():
        ref = total if mode == "global" else n
        if ref > max_norm:
            params[name].grad = params[name].grad * (max_norm / ref)
    return total


def poly_lr(lr0, step, total_steps, power=0.9):
    if total_steps <= 0:
        return lr0
    return lr0 * max(0.0, 1.0 - step / total_steps) ** power


# -- stages -------------------------------------------------------------------------

def stage_flags(cfg, stage_index):
    terms = set(cfg.stages[stage_index].terms)
    return {
        "depth": "depth" in terms,
        "seg": "seg" in terms,
        "att": "att" in terms and cfg.use_sum and cfg.attention_loss,
        "con": "con" in terms and cfg.use_consistency,
    }


def bypass_attention(cfg, stage_index):
    """Stage 1 feeds the ideal attention map in place of the learned one."""
    return cfg.use_sum and stage_index == 0


def active_parameters(params, cfg, stage_index):
    """Parameters that receive gradients in the given stage."""
    named = params.named_parameters()
    flags = stage_flags(cfg, stage_index)
    out = {}
    for name, p in named.items():
        if name.startswith("consistency.") and not flags["con"]:
            continue
        if bypass_attention(cfg, stage_index) and name.startswith(("sum.wq.", "sum.wk.")):
            continue
        out[name] = p
    return out


def compute_losses(params, batch, cfg, stage_index, class_w, seed):
    """Forward one batch; return ``(total, components)`` with disabled terms at 0."""
    rgb, depth, labels, mask = batch
    flags = stage_flags(cfg, stage_index)
    n_classes = cfg.model.n_classes
    ideal = ideal_attention_map(labels, n_classes, cfg.model.attention_size) if cfg.use_sum else None
    out = forward(params, rgb, attention_override=ideal if bypass_attention(cfg, stage_index) else None)
    w = cfg.loss_weights
    parts = losses.depth_loss_terms(out.depth, depth, mask, w, seed=seed)
    comps = {
        "depth": losses.combine_depth(parts["berhu"], parts["pair"], parts["norm"], w),
        "seg": losses.seg_loss(out.logits, labels, np.ones(labels.shape, dtype=bool), class_w),
    }
    if flags["att"]:
        comps["att"] = attention_loss(out.attention, ideal)
    if flags["con"]:
        comps["con"] = losses.consistency_loss(out.fd, out.fs, labels, params.consistency)
    total = losses.total_loss(comps, w, flags)
    record = {
        "L_att": comps["att"].item() if "att" in comps else 0.0,
        "L_berhu": parts["berhu"].item(),
        "L_pair": parts["pair"].item(),
        "L_norm": parts["norm"].item(),
        "L_con": comps["con"].item() if "con" in comps else 0.0,
        "L_seg": comps["seg"].item(),
        "total": total.item(),
    }
    return total, record


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_stage(params, samples, stage_index, cfg, class_w, state=None, log_file=None, step_offset=0, on_epoch=None):
    """Train one stage in place; returns the list of per-step log records.

    ``on_epoch(epoch, records)`` is called after every epoch.
    """
    if not samples:
        raise TrainingError("dataset is empty")
    stage = cfg.stages[stage_index]
    state = state or OptimizerState()
    state.reset()
    trainable = active_parameters(params, cfg, stage_index)
    n_batches = -(-len(samples) // cfg.batch_size)
    total_steps = stage.epochs * n_batches
    records = []
    step = 0
    for epoch in range(stage.epochs):
        rng = np.random.default_rng([cfg.seed, stage_index, epoch])
        for b, idx in enumerate(_batches(len(samples), cfg.batch_size, rng)):
            flips = rng.random(len(idx)) < 0.5 if cfg.hflip else np.zeros(len(idx), dtype=bool)
            batch = stack([augment_hflip(samples[i], f) for i, f in zip(idx, flips)])
            lr = poly_lr(stage.lr, step, total_steps, cfg.poly_power) if stage.schedule == "poly" else stage.lr
            seed = [cfg.seed, stage_index, step]
            for p in params.named_parameters().values():
                p.grad = None
            try:
                total, record = compute_losses(params, batch, cfg, stage_index, class_w, seed)
                total.backward()
                grad_norm = clip_gradients(trainable, cfg.grad_clip, cfg.clip_mode)
                sgd_step(trainable, state, lr, cfg.momentum, cfg.weight_decay)
            except (NonFiniteError, DomainError) as exc:
                diag = {"stage": stage_index + 1, "epoch": epoch, "batch": b, "samples": [int(i) for i in idx], "error": str(exc)}
                if log_file is not None:
                    Path(log_file).with_name("diverged.json").write_text(json.dumps(diag))
                raise TrainingError(f"non-finite loss at stage {stage_index + 1} epoch {epoch} batch {b} (samples {diag['samples']}): {exc}") from exc
            record = {"step": step_offset + step, "stage": stage_index + 1, "epoch": epoch, **record, "lr": lr, "grad_norm": grad_norm}
            records.append(record)
            if log_file is not None:
                with open(log_file, "a") as fh:
                    fh.write(json.dumps(record) + "\n")
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, records)
    for p in params.named_parameters().values():
        p.grad = None
    return records


def evaluate(params, samples, batch_size=8):
    """Metrics pooled over all valid pixels of ``samples``."""
    depth_acc = DepthAccumulator()
    seg_acc = SegAccumulator(params.config.n_classes)
    for start in range(0, len(samples), batch_size):
        rgb, depth, labels, mask = stack(samples[start:start + batch_size])
        out = forward(params, rgb)
        depth_acc.update(out.depth.data, depth, mask)
        seg_acc.update(out.logits.data.argmax(axis=-3), labels)
    return build_report(depth_acc, seg_acc)


def attention_agreement(params, samples, batch_size=8):
    """Fraction of entries where the learned map thresholded at 0.5 matches the ideal map."""
    if params.sum is None:
        raise ValueError("model has no attention module")
    hits = total = 0
    for start in range(0, len(samples), batch_size):
        rgb, _, labels, _ = stack(samples[start:start + batch_size])
        out = forward(params, rgb)
        ideal = ideal_attention_map(labels, params.config.n_classes, params.config.attention_size)
        hits += int(((out.attention.data >= 0.5) == (ideal > 0.5)).sum())
        total += ideal.size
    return hits / total


def three_stage_train(cfg, samples, out_dir=None, eval_samples=None, progress=None):
    """Run all three stages; returns ``(params, report)``.

    With ``out_dir`` set, writes ``train_log.jsonl``, a checkpoint per stage
    (``stage1``..``stage3``) and ``metrics.json``.
    """
    if not samples:
        raise TrainingError("dataset is empty")
    eval_samples = samples if eval_samples is None else eval_samples
    params = CINetParams.init(cfg.model, seed=cfg.seed)
    class_w = losses.class_weights([s.labels for s in samples], cfg.model.n_classes)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = out_dir / "train_log.jsonl"
    state = OptimizerState()
    report = {"schema": 1, "config": cfg.to_dict(), "n_parameters": params.n_parameters(), "stages": []}
    step_offset = 0
    for k in range(3):
        records = run_stage(params, samples, k, cfg, class_w, state, log_file, step_offset)
        step_offset += len(records)
        metrics = evaluate(params, eval_samples).to_dict()
        entry = {"stage": k + 1, "steps": len(records), "metrics": metrics,
                 "final_total": records[-1]["total"] if records else None}
        if params.sum is not None:
            entry["attention_agreement"] = attention_agreement(params, eval_samples)
        report["stages"].append(entry)
        if progress is not None:
            progress(entry)
        if out_dir is not None:
            save_checkpoint(params, out_dir / f"stage{k + 1}", extra={"train_config": cfg.to_dict(), "class_weights": class_w.tolist()})
    report["metrics"] = report["stages"][-1]["metrics"]
    if out_dir is not None:
        (out_dir / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return params, report
