"""Adam with a triangular cyclic learning rate, the training loop, checkpoints.

Checkpoint layout::

    FFCKPT\\n
    <manifest JSON, one line>\\n
    <payload: little-endian float32 tensors back to back>

The manifest carries the format version, the model config, a tensor index
(name, group, shape, byte offset, byte length), the optimizer step counter
and hyperparameters, and the sha256 digest of the payload.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .architectures import ModelConfig, ParamStore, init_params, model_forward, param_specs
from .data import VolumeSample
from .errors import ConfigError, FormatError, NumericError
from .metrics import MetricsReport, aggregate_reports, dice_ce_loss, evaluate_volume
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LR_MIN = 0.0005
LR_MAX = 0.003
CKPT_MAGIC = b"FFCKPT\n"
CKPT_VERSION = 1


def cyclic_lr(iteration: int, lr_min: float = LR_MIN, lr_max: float = LR_MAX,
              half_cycle: int = 100) -> float:
    """Triangular policy: lr_min -> lr_max over ``half_cycle`` steps and back."""
    if half_cycle < 1:
        raise ConfigError("half_cycle must be >= 1")
    pos = iteration % (2 * half_cycle)
    frac = pos / half_cycle if pos <= half_cycle else (2 * half_cycle - pos) / half_cycle
    # Convex combination hits both bounds exactly at frac = 0 and 1.
    return (1.0 - frac) * lr_min + frac * lr_max


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimState":
        st = cls(**hyper)
        for name, t in params.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def adam_step(params: ParamStore, grads: Optional[Dict[str, np.ndarray]], state: OptimState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place.  Missing gradients count as zero."""
    grads = grads if grads is not None else {n: t.grad for n, t in params.items()}
    for name, t in params.items():
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        elif state.m[name].shape != t.shape:
            raise ConfigError(f"optimizer state for {name!r} has the wrong shape")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        dt = t.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        t.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))


@dataclass
class TrainLog:
    """Per-iteration (iteration, lr, loss) records plus per-epoch validation reports."""

    records: List[Tuple[int, float, float]] = field(default_factory=list)
    validation: List[Tuple[int, MetricsReport]] = field(default_factory=list)
    iters_per_epoch: int = 0

    def losses(self) -> List[float]:
        return [r[2] for r in self.records]

    def lrs(self) -> List[float]:
        return [r[1] for r in self.records]

    def to_lines(self) -> List[str]:
        """Line-oriented text: ``iter`` rows per step, ``val`` rows per epoch."""
        lines = ["# kind\titeration|epoch\tlr|mean_dsc\tloss|mean_hd\tmean_asd"]
        by_epoch: Dict[int, MetricsReport] = dict(self.validation)
        per_epoch = self.iters_per_epoch
        emitted = set()
        for it, lr, loss in self.records:
            lines.append(f"iter\t{it}\t{lr!r}\t{loss!r}")
            if per_epoch and (it + 1) % per_epoch == 0:
                ep = (it + 1) // per_epoch
                if ep in by_epoch:
                    lines.append(_val_line(ep, by_epoch[ep]))
                    emitted.add(ep)
        for ep, rep in self.validation:
            if ep not in emitted:
                lines.append(_val_line(ep, rep))
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainLog":
        log_ = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "iter":
                log_.records.append((int(parts[1]), float(parts[2]), float(parts[3])))
            elif parts[0] == "val":
                vals = [None if p == "NA" else float(p) for p in parts[2:5]]
                log_.validation.append((int(parts[1]), MetricsReport(
                    mean_dsc=vals[0], mean_hd=vals[1], mean_asd=vals[2])))
        return log_


def _val_line(epoch: int, rep: MetricsReport) -> str:
    vals = ["NA" if v is None else repr(float(v)) for v in (rep.mean_dsc, rep.mean_hd, rep.mean_asd)]
    return "val\t" + str(epoch) + "\t" + "\t".join(vals)


class TrainingDiverged(NumericError):
    def __init__(self, iteration: int, log_: "TrainLog"):
        super().__init__(f"training diverged: non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.log = log_


def _volume_tensor(sample: VolumeSample, dtype=np.float32) -> Tensor:
    return Tensor(sample.image[None].astype(dtype, copy=False))


def predict_labels(config: ModelConfig, params: ParamStore, sample: VolumeSample) -> np.ndarray:
    logits = model_forward(config, params, _volume_tensor(sample, params.tensors()[0].dtype))
    return logits.data[0].argmax(axis=0).astype(np.uint8)


def evaluate_dataset(config: ModelConfig, params: ParamStore,
                     samples: Sequence[VolumeSample]) -> MetricsReport:
    reps = [evaluate_volume(predict_labels(config, params, s), s.labels, s.spacing,
                            config.num_classes, volume_id=s.id) for s in samples]
    return aggregate_reports(reps)


def _clip(params: ParamStore, max_norm: float) -> None:
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum())
                          for t in params.tensors() if t.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in params.tensors():
            if t.grad is not None:
                t.grad *= t.grad.dtype.type(scale)


def train(config: ModelConfig, dataset: Sequence[VolumeSample], epochs: int, seed: int = 0,
          half_cycle: int = 100, lr_min: float = LR_MIN, lr_max: float = LR_MAX,
          validation: Optional[Sequence[VolumeSample]] = None, validate_every: int = 1,
          max_iterations: Optional[int] = None, checkpoint_dir=None,
          clip_norm: Optional[float] = None, params: Optional[ParamStore] = None,
          callback: Optional[Callable[[int, float, float], None]] = None):
    """Fit ``config`` on ``dataset`` (batch size 1) and return (params, state, log).

    Sample order is a fresh seeded permutation each epoch, so the whole run
    is a deterministic function of (config, dataset, seed).  Validation uses
    ``validation`` or, when absent, the training set itself.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    for s in dataset:
        if s.image is None:
            raise ConfigError(f"sample {s.id!r} has no image")
        if int(s.labels.max()) >= config.num_classes:
            raise ConfigError(f"sample {s.id!r} has labels beyond num_classes={config.num_classes}")
    params = params or init_params(config, seed)
    params.check_against(config)
    state = OptimState.for_params(params)
    rng = np.random.default_rng(seed)
    log_ = TrainLog(iters_per_epoch=len(dataset))
    val_set = list(validation) if validation else list(dataset)
    it = 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, epochs + 1):
        for idx in rng.permutation(len(dataset)):
            if max_iterations is not None and it >= max_iterations:
                break
            sample = dataset[idx]
            lr = cyclic_lr(it, lr_min, lr_max, half_cycle)
            params.zero_grad()
            with Tape() as tape:
                logits = model_forward(config, params, _volume_tensor(sample))
                loss = dice_ce_loss(logits, sample.labels[None])
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(it, log_)
            tape.backward(loss)
            if clip_norm:
                _clip(params, clip_norm)
            adam_step(params, None, state, lr)
            log_.records.append((it, lr, loss_val))
            if callback:
                callback(it, lr, loss_val)
            log.debug("iter %d lr %.6f loss %.6f", it, lr, loss_val)
            it += 1
        if validate_every and (epoch % validate_every == 0 or epoch == epochs):
            rep = evaluate_dataset(config, params, val_set)
            log_.validation.append((epoch, rep))
            log.info("epoch %d mean dsc %s", epoch, rep.mean_dsc)
        if ckpt_dir:
            save_checkpoint(params, state, config, ckpt_dir / "latest.ckpt")
        if max_iterations is not None and it >= max_iterations:
            break
    return params, state, log_


# ------------------------------------------------------------ checkpoints

def save_checkpoint(params: ParamStore, state: Optional[OptimState], config: ModelConfig,
                    path) -> None:
    entries = []
    chunks = []
    offset = 0
    groups = [("param", {n: t.data for n, t in params.items()})]
    if state is not None:
        groups += [("adam_m", state.m), ("adam_v", state.v)]
    for group, arrays in groups:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "group": group, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": CKPT_VERSION,
        "config": config.to_dict(),
        "tensors": entries,
        "optimizer": None if state is None else {
            "t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "digest": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + head + b"\n" + payload)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Return (params, optimizer state or None, config) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError("bad magic: not a focalfuse checkpoint")
    nl = raw.find(b"\n", len(CKPT_MAGIC))
    if nl < 0:
        raise FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[len(CKPT_MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}")
    if manifest.get("format_version") != CKPT_VERSION:
        raise FormatError(
            f"checkpoint format version {manifest.get('format_version')} != {CKPT_VERSION}")
    payload = raw[nl + 1:]
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if len(payload) != expected:
        raise FormatError(f"truncated checkpoint: expected {expected} payload bytes, got {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != manifest["digest"]:
        raise FormatError("digest mismatch: checkpoint payload is corrupted")
    config = ModelConfig.from_dict(manifest["config"])
    if expected_config is not None:
        if (expected_config.variant != config.variant
                or list(param_specs(expected_config)) != list(param_specs(config))
                or expected_config.to_dict() != config.to_dict()):
            raise ConfigError(
                f"checkpoint holds a {config.variant} model that does not match the requested "
                f"{expected_config.variant} config")
    params = ParamStore()
    opt = manifest.get("optimizer")
    state = None if opt is None else OptimState(beta1=opt["beta1"], beta2=opt["beta2"],
                                                eps=opt["eps"], t=opt["t"])
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4,
                            offset=e["offset"]).astype(np.float32).reshape(e["shape"])
        if e["group"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        elif state is not None and e["group"] == "adam_m":
            state.m[e["name"]] = arr
        elif state is not None and e["group"] == "adam_v":
            state.v[e["name"]] = arr
    params.check_against(config)
    return params, state, config
