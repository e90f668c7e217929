"""L1-supervised end-to-end training with Adam, deterministic and resumable.

One optimizer owns the model parameters. Batch composition, crop offsets,
and shuffles all derive from a single seeded generator, so a strict-mode
rerun (or a resume from an epoch-end checkpoint, which stores the generator
state and moment buffers) reproduces the loss trace exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import SceneTriplet, crop_sample
from .engine import ContractError, Node, ParamStore, absolute, backward, leaf, mean_all, sub
from .metrics import MetricReport, binned_report, score_scene
from .model import GlfcrModel, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 5        # epochs between decays
    epochs: int = 30
    batch: int = 12
    crop: int = 128
    seed: int = 0
    strict: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr0 < 0:
            raise ContractError("lr0 must be >= 0")
        if self.batch < 1:
            raise ContractError("batch must be >= 1")
        if self.decay_every < 1:
            raise ContractError("decay_every must be >= 1")


class TrainingAbort(RuntimeError):
    """Raised when the loss leaves the finite range; carries the step index."""

    def __init__(self, step: int, epoch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step} (epoch {epoch})")
        self.step = step
        self.epoch = epoch


def l1_loss(pred: Node, target: Node) -> Node:
    """Mean absolute error; subgradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise ContractError(f"l1 operands disagree: {list(pred.shape)} vs "
                            f"{list(target.shape)}")
    return mean_all(absolute(sub(pred, target)))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise schedule: lr0 * lr_decay^(epoch // decay_every)."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every)


class Adam:
    """Bias-corrected Adam over a parameter store, deterministic order."""

    def __init__(self, params: ParamStore, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(node.value) for name, node in params.items()}
        self.v = {name: np.zeros_like(node.value) for name, node in params.items()}

    def step(self, lr: float) -> None:
        """Update every parameter from its gradient, then zero the gradients."""
        for name, node in self.params.items():
            if node.grad is None:
                raise ContractError(f"parameter {name} has no gradient; "
                                    f"run backward before adam_step")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, node in self.params.items():
            g = node.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            node.value = node.value - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            node.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params.names():
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for name in self.params.names():
            self.m[name] = np.asarray(arrays[f"adam.m.{name}"])
            self.v[name] = np.asarray(arrays[f"adam.v.{name}"])


def adam_step(params: ParamStore, state: Adam, lr: float) -> None:
    if state.params is not params:
        raise ContractError("optimizer state belongs to a different parameter store")
    state.step(lr)


# ---------------------------------------------------------------------------
# fit loop


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


def trace_to_tsv(trace: list[TraceRow]) -> str:
    lines = ["step\tepoch\tlr\tloss"]
    lines += [f"{r.step}\t{r.epoch}\t{r.lr!r}\t{r.loss!r}" for r in trace]
    return "\n".join(lines) + "\n"


def _batches(order: np.ndarray, batch: int):
    for i in range(0, len(order), batch):
        yield order[i:i + batch]


def fit(model: GlfcrModel, dataset, cfg: TrainConfig,
        out_dir: str | Path | None = None,
        resume: str | Path | None = None) -> list[TraceRow]:
    """Train the model, checkpointing at each epoch end.

    ``dataset`` is any indexable of :class:`SceneTriplet`. Returns the loss
    trace; with ``out_dir`` set, also writes ``trace.tsv`` and
    ``ckpt_epoch_<n>.gckp`` (plus ``ckpt_last.gckp``). ``resume`` continues,
    bit-exactly in strict mode, from an epoch-end checkpoint.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("dataset is empty")
    if cfg.crop % model.config.window:
        raise ContractError(f"crop {cfg.crop} not divisible by "
                            f"window {model.config.window}")
    opt = Adam(model.store)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    step = 0
    trace: list[TraceRow] = []

    if resume is not None:
        loaded, extras, meta = load_checkpoint(resume)
        if loaded.config.to_dict() != model.config.to_dict():
            raise ContractError("resume checkpoint was built from a different config")
        model.store.load_state_dict({k: v.value for k, v in loaded.store.items()})
        opt.load_state_arrays(extras, meta["adam_t"])
        rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = int(meta["epoch"]) + 1
        step = int(meta["step"])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    needs_sar = model.config.two_stream or model.config.variant == "concat"
    dtype = model.store.dtype

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        for chunk in _batches(order, cfg.batch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            crops = [crop_sample(dataset[int(i)], cfg.crop, rng) for i in chunk]
            x = leaf(np.stack([c.s2_cloudy for c in crops]).astype(dtype))
            t = leaf(np.stack([c.s2_cloudfree for c in crops]).astype(dtype))
            s = leaf(np.stack([c.s1 for c in crops]).astype(dtype)) if needs_sar else None
            loss = l1_loss(model.forward(x, s), t)
            val = float(loss.value)
            if not np.isfinite(val):
                raise TrainingAbort(step, epoch, val)
            model.store.zero_grads()
            backward(loss)
            # the final block's SAR-side update feeds nothing downstream, so
            # its gate legitimately sees no gradient; Adam requires buffers
            model.store.ensure_grads()
            opt.step(lr)  # lr = 0 leaves parameters bitwise unchanged
            trace.append(TraceRow(step, epoch, lr, val))
            step += 1
        if out_dir is not None:
            meta = {
                "epoch": epoch,
                "step": step,
                "adam_t": opt.t,
                "rng_state": json.dumps(rng.bit_generator.state),
                "train_config": asdict(cfg),
            }
            ck = out_dir / f"ckpt_epoch_{epoch:04d}.gckp"
            save_checkpoint(ck, model, extra_arrays=opt.state_arrays(), meta=meta)
            save_checkpoint(out_dir / "ckpt_last.gckp", model,
                            extra_arrays=opt.state_arrays(), meta=meta)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    if out_dir is not None:
        (out_dir / "trace.tsv").write_text(trace_to_tsv(trace))
    return trace


# ---------------------------------------------------------------------------
# evaluation


def predict_scene(model: GlfcrModel, scene: SceneTriplet) -> np.ndarray:
    needs_sar = model.config.two_stream or model.config.variant == "concat"
    sar = scene.s1 if needs_sar else None
    return model.predict(scene.s2_cloudy, sar)


def evaluate(model: GlfcrModel, dataset,
             bands: list[int] | None = None) -> MetricReport:
    """Binned metric report of the model over a dataset."""
    scores = []
    for i in range(len(dataset)):
        scene = dataset[i]
        pred = predict_scene(model, scene)
        scores.append(score_scene(pred, scene.s2_cloudfree, scene.mask, bands=bands))
    return binned_report(scores)


def mean_l1(model: GlfcrModel, dataset) -> float:
    """Mean whole-image L1 of clamped predictions against the clean truth,
    accumulated in float64."""
    vals = []
    for i in range(len(dataset)):
        scene = dataset[i]
        pred = predict_scene(model, scene).astype(np.float64)
        vals.append(np.mean(np.abs(pred - scene.s2_cloudfree.astype(np.float64))))
    return float(np.mean(vals))
