"""Optimization: Adam with weight decay, plateau scheduling, checkpoints.

The training loop minimizes the weighted joint objective over shuffled
batches, evaluates the dev split with greedy decoding every eval_every
iterations, reduces the learning rate by a fixed factor after `patience`
evaluations without improvement, and stops once a reduction would cross the
floor (the rate is never set below it). The tracked metric is WER whenever
recognition carries weight, otherwise BLEU-4.

Checkpoints ("SLTC") store every named float array (parameters, batch-norm
running statistics, Adam moments) as little-endian float64 plus a JSON
footer for the scalars, so a round trip is bit-identical.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .config import RunConfig
from .data import Vocabulary, load_corpus, make_batch
from .errors import CheckpointError, ContractError, DimensionError
from .evaluation import evaluate_corpus
from .losses import LossWeights
from .model import JointModel, batch_losses

log = logging.getLogger("signscribe.training")

CHECKPOINT_MAGIC = b"SLTC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam accumulators for one named parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: dict[str, Tensor], lr: float = 1e-3, *,
                   beta1: float = 0.9, beta2: float = 0.998, eps: float = 1e-8,
                   weight_decay: float = 1e-3) -> OptimizerState:
    state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                           weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One in-place Adam update with classic additive weight decay.

    Parameters whose gradient is absent this step (e.g. a head skipped for
    an all-infeasible batch) still decay, matching the additive g + wd*theta
    formulation. Bias correction uses the shared step counter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        m = state.m.get(name)
        if m is None:
            raise ContractError(f"optimizer state missing parameter {name}")
        if m.shape != p.data.shape:
            raise DimensionError(
                f"{name}: moment shape {m.shape} != parameter shape {p.data.shape}"
            )
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[name] = state.beta1 * m + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Plateau scheduler
# ---------------------------------------------------------------------------


@dataclass
class SchedulerState:
    """Plateau tracker; `minimize` selects the improvement direction."""

    patience: int = 8
    factor: float = 0.7
    floor: float = 1e-6
    minimize: bool = True
    best: float | None = None
    evals_since_improvement: int = 0


@dataclass(frozen=True)
class SchedulerDecision:
    action: str  # "none" | "reduce_lr" | "stop"
    lr: float
    improved: bool


def scheduler_update(state: SchedulerState, current_lr: float,
                     dev_score: float) -> SchedulerDecision:
    """Advance the plateau tracker by one evaluation.

    Improvement must be strict. Exhausting patience proposes lr * factor;
    if that would cross the floor the decision is to stop, leaving the rate
    untouched (it is never set below the floor).
    """
    if state.best is None:
        improved = True
    elif state.minimize:
        improved = dev_score < state.best
    else:
        improved = dev_score > state.best
    if improved:
        state.best = dev_score
        state.evals_since_improvement = 0
        return SchedulerDecision("none", current_lr, True)
    state.evals_since_improvement += 1
    if state.evals_since_improvement < state.patience:
        return SchedulerDecision("none", current_lr, False)
    state.evals_since_improvement = 0
    reduced = current_lr * state.factor
    if reduced < state.floor:
        return SchedulerDecision("stop", current_lr, False)
    return SchedulerDecision("reduce_lr", reduced, False)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    tensors: dict[str, np.ndarray]
    footer: dict


def _collect_tensors(model: JointModel, optimizer: OptimizerState | None) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        tensors[name] = p.data
    for name, buf in model.named_buffers().items():
        tensors[name] = buf
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in optimizer.v.items():
            tensors[f"adam.v.{name}"] = arr
    return tensors


def checkpoint_save(
    path,
    model: JointModel,
    gloss_vocab: Vocabulary,
    text_vocab: Vocabulary,
    protocol: str,
    optimizer: OptimizerState | None = None,
    scheduler: SchedulerState | None = None,
    extra: dict | None = None,
) -> Path:
    """Serialize model + training state; identical state gives identical bytes."""
    path = Path(path)
    tensors = _collect_tensors(model, optimizer)
    footer = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.hyperparams,
        "protocol": protocol,
        "gloss_tokens": list(gloss_vocab.tokens),
        "text_tokens": list(text_vocab.tokens),
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
        },
        "scheduler": None if scheduler is None else {
            "patience": scheduler.patience,
            "factor": scheduler.factor,
            "floor": scheduler.floor,
            "minimize": scheduler.minimize,
            "best": scheduler.best,
            "evals_since_improvement": scheduler.evals_since_improvement,
        },
        "extra": extra or {},
    }
    footer_bytes = json.dumps(footer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(footer_bytes)))
        fh.write(footer_bytes)
    return path


def _read_exact(fh, n: int, path, what: str) -> bytes:
    got = fh.read(n)
    if len(got) != n:
        raise CheckpointError(f"{path}: truncated checkpoint ({what})")
    return got


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        head = _read_exact(fh, 12, path, "header")
        if head[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", head[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path, "tensor name"))
            name = _read_exact(fh, name_len, path, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, path, "tensor rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, path, "tensor dims")
            )
            n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            raw = _read_exact(fh, n_bytes, path, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims)
        (footer_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "footer length"))
        footer = json.loads(_read_exact(fh, footer_len, path, "footer").decode("utf-8"))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after footer")
    return Checkpoint(tensors=tensors, footer=footer)


def _rebuild_vocab(tokens: list[str], specials) -> Vocabulary:
    vocab = Vocabulary(tokens[len(specials):], specials)
    if list(vocab.tokens) != list(tokens):
        raise CheckpointError("stored vocabulary is not in canonical order")
    return vocab


def restore_model(ckpt: Checkpoint) -> tuple[JointModel, Vocabulary, Vocabulary]:
    """Rebuild the model and vocabularies a checkpoint was saved from."""
    from .data import GLOSS_SPECIALS, TEXT_SPECIALS

    footer = ckpt.footer
    try:
        hyper = dict(footer["model"])
        gloss_tokens = footer["gloss_tokens"]
        text_tokens = footer["text_tokens"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint footer missing field {exc}") from exc
    model = JointModel(seed=0, **hyper)
    if model.n_glosses != len(gloss_tokens) or model.n_words != len(text_tokens):
        raise CheckpointError("stored dims disagree with stored vocabularies")
    for name, p in model.named_parameters().items():
        arr = ckpt.tensors.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{name}: stored shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr.copy()
    model.spatial.bn_running_mean = ckpt.tensors["spatial.bn_running_mean"].copy()
    model.spatial.bn_running_var = ckpt.tensors["spatial.bn_running_var"].copy()
    gloss_vocab = _rebuild_vocab(gloss_tokens, GLOSS_SPECIALS)
    text_vocab = _rebuild_vocab(text_tokens, TEXT_SPECIALS)
    return model, gloss_vocab, text_vocab


def restore_training_state(
    ckpt: Checkpoint, model: JointModel
) -> tuple[OptimizerState | None, SchedulerState | None]:
    """Recover optimizer moments and scheduler progress, when stored."""
    footer = ckpt.footer
    optimizer = None
    if footer.get("optimizer") is not None:
        o = footer["optimizer"]
        params = model.trainable_parameters(footer["protocol"])
        optimizer = OptimizerState(
            lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
            weight_decay=o["weight_decay"], step=o["step"],
        )
        for name, p in params.items():
            m = ckpt.tensors.get(f"adam.m.{name}")
            v = ckpt.tensors.get(f"adam.v.{name}")
            if m is None or v is None:
                raise CheckpointError(f"checkpoint missing optimizer moments for {name}")
            if m.shape != p.data.shape:
                raise CheckpointError(f"adam.m.{name}: shape mismatch")
            optimizer.m[name] = m.copy()
            optimizer.v[name] = v.copy()
    scheduler = None
    if footer.get("scheduler") is not None:
        s = footer["scheduler"]
        scheduler = SchedulerState(
            patience=s["patience"], factor=s["factor"], floor=s["floor"],
            minimize=s["minimize"], best=s["best"],
            evals_since_improvement=s["evals_since_improvement"],
        )
    return optimizer, scheduler


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: JointModel
    gloss_vocab: Vocabulary
    text_vocab: Vocabulary
    log: list[dict]
    best_path: Path | None
    best_score: float | None
    iterations: int
    stop_reason: str  # "max_iterations" | "lr_floor"


def _batch_iterator(samples, batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches; reshuffles at every epoch boundary."""
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            idx = order[start : start + batch_size]
            if len(idx):
                yield [samples[i] for i in idx]


def train(
    cfg: RunConfig,
    *,
    train_samples=None,
    dev_samples=None,
    gloss_vocab: Vocabulary | None = None,
    text_vocab: Vocabulary | None = None,
) -> TrainResult:
    """Run one training job; corpus splits load from cfg.corpus unless given."""
    if train_samples is None:
        train_samples, gloss_vocab, text_vocab = load_corpus(cfg.corpus, "train")
    elif gloss_vocab is None or text_vocab is None:
        raise ContractError("injected samples need their vocabularies")
    if dev_samples is None:
        dev_samples, _, _ = load_corpus(cfg.corpus, "dev")
    if not train_samples:
        raise ContractError("no training samples")
    if not dev_samples:
        raise ContractError("plateau scheduling needs a non-empty dev split")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.sltc"

    d_in = train_samples[0].features.shape[1]
    model = JointModel(
        d_in=d_in,
        d=cfg.d,
        n_heads=cfg.n_heads,
        n_enc_layers=cfg.n_enc_layers,
        n_dec_layers=cfg.n_dec_layers,
        n_glosses=len(gloss_vocab),
        n_words=len(text_vocab),
        d_ff=cfg.d_ff,
        dropout=cfg.dropout,
        seed=cfg.seed,
    )
    params = model.trainable_parameters(cfg.protocol)
    optimizer = init_optimizer(
        params, cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    scheduler = SchedulerState(
        patience=cfg.patience, factor=cfg.lr_factor, floor=cfg.lr_floor,
        minimize=cfg.lambda_r > 0,
    )
    weights = LossWeights(cfg.lambda_r, cfg.lambda_t)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    batches = _batch_iterator(train_samples, cfg.batch_size, shuffle_rng)

    history: list[dict] = []
    sums = {"loss": 0.0, "loss_r": 0.0, "loss_t": 0.0, "n": 0}
    saved_best = None
    stop_reason = "max_iterations"
    iteration = 0

    with open(log_path, "w", encoding="utf-8") as log_file:
        for iteration in range(1, cfg.max_iterations + 1):
            batch = make_batch(next(batches), gloss_vocab, text_vocab,
                               max_batch=cfg.batch_size)
            with Graph() as graph:
                total, loss_r, loss_t, skipped = batch_losses(
                    model, batch, weights, cfg.protocol, cfg.loss_mode,
                    train=True, rng=dropout_rng,
                )
                for j in skipped:
                    log.warning(
                        "%s: CTC target cannot fit %d frames, sample skipped",
                        batch.ids[j], batch.frame_counts[j],
                    )
                if total is None:
                    continue
                ad.backward(graph, total)
            adam_step(params, optimizer)
            sums["loss"] += float(total.data)
            if loss_r is not None:
                sums["loss_r"] += float(loss_r.data)
            if loss_t is not None:
                sums["loss_t"] += float(loss_t.data)
            sums["n"] += 1

            if iteration % cfg.eval_every != 0:
                continue

            report = evaluate_corpus(
                model, dev_samples, gloss_vocab, text_vocab, cfg.protocol,
                batch_size=cfg.batch_size, beam_width=0,
                max_len_cap=cfg.max_len_cap,
            )
            dev_wer = report.wer.wer if report.wer else None
            dev_bleu = report.bleu
            tracked = dev_wer if cfg.lambda_r > 0 else dev_bleu.bleu4
            decision = scheduler_update(scheduler, optimizer.lr, tracked)

            n = max(sums["n"], 1)
            entry = {
                "iteration": iteration,
                "loss": sums["loss"] / n,
                "loss_recognition": sums["loss_r"] / n if cfg.lambda_r > 0 else None,
                "loss_translation": sums["loss_t"] / n if cfg.lambda_t > 0 else None,
                "lr": optimizer.lr,
                "dev_wer": dev_wer,
                "dev_bleu1": dev_bleu.bleu1 if dev_bleu else None,
                "dev_bleu2": dev_bleu.bleu2 if dev_bleu else None,
                "dev_bleu3": dev_bleu.bleu3 if dev_bleu else None,
                "dev_bleu4": dev_bleu.bleu4 if dev_bleu else None,
                "action": decision.action,
            }
            history.append(entry)
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()
            sums = {"loss": 0.0, "loss_r": 0.0, "loss_t": 0.0, "n": 0}

            if decision.improved:
                checkpoint_save(
                    best_path, model, gloss_vocab, text_vocab, cfg.protocol,
                    optimizer, scheduler,
                    extra={
                        "iteration": iteration,
                        "lambda_r": cfg.lambda_r,
                        "lambda_t": cfg.lambda_t,
                        "loss_mode": cfg.loss_mode,
                        "tracked_metric": "wer" if cfg.lambda_r > 0 else "bleu4",
                        "dev_score": tracked,
                    },
                )
                saved_best = best_path
            if decision.action == "reduce_lr":
                optimizer.lr = decision.lr
            elif decision.action == "stop":
                stop_reason = "lr_floor"
                break

    return TrainResult(
        model=model,
        gloss_vocab=gloss_vocab,
        text_vocab=text_vocab,
        log=history,
        best_path=saved_best,
        best_score=scheduler.best,
        iterations=iteration,
        stop_reason=stop_reason,
    )
