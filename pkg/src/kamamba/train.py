"""Training, evaluation and the checkpoint container.

A checkpoint is a directory holding ``manifest.json`` (config, dataset
digest, transition matrix, loss trace, optimizer hyperparameters and a
tensor index) and ``tensors.bin`` (little-endian raw tensors at the indexed
offsets).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .change import change_probability
from .config import RunConfig
from .data import SyntheticDataset, manifest_digest
from .errors import TrainingFault, ValidationError
from .losses import (
    LossWeights,
    TransitionMatrix,
    build_transition,
    change_loss,
    classification_loss,
    contrastive_loss,
    kat_loss,
    plausibility,
    total_loss,
)
from .metrics import CHANGE_NAMES, confusion_matrix, metrics_report
from .model import KAMamba, ModelConfig

log = logging.getLogger(__name__)

CKPT_SCHEMA = "kamamba-ckpt/v1"
PARTS = ("cls_pre", "cls_post", "change", "cl", "kat")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


@contextmanager
def deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def compute_losses(out: dict, batch: dict, T: torch.Tensor, cfg: RunConfig) -> dict:
    """All five loss parts plus ``total`` (switched-off terms get weight 0)."""
    lp, lq = out["logits_pre"], out["logits_post"]
    p_change = change_probability(out["change_logits"])
    parts = {
        "cls_pre": classification_loss(lp, batch["y_pre"]),
        "cls_post": classification_loss(lq, batch["y_post"]),
        "change": change_loss(out["change_logits"], batch["changed"]),
        "cl": contrastive_loss(F.normalize(lp, dim=-1), F.normalize(lq, dim=-1),
                               batch["y_pre"] == batch["y_post"], cfg.tau),
        "kat": kat_loss(lp.softmax(-1), lq.softmax(-1), p_change, T),
    }
    w, on = cfg.weights, cfg.terms
    eff = LossWeights(
        w.alpha * on["cls"], w.beta * on["change"], w.lambda_cl * on["cl"], w.gamma * on["kat"]
    )
    parts["total"] = total_loss(parts, eff)
    return parts


def _batch(tensors: dict, idx) -> dict:
    idx = torch.as_tensor(idx, dtype=torch.long)
    return {k: v[idx] for k, v in tensors.items()}


@dataclass
class TrainResult:
    model: KAMamba
    optimizer: torch.optim.Optimizer
    transition: TransitionMatrix
    trace: list = field(default_factory=list)
    stopped_early: bool = False
    early_stop: dict = field(default_factory=dict)
    dataset_digest: str = ""
    config: RunConfig | None = None


def make_optimizer(model, cfg: RunConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)


def train(cfg: RunConfig, dataset: SyntheticDataset, transition: TransitionMatrix | None = None,
          out_dir=None, resume=None) -> TrainResult:
    """Train for ``cfg.optim.epochs`` epochs (in total, counting resumed ones).

    Early stopping watches the validation total loss and is off when the
    validation split is empty. On a non-finite loss a ``TrainingFault`` is
    raised carrying ``trace`` (the epochs completed so far), which is also
    written to ``out_dir/trace.json`` when given.
    """
    train_idx, val_idx = dataset.split("train"), dataset.split("val")
    if len(train_idx) == 0:
        raise ValidationError("training split is empty")
    if transition is None:
        transition = build_transition(dataset.label_pairs(train_idx), cfg.model.num_classes, cfg.eps,
                                      cfg.include_diagonal)
    T = transition.tensor(torch.float32)
    digest = manifest_digest(dataset.manifest)

    with deterministic():
        if resume is not None:
            res = load_checkpoint(resume, cfg_override=cfg)
            model, opt = res.model, res.optimizer
            trace, early = list(res.trace), dict(res.early_stop)
        else:
            torch.manual_seed(cfg.seed)
            model = KAMamba(cfg.model)
            opt = make_optimizer(model, cfg)
            trace, early = [], {"best": None, "bad": 0}
        result = TrainResult(model, opt, transition, trace, False, early, digest, cfg)

        tr = dataset.tensors(train_idx)
        va = dataset.tensors(val_idx) if len(val_idx) else None
        bs = cfg.optim.batch_size
        for epoch in range(len(trace), cfg.optim.epochs):
            if va is not None and early["bad"] >= cfg.optim.patience:
                result.stopped_early = True
                break
            model.train()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_idx))
            sums = dict.fromkeys((*PARTS, "total"), 0.0)
            try:
                for start in range(0, len(order), bs):
                    batch = _batch(tr, order[start : start + bs])
                    parts = compute_losses(model(batch["pre"], batch["post"]), batch, T, cfg)
                    opt.zero_grad(set_to_none=True)
                    parts["total"].backward()
                    opt.step()
                    n = len(batch["y_pre"])
                    for k in sums:
                        sums[k] += parts[k].item() * n
            except TrainingFault as fault:
                fault.trace = list(trace)
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    (Path(out_dir) / "trace.json").write_text(json.dumps(trace, indent=1))
                raise
            record = {"epoch": epoch + 1, **{k: v / len(order) for k, v in sums.items()}}
            if va is not None:
                record["val_total"] = evaluate_loss(model, va, T, cfg)
                if early["best"] is None or record["val_total"] < early["best"]:
                    early["best"], early["bad"] = record["val_total"], 0
                else:
                    early["bad"] += 1
            trace.append(record)
            log.info("epoch %d total %.5f", epoch + 1, record["total"])
    if out_dir is not None:
        save_checkpoint(result, out_dir)
    return result


@torch.no_grad()
def predict(model: KAMamba, tensors: dict, batch_size: int = 128) -> dict:
    model.eval()
    chunks = {"probs_pre": [], "probs_post": [], "p_change": []}
    n = len(tensors["y_pre"])
    for start in range(0, n, batch_size):
        out = model(tensors["pre"][start : start + batch_size], tensors["post"][start : start + batch_size])
        chunks["probs_pre"].append(out["logits_pre"].softmax(-1))
        chunks["probs_post"].append(out["logits_post"].softmax(-1))
        chunks["p_change"].append(change_probability(out["change_logits"]))
    return {k: torch.cat(v) for k, v in chunks.items()}


@torch.no_grad()
def evaluate_loss(model: KAMamba, tensors: dict, T: torch.Tensor, cfg: RunConfig) -> float:
    model.eval()
    total, n = 0.0, len(tensors["y_pre"])
    for start in range(0, n, cfg.optim.batch_size):
        batch = {k: v[start : start + cfg.optim.batch_size] for k, v in tensors.items()}
        parts = compute_losses(model(batch["pre"], batch["post"]), batch, T, cfg)
        total += float(parts["total"]) * len(batch["y_pre"])
    return total / n


def prior_agreement(pred: dict, T) -> dict:
    """Deviation of the change probability from the transition plausibility Ĉ."""
    T = torch.as_tensor(T, dtype=pred["probs_pre"].dtype)
    c_hat = plausibility(pred["probs_pre"], pred["probs_post"], T)
    return {"c_hat": c_hat, "mse": float(((pred["p_change"] - c_hat) ** 2).mean())}


def implausible_count(pred: dict, T_star, threshold: float = 0.05) -> int:
    """Predicted pairs with ``T*[i][j] < threshold`` scored ``p_changed > 0.5``."""
    T_star = torch.as_tensor(np.asarray(T_star), dtype=torch.float64)
    i, j = pred["probs_pre"].argmax(-1), pred["probs_post"].argmax(-1)
    implausible = T_star[i, j] < threshold
    return int((implausible & (pred["p_change"] > 0.5)).sum())


def evaluate(model: KAMamba, dataset: SyntheticDataset, split: str = "test", batch_size: int = 128) -> dict:
    idx = dataset.split(split)
    if len(idx) == 0:
        raise ValidationError(f"split {split!r} is empty")
    tensors = dataset.tensors(idx)
    with deterministic():
        pred = predict(model, tensors, batch_size)
    K = model.cfg.num_classes
    names = [f"Class {k}" for k in range(K)]
    reports = {
        "split": split,
        "n": int(len(idx)),
        "pre": metrics_report(confusion_matrix(pred["probs_pre"].argmax(-1), tensors["y_pre"], K), names),
        "post": metrics_report(confusion_matrix(pred["probs_post"].argmax(-1), tensors["y_post"], K), names),
        "change": metrics_report(
            confusion_matrix((pred["p_change"] > 0.5).long(), tensors["changed"], 2), CHANGE_NAMES
        ),
    }
    return reports


def evaluate_checkpoint(path, dataset: SyntheticDataset, split: str = "test", force: bool = False) -> dict:
    ckpt = load_checkpoint(path)
    digest = manifest_digest(dataset.manifest)
    if ckpt.dataset_digest != digest:
        msg = f"checkpoint was trained on dataset {ckpt.dataset_digest[:12]}, got {digest[:12]}"
        if not force:
            raise ValidationError(msg + " (pass force to evaluate anyway)")
        log.warning(msg)
    return evaluate(ckpt.model, dataset, split, ckpt.config.optim.batch_size)


# -- checkpoint container ----------------------------------------------------

def _tensor_items(result: TrainResult):
    for name, t in result.model.state_dict().items():
        yield f"model.{name}", t
    for pid, st in result.optimizer.state_dict()["state"].items():
        for key, t in sorted(st.items()):
            yield f"optim.{pid}.{key}", torch.as_tensor(t)


def save_checkpoint(result: TrainResult, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, t in _tensor_items(result):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ValidationError(f"cannot serialize {name} with dtype {t.dtype}")
        blob = t.numpy().astype(_DTYPES[t.dtype]).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    groups = result.optimizer.state_dict()["param_groups"]
    manifest = {
        "schema": CKPT_SCHEMA,
        "config": result.config.to_dict(),
        "dataset_digest": result.dataset_digest,
        "transition": {"T": result.transition.T.tolist(), "eps": result.transition.eps},
        "trace": result.trace,
        "early_stop": result.early_stop,
        "optimizer": {"param_groups": groups},
        "tensors": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    (path / "tensors.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, cfg_override: RunConfig | None = None) -> TrainResult:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise ValidationError(f"checkpoint not found: {exc.filename}") from None
    if manifest.get("schema") != CKPT_SCHEMA:
        raise ValidationError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValidationError("checkpoint tensors.bin checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=math.prod(e["shape"]), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).reshape(e["shape"]))
    saved_cfg = RunConfig.from_dict(manifest["config"])
    cfg = cfg_override or saved_cfg
    if cfg_override is not None and cfg_override.model != saved_cfg.model:
        raise ValidationError("resume config changes the model architecture")
    model = KAMamba(ModelConfig(**manifest["config"]["model"]))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    opt = make_optimizer(model, cfg)
    state = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            _, pid, key = k.split(".", 2)
            state.setdefault(int(pid), {})[key] = v
    groups = manifest["optimizer"]["param_groups"]
    for g in groups:
        g["lr"], g["weight_decay"] = cfg.optim.lr, cfg.optim.weight_decay
    opt.load_state_dict({"state": state, "param_groups": groups})
    early = manifest["early_stop"]
    T = np.asarray(manifest["transition"]["T"])
    trans = TransitionMatrix(T, np.zeros(T.shape, dtype=np.int64), manifest["transition"]["eps"])
    return TrainResult(model, opt, trans, manifest["trace"], False, early, manifest["dataset_digest"], cfg)
