"""Downstream evaluation: frozen-feature linear probe and full fine-tuning."""

from __future__ import annotations

import copy
import math
import time
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from mamp.checkpoint import Checkpoint
from mamp.config import EvalConfig, config_hash
from mamp.data import Corpus, SkeletonSequence, eval_view, label_subset
from mamp.errors import NumericalError
from mamp.model import MAMP, init_module_, select_stream
from mamp.numerics import AdamWState, ScheduleConfig, adamw_step, backward, lr_at
from mamp.train import (RunRecord, batch_views, check_compatible, no_decay_names, provenance,
                         torch_dtype)

FEATURE_BATCH = 256
PROBE_STREAM = 3


def _backbone(model: MAMP | Checkpoint) -> MAMP:
    return model.model if isinstance(model, Checkpoint) else model


def encode_features(model: MAMP | Checkpoint, views) -> Tensor:
    """Mean-pooled encoder output over all ``T_e * V`` tokens, no masking.

    ``views`` is ``(B, T_s, V, C_s)`` or a single view; returns ``(B, C_e)``
    (or ``(C_e,)``).
    """
    model = _backbone(model)
    dtype = next(model.parameters()).dtype
    single = np.ndim(views) == 3
    views = torch.as_tensor(np.asarray(views), dtype=dtype)
    if single:
        views = views[None]
    with torch.no_grad():
        H = model.encode(select_stream(views, model.cfg.input_stream, model.cfg))
    feats = H.mean(dim=1)
    return feats[0] if single else feats


def sequence_features(model: MAMP, seqs: Sequence[SkeletonSequence], views=None) -> Tensor:
    T_s = model.cfg.T_s
    if views is None:
        views = np.stack([eval_view(s.frames, T_s) for s in seqs])
    out = [encode_features(model, views[i:i + FEATURE_BATCH])
           for i in range(0, len(views), FEATURE_BATCH)]
    return torch.cat(out)


def labels_of(seqs: Sequence[SkeletonSequence]) -> Tensor:
    if any(s.label is None for s in seqs):
        raise ValueError("evaluation needs labelled sequences")
    return torch.tensor([s.label for s in seqs], dtype=torch.long)


def check_labels(corpus: Corpus) -> int:
    labels = {s.label for s in corpus.train}
    if len(labels) < 2:
        raise ValueError(f"need at least two classes in the training split, found {len(labels)}")
    return corpus.num_classes


def accuracy(logits: Tensor, labels: Tensor) -> float:
    return 100.0 * float((logits.argmax(-1) == labels).double().mean())


def train_linear_classifier(train_x: Tensor, train_y: Tensor, num_classes: int, cfg: EvalConfig,
                            record: RunRecord | None = None,
                            feature_fn=None) -> nn.Linear:
    """Softmax-regression head trained by SGD with momentum and cosine lr.

    ``feature_fn(epoch)`` may supply fresh training features each epoch
    (augmented views); otherwise ``train_x`` is reused.
    """
    n, d = train_x.shape
    g = torch.Generator().manual_seed(cfg.seed)
    clf = nn.Linear(d, num_classes).to(train_x.dtype)
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=g)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    spe = math.ceil(n / cfg.batch_size)
    sched = ScheduleConfig(cfg.warmup_epochs, cfg.epochs, spe, cfg.lr, cfg.floor_lr)
    step = 0
    for epoch in range(cfg.epochs):
        x = train_x if feature_fn is None else feature_fn(epoch)
        order = torch.randperm(n, generator=g)
        total = 0.0
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            for group in opt.param_groups:
                group["lr"] = lr_at(step, sched)
            loss = F.cross_entropy(clf(x[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        if record is not None:
            record.add(epoch, "train", "loss", total / n)
    return clf


class Standardizer:
    def __init__(self, x: Tensor):
        self.mean = x.mean(0)
        self.std = x.std(0, unbiased=False) + 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std


def linear_probe(model: MAMP | Checkpoint, corpus: Corpus, cfg: EvalConfig) -> tuple[float, RunRecord]:
    """Top-1 test accuracy (percent) of a linear classifier on frozen features."""
    t0 = time.perf_counter()
    backbone = _backbone(model)
    num_classes = check_labels(corpus)
    check_compatible(corpus.train + corpus.test, backbone.cfg)
    record = RunRecord(config_hash(cfg), provenance=provenance())
    train = label_subset(corpus.train, cfg.label_fraction, cfg.seed)
    train_y = labels_of(train)
    test_y = labels_of(corpus.test)
    train_x = sequence_features(backbone, train)
    test_x = sequence_features(backbone, corpus.test)

    norm = Standardizer(train_x) if cfg.standardize else (lambda x: x)
    feature_fn = None
    if cfg.augment:
        def feature_fn(epoch):
            views = batch_views(train, np.arange(len(train)), backbone.cfg.T_s,
                                cfg.seed + PROBE_STREAM, epoch, True)
            return norm(sequence_features(backbone, train, views))

    clf = train_linear_classifier(norm(train_x), train_y, num_classes, cfg, record, feature_fn)
    with torch.no_grad():
        train_acc = accuracy(clf(norm(train_x)), train_y)
        test_acc = accuracy(clf(norm(test_x)), test_y)
    record.add(cfg.epochs - 1, "train", "top1", train_acc)
    record.add(cfg.epochs - 1, "test", "top1", test_acc)
    record.wall_clock = time.perf_counter() - t0
    return test_acc, record


# ---------------------------------------------------------------------------
# fine-tuning


class Classifier(nn.Module):
    """Pre-trained encoder, mean pooling and an MLP head."""

    def __init__(self, backbone: MAMP, num_classes: int):
        super().__init__()
        self.backbone = backbone
        C_e = backbone.cfg.embed_dim
        self.head = nn.Sequential(nn.Linear(C_e, C_e), nn.GELU(), nn.Linear(C_e, num_classes))

    def forward(self, views: Tensor) -> Tensor:
        cfg = self.backbone.cfg
        H = self.backbone.encode(select_stream(views, cfg.input_stream, cfg))
        return self.head(H.mean(dim=1))


def layer_lr_scales(clf: Classifier, decay: float) -> dict[str, float]:
    """Per-parameter lr multipliers ``decay ** depth_from_top``.

    The head and final encoder norm sit at depth 0, encoder block ``i``
    (1-based, of ``L``) at ``L - i + 1``, and the embedding plus positional
    embeddings at ``L + 1``.
    """
    L = clf.backbone.cfg.depth
    scales = {}
    for name, _ in clf.named_parameters():
        if name.startswith("head.") or name.startswith("backbone.norm."):
            depth = 0
        elif name.startswith("backbone.blocks."):
            depth = L - int(name.split(".")[2])
        else:
            depth = L + 1
        scales[name] = decay ** depth
    return scales


def finetune(model: MAMP | Checkpoint, corpus: Corpus, cfg: EvalConfig,
             target: Corpus | None = None) -> tuple[float, RunRecord]:
    """Fine-tune encoder plus MLP head end to end; return test top-1 (percent).

    ``corpus`` supplies training and test data unless ``target`` is given, in
    which case the model (pre-trained elsewhere) is fine-tuned and evaluated
    on ``target``. ``cfg.label_fraction`` selects a stratified subset.
    """
    t0 = time.perf_counter()
    data = target or corpus
    num_classes = check_labels(data)
    check_compatible(data.train + data.test, _backbone(model).cfg)
    backbone = copy.deepcopy(_backbone(model)).to(torch_dtype(cfg.dtype))
    torch.manual_seed(cfg.seed)
    clf = Classifier(backbone, num_classes).to(torch_dtype(cfg.dtype))
    init_module_(clf.head, cfg.seed)
    params = {n: p for n, p in clf.named_parameters() if not _decoder_only(n)}
    scales = layer_lr_scales(clf, cfg.layer_decay)
    skip_decay = no_decay_names(clf)
    record = RunRecord(config_hash(cfg), provenance=provenance())

    train = label_subset(data.train, cfg.label_fraction, cfg.seed)
    train_y = labels_of(train)
    n = len(train)
    spe = math.ceil(n / cfg.batch_size)
    sched = ScheduleConfig(cfg.warmup_epochs, cfg.epochs, spe, cfg.lr, cfg.floor_lr)
    state = AdamWState(lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1],
                       weight_decay=cfg.weight_decay)
    dtype = torch_dtype(cfg.dtype)
    T_s = backbone.cfg.T_s
    step = 0
    clf.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, PROBE_STREAM]).permutation(n)
        total = 0.0
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            views = torch.as_tensor(batch_views(train, idx, T_s, cfg.seed, epoch, cfg.augment),
                                    dtype=dtype)
            loss = F.cross_entropy(clf(views), train_y[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite fine-tuning loss at step {step}")
            grads = backward(loss, params)
            adamw_step(params, grads, state, lr=lr_at(step, sched), lr_scales=scales,
                       no_decay=skip_decay)
            total += loss.item() * len(idx)
            step += 1
        record.add(epoch, "train", "loss", total / n)
    clf.eval()
    test_views = torch.as_tensor(np.stack([eval_view(s.frames, T_s) for s in data.test]), dtype=dtype)
    with torch.no_grad():
        test_acc = accuracy(clf(test_views), labels_of(data.test))
    record.add(cfg.epochs - 1, "test", "top1", test_acc)
    record.wall_clock = time.perf_counter() - t0
    return test_acc, record


def _decoder_only(name: str) -> bool:
    prefixes = ("backbone.decoder", "backbone.mask_token", "backbone.head.")
    return name.startswith(prefixes)
