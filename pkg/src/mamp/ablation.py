"""Ablation suite: pre-train and probe once per setting along one axis."""

from __future__ import annotations

import csv
import dataclasses
import io
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from mamp.config import AblationConfig, PretrainConfig, config_hash
from mamp.data import Corpus, load_corpus
from mamp.errors import ConfigError
from mamp.evaluate import linear_probe
from mamp.train import pretrain

ABLATION_HEADER = ["axis", "setting", "config_hash", "seeds", "pretrain_loss",
                   "probe_top1", "probe_top1_std", "probe_top1_per_seed"]

STREAM_SETTINGS = [("joint", "joint"), ("joint", "motion"), ("motion", "joint"), ("motion", "motion")]

DEFAULT_GRIDS: dict[str, list] = {
    "streams": [f"{i}->{t}" for i, t in STREAM_SETTINGS],
    "masking": ["random", "motion"],
    "segment_len": [2, 4, 6, 8],
    "decoder_depth": [2, 3, 4, 5],
    "decoder_width": [16, 32, 64, 128],
    "mask_ratio": [0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
    "schedule": [20, 40, 60, 80, 100],
}
AXES = tuple(DEFAULT_GRIDS)


def _arch(cfg: PretrainConfig, **kw) -> PretrainConfig:
    return dataclasses.replace(cfg, arch=dataclasses.replace(cfg.arch, **kw))


def _streams(cfg, value):
    inp, tgt = str(value).split("->")
    return _arch(cfg, input_stream=inp.strip(), target_stream=tgt.strip())


def _segment_len(cfg, value):
    # hold the token grid fixed: T_s grows with the segment length
    l = int(value)
    return _arch(cfg, segment_len=l, T_s=cfg.arch.T_e * l)


def _schedule(cfg, value):
    epochs = int(value)
    warmup = min(cfg.warmup_epochs, max(0, epochs // 5))
    return dataclasses.replace(cfg, epochs=epochs, warmup_epochs=warmup)


APPLY: dict[str, Callable[[PretrainConfig, object], PretrainConfig]] = {
    "streams": _streams,
    "masking": lambda cfg, v: dataclasses.replace(cfg, masking=str(v)),
    "segment_len": _segment_len,
    "decoder_depth": lambda cfg, v: _arch(cfg, decoder_depth=int(v)),
    "decoder_width": lambda cfg, v: _arch(cfg, decoder_dim=int(v)),
    "mask_ratio": lambda cfg, v: _arch(cfg, mask_ratio=float(v)),
    "schedule": _schedule,
}


@dataclass
class AblationRow:
    axis: str
    setting: str
    config_hash: str
    seeds: tuple[int, ...]
    pretrain_loss: float
    accuracies: tuple[float, ...]
    wall_clock: float = 0.0  # seconds for all seeds; not part of the CSV

    @property
    def probe_top1(self) -> float:
        return statistics.fmean(self.accuracies)

    def as_csv(self) -> list:
        std = statistics.pstdev(self.accuracies) if len(self.accuracies) > 1 else 0.0
        return [self.axis, self.setting, self.config_hash, ";".join(map(str, self.seeds)),
                repr(self.pretrain_loss), repr(self.probe_top1), repr(std),
                ";".join(repr(a) for a in self.accuracies)]


def settings_for(axis: str, values: list | None = None) -> list:
    if axis not in APPLY:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
    grid = list(values) if values else list(DEFAULT_GRIDS[axis])
    if not grid:
        raise ConfigError(f"ablation axis {axis!r} has no settings")
    return grid


def setting_config(base: PretrainConfig, axis: str, value) -> PretrainConfig:
    try:
        return APPLY[axis](base, value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ablation {axis}={value!r}: {exc}") from exc


def run_ablation_suite(cfg: AblationConfig, axis: str, corpus: Corpus | None = None,
                       out: Path | None = None) -> list[AblationRow]:
    """Pre-train and linear-probe every setting on ``axis`` for each seed.

    One row per setting, with the probe accuracy averaged over
    ``cfg.seeds``. ``config_hash`` is taken with the seed zeroed, so it is
    shared by all seeds of a setting. When ``out`` is given the
    table is written to ``out/ablation_<axis>.csv``.
    """
    grid = settings_for(axis, cfg.values.get(axis))
    if corpus is None:
        corpus = load_corpus(Path(cfg.pretrain.corpus))
    rows = []
    for value in grid:
        setting = setting_config(cfg.pretrain, axis, value)
        t0 = time.perf_counter()
        losses, accs = [], []
        for seed in cfg.seeds:
            run = dataclasses.replace(setting, seed=seed)
            ckpt, record = pretrain(run, corpus)
            losses.append(record.values("loss")[-1])
            probe = dataclasses.replace(cfg.probe, seed=seed)
            acc, _ = linear_probe(ckpt, corpus, probe)
            accs.append(acc)
        rows.append(AblationRow(axis, str(value), config_hash(dataclasses.replace(setting, seed=0)),
                                tuple(cfg.seeds), statistics.fmean(losses), tuple(accs),
                                time.perf_counter() - t0))
    if out is not None:
        write_ablation_csv(rows, Path(out) / f"ablation_{axis}.csv")
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for row in rows:
        w.writerow(row.as_csv())
    return buf.getvalue()


def write_ablation_csv(rows: list[AblationRow], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ablation_csv(rows), encoding="utf-8")
    return path
