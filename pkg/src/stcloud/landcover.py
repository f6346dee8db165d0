"""Downstream land-cover check: does a classifier trained on clear crops do
better on generated cloud-free images than on the cloudy originals?"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stcloud.errors import ContractError
from stcloud.imagecore import MultispectralImage, load_image
from stcloud.models import image_to_tensor
from stcloud.pairforge import Manifest

N_CLASSES = 10
CLOUDY_ROW = "Cloudy"
CLEAR_ROW = "Cloud-free"


@dataclass(frozen=True)
class LabeledCrop:
    image: MultispectralImage
    class_id: int
    group_id: str = ""

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise ContractError(f"class_id must be in [0, {N_CLASSES}), got {self.class_id}")


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 64, 128)


class LandcoverNet(nn.Module):
    def __init__(self, in_channels=3, widths=(16, 32, 64, 128), n_classes=N_CLASSES):
        super().__init__()
        layers = []
        prev = in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(True)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def crops_to_tensor(images: list[MultispectralImage]) -> torch.Tensor:
    # same normalisation path as the generators
    return torch.stack([image_to_tensor(img.rgb()) for img in images])


class LandcoverClassifier:
    """Callable wrapper: ``classifier(images) -> list of class ids``."""

    def __init__(self, net: LandcoverNet, cfg: ClassifierConfig):
        self.net = net.eval()
        self.cfg = cfg

    def logits(self, images: list[MultispectralImage]) -> torch.Tensor:
        with torch.no_grad():
            return self.net(crops_to_tensor(images))

    def __call__(self, images: list[MultispectralImage]) -> list[int]:
        out = []
        for i in range(0, len(images), 64):
            out += self.logits(images[i : i + 64]).argmax(dim=1).tolist()
        return out

    def save(self, path) -> None:
        torch.save({"config": asdict(self.cfg), "state": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path) -> LandcoverClassifier:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        cfg = ClassifierConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob["config"].items()})
        net = LandcoverNet(widths=cfg.widths)
        net.load_state_dict(blob["state"])
        return cls(net, cfg)


def train_classifier(crops: list[LabeledCrop], cfg: ClassifierConfig = ClassifierConfig()) -> LandcoverClassifier:
    if len({c.class_id for c in crops}) < 2:
        raise ContractError("need at least two classes to train a classifier")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    net = LandcoverNet(widths=cfg.widths)
    x = crops_to_tensor([c.image for c in crops])
    y = torch.tensor([c.class_id for c in crops])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    order: list[int] = []
    net.train()
    for _ in range(cfg.steps):
        if len(order) < cfg.batch_size:
            extra = list(range(len(crops)))
            rng.shuffle(extra)
            order += extra
        idx = torch.tensor(order[: cfg.batch_size])
        del order[: cfg.batch_size]
        # flips keep the class signal and make the tiny net less position-bound
        xb = x[idx]
        if rng.random() < 0.5:
            xb = xb.flip(3)
        if rng.random() < 0.5:
            xb = xb.flip(2)
        loss = F.cross_entropy(net(xb), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return LandcoverClassifier(net, cfg)


def accuracy(classifier, crops: list[LabeledCrop]) -> float:
    preds = classifier([c.image for c in crops])
    return float(np.mean([p == c.class_id for p, c in zip(preds, crops)]))


@dataclass
class DownstreamReport:
    """Accuracy per image source plus the per-sample predictions behind it."""

    sources: list[str] = field(default_factory=list)
    confusion: dict[str, np.ndarray] = field(default_factory=dict)
    predictions: list[tuple[str, str, int, int]] = field(default_factory=list)

    def accuracy(self, source: str) -> float:
        m = self.confusion[source]
        return float(np.trace(m) / m.sum())

    @property
    def accuracy_cloudy(self) -> float:
        return self.accuracy(CLOUDY_ROW)

    @property
    def accuracy_clear(self) -> float:
        return self.accuracy(CLEAR_ROW)

    @property
    def accuracy_generated(self) -> dict[str, float]:
        return {s: self.accuracy(s) for s in self.sources if s not in (CLOUDY_ROW, CLEAR_ROW)}

    def to_text(self) -> str:
        w = max(len("Model"), *(len(s) for s in self.sources))
        lines = [f"{'Model':<{w}}  Accuracy"]
        lines += [f"{s:<{w}}  {100 * self.accuracy(s):7.2f}%" for s in self.sources]
        return "\n".join(lines) + "\n"

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("group_id", "source", "true_class", "predicted_class"))
        w.writerows(self.predictions)
        return buf.getvalue()

    @classmethod
    def from_predictions(cls, rows) -> DownstreamReport:
        report = cls()
        for gid, source, true, pred in rows:
            if source not in report.confusion:
                report.sources.append(source)
                report.confusion[source] = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
            report.confusion[source][int(true), int(pred)] += 1
            report.predictions.append((gid, source, int(true), int(pred)))
        return report

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "downstream.txt").write_text(self.to_text(), encoding="utf-8")
        (out / "downstream_predictions.csv").write_text(self.predictions_csv(), encoding="utf-8")


def read_predictions(path) -> DownstreamReport:
    with open(path, newline="") as f:
        rows = [(r["group_id"], r["source"], r["true_class"], r["predicted_class"]) for r in csv.DictReader(f)]
    return DownstreamReport.from_predictions(rows)


def _generator_fn(source):
    """Turn a checkpoint path, generator module or callable into ``cloudy -> image``."""
    if callable(source) and not isinstance(source, nn.Module):
        return source
    from stcloud.models import load_checkpoint
    from stcloud.trainer import generate

    G = source if isinstance(source, nn.Module) else load_checkpoint(source)
    return lambda cloudy: generate(G, cloudy)


def eval_downstream(
    classifier,
    manifest: Manifest,
    labels: dict[str, int],
    generators: dict | None = None,
    split: str = "test",
) -> DownstreamReport:
    """Classify the most recent cloudy view, the clear target and every
    generator's output for each group of ``split``.

    ``classifier`` maps a list of images to a list of class ids.
    """
    groups = [g for g in manifest.split(split) if g.group_id in labels]
    if not groups:
        raise ContractError(f"no labelled groups in split {split!r}")
    gens = {name: _generator_fn(src) for name, src in (generators or {}).items()}
    rows: dict[str, list[MultispectralImage]] = {CLOUDY_ROW: [], CLEAR_ROW: []}
    rows.update({name: [] for name in gens})
    for g in groups:
        cloudy = [load_image(manifest.resolve(z.path)) for z in g.cloudy]
        rows[CLOUDY_ROW].append(cloudy[0].rgb())
        rows[CLEAR_ROW].append(load_image(manifest.resolve(g.clear.path)).rgb())
        for name, fn in gens.items():
            rows[name].append(fn(cloudy).rgb())
    preds = []
    for source, images in rows.items():
        for g, p in zip(groups, classifier(images)):
            preds.append((g.group_id, source, labels[g.group_id], int(p)))
    return DownstreamReport.from_predictions(preds)


def labeled_crops(manifest: Manifest, labels: dict[str, int], split: str = "train") -> list[LabeledCrop]:
    out = []
    for g in manifest.split(split):
        if g.group_id in labels:
            img = load_image(manifest.resolve(g.clear.path))
            out.append(LabeledCrop(img, labels[g.group_id], g.group_id))
    return out
