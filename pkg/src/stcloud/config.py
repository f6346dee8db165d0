"""Flat ``key=value`` run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

from pathlib import Path

from stcloud.errors import ContractError

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "jobs": "1",
    "cloud.threshold": "0.8",
    "cloud.weights": "0.5,0.5",
    "ocean.blue_ratio": "1.2",
    "ocean.cap": "0.1",
    "forge.crops": "100",
    "forge.size": "256",
    "forge.t": "3",
    "forge.window_days": "35",
    "split.fractions": "0.8,0.1,0.1",
    "synth.groups": "100",
    "synth.t": "3",
    "synth.size": "64",
    "synth.opacity_scale": "1.0",
    "model.arch": "stgan-resnet",
    "model.ir": "on",
    "model.share_weights": "off",
    "model.base_width": "64",
    "model.levels": "8",
    "model.res_blocks": "9",
    "model.branch_features": "32",
    "model.d_widths": "64,128,256,512",
    "train.steps": "1000",
    "train.lambda": "100",
    "train.lr": "0.0002",
    "train.beta1": "0.5",
    "train.beta2": "0.999",
    "train.batch_size": "1",
    "train.eval_every": "0",
    "downstream.steps": "2000",
    "downstream.lr": "0.001",
    "downstream.batch_size": "32",
}


class RunConfig:
    """Validated string-valued settings with typed accessors."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values, source="overrides")

    def update(self, values: dict[str, str], source: str = "flags") -> None:
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ContractError(f"unknown config keys from {source}: {', '.join(unknown)}")
        self.values.update({k: str(v) for k, v in values.items()})

    def load_file(self, path) -> None:
        parsed = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            parsed[key.strip()] = value.strip()
        self.update(parsed, source=str(path))

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str) -> int:
        return int(self.values[key])

    def float(self, key: str) -> float:
        return float(self.values[key])

    def flag(self, key: str) -> bool:
        value = self.values[key].lower()
        if value not in ("on", "off", "true", "false", "1", "0"):
            raise ContractError(f"{key} must be on/off, got {self.values[key]!r}")
        return value in ("on", "true", "1")

    def floats(self, key: str) -> tuple[float, ...]:
        return tuple(float(v) for v in self.values[key].split(","))

    def ints(self, key: str) -> tuple[int, ...]:
        return tuple(int(v) for v in self.values[key].split(","))

    def lock_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def write_lock(self, out_dir) -> Path:
        path = Path(out_dir) / "config.lock"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.lock_text(), encoding="utf-8")
        return path
