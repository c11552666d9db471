"""Flat key-value config files and the training configuration.

The on-disk format is one ``key = value`` pair per line; blank lines and lines
starting with ``#`` are ignored. Values are parsed by the declared field type
(int, float, bool as true/false, or a comma-separated pair for ranges).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .backbone import NetworkConfig


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def format_kv(pairs: dict) -> str:
    return "\n".join(f"{k} = {v}" for k, v in pairs.items()) + "\n"


@dataclass
class TrainConfig:
    # synthetic curriculum: a fixed pool of procedural scenes
    scene_count: int = 4
    scene_seed: int = 100
    scene_points: int = 400
    scene_frames: int = 16
    scene_extent: float = 2.0
    trajectory: str = "orbit"
    fov: float = 1.3
    holdout: tuple[int, ...] = ()      # frame indices never sampled during training

    # per-step batch sampling
    frames_min: int = 4
    frames_max: int = 6
    anchors_min: int = 2
    anchors_max: int = 3
    ratio_min: float = 0.2
    ratio_max: float = 1.0

    # optimization
    steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    final_lr_fraction: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0          # 0 = final checkpoint only
    masked: bool = True                # False: joint-regression baseline
    alpha: float = 0.2
    gradient_term: bool = True

    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.frames_min < 2 or self.frames_min > self.frames_max:
            raise ValueError("frames range must be nonempty with frames_min >= 2")
        if self.anchors_min < 1 or self.anchors_min > self.anchors_max:
            raise ValueError("anchors range must be nonempty")
        if self.anchors_max > self.frames_max:
            raise ValueError("anchor range must lie within the frame range")
        if not 0.0 < self.ratio_min <= self.ratio_max <= 1.0:
            raise ValueError("ratio range must lie in (0, 1]")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be nonnegative")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "network":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = v
        for f in fields(NetworkConfig):
            out[f.name] = getattr(self.network, f.name)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        net_names = {f.name: f for f in fields(NetworkConfig)}
        own_names = {f.name: f for f in fields(cls) if f.name != "network"}
        net_kw, own_kw = {}, {}
        for key, value in raw.items():
            if key in net_names:
                net_kw[key] = _convert(value, net_names[key].type)
            elif key in own_names:
                own_kw[key] = _convert(value, own_names[key].type)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(network=NetworkConfig(**net_kw), **own_kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(parse_kv(fh.read()))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(format_kv(self.to_dict()))


def _convert(value, annotation):
    if isinstance(value, (int, float, bool, tuple)):
        return value
    text = str(value)
    ann = str(annotation)
    if "tuple" in ann:
        return tuple(int(x) for x in text.split(",") if x.strip() != "")
    if "bool" in ann:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if "int" in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    return text
