"""Run configuration, YAML round trip and dataset presets."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..cluster import ClusterParams
from ..data import AugmentConfig, SyntheticScenario
from ..loss import NeighborhoodSpec
from ..net import NetworkConfig

MODES = ("semantic", "instance_still", "instance_video")


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    lr_late: float = 1e-5
    drop_at: int = 20000
    iterations: int = 40000
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, it: int) -> float:
        return self.lr if it < self.drop_at else self.lr_late


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scenario: SyntheticScenario = field(default_factory=SyntheticScenario)
    mode: str = "instance_video"
    seq_len: int = 10
    batch: int = 1
    input_size: tuple = (256, 256)
    seed: int = 0
    log_every: int = 50
    lookback: int = 1
    dtype: str = "float32"
    n_train_videos: int = 8
    augment_enabled: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        net = self.network
        if self.mode == "semantic" and net.head_mode != "class_logits":
            raise ValueError("semantic mode needs network.head_mode = class_logits")
        if self.mode != "semantic" and net.head_mode != "embeddings":
            raise ValueError(f"{self.mode} mode needs network.head_mode = embeddings")
        if self.mode != "semantic" and net.num_classes is not None:
            raise ValueError("num_classes is only meaningful in semantic mode")
        if self.mode == "instance_still" and net.recurrent:
            raise ValueError("instance_still mode uses a non-recurrent network")
        if self.seq_len < 1 or self.batch < 1:
            raise ValueError("seq_len and batch must be >= 1")
        div = 2 ** net.levels
        if any(v % div for v in self.input_size):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**levels = {div}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        for k in ("i_shift", "i_scale", "t", "r", "s"):
            d["augment"][k] = list(d["augment"][k])
        sc = d["scenario"]
        for k in ("speed", "radius", "brightness"):
            sc[k] = list(sc[k])
        sc["splits"] = [list(v) for v in sc["splits"]]
        sc["hidden"] = [list(v) for v in sc["hidden"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        nested = {"network": NetworkConfig, "augment": AugmentConfig, "cluster": ClusterParams,
                  "neighborhood": NeighborhoodSpec, "optimizer": OptimizerConfig,
                  "scenario": SyntheticScenario}
        kw = {}
        for k, v in d.items():
            if k in nested:
                sub = nested[k]
                bad = set(v) - {f.name for f in fields(sub)}
                if bad:
                    raise KeyError(f"unknown keys in {k}: {sorted(bad)}")
                for kk, vv in list(v.items()):
                    if isinstance(vv, list) and kk not in ("splits", "hidden"):
                        v[kk] = tuple(vv)
                kw[k] = sub(**v)
            else:
                kw[k] = v
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        profile = d.pop("profile", None)
        if profile is None:
            return cls.from_dict(d)
        return merge(preset(profile), d)


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    d = base.to_dict()
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return RunConfig.from_dict(d)


# ------------------------------------------------------------------ presets

# Elastic deformation: control points every 32 px (8 intervals over a
# 256 px input), each moved by up to 10 px.
_CELL_AUG = dict(i_min=0.2, i_max=0.1, i_shift=(-0.25, 0.25), i_scale=(0.75, 1.25), t=(-25, 25),
                 f_p=0.5, r=(-180, 180), s=(0.75, 1.25), b=10.0, g=32.0, gaussian_sigma=2.0,
                 pad_mode="mirror")

_CELL = {
    # name: (m_pts, c, r_N, i_max)
    "DIC-HeLa": (1000, 0.02, 50.0, 0.1),
    "Fluo-MSC": (500, 0.1, 150.0, 0.01),
    "Fluo-GOWT1": (50, 0.001, 50.0, 0.1),
    "Fluo-SIM+": (100, 0.001, 50.0, 0.01),
    "Fluo-HeLa": (25, 0.01, 25.0, 0.1),
    "PhC-U373": (500, 0.005, 50.0, 0.1),
}


def _cell_preset(name: str) -> RunConfig:
    m_pts, c, r_n, i_max = _CELL[name]
    aug = dict(_CELL_AUG, i_max=i_max)
    return RunConfig(network=NetworkConfig(), augment=AugmentConfig(**aug),
                     cluster=ClusterParams(m_pts=m_pts, c=c), neighborhood=NeighborhoodSpec(radius=r_n),
                     mode="instance_video", seq_len=10, batch=1)


def _cvppp_preset() -> RunConfig:
    aug = AugmentConfig(i_min=0.01, i_max=0.01, t=(-12, 12), f_p=0.5, r=(-180, 180), s=(0.75, 1.25),
                        b=10.0, g=32.0, pad_mode="mirror")
    return RunConfig(network=NetworkConfig(recurrent=False), augment=aug,
                     cluster=ClusterParams(m_pts=50, c=0.001),
                     neighborhood=NeighborhoodSpec(radius=float("inf")),
                     mode="instance_still", seq_len=1, batch=10)


def _lv_preset() -> RunConfig:
    aug = AugmentConfig(i_min=0.1, i_max=0.1, t=(-20, 20), f_p=0.0, r=(-15, 15), s=(0.75, 1.25),
                        b=10.0, g=32.0, pad_mode="zero")
    return RunConfig(network=NetworkConfig(head_mode="class_logits", num_classes=4), augment=aug,
                     mode="semantic", seq_len=10, batch=1)


def _desk_tracking() -> RunConfig:
    """Small CPU-trainable setup on 64x64 synthetic blob videos."""
    net = NetworkConfig(levels=3, channels=16, embedding_dim=8, recurrent=True)
    aug = AugmentConfig(i_min=0.2, i_max=0.1, i_shift=(-0.1, 0.1), i_scale=(0.9, 1.1), t=(-4, 4), f_p=0.5,
                        r=(-180, 180), s=(0.9, 1.1), b=2.0, g=16.0, pad_mode="mirror")
    opt = OptimizerConfig(lr=1e-3, lr_late=1e-4, drop_at=600, iterations=600)
    sc = SyntheticScenario(n_frames=12, height=64, width=64, n_blobs=3, speed=(0.3, 1.0), radius=(6.0, 8.0),
                           noise=0.05)
    return RunConfig(network=net, augment=aug, cluster=ClusterParams(m_pts=20, m_cl_size=20, t_size=10, c=0.02),
                     neighborhood=NeighborhoodSpec(radius=50.0), optimizer=opt, scenario=sc,
                     mode="instance_video", seq_len=4, batch=1, input_size=(64, 64), log_every=50)


def _desk_occlusion(recurrent: bool) -> RunConfig:
    net = NetworkConfig(levels=3, channels=16, head_mode="class_logits", num_classes=2, recurrent=recurrent)
    opt = OptimizerConfig(lr=1e-3, lr_late=1e-4, drop_at=300, iterations=400)
    sc = SyntheticScenario(n_frames=8, height=32, width=32, n_blobs=1, speed=(1.0, 2.0), radius=(4.0, 5.0),
                           noise=0.05, deform=0.0)
    return RunConfig(network=net, augment=AugmentConfig.identity(), optimizer=opt, scenario=sc, mode="semantic",
                     seq_len=8, batch=1, input_size=(32, 32), log_every=50, augment_enabled=False)


PRESETS = {
    **{name: (lambda n=name: _cell_preset(n)) for name in _CELL},
    "CVPPP": _cvppp_preset,
    "LV": _lv_preset,
    "desk": _desk_tracking,
    "desk-occlusion": lambda: _desk_occlusion(True),
    "desk-occlusion-nonrecurrent": lambda: _desk_occlusion(False),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown profile {name!r}; known: {', '.join(PRESETS)}")
    return PRESETS[name]()
