"""Flat run configuration: JSON file plus ``KEY=VALUE`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from kgetm.baselines import KnnConfig
from kgetm.node2vec import WalkConfig
from kgetm.synthetic import CorpusGenConfig, GraphGenConfig
from kgetm.trainer import VARIANTS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # training
    variant: str = "full"
    lr: float = 0.01
    weight_decay: float = 1.2e-6
    batch_size: int = 512
    epochs: int = 10
    n_topics: int = 100
    dim: int = 256
    hidden: int = 128
    trunk_layers: int = 1
    n_layers: int = 3
    n_heads: int = 4
    negative_slope: float = 0.2
    shared_alpha: bool = False
    beta_per_epoch: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    no_init_scale: float = 0.1
    # node2vec (dimension is ``dim``)
    walk_p: float = 1.0
    walk_q: float = 1.0
    walk_length: int = 40
    walks_per_node: int = 10
    walk_window: int = 5
    walk_negatives: int = 5
    walk_epochs: int = 5
    walk_lr: float = 0.025
    walk_batch_size: int = 1024
    # data split
    split_train: float = 0.6
    split_valid: float = 0.3
    split_test: float = 0.1
    # metrics
    tc_top: int = 3
    td_top: int = 3
    top_k: int = 5
    binned_k: int = 30
    n_bins: int = 5
    min_atc: int = 5
    distance_top: int = 10
    impute_top: int = 30
    export_top: int = 5
    tc_reference: str = "test"
    # baselines
    knn_k_grid: list = field(default_factory=lambda: [100, 200, 500, 1000, 5000])
    knn_metric_grid: list = field(default_factory=lambda: ["manhattan", "minkowski"])
    knn_minkowski_p: float = 2.0
    # ablation
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ablation_variants: list = field(default_factory=lambda: list(VARIANTS))
    # synthetic data
    synth_chapters: int = 8
    synth_icd_leaves: int = 200
    synth_atc_leaves: int = 100
    synth_links_per_drug: int = 2
    synth_docs: int = 2000
    synth_topics: int = 5
    synth_min_tokens: int = 20
    synth_max_tokens: int = 60
    synth_icd_fraction: float = 0.6
    synth_concentration: float = 0.3
    synth_leaf_smoothness: float = 5.0
    synth_background: float = 0.02
    # input paths; empty means the run directory's data/ files
    hierarchy: str = ""
    cross_links: str = ""
    vocab: str = ""
    corpus: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.tc_reference not in ("test", "train", "valid"):
            raise ConfigError("tc_reference must be test, train or valid")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        return cls.from_dict(data)

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``KEY=VALUE`` strings, parsing each value by the key's current type."""
        data = dataclasses.asdict(self)
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            key, raw = item.split("=", 1)
            if key not in data:
                raise ConfigError(f"unknown configuration key: {key}")
            data[key] = _parse(raw, data[key], key)
        return RunConfig.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def walk_config(self) -> WalkConfig:
        return WalkConfig(p=self.walk_p, q=self.walk_q, walk_length=self.walk_length,
                          walks_per_node=self.walks_per_node, window=self.walk_window,
                          negatives=self.walk_negatives, dim=self.dim, epochs=self.walk_epochs,
                          lr=self.walk_lr, batch_size=self.walk_batch_size, seed=self.seed)

    def knn_config(self) -> KnnConfig:
        return KnnConfig(tuple(int(k) for k in self.knn_k_grid), tuple(self.knn_metric_grid), self.knn_minkowski_p)

    def graph_gen_config(self) -> GraphGenConfig:
        return GraphGenConfig(self.synth_chapters, self.synth_icd_leaves, self.synth_atc_leaves,
                              self.synth_links_per_drug, self.seed)

    def corpus_gen_config(self) -> CorpusGenConfig:
        return CorpusGenConfig(self.synth_docs, self.synth_topics, self.synth_min_tokens, self.synth_max_tokens,
                               self.synth_icd_fraction, self.synth_concentration, self.synth_leaf_smoothness,
                               self.synth_background)

    @property
    def ratio(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_valid, self.split_test)

    def eval_kwargs(self) -> dict:
        return dict(s=self.tc_top, r=self.td_top, k=self.top_k, binned_k=self.binned_k,
                    n_bins=self.n_bins, min_atc=self.min_atc)


def _parse(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            return [_parse(x, current[0], key) if current else x for x in raw.split(",") if x]
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
