"""Run configuration: JSON sections with documented defaults and strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 32
    n_blocks: int = 3
    d_ff: int = 64
    max_len: int = 64
    sigma: float = 0.4
    n_noise_layers: int = 3
    noise_sites: Optional[list] = None  # overrides n_noise_layers when given
    dtype: str = "float32"


@dataclass
class TrainSection:
    M: int = 2
    nu: int = 1
    beta: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    normalize_grad: bool = False
    mask_strategy: str = "gradient"


@dataclass
class InferSection:
    M: int = 2
    N: Optional[int] = None  # None means 2*M
    k0: int = 5
    k1: int = 50
    alpha: float = 0.98
    nu: int = 1
    mode: str = "logit_average"


@dataclass
class AttackSection:
    strategy: str = "greedy"
    budget: int = 3000
    max_candidates: int = 8
    sample: int = 500


@dataclass
class DataSection:
    synthetic: bool = True
    n_train: int = 2000
    n_test: int = 500
    vocab_size: int = 200
    class_count: int = 2
    data_seed: int = 1
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    vocab_path: Optional[str] = None
    synonyms_path: Optional[str] = None


@dataclass
class AblateSection:
    m_values: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    k_values: list = field(default_factory=lambda: [1, 5, 10, 50])


@dataclass
class SweepSection:
    sigma: list = field(default_factory=lambda: [0.1, 0.2, 0.4])
    M: list = field(default_factory=lambda: [2])
    n_noise_layers: list = field(default_factory=lambda: [3])


@dataclass
class StabilitySection:
    runs: int = 100
    n_examples: int = 200


SECTIONS = {
    "model": ModelSection,
    "train": TrainSection,
    "infer": InferSection,
    "attack": AttackSection,
    "data": DataSection,
    "ablate": AblateSection,
    "sweep": SweepSection,
    "stability": StabilitySection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferSection = field(default_factory=InferSection)
    attack: AttackSection = field(default_factory=AttackSection)
    data: DataSection = field(default_factory=DataSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            sub = doc.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = sorted(set(sub) - allowed)
            if bad:
                raise ConfigError(f"unknown config key(s) in {name!r}: {', '.join(bad)}")
            kwargs[name] = klass(**sub)
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = cls(seed=seed, **kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        m, t, i, a = self.model, self.train, self.infer, self.attack
        checks = [
            (m.d_model > 0 and m.d_model % 2 == 0, "model.d_model must be a positive even integer"),
            (m.n_blocks >= 0, "model.n_blocks must be >= 0"),
            (m.sigma >= 0, "model.sigma must be >= 0"),
            (m.dtype in ("float32", "float64"), "model.dtype must be float32 or float64"),
            (t.M >= 0 and t.nu >= 1 and t.beta >= 0, "train needs M >= 0, nu >= 1, beta >= 0"),
            (t.epochs >= 0 and t.batch_size >= 1, "train needs epochs >= 0, batch_size >= 1"),
            (t.mask_strategy in ("gradient", "random"), "train.mask_strategy must be gradient or random"),
            (1 <= i.k0 <= i.k1, "infer needs 1 <= k0 <= k1"),
            (0 < i.alpha < 1, "infer.alpha must lie in (0, 1)"),
            (i.M >= 0 and (i.N is None or i.N >= i.M), "infer needs 0 <= M <= N"),
            (i.mode in ("logit_average", "majority"), "infer.mode must be logit_average or majority"),
            (a.strategy in ("greedy", "pwws"), "attack.strategy must be greedy or pwws"),
            (a.budget >= 1 and a.sample >= 1, "attack needs budget >= 1 and sample >= 1"),
            (self.data.synthetic or (self.data.train_path and self.data.vocab_path),
             "data needs synthetic=true or train_path and vocab_path"),
            (self.stability.runs >= 2, "stability.runs must be >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
