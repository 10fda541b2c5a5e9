import hashlib
import json
from enum import Enum
from typing import Annotated, Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Bucket(str, Enum):
    TAIL = 'tail'
    TORSO = 'torso'
    HEAD = 'head'


class Ablation(str, Enum):
    WORD_ONLY = 'word_only'
    JOINT = 'joint'
    JOINT_PLUS_CM = 'joint_plus_cm'


class CMMode(str, Enum):
    LITERAL = 'literal'
    SHIFTED = 'shifted'


def bucket_for(frequency: int) -> Bucket:
    """1 → tail, 2..100 → torso, >100 → head."""
    if frequency < 1:
        raise ValueError(f"query frequency must be >= 1, got {frequency}")
    if frequency == 1:
        return Bucket.TAIL
    if frequency <= 100:
        return Bucket.TORSO
    return Bucket.HEAD


class _Config(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


# --- configuration models ---------------------------------------------------

class GeneratorConfig(_Config):
    num_l1: int = Field(33, gt=0)
    num_leaves: int = Field(200, gt=0)
    vocab_size: int = Field(2000, gt=0)
    num_queries: int = Field(20000, gt=0)
    zipf_exponent: float = Field(1.2, gt=0)
    correlation_strength: float = Field(0.7, ge=0, le=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _every_group_has_a_leaf(self):
        if self.num_leaves < self.num_l1:
            raise ValueError(f"num_leaves ({self.num_leaves}) < num_l1 ({self.num_l1})")
        return self


class SplitConfig(_Config):
    per_bucket: int = Field(200, gt=0)
    valid_fraction: float = Field(0.25, gt=0, lt=1)
    min_freq: int = Field(2, ge=1)
    seed: int = Field(0, ge=0)


class ModelConfig(_Config):
    vocab_size: int = Field(gt=2)
    num_categories: int = Field(gt=0)
    embed_dim: int = Field(100, gt=0)
    max_len: int = Field(10, gt=0)
    conv_layers: int = Field(3, gt=0)
    kernel_width: int = Field(3, gt=0)
    num_heads: int = Field(10, gt=0)
    head_dim: int = Field(10, gt=0)
    init_scale: float = Field(0.05, gt=0)

    @field_validator('kernel_width')
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError('kernel_width must be odd for same padding')
        return v

    @property
    def d_model(self) -> int:
        return self.num_heads * self.head_dim


class LossConfig(_Config):
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(1.0, ge=0)
    cm_mode: CMMode = CMMode.SHIFTED
    # diagnostic: the classification loss as printed, positive term only
    positive_only: bool = False

    @model_validator(mode='after')
    def _some_weight(self):
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError('lambda1 + lambda2 must be > 0')
        return self


class TrainConfig(_Config):
    learning_rate: float = Field(0.001, gt=0)
    batch_size: int = Field(64, ge=1)
    dropout: float = Field(0.5, ge=0, lt=1)
    epochs: int = Field(20, ge=1)
    seed: int = Field(0, ge=0)
    threshold: float = Field(0.5, gt=0, lt=1)
    ablation: Ablation = Ablation.JOINT_PLUS_CM
    loss_cfg: LossConfig = LossConfig()


class EvalConfig(_Config):
    ks: List[int] = [1, 3, 5]
    threshold: float = Field(0.5, gt=0, lt=1)
    minority_m: int = Field(8, ge=1)
    bucket_k: int = Field(3, ge=1)
    l1_map_k: int = Field(3, ge=1)
    batch_size: int = Field(256, ge=1)

    @field_validator('ks')
    @classmethod
    def _positive_ks(cls, v: List[int]) -> List[int]:
        if not v or any(k < 1 for k in v):
            raise ValueError('ks must be a nonempty list of integers >= 1')
        return sorted(set(v))


class BaselineConfig(_Config):
    epochs: int = Field(10, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    reg: float = Field(1e-4, ge=0)
    seed: int = Field(0, ge=0)


# --- data models ------------------------------------------------------------

class QueryRecord(BaseModel):
    raw_text: str
    categories: List[int] = Field(min_length=1)
    frequency: int = Field(ge=1)
    bucket: Optional[Bucket] = None
    tokens: Optional[List[int]] = None

    @field_validator('categories')
    @classmethod
    def _sorted_unique(cls, v: List[int]) -> List[int]:
        if any(c < 0 for c in v):
            raise ValueError('category ids must be non-negative')
        return sorted(set(v))

    @model_validator(mode='after')
    def _bucket_matches_frequency(self):
        expected = bucket_for(self.frequency)
        if self.bucket is None:
            self.bucket = expected
        elif self.bucket != expected:
            raise ValueError(f"bucket {self.bucket.value} inconsistent with frequency {self.frequency}")
        return self


class CategoryNode(BaseModel):
    id: int
    name: str


class LeafNode(CategoryNode):
    parent: int


class Taxonomy(BaseModel):
    l1_nodes: List[CategoryNode]
    leaves: List[LeafNode]

    @model_validator(mode='after')
    def _dense_ids(self):
        if [n.id for n in self.l1_nodes] != list(range(len(self.l1_nodes))):
            raise ValueError('L1 ids must be dense 0..n-1 in order')
        if [n.id for n in self.leaves] != list(range(len(self.leaves))):
            raise ValueError('leaf ids must be dense 0..|C|-1 in order')
        for leaf in self.leaves:
            if not 0 <= leaf.parent < len(self.l1_nodes):
                raise ValueError(f"leaf {leaf.id} has unknown parent {leaf.parent}")
        return self

    @property
    def num_leaves(self) -> int:
        return len(self.leaves)

    @property
    def num_l1(self) -> int:
        return len(self.l1_nodes)

    def parent_of(self, leaf_id: int) -> int:
        return self.leaves[leaf_id].parent

    def parents(self) -> List[int]:
        return [leaf.parent for leaf in self.leaves]

    def leaf_name(self, leaf_id: int) -> str:
        return self.leaves[leaf_id].name

    def fingerprint(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()


class CheckpointMeta(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    format_version: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    vocab_hash: str
    taxonomy_hash: str
    vocab_tokens: List[str]
    cm_mode: CMMode
    ablation: Ablation
    best_epoch: int = 0
    valid_micro_f1: float = 0.0
    config: Dict[str, Any] = {}


# --- evaluation report ------------------------------------------------------

Unit = Annotated[float, Field(ge=0, le=1)]


class RankAtK(BaseModel):
    precision: Unit
    recall: Unit
    f1: Unit
    map: Unit


class L1Report(BaseModel):
    macro_f1: Unit
    micro_f1: Unit
    map_at_k: Unit
    k: int
    minority_macro_f1: Optional[float] = None


class EvalReport(BaseModel):
    schema_version: int = 1
    model: str = 'deepcat'
    num_queries: int
    at_k: Dict[str, RankAtK]
    macro_f1: Unit
    micro_f1: Unit
    bucket_f1: Dict[str, float] = {}
    bucket_k: int = 3
    minority_m: int = 8
    minority_macro_f1: Optional[float] = None
    l1: Optional[L1Report] = None
    flagged_classes: List[int] = []
    config: Dict[str, Any] = {}
