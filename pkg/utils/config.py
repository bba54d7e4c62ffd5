"""Run configuration: one TOML file, validated, with CLI flag overrides.

API keys are never read from here; backends take them from the environment.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, FilePath, ValidationError, model_validator

from utils.encoder import EncoderConfig
from utils.errors import UsageError
from utils.llm_gateway import (
    DEFAULT_CHAT_MODEL,
    DEFAULT_SYSTEM_TEXT,
    CachedBackend,
    ChatSettings,
    OpenAIChatBackend,
    RateLimiter,
    ReplayCache,
    majority_label_mock,
)
from utils.memory import CachedEmbedder, HashingEmbedder, NodeVectorTable, OpenAIEmbedder
from utils.reasoner import LINK_TASK, NODE_TASK, ExamplePolicy, TaskSpec

NODE_TOP_K = 8
LINK_TOP_K = 15
LINK_TOP_K_LLAMA = 5


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Section):
    nodes: FilePath
    edges: FilePath
    task: Literal["node-classification", "link-prediction"]
    node_types: tuple[str, ...] | None = None
    target_type: str | None = None
    src_type: str | None = None
    dst_type: str | None = None
    options: tuple[str, ...] | None = None
    ratios: tuple[float, float, float] | None = None

    @model_validator(mode="after")
    def _link_types(self):
        if self.task == LINK_TASK and not (self.src_type and self.dst_type):
            raise ValueError("link-prediction needs dataset.src_type and dataset.dst_type")
        return self

    def split_ratios(self) -> tuple[float, float, float]:
        if self.ratios:
            return self.ratios
        return (0.6, 0.2, 0.2) if self.task == NODE_TASK else (0.8, 0.1, 0.1)


class EncoderSettings(_Section):
    hops: int = Field(1, ge=1)
    top_k: int | None = Field(None, ge=0)
    attribute_keys_target: tuple[str, ...] | None = None
    attribute_keys_neighbor: tuple[str, ...] | None = None
    neighbor_labels: bool = False
    target_char_budget: int = Field(1200, ge=4)
    neighbor_char_budget: int = Field(300, ge=4)


class MemorySettings(_Section):
    provenance: Literal["lm", "gnn"] = "lm"
    provider: Literal["openai", "hashing"] = "openai"
    model: str = "text-embedding-ada-002"
    base_url: str | None = None
    api_key_env: str = "GRAPH_AGENT_EMBED_API_KEY"
    dim: int = Field(256, ge=2)
    gnn_vectors: FilePath | None = None
    concurrency: int = Field(8, ge=1)
    batch_size: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _gnn_source(self):
        if self.provenance == "gnn" and self.gnn_vectors is None:
            raise ValueError("memory.provenance = 'gnn' needs memory.gnn_vectors")
        return self


class BackendSettings(_Section):
    provider: Literal["openai", "majority-mock"] = "openai"
    model: str = DEFAULT_CHAT_MODEL
    base_url: str | None = None
    api_key_env: str = "GRAPH_AGENT_CHAT_API_KEY"
    requests_per_minute: int | None = Field(None, ge=1)
    max_retries: int = Field(3, ge=1)
    temperature: float = Field(0.0, ge=0)
    max_output_tokens: int = Field(1024, ge=1)
    system_text: str = DEFAULT_SYSTEM_TEXT
    cache_mode: Literal["record", "replay", "passthrough"] = "record"
    cache_dir: Path | None = None


class RunSettings(_Section):
    seed: int = 0
    workers: int = Field(4, ge=1)
    method: Literal["graph-agent", "simple-ask", "kshot-cot"] = "graph-agent"
    output_dir: Path = Path("runs/latest")
    reuse_reasons: bool = False


class RunConfig(_Section):
    dataset: DatasetConfig
    encoder: EncoderSettings = EncoderSettings()
    memory: MemorySettings = MemorySettings()
    backend: BackendSettings = BackendSettings()
    policy: ExamplePolicy = ExamplePolicy()
    run: RunSettings = RunSettings()

    @property
    def store_dir(self) -> Path:
        return self.run.output_dir / "store"

    @property
    def cache_dir(self) -> Path:
        return self.backend.cache_dir or self.run.output_dir / "cache"

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def _explain(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a config mapping; relative input paths resolve against base_dir."""
    if base_dir is not None:
        ds = dict(data.get("dataset", {}))
        for key in ("nodes", "edges"):
            if key in ds and not Path(ds[key]).is_absolute():
                ds[key] = str(base_dir / ds[key])
        mem = dict(data.get("memory", {}))
        if mem.get("gnn_vectors") and not Path(mem["gnn_vectors"]).is_absolute():
            mem["gnn_vectors"] = str(base_dir / mem["gnn_vectors"])
        data = {**data, "dataset": ds, "memory": mem}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise UsageError(f"invalid config: {_explain(e)}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: {e}") from None
    return parse_config(data, path.parent)


_FLAG_FIELDS = {
    "seed": ("run", "seed"),
    "workers": ("run", "workers"),
    "method": ("run", "method"),
    "output_dir": ("run", "output_dir"),
    "hops": ("encoder", "hops"),
    "top_k": ("encoder", "top_k"),
    "provenance": ("memory", "provenance"),
    "cache_mode": ("backend", "cache_mode"),
}


def apply_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Flags win over file values; None means "not given"."""
    data = cfg.model_dump(mode="json")
    for name, value in flags.items():
        if value is None:
            continue
        if name not in _FLAG_FIELDS:
            raise UsageError(f"unknown override {name!r}")
        section, key = _FLAG_FIELDS[name]
        data[section][key] = str(value) if isinstance(value, Path) else value
    return parse_config(data)


# -- Factories --
def default_top_k(task: str, model: str) -> int:
    if task == NODE_TASK:
        return NODE_TOP_K
    return LINK_TOP_K_LLAMA if "llama" in model.lower() else LINK_TOP_K


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    enc = cfg.encoder
    top_k = enc.top_k if enc.top_k is not None else default_top_k(cfg.dataset.task, cfg.backend.model)
    return EncoderConfig(
        hops=enc.hops,
        top_k=top_k,
        attribute_keys_target=enc.attribute_keys_target,
        attribute_keys_neighbor=enc.attribute_keys_neighbor,
        neighbor_labels=enc.neighbor_labels,
        target_char_budget=enc.target_char_budget,
        neighbor_char_budget=enc.neighbor_char_budget,
    )


def task_spec(cfg: RunConfig, options=()) -> TaskSpec:
    return TaskSpec(cfg.dataset.task, tuple(options), cfg.policy, encoder_config(cfg))


def chat_settings(cfg: RunConfig) -> ChatSettings:
    b = cfg.backend
    return ChatSettings(b.model, b.temperature, b.max_output_tokens, b.system_text)


def build_embedder(cfg: RunConfig):
    m = cfg.memory
    if m.provenance == "gnn":
        return NodeVectorTable.read(m.gnn_vectors)
    if m.provider == "hashing":
        return HashingEmbedder(m.dim)
    cache = ReplayCache(cfg.cache_dir / "embeddings", cfg.backend.cache_mode)
    return CachedEmbedder(
        cache,
        lambda: OpenAIEmbedder(model=m.model, base_url=m.base_url, api_key_env=m.api_key_env),
        model=m.model,
    )


def build_backend(cfg: RunConfig):
    """Chat backend wrapped in the replay cache; the remote client is only built on a cache miss."""
    b = cfg.backend
    if b.provider == "majority-mock":
        def factory():
            return majority_label_mock()
    else:
        limiter = RateLimiter(b.requests_per_minute)

        def factory():
            return OpenAIChatBackend(
                base_url=b.base_url, api_key_env=b.api_key_env,
                rate_limiter=limiter, max_retries=b.max_retries,
            )
    return CachedBackend(ReplayCache(cfg.cache_dir, b.cache_mode), factory)

