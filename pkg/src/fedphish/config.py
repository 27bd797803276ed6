"""Experiment configuration files: parsing, validation and client building.

Configs are JSON with a strict schema (unknown keys are rejected by name).
Each client lists datasets that are either synthetic recipes or JSONL paths
with explicit train/test index ranges on the shuffled order, so several
clients can share one corpus without coordination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    DataError,
    load_jsonl,
    pair_samples,
    stack_html,
    stack_image,
    stack_pairs,
    stack_url,
    synth_embeddings,
    synth_html,
    synth_image_tokens,
    synth_paired,
)
from .federation import ClientData, TrainConfig
from .heads import LossConfig, ModelSpec
from .preproc import PreprocConfig

__all__ = ["ConfigError", "DatasetSpec", "ClientSpec", "ExperimentConfig",
           "parse_config", "build_clients", "bundled_config_path", "bundled_config_names"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


_TOP_KEYS = {
    "name", "seed", "rounds", "epochs", "lr", "batch_size", "mu", "clip",
    "focal_gamma", "lambda_aux", "lambda_js", "modal_dropout_p",
    "html_weight_by_count", "detach_branches", "optimizer", "workers",
    "model_profile", "preproc", "clients", "out_dir",
}
_CLIENT_KEYS = {"id", "datasets"}
_DATASET_KEYS = {"modality", "synth", "path", "train_range", "test_range",
                 "shuffle_seed", "preshuffled"}
_SYNTH_KEYS = {"kind", "train_n", "test_n", "seed", "separation", "length",
               "informative"}
_PREPROC_KEYS = {"char_len", "word_len", "dom_len", "word_buckets",
                 "dom_buckets", "shuffle_seed"}
_MODALITIES = ("image", "html", "url", "pair")


@dataclass(frozen=True)
class DatasetSpec:
    modality: str
    synth: dict | None = None
    path: str | None = None
    train_range: tuple[int, int] | None = None
    test_range: tuple[int, int] | None = None
    shuffle_seed: int = 42
    preshuffled: bool = False


@dataclass(frozen=True)
class ClientSpec:
    client_id: str
    datasets: tuple[DatasetSpec, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    train: TrainConfig
    model: ModelSpec
    preproc: PreprocConfig
    clients: tuple[ClientSpec, ...]
    workers: int = 1
    out_dir: str = "runs"

    def as_manifest(self) -> dict:
        return {
            "name": self.name,
            "seed": self.train.seed,
            "rounds": self.train.rounds,
            "clients": [c.client_id for c in self.clients],
        }


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key {sorted(unknown)[0]!r}")


def _parse_dataset(obj: dict, where: str) -> DatasetSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: dataset must be an object")
    _reject_unknown(obj, _DATASET_KEYS, where)
    modality = obj.get("modality")
    if modality not in _MODALITIES:
        raise ConfigError(f"{where}: modality must be one of {_MODALITIES}, got {modality!r}")
    synth = obj.get("synth")
    path = obj.get("path")
    if (synth is None) == (path is None):
        raise ConfigError(f"{where}: exactly one of 'synth' or 'path' is required")
    if synth is not None:
        _reject_unknown(synth, _SYNTH_KEYS, f"{where}.synth")
        if "kind" not in synth:
            raise ConfigError(f"{where}.synth: missing 'kind'")
    train_range = obj.get("train_range")
    test_range = obj.get("test_range")
    if path is not None:
        if train_range is None or test_range is None:
            raise ConfigError(f"{where}: path datasets need 'train_range' and 'test_range'")
        train_range = tuple(train_range)
        test_range = tuple(test_range)
    return DatasetSpec(
        modality=modality,
        synth=synth,
        path=path,
        train_range=train_range,
        test_range=test_range,
        shuffle_seed=obj.get("shuffle_seed", 42),
        preshuffled=obj.get("preshuffled", False),
    )


def parse_config(path) -> ExperimentConfig:
    """Load and validate a config file, filling defaults for absent fields."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _reject_unknown(raw, _TOP_KEYS, str(path))

    loss = LossConfig(
        focal_gamma=raw.get("focal_gamma", 2.0),
        lambda_aux=raw.get("lambda_aux", 0.30),
        lambda_js=raw.get("lambda_js", 0.10),
        modal_dropout_p=raw.get("modal_dropout_p", 0.20),
    )
    mu = raw.get("mu", 0.0)
    if mu < 0:
        raise ConfigError("mu must be non-negative")
    train = TrainConfig(
        rounds=raw.get("rounds", 100),
        epochs=raw.get("epochs", 5),
        lr=raw.get("lr", 0.001),
        batch_size=raw.get("batch_size", 64),
        mu=mu,
        clip=raw.get("clip", 1.0),
        loss=loss,
        optimizer=raw.get("optimizer", "adam"),
        html_weight_by_count=raw.get("html_weight_by_count", False),
        detach_branches=raw.get("detach_branches", False),
        seed=raw.get("seed", 42),
    )
    if train.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {train.optimizer!r}")

    preproc_raw = raw.get("preproc", {})
    _reject_unknown(preproc_raw, _PREPROC_KEYS, "preproc")
    preproc = PreprocConfig(**preproc_raw) if preproc_raw else PreprocConfig()

    profile = raw.get("model_profile", "paper")
    if profile == "paper":
        model = ModelSpec.paper()
    elif profile == "desk":
        model = ModelSpec.desk()
    elif profile == "desk_pages":
        model = ModelSpec.desk_pages(
            word_buckets=preproc.word_buckets, dom_buckets=preproc.dom_buckets
        )
    else:
        raise ConfigError(f"model_profile must be paper, desk or desk_pages, got {profile!r}")

    clients_raw = raw.get("clients")
    if not clients_raw:
        raise ConfigError("config needs at least one client")
    clients = []
    seen = set()
    for i, cobj in enumerate(clients_raw):
        where = f"clients[{i}]"
        if not isinstance(cobj, dict):
            raise ConfigError(f"{where}: client must be an object")
        _reject_unknown(cobj, _CLIENT_KEYS, where)
        cid = cobj.get("id")
        if not cid or not isinstance(cid, str):
            raise ConfigError(f"{where}: missing string 'id'")
        if cid in seen:
            raise ConfigError(f"duplicate client id {cid!r}")
        seen.add(cid)
        datasets = cobj.get("datasets")
        if not datasets:
            raise ConfigError(f"{where}: needs at least one dataset")
        specs = tuple(_parse_dataset(d, f"{where}.datasets[{j}]") for j, d in enumerate(datasets))
        clients.append(ClientSpec(client_id=cid, datasets=specs))
        for spec in specs:
            if spec.path is not None and not Path(spec.path).exists():
                raise ConfigError(f"{where}: referenced path does not exist: {spec.path}")

    return ExperimentConfig(
        name=raw.get("name", path.stem),
        train=train,
        model=model,
        preproc=preproc,
        clients=tuple(clients),
        workers=raw.get("workers", 1),
        out_dir=raw.get("out_dir", "runs"),
    )


# ---------------------------------------------------------------------------
# turning specs into client shards
# ---------------------------------------------------------------------------

def _synth_split(spec: DatasetSpec, cfg: ExperimentConfig):
    s = spec.synth
    kind = s["kind"]
    train_n = s.get("train_n", 32)
    test_n = s.get("test_n", 32)
    seed = s.get("seed", 0)
    total = train_n + test_n
    if kind == "embeddings":
        sep = s.get("separation", 4.0)
        samples = synth_embeddings(total, dim=cfg.model.url.in_dim, separation=sep, seed=seed)
    elif kind == "image_tokens":
        sep = s.get("separation", 4.0)
        samples = synth_image_tokens(
            total, length=s.get("length", 4), dim=cfg.model.image.d_model,
            separation=sep, seed=seed,
        )
    elif kind == "html":
        samples = synth_html(
            total, seed=seed, informative=s.get("informative", True),
            preproc_cfg=cfg.preproc,
        )
    elif kind == "paired":
        samples = synth_paired(
            total, seed=seed, image_length=s.get("length", 4),
            image_dim=cfg.model.image.d_model,
            separation=s.get("separation", 8.0), preproc_cfg=cfg.preproc,
        )
    else:
        raise ConfigError(f"unknown synth kind {kind!r}")
    return samples[:train_n], samples[train_n:]


def _path_split(spec: DatasetSpec, cfg: ExperimentConfig):
    import numpy as np

    modality = "url" if spec.modality == "pair" else spec.modality
    samples = load_jsonl(
        spec.path, modality, preproc_cfg=cfg.preproc,
        embed_dim=cfg.model.url.in_dim if modality == "url" else cfg.model.image.d_model,
    )
    order = np.arange(len(samples))
    if not spec.preshuffled:
        order = np.random.default_rng(spec.shuffle_seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]

    def take(rng_pair, what):
        start, stop = rng_pair
        if not (0 <= start <= stop <= len(shuffled)):
            raise DataError(
                f"{spec.path}: {what} range [{start}, {stop}) does not fit "
                f"{len(shuffled)} samples"
            )
        return shuffled[start:stop]

    return take(spec.train_range, "train"), take(spec.test_range, "test")


_STACKERS = {"image": stack_image, "html": stack_html, "url": stack_url, "pair": stack_pairs}


def build_clients(cfg: ExperimentConfig) -> list[ClientData]:
    """Materialize every client's train and validation arrays."""
    clients = []
    for cspec in cfg.clients:
        train: dict = {}
        val: dict = {}
        for dspec in cspec.datasets:
            if dspec.modality == "pair" and dspec.path is not None:
                raise ConfigError(
                    f"client {cspec.client_id}: paired data from paths is not "
                    "supported; pair image and html files upstream or use synth"
                )
            tr, te = (_synth_split if dspec.synth is not None else _path_split)(dspec, cfg)
            stack = _STACKERS[dspec.modality]
            if dspec.modality in train:
                raise ConfigError(
                    f"client {cspec.client_id}: duplicate {dspec.modality} dataset"
                )
            if tr:
                train[dspec.modality] = stack(tr)
            if te:
                val[dspec.modality] = stack(te)
        clients.append(ClientData(client_id=cspec.client_id, train=train, val=val))
    return clients


# ---------------------------------------------------------------------------
# bundled scenario configs
# ---------------------------------------------------------------------------

def bundled_config_path(name: str) -> Path:
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def bundled_config_names() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "configs").glob("*.json"))
