"""Role-aware FedProx orchestration.

The server groups every parameter into a role bucket by name prefix and
aggregates each bucket only over the clients that own that role, weighted
per role (sample counts, or equal weight for html). Buckets nobody can
aggregate keep their old values. Clients train each present head locally
with a focal loss plus the proximal pull toward the broadcast snapshot, and
run a paired fusion phase with batch-level modality dropout.

Everything is deterministic: client RNG streams are seeded by (global seed,
client index, round), sums run in sorted client order, and the worker count
changes wall time only.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .heads import (
    FUSION_PREFIX,
    HTML_PREFIX,
    IMAGE_PREFIX,
    URL_PREFIX,
    LossConfig,
    ModelSpec,
    focal_loss,
    js_consistency,
    proximal_term,
)
from .metrics import Metrics, RoundEntry, RoundLog, compute_metrics, confusion
from .numerics import Tensor, backward, clip_global_norm, make_optimizer, zero_grads

__all__ = [
    "Role",
    "ClientReport",
    "ClientData",
    "TrainConfig",
    "ExperimentResult",
    "group_of",
    "select_clients",
    "role_weight",
    "aggregate",
    "client_train",
    "client_evaluate",
    "run_experiment",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

_PREFIX_TO_ROLE = {
    IMAGE_PREFIX: "image",
    HTML_PREFIX: "html",
    URL_PREFIX: "url",
    FUSION_PREFIX: "fusion",
}

CHECKPOINT_MAGIC = b"FPCK"


class Role(enum.Enum):
    IMAGE = "image"
    HTML = "html"
    URL = "url"
    FUSION = "fusion"
    SHARED = "shared"


def group_of(param_name: str) -> Role:
    """Longest-prefix match against the four head prefixes; shared otherwise."""
    if not param_name:
        raise ValueError("empty parameter name")
    for prefix, role in _PREFIX_TO_ROLE.items():
        if param_name.startswith(prefix):
            return Role(role)
    return Role.SHARED


@dataclass
class ClientReport:
    """One client's returned parameters plus counts, capability flags and a
    small training-metrics snapshot."""

    client_id: str
    params: dict[str, np.ndarray]
    n_total: int = 0
    n_image: int = 0
    n_html: int = 0
    n_url: int = 0
    n_pair: int = 0
    has_image: bool = False
    has_html: bool = False
    has_url: bool = False
    has_fusion: bool = False
    train_loss: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def from_counts(client_id: str, params: dict[str, np.ndarray], *, n_image=0,
                    n_html=0, n_url=0, n_pair=0,
                    train_loss: dict[str, float] | None = None) -> "ClientReport":
        """Derive the has_* flags from the counts (has_X iff n_X > 0).

        A paired sample counts into both n_image and n_html but only once
        into n_total.
        """
        return ClientReport(
            client_id=client_id,
            params=params,
            n_total=n_image + n_html + n_url - n_pair,
            n_image=n_image,
            n_html=n_html,
            n_url=n_url,
            n_pair=n_pair,
            has_image=n_image > 0,
            has_html=n_html > 0,
            has_url=n_url > 0,
            has_fusion=n_pair > 0,
            train_loss=train_loss or {},
        )

    def has_role(self, role: Role) -> bool:
        if role is Role.SHARED:
            return True
        return getattr(self, f"has_{role.value}")


@dataclass
class ClientData:
    """One simulated client's local shards, already stacked into arrays.

    train/val keys: "image" {x, y}, "html" {char, word, dom, y},
    "url" {x, y}, "pair" {img_x, char, word, dom, y}.
    """

    client_id: str
    train: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    val: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def count(self, kind: str) -> int:
        if kind not in self.train:
            return 0
        return len(self.train[kind]["y"])

    @property
    def n_image(self) -> int:
        # pairs overlap: a paired sample owns an image payload too
        return self.count("image") + self.count("pair")

    @property
    def n_html(self) -> int:
        return self.count("html") + self.count("pair")

    @property
    def n_url(self) -> int:
        return self.count("url")

    @property
    def n_pair(self) -> int:
        return self.count("pair")

    @property
    def n_total(self) -> int:
        return self.count("image") + self.count("html") + self.count("url") + self.count("pair")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 100
    epochs: int = 5
    lr: float = 0.001
    batch_size: int = 64
    mu: float = 0.0
    clip: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    html_weight_by_count: bool = False  # equal weight by default, switchable to n_html
    detach_branches: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1:
            raise ValueError("rounds and epochs must be at least 1")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------

def select_clients(role: Role, reports: list[ClientReport]) -> list[ClientReport]:
    """Clients owning this role, in sorted client-id order; shared selects all."""
    return sorted(
        (r for r in reports if r.has_role(role)), key=lambda r: r.client_id
    )


def role_weight(role: Role, report: ClientReport, cfg: TrainConfig | None = None) -> float:
    """Aggregation weight of one selected client for one role."""
    if role is Role.IMAGE:
        return float(report.n_image)
    if role is Role.HTML:
        if cfg is not None and cfg.html_weight_by_count:
            return float(report.n_html)
        return 1.0
    if role is Role.URL:
        return float(report.n_url)
    if role is Role.FUSION:
        if report.n_pair > 0:
            return float(report.n_pair)
        return float(min(report.n_image, report.n_html))
    return float(report.n_total)


def _finite_reports(reports: list[ClientReport]) -> list[ClientReport]:
    ok = []
    for r in reports:
        if all(np.isfinite(v).all() for v in r.params.values()):
            ok.append(r)
        else:
            log.warning("excluding client %s: non-finite parameters in report", r.client_id)
    return ok


def aggregate(
    global_params: dict[str, np.ndarray],
    reports: list[ClientReport],
    cfg: TrainConfig | None = None,
) -> dict[str, np.ndarray]:
    """Role-wise weighted average; a role with no owners keeps the old value.

    Parameters kept unchanged are returned as the same array objects, so
    role isolation is bitwise by construction. Weighted sums run in sorted
    client-id order for reproducibility.
    """
    reports = _finite_reports(reports)
    role_pool: dict[Role, list[tuple[float, ClientReport]]] = {}
    for role in Role:
        selected = select_clients(role, reports)
        weighted = [(role_weight(role, r, cfg), r) for r in selected]
        # zero-weight clients are treated as non-owners
        role_pool[role] = [(w, r) for w, r in weighted if w > 0]

    new_params: dict[str, np.ndarray] = {}
    for name in sorted(global_params):
        pool = role_pool[group_of(name)]
        if not pool:
            new_params[name] = global_params[name]
            continue
        total = sum(w for w, _ in pool)
        acc = np.zeros_like(global_params[name])
        for w, r in pool:
            if name not in r.params:
                raise ValueError(f"client {r.client_id} report is missing {name!r}")
            acc += (w / total) * r.params[name]
        new_params[name] = acc
    return new_params


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _head_param_names(params: dict[str, Tensor], prefixes) -> list[str]:
    if isinstance(prefixes, str):
        prefixes = (prefixes,)
    return [k for k in params if k.startswith(tuple(prefixes))]


def _step(params, names, optimizer, clip):
    grads = [params[k].grad for k in sorted(names) if params[k].grad is not None]
    if grads:
        clip_global_norm(grads, clip)
        optimizer.step(names)


_MODALITY_PHASES = (  # training order fixed: image, html, url
    ("image", IMAGE_PREFIX),
    ("html", HTML_PREFIX),
    ("url", URL_PREFIX),
)


def client_train(
    data: ClientData,
    broadcast: dict[str, np.ndarray],
    model: ModelSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ClientReport:
    """Local training from the broadcast snapshot; returns the new parameters
    with sample counts. The broadcast also serves as the proximal anchor."""
    if not data.train:
        raise ValueError(f"client {data.client_id} has no training data")
    heads = model.heads()
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in broadcast.items()}
    snapshot = broadcast
    optimizer = make_optimizer(cfg.optimizer, params, cfg.lr)
    loss_cfg = cfg.loss
    loss_sums: dict[str, float] = {}
    loss_counts: dict[str, int] = {}

    def forward_for(kind: str, arrays, idx):
        if kind == "image":
            return heads["image"].forward(params, arrays["x"][idx], train=True, rng=rng)
        if kind == "html":
            return heads["html"].forward(
                params, arrays["char"][idx], arrays["word"][idx], arrays["dom"][idx],
                train=True, rng=rng,
            )
        return heads["url"].forward(params, arrays["x"][idx], train=True, rng=rng)

    for _ in range(cfg.epochs):
        for kind, prefix in _MODALITY_PHASES:
            if kind not in data.train:
                continue
            arrays = data.train[kind]
            for idx in _batches(len(arrays["y"]), cfg.batch_size, rng):
                zero_grads(params)
                logits = forward_for(kind, arrays, idx)
                loss = focal_loss(logits, arrays["y"][idx], loss_cfg.focal_gamma)
                loss = loss + proximal_term(params, snapshot, cfg.mu, prefix)
                backward(loss)
                _step(params, _head_param_names(params, prefix), optimizer, cfg.clip)
                loss_sums[kind] = loss_sums.get(kind, 0.0) + float(loss.data)
                loss_counts[kind] = loss_counts.get(kind, 0) + 1

        if "pair" in data.train:
            arrays = data.train["pair"]
            for idx in _batches(len(arrays["y"]), cfg.batch_size, rng):
                zero_grads(params)
                labels = arrays["y"][idx]
                l_i = heads["image"].forward(params, arrays["img_x"][idx], train=True, rng=rng)
                l_h = heads["html"].forward(
                    params, arrays["char"][idx], arrays["word"][idx], arrays["dom"][idx],
                    train=True, rng=rng,
                )
                if cfg.detach_branches:
                    l_i, l_h = l_i.detach(), l_h.detach()
                # batch-level modality dropout
                l_i_star, l_h_star = l_i, l_h
                r = rng.random()
                if r < loss_cfg.modal_dropout_p / 2.0:
                    l_i_star = None
                elif r < loss_cfg.modal_dropout_p:
                    l_h_star = None
                fused, _ = heads["fusion"].forward(params, l_i_star, l_h_star)
                loss = focal_loss(fused, labels, loss_cfg.focal_gamma)
                if loss_cfg.lambda_aux > 0:
                    loss = loss + loss_cfg.lambda_aux * (
                        focal_loss(l_i, labels, loss_cfg.focal_gamma)
                        + focal_loss(l_h, labels, loss_cfg.focal_gamma)
                    )
                if loss_cfg.lambda_js > 0:
                    loss = loss + loss_cfg.lambda_js * js_consistency(l_i, l_h)
                loss = loss + proximal_term(params, snapshot, cfg.mu, FUSION_PREFIX)
                backward(loss)
                touched = (FUSION_PREFIX,) if cfg.detach_branches else (
                    FUSION_PREFIX, IMAGE_PREFIX, HTML_PREFIX,
                )
                _step(params, _head_param_names(params, touched), optimizer, cfg.clip)
                loss_sums["fusion"] = loss_sums.get("fusion", 0.0) + float(loss.data)
                loss_counts["fusion"] = loss_counts.get("fusion", 0) + 1

    return ClientReport.from_counts(
        data.client_id,
        {k: p.data for k, p in params.items()},
        n_image=data.n_image,
        n_html=data.n_html,
        n_url=data.n_url,
        n_pair=data.n_pair,
        train_loss={k: loss_sums[k] / loss_counts[k] for k in loss_sums},
    )


def _eval_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def client_evaluate(
    params: dict[str, np.ndarray],
    data: ClientData,
    model: ModelSpec,
    cfg: TrainConfig,
) -> dict[str, tuple[float, Metrics]]:
    """Evaluation-mode metrics per head. A paired validation set routes the
    fusion path; otherwise every present single-modality head is scored."""
    heads = model.heads()
    tensors = {k: Tensor(v) for k, v in params.items()}
    results: dict[str, tuple[float, Metrics]] = {}

    def score(head_name: str, logits_fn, labels: np.ndarray):
        losses = []
        preds = []
        for idx in _eval_batches(len(labels), cfg.batch_size):
            logits = logits_fn(idx)
            losses.append(float(focal_loss(logits, labels[idx], cfg.loss.focal_gamma).data) * len(idx))
            preds.append(np.argmax(logits.data, axis=-1))
        preds = np.concatenate(preds)
        results[head_name] = (
            sum(losses) / len(labels),
            compute_metrics(confusion(preds, labels)),
        )

    if "pair" in data.val and len(data.val["pair"]["y"]):
        arrays = data.val["pair"]

        def fused_logits(idx):
            l_i = heads["image"].forward(tensors, arrays["img_x"][idx])
            l_h = heads["html"].forward(
                tensors, arrays["char"][idx], arrays["word"][idx], arrays["dom"][idx]
            )
            fused, _ = heads["fusion"].forward(tensors, l_i, l_h)
            return fused

        score("fusion", fused_logits, arrays["y"])
        return results

    for kind in ("image", "html", "url"):
        if kind not in data.val or not len(data.val[kind]["y"]):
            continue
        arrays = data.val[kind]
        if kind == "image":
            fn = lambda idx: heads["image"].forward(tensors, arrays["x"][idx])
        elif kind == "html":
            fn = lambda idx: heads["html"].forward(
                tensors, arrays["char"][idx], arrays["word"][idx], arrays["dom"][idx]
            )
        else:
            fn = lambda idx: heads["url"].forward(tensors, arrays["x"][idx])
        score(kind, fn, arrays["y"])
    return results


# ---------------------------------------------------------------------------
# experiment loop
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    params: dict[str, np.ndarray]
    rounds: list[RoundLog]


def _client_rng(seed: int, client_index: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(client_index, round_index))
    )


def run_experiment(
    model: ModelSpec,
    cfg: TrainConfig,
    clients: list[ClientData],
    workers: int = 1,
    round_hook=None,
) -> ExperimentResult:
    """Full-participation rounds of broadcast, local training, role-wise
    aggregation and evaluation. Results do not depend on ``workers``."""
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    clients = sorted(clients, key=lambda c: c.client_id)
    params = {k: p.data for k, p in model.init_params(cfg.seed).items()}
    logs: list[RoundLog] = []

    for round_index in range(cfg.rounds):
        def train_one(pair):
            index, client = pair
            rng = _client_rng(cfg.seed, index, round_index)
            return client_train(client, params, model, cfg, rng)

        jobs = list(enumerate(clients))
        reports: list[ClientReport] = []
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(train_one, job) for job in jobs]
                for client, future in zip(clients, futures):
                    try:
                        reports.append(future.result())
                    except Exception:
                        log.exception("client %s failed in round %d", client.client_id, round_index)
        else:
            for job in jobs:
                try:
                    reports.append(train_one(job))
                except Exception:
                    log.exception("client %s failed in round %d", job[1].client_id, round_index)
        if not reports:
            raise RuntimeError(f"round {round_index}: every client failed")

        params = aggregate(params, reports, cfg)

        entries = []
        role_counts = {
            role.value: len([r for r in select_clients(role, reports) if role_weight(role, r, cfg) > 0])
            for role in Role
        }
        for client in clients:
            for head, (loss, m) in sorted(client_evaluate(params, client, model, cfg).items()):
                entries.append(RoundEntry(client_id=client.client_id, head=head, loss=loss, metrics=m))
        log_entry = RoundLog(round_index=round_index, entries=entries, role_counts=role_counts)
        logs.append(log_entry)
        if round_hook is not None:
            round_hook(round_index, params, log_entry)

    return ExperimentResult(params=params, rounds=logs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], run_id: str,
                    round_index: int, cfg_hash: str) -> None:
    """Manifest header plus (name, shape, little-endian float64) records."""
    manifest = json.dumps(
        {"run_id": run_id, "round": round_index, "config_hash": cfg_hash,
         "n_params": len(params)},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for name in sorted(params):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(params[name], dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode())
        params: dict[str, np.ndarray] = {}
        for _ in range(manifest["n_params"]):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = arr.astype(np.float64)
    return manifest, params
