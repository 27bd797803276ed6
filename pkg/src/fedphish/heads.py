"""The four expert heads (image, HTML, URL, fusion) and their losses.

Each head owns a name-prefixed slice of the parameter map; the federation
layer aggregates by those prefixes. Hidden sizes and sequence lengths are
all configuration so the gradient-check suites can run at small dims; the
defaults are the production values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ConfigurationError,
    Tensor,
    affine,
    attention_pool,
    bilstm_sequence,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    log_softmax,
    maximum,
    mhsa_block,
    multiscale_conv_encode,
    softmax,
)
from .numerics.tensor import logsumexp

__all__ = [
    "ImageHeadConfig",
    "HtmlHeadConfig",
    "UrlHeadConfig",
    "FusionHeadConfig",
    "LossConfig",
    "ModelSpec",
    "ImageHead",
    "HtmlHead",
    "UrlHead",
    "FusionHead",
    "BranchStats",
    "branch_stats",
    "focal_loss",
    "js_divergence",
    "js_consistency",
    "proximal_term",
]

IMAGE_PREFIX = "image_head."
HTML_PREFIX = "html_head."
URL_PREFIX = "url_head."
FUSION_PREFIX = "fusion_head."


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageHeadConfig:
    d_model: int = 768
    n_heads: int = 8
    n_blocks: int = 2
    ff_dim: int = 1024
    dropout: float = 0.2
    classifier_hidden: int = 512
    second_summary_mean: bool = False  # second summary token = mean instead of max

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )


@dataclass(frozen=True)
class HtmlHeadConfig:
    char_vocab: int = 257      # byte values plus PAD row
    char_embed: int = 64
    conv_sizes: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8, 9)
    conv_filters: int = 16
    char_fc: int = 128
    word_vocab: int = 131072   # buckets plus PAD row
    word_embed: int = 128
    dom_vocab: int = 8191
    dom_embed: int = 64
    lstm_hidden: int = 64
    dropout: float = 0.2
    classifier_hidden: int = 512

    @property
    def char_pad(self) -> int:
        return self.char_vocab - 1

    @property
    def word_pad(self) -> int:
        return self.word_vocab - 1

    @property
    def dom_pad(self) -> int:
        return self.dom_vocab - 1

    @property
    def concat_dim(self) -> int:
        return self.char_fc + 4 * self.lstm_hidden


@dataclass(frozen=True)
class UrlHeadConfig:
    in_dim: int = 768
    hidden: int = 512
    dropout: float = 0.2
    weight_norm: bool = True
    init_scale: float = 10.0
    n_classes: int = 2


@dataclass(frozen=True)
class FusionHeadConfig:
    gate_hidden: int = 8  # gate MLP is 4 -> gate_hidden -> 1


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    lambda_aux: float = 0.30
    lambda_js: float = 0.10
    modal_dropout_p: float = 0.20

    def __post_init__(self):
        if self.focal_gamma < 0 or self.lambda_aux < 0 or self.lambda_js < 0:
            raise ConfigurationError("loss coefficients must be non-negative")
        if not 0.0 <= self.modal_dropout_p < 1.0:
            raise ConfigurationError("modal dropout p must be in [0, 1)")


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _embed_table(rng: np.random.Generator, rows: int, dim: int) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=(rows, dim)), requires_grad=True)


def _lstm_params(rng: np.random.Generator, d_in: int, hidden: int) -> dict[str, Tensor]:
    bound = 1.0 / np.sqrt(hidden)

    def rec(rows):
        return Tensor(rng.uniform(-bound, bound, size=(rows, 4 * hidden)), requires_grad=True)

    return {"wx": rec(d_in), "wh": rec(hidden), "b": _zeros(4 * hidden)}


def _classifier_params(rng: np.random.Generator, in_dim: int, hidden: int) -> dict[str, Tensor]:
    return {
        "ln.gamma": _ones(in_dim),
        "ln.beta": _zeros(in_dim),
        "fc1.w": _xavier(rng, in_dim, hidden),
        "fc1.b": _zeros(hidden),
        "fc2.w": _xavier(rng, hidden, 2),
        "fc2.b": _zeros(2),
    }


def _classifier_forward(params, prefix, x, drop_p, train, rng):
    h = layer_norm(x, params[prefix + "ln.gamma"], params[prefix + "ln.beta"])
    h = gelu(affine(h, params[prefix + "fc1.w"], params[prefix + "fc1.b"]))
    h = dropout(h, drop_p, rng, train)
    return affine(h, params[prefix + "fc2.w"], params[prefix + "fc2.b"])


# ---------------------------------------------------------------------------
# image head
# ---------------------------------------------------------------------------

class ImageHead:
    """Two summary tokens, a stack of pre-norm encoder blocks, max pooling,
    then the shared classifier shape."""

    def __init__(self, cfg: ImageHeadConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        d, ff = self.cfg.d_model, self.cfg.ff_dim
        params: dict[str, Tensor] = {}
        for blk in range(self.cfg.n_blocks):
            base = f"{IMAGE_PREFIX}block{blk}."
            params[base + "ln1.gamma"] = _ones(d)
            params[base + "ln1.beta"] = _zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                params[base + f"attn.{name}"] = _xavier(rng, d, d)
                if name != "wk":
                    params[base + f"attn.b{name[1]}"] = _zeros(d)
            params[base + "ln2.gamma"] = _ones(d)
            params[base + "ln2.beta"] = _zeros(d)
            params[base + "ff.w1"] = _xavier(rng, d, ff)
            params[base + "ff.b1"] = _zeros(ff)
            params[base + "ff.w2"] = _xavier(rng, ff, d)
            params[base + "ff.b2"] = _zeros(d)
        for k, v in _classifier_params(rng, d, self.cfg.classifier_hidden).items():
            params[IMAGE_PREFIX + "cls." + k] = v
        return params

    def summary_tokens(self, tokens: Tensor) -> Tensor:
        """Two non-learnable global tokens prepended to the sequence."""
        first = tokens.max(axis=-2, keepdims=True)
        if self.cfg.second_summary_mean:
            second = tokens.mean(axis=-2, keepdims=True)
        else:
            second = first
        return concat([first, second, tokens], axis=-2)

    def forward(self, params, tokens, train: bool = False, rng=None) -> Tensor:
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.reshape(1, *tokens.shape)
        if tokens.shape[1] < 1:
            raise ValueError("image head needs at least one token")
        x = self.summary_tokens(tokens)
        for blk in range(self.cfg.n_blocks):
            base = f"{IMAGE_PREFIX}block{blk}."
            block = {k[len(base):]: v for k, v in params.items() if k.startswith(base)}
            x = mhsa_block(x, block, self.cfg.n_heads, self.cfg.dropout, train, rng)
        pooled = x.max(axis=1)
        logits = _classifier_forward(
            params, IMAGE_PREFIX + "cls.", pooled, self.cfg.dropout, train, rng
        )
        return logits.reshape(2) if squeeze else logits


# ---------------------------------------------------------------------------
# html head
# ---------------------------------------------------------------------------

class HtmlHead:
    """Char conv branch plus word and DOM BiLSTM branches with attention
    pooling, concatenated into the shared classifier shape."""

    def __init__(self, cfg: HtmlHeadConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.cfg
        params: dict[str, Tensor] = {}
        params[HTML_PREFIX + "char.embed"] = _embed_table(rng, cfg.char_vocab, cfg.char_embed)
        for k in cfg.conv_sizes:
            params[HTML_PREFIX + f"char.conv{k}.w"] = Tensor(
                rng.uniform(
                    -np.sqrt(6.0 / (k * cfg.char_embed + cfg.conv_filters)),
                    np.sqrt(6.0 / (k * cfg.char_embed + cfg.conv_filters)),
                    size=(k, cfg.char_embed, cfg.conv_filters),
                ),
                requires_grad=True,
            )
            params[HTML_PREFIX + f"char.conv{k}.b"] = _zeros(cfg.conv_filters)
        conv_out = len(cfg.conv_sizes) * cfg.conv_filters
        params[HTML_PREFIX + "char.fc.w"] = _xavier(rng, conv_out, cfg.char_fc)
        params[HTML_PREFIX + "char.fc.b"] = _zeros(cfg.char_fc)

        for branch, vocab, emb in (
            ("word", cfg.word_vocab, cfg.word_embed),
            ("dom", cfg.dom_vocab, cfg.dom_embed),
        ):
            params[HTML_PREFIX + f"{branch}.embed"] = _embed_table(rng, vocab, emb)
            for direction in ("fwd", "bwd"):
                for k, v in _lstm_params(rng, emb, cfg.lstm_hidden).items():
                    params[HTML_PREFIX + f"{branch}.{direction}.{k}"] = v
            params[HTML_PREFIX + f"{branch}.score"] = Tensor(
                rng.normal(0.0, 0.02, size=2 * cfg.lstm_hidden), requires_grad=True
            )
        for k, v in _classifier_params(rng, cfg.concat_dim, cfg.classifier_hidden).items():
            params[HTML_PREFIX + "cls." + k] = v
        return params

    def _recurrent_branch(self, params, branch: str, ids: np.ndarray, pad_id: int) -> Tensor:
        emb = embedding(params[HTML_PREFIX + f"{branch}.embed"], ids)
        lstm = {
            f"{d}.{k}": params[HTML_PREFIX + f"{branch}.{d}.{k}"]
            for d in ("fwd", "bwd")
            for k in ("wx", "wh", "b")
        }
        states = bilstm_sequence(emb, lstm)
        pooled, _ = attention_pool(
            states, params[HTML_PREFIX + f"{branch}.score"], ids != pad_id
        )
        return pooled

    def forward(self, params, char_ids, word_ids, dom_ids, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        char_ids = np.asarray(char_ids)
        squeeze = char_ids.ndim == 1
        char_ids = np.atleast_2d(char_ids)
        word_ids = np.atleast_2d(np.asarray(word_ids))
        dom_ids = np.atleast_2d(np.asarray(dom_ids))

        conv_w = {k: params[HTML_PREFIX + f"char.conv{k}.w"] for k in cfg.conv_sizes}
        conv_b = {k: params[HTML_PREFIX + f"char.conv{k}.b"] for k in cfg.conv_sizes}
        char_feat = multiscale_conv_encode(
            char_ids, params[HTML_PREFIX + "char.embed"], conv_w, conv_b, cfg.char_pad
        )
        char_feat = affine(
            char_feat, params[HTML_PREFIX + "char.fc.w"], params[HTML_PREFIX + "char.fc.b"]
        )
        word_feat = self._recurrent_branch(params, "word", word_ids, cfg.word_pad)
        dom_feat = self._recurrent_branch(params, "dom", dom_ids, cfg.dom_pad)
        features = concat([char_feat, word_feat, dom_feat], axis=1)
        logits = _classifier_forward(
            params, HTML_PREFIX + "cls.", features, cfg.dropout, train, rng
        )
        return logits.reshape(2) if squeeze else logits


# ---------------------------------------------------------------------------
# url head
# ---------------------------------------------------------------------------

class UrlHead:
    """LayerNorm, weight-normalized affine, GELU, dropout, cosine classifier
    with a learnable positive scale."""

    def __init__(self, cfg: UrlHeadConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.cfg
        v = _xavier(rng, cfg.in_dim, cfg.hidden)
        params = {
            URL_PREFIX + "ln.gamma": _ones(cfg.in_dim),
            URL_PREFIX + "ln.beta": _zeros(cfg.in_dim),
            URL_PREFIX + "fc.v": v,
            URL_PREFIX + "fc.b": _zeros(cfg.hidden),
            URL_PREFIX + "cls.w": _xavier(rng, cfg.hidden, cfg.n_classes),
            # exp parameterization keeps the scale strictly positive
            URL_PREFIX + "cls.log_scale": Tensor(
                np.array(np.log(cfg.init_scale)), requires_grad=True
            ),
        }
        if cfg.weight_norm:
            # gain starts at the column norm so the initial map equals v
            norms = np.sqrt((v.data * v.data).sum(axis=0))
            params[URL_PREFIX + "fc.g"] = Tensor(norms, requires_grad=True)
        return params

    def forward(self, params, emb, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        emb = emb if isinstance(emb, Tensor) else Tensor(emb)
        squeeze = emb.ndim == 1
        if squeeze:
            emb = emb.reshape(1, -1)
        h = layer_norm(emb, params[URL_PREFIX + "ln.gamma"], params[URL_PREFIX + "ln.beta"])
        v = params[URL_PREFIX + "fc.v"]
        if cfg.weight_norm:
            col_norm = (v * v).sum(axis=0, keepdims=True).sqrt()
            w = v * (params[URL_PREFIX + "fc.g"].reshape(1, -1) / col_norm)
        else:
            w = v
        f = gelu(h @ w + params[URL_PREFIX + "fc.b"])
        f = dropout(f, cfg.dropout, rng, train)

        f_norm = maximum((f * f).sum(axis=1, keepdims=True).sqrt(), Tensor(1e-12))
        cw = params[URL_PREFIX + "cls.w"]
        cw_norm = maximum((cw * cw).sum(axis=0, keepdims=True).sqrt(), Tensor(1e-12))
        cosine = (f / f_norm) @ (cw / cw_norm)
        scale = params[URL_PREFIX + "cls.log_scale"].exp()
        logits = cosine * scale
        return logits.reshape(cfg.n_classes) if squeeze else logits


# ---------------------------------------------------------------------------
# fusion head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchStats:
    """Confidence statistics of one branch after temperature scaling."""

    margin: float
    entropy: float


def branch_stats(logits: np.ndarray, temperature: float) -> BranchStats:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    margin = float(abs(scaled[0] - scaled[1]))
    shifted = scaled - scaled.max()
    p = np.exp(shifted)
    p /= p.sum()
    entropy = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
    return BranchStats(margin=margin, entropy=entropy)


def _stats_columns(scaled: Tensor) -> tuple[Tensor, Tensor]:
    """Margin and entropy of temperature-scaled logits, as [B, 1] tensors."""
    margin = (scaled[:, 0:1] - scaled[:, 1:2]).abs()
    logp = log_softmax(scaled, axis=-1)
    entropy = -(logp.exp() * logp).sum(axis=-1, keepdims=True)
    return margin, entropy


class FusionHead:
    """Gated product-of-experts fusion of the image and HTML branches.

    Both branches are calibrated by learnable temperatures (exp
    parameterization, init 1.0). When both are present a 4-8-1 gate MLP maps
    [margin_i, entropy_i, margin_h, entropy_h] to the mixing weight alpha and
    the combined log-probabilities are renormalized. When one branch is
    absent the gate is bypassed and the surviving branch's calibrated
    distribution is returned with alpha pinned to 1 (image only) or 0
    (HTML only).
    """

    def __init__(self, cfg: FusionHeadConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        g = self.cfg.gate_hidden
        return {
            FUSION_PREFIX + "gate.w1": _xavier(rng, 4, g),
            FUSION_PREFIX + "gate.b1": _zeros(g),
            FUSION_PREFIX + "gate.w2": _xavier(rng, g, 1),
            FUSION_PREFIX + "gate.b2": _zeros(1),
            FUSION_PREFIX + "log_t_image": Tensor(np.array(0.0), requires_grad=True),
            FUSION_PREFIX + "log_t_html": Tensor(np.array(0.0), requires_grad=True),
        }

    def forward(self, params, l_image: Tensor | None, l_html: Tensor | None) -> tuple[Tensor, Tensor]:
        """Returns (fused log-probs [B, 2], alpha [B, 1])."""
        if l_image is None and l_html is None:
            raise ValueError("fusion needs at least one branch")

        def calibrated(logits, key):
            logits = logits if isinstance(logits, Tensor) else Tensor(logits)
            if logits.ndim == 1:
                logits = logits.reshape(1, -1)
            t = params[key].exp()
            return logits * (1.0 / t)

        if l_html is None:
            scaled = calibrated(l_image, FUSION_PREFIX + "log_t_image")
            return log_softmax(scaled, axis=-1), Tensor(np.ones((scaled.shape[0], 1)))
        if l_image is None:
            scaled = calibrated(l_html, FUSION_PREFIX + "log_t_html")
            return log_softmax(scaled, axis=-1), Tensor(np.zeros((scaled.shape[0], 1)))

        scaled_i = calibrated(l_image, FUSION_PREFIX + "log_t_image")
        scaled_h = calibrated(l_html, FUSION_PREFIX + "log_t_html")
        margin_i, entropy_i = _stats_columns(scaled_i)
        margin_h, entropy_h = _stats_columns(scaled_h)
        gate_in = concat([margin_i, entropy_i, margin_h, entropy_h], axis=1)
        hidden = affine(gate_in, params[FUSION_PREFIX + "gate.w1"], params[FUSION_PREFIX + "gate.b1"]).relu()
        alpha = affine(hidden, params[FUSION_PREFIX + "gate.w2"], params[FUSION_PREFIX + "gate.b2"]).sigmoid()

        combined = alpha * log_softmax(scaled_i, axis=-1) + (1.0 - alpha) * log_softmax(scaled_h, axis=-1)
        fused = combined - logsumexp(combined, axis=-1, keepdims=True)
        return fused, alpha


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t); gamma=0 is plain cross-entropy."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.asarray(labels).reshape(-1)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    if gamma == 0.0:
        return -picked.mean()
    p = picked.exp()
    return -(((1.0 - p) ** gamma) * picked).mean()


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence of two distributions in nats; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return 0.5 * (kl(p, m) + kl(q, m))


def js_consistency(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Differentiable batch-mean JS between softmax(logits_a), softmax(logits_b).

    Works in log space (stable logaddexp for log m), so extreme logits
    cannot produce log(0).
    """
    logp = log_softmax(logits_a, axis=-1)
    logq = log_softmax(logits_b, axis=-1)
    mx = Tensor(np.maximum(logp.data, logq.data))
    logm = ((logp - mx).exp() + (logq - mx).exp()).log() + mx - np.log(2.0)
    kl_pm = (logp.exp() * (logp - logm)).sum(axis=-1)
    kl_qm = (logq.exp() * (logq - logm)).sum(axis=-1)
    return ((kl_pm + kl_qm) * 0.5).mean()


def proximal_term(local: dict[str, Tensor], snapshot: dict[str, np.ndarray], mu: float, prefixes) -> Tensor:
    """mu/2 times the squared L2 distance to the snapshot over the named
    role prefixes; the gradient on those parameters is exactly mu (theta -
    theta_t)."""
    if isinstance(prefixes, str):
        prefixes = (prefixes,)
    total = Tensor(np.array(0.0))
    if mu == 0.0:
        return total
    for name in sorted(local):
        if not name.startswith(tuple(prefixes)):
            continue
        if name not in snapshot:
            raise ConfigurationError(f"snapshot is missing parameter {name!r}")
        diff = local[name] - Tensor(snapshot[name])
        total = total + (diff * diff).sum()
    return total * (mu / 2.0)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """The four head configurations making up one federated model."""

    image: ImageHeadConfig = field(default_factory=ImageHeadConfig)
    html: HtmlHeadConfig = field(default_factory=HtmlHeadConfig)
    url: UrlHeadConfig = field(default_factory=UrlHeadConfig)
    fusion: FusionHeadConfig = field(default_factory=FusionHeadConfig)

    @staticmethod
    def paper() -> "ModelSpec":
        return ModelSpec()

    @staticmethod
    def desk() -> "ModelSpec":
        """Small shapes for gradient checks and fast scenario runs."""
        return ModelSpec(
            image=ImageHeadConfig(d_model=16, n_heads=4, n_blocks=2, ff_dim=16, classifier_hidden=8),
            html=HtmlHeadConfig(
                char_vocab=33, char_embed=4, conv_sizes=(2, 3), conv_filters=2,
                char_fc=8, word_vocab=17, word_embed=4, dom_vocab=9, dom_embed=4,
                lstm_hidden=3, classifier_hidden=8,
            ),
            url=UrlHeadConfig(in_dim=16, hidden=16),
        )

    @staticmethod
    def desk_pages(word_buckets: int = 257, dom_buckets: int = 61) -> "ModelSpec":
        """Desk dims with an html head sized for real preprocessed pages
        (full byte vocabulary, embedding rows = bucket count + PAD)."""
        return ModelSpec(
            image=ImageHeadConfig(d_model=16, n_heads=4, n_blocks=2, ff_dim=16, classifier_hidden=8),
            html=HtmlHeadConfig(
                char_vocab=257, char_embed=8, conv_sizes=(2, 3, 4), conv_filters=4,
                char_fc=16, word_vocab=word_buckets + 1, word_embed=16,
                dom_vocab=dom_buckets + 1, dom_embed=8, lstm_hidden=8,
                classifier_hidden=16,
            ),
            url=UrlHeadConfig(in_dim=16, hidden=16),
        )

    def heads(self) -> dict[str, object]:
        return {
            "image": ImageHead(self.image),
            "html": HtmlHead(self.html),
            "url": UrlHead(self.url),
            "fusion": FusionHead(self.fusion),
        }

    def init_params(self, seed: int) -> dict[str, Tensor]:
        """All four heads' parameters, keyed by prefixed name, sorted."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        params.update(ImageHead(self.image).init_params(rng))
        params.update(HtmlHead(self.html).init_params(rng))
        params.update(UrlHead(self.url).init_params(rng))
        params.update(FusionHead(self.fusion).init_params(rng))
        return dict(sorted(params.items()))
