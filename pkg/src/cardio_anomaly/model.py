"""Multi-scale cross-restoration network.

Shapes (B = batch, E = embedding width, Tg/Tl = global/local token counts):

* global encoder: (B, D) -> (B, E, Tg); local encoder: (B, d) -> (B, E, Tl)
* fusion: tokens of both scales concatenated to (B, Tg + Tl, E) and passed
  through one self-attention block
* decoders: each token group is upsampled back to its signal length and
  emits a reconstruction plus a positive uncertainty map
* trend branch: trend encoder (B, D) -> (B, E, Tg), joined with the
  pre-fusion global tokens and decoded to a reconstruction of the signal
* diagnostic features: global and trend token maps stacked to (B, 2E, Tg);
  their mean over tokens feeds the attribute MLP, the full map feeds the
  residual classifier
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import MLP, Conv1d, Linear, Module, MultiHeadSelfAttention, Parameter, ResBlock1d, Tensor, ops
from .errors import ConfigError, ContractError

SIGMA_EPS = 1e-6
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    global_len: int = 5000
    beat_len: int = 500
    embed_dim: int = 32
    enc_channels: tuple[int, ...] = (16, 32, 32)
    dec_channels: tuple[int, ...] = (32, 16, 16)
    kernel: int = 7
    stride: int = 4
    heads: int = 4
    attr_hidden: int = 64
    n_attributes: int = 7
    cls_channels: int = 32
    cls_depth: int = 4
    n_classes: int = 6
    alpha: float = 1.0
    beta: float = 1.0
    use_local: bool = True
    use_trend: bool = True
    use_attributes: bool = True
    detach_sigma: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if len(self.dec_channels) != len(self.enc_channels):
            raise ConfigError("decoder needs one width per encoder level")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def n_levels(self) -> int:
        return len(self.enc_channels) + 1

    def tokens(self, length: int) -> int:
        for _ in range(self.n_levels):
            length = -(-length // self.stride)
        return length

    def to_kv(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[f"model.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in values:
                continue
            text = values[key]
            default = getattr(cls, f.name)
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(int(t) for t in text.split(",") if t)
            elif isinstance(default, bool):
                kwargs[f.name] = text.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[f.name] = int(text)
            else:
                kwargs[f.name] = float(text)
        return cls(**kwargs)


@dataclass
class RestorationOutput:
    global_recon: np.ndarray
    sigma_g: np.ndarray
    local_recon: np.ndarray | None
    sigma_l: np.ndarray | None
    trend_recon: np.ndarray | None
    attr_pred: np.ndarray | None
    class_probs: np.ndarray


class Encoder(Module):
    """Strided convolution stack turning a signal into a token map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = (1, *cfg.enc_channels, cfg.embed_dim)
        self.convs = [
            Conv1d(widths[i], widths[i + 1], cfg.kernel, rng, stride=cfg.stride)
            for i in range(len(widths) - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        h = ops.reshape(x, (x.shape[0], 1, x.shape[-1]))
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ops.gelu(h)
        return h


class Decoder(Module):
    """Nearest upsampling + convolution per level, mirroring the encoder.

    The last level has two output convolutions: one for the reconstruction
    and, when ``with_sigma`` is set, one for the uncertainty map.  With
    ``detach_sigma`` the uncertainty head reads a stop-gradient copy of the
    shared features, so fitting sigma never pulls on the reconstruction path.
    """

    def __init__(self, cfg: ModelConfig, c_in: int, rng: np.random.Generator, with_sigma: bool = True):
        widths = (c_in, *cfg.dec_channels)
        self.factor = cfg.stride
        self.detach_sigma = cfg.detach_sigma
        self.convs = [Conv1d(widths[i], widths[i + 1], cfg.kernel, rng) for i in range(len(widths) - 1)]
        self.out = Conv1d(widths[-1], 1, cfg.kernel, rng)
        self.sigma = Conv1d(widths[-1], 1, cfg.kernel, rng) if with_sigma else None

    def forward(self, h: Tensor, length: int):
        """(reconstruction, sigma) of shape (B, length); sigma is None without the head."""
        for conv in self.convs:
            h = ops.gelu(conv(ops.upsample(h, self.factor)))
        h = ops.upsample(h, self.factor)
        if h.shape[-1] < length:
            raise ContractError(f"decoder produced {h.shape[-1]} samples, need {length}")
        recon = self.out(h)[:, 0, :length]
        if self.sigma is None:
            return recon, None
        raw = self.sigma(h.detach() if self.detach_sigma else h)[:, 0, :length]
        return recon, ops.softplus(raw) + SIGMA_EPS


class Classifier(Module):
    """1-D residual stack over the diagnostic token map, then mean+max pooling."""

    def __init__(self, c_in: int, cfg: ModelConfig, rng: np.random.Generator):
        self.stem = Conv1d(c_in, cfg.cls_channels, 1, rng)
        self.blocks = [ResBlock1d(cfg.cls_channels, rng) for _ in range(cfg.cls_depth)]
        self.head = Linear(2 * cfg.cls_channels, cfg.n_classes, rng)

    def forward(self, feats: Tensor) -> Tensor:
        h = ops.gelu(self.stem(feats))
        for block in self.blocks:
            h = block(h)
        pooled = ops.concat([ops.mean(h, axis=-1), ops.max(h, axis=-1)], axis=-1)
        logits = self.head(pooled)
        return ops.sigmoid(logits) * (1.0 - 2 * PROB_EPS) + PROB_EPS


class RestorationModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        e = cfg.embed_dim
        self.n_global_tokens = cfg.tokens(cfg.global_len)
        self.n_local_tokens = cfg.tokens(cfg.beat_len)

        self.g_enc = Encoder(cfg, rng)
        self.g_dec = Decoder(cfg, e, rng)
        if cfg.use_local:
            self.l_enc = Encoder(cfg, rng)
            self.pos_g = Parameter(0.02 * rng.standard_normal((self.n_global_tokens, e)))
            self.pos_l = Parameter(0.02 * rng.standard_normal((self.n_local_tokens, e)))
            self.fusion = MultiHeadSelfAttention(e, cfg.heads, rng)
            self.l_dec = Decoder(cfg, e, rng)
        if cfg.use_trend:
            self.t_enc = Encoder(cfg, rng)
            self.t_dec = Decoder(cfg, 2 * e, rng, with_sigma=False)
        feat = self.feature_dim
        if cfg.use_attributes:
            self.attr_head = MLP(feat, cfg.attr_hidden, cfg.n_attributes, rng)
        self.classifier = Classifier(feat, cfg, rng)

    @property
    def feature_dim(self) -> int:
        return self.cfg.embed_dim * (2 if self.cfg.use_trend else 1)

    # -- parameter groups ----------------------------------------------------------
    def backbone_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("classifier.")]

    def head_parameters(self) -> list[Parameter]:
        return self.classifier.parameters()

    # -- branches --------------------------------------------------------------------
    def _check(self, x: Tensor, length: int, what: str) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 1:
            x = ops.reshape(x, (1, x.shape[0]))
        if x.shape[-1] != length:
            raise ContractError(f"{what} must have length {length}, got {x.shape[-1]}")
        return x

    def encode_global(self, xg) -> Tensor:
        return self.g_enc(self._check(xg, self.cfg.global_len, "global signal"))

    def encode_local(self, xl) -> Tensor:
        if not self.cfg.use_local:
            raise ContractError("model built without the local branch")
        return self.l_enc(self._check(xl, self.cfg.beat_len, "local beat"))

    def fuse(self, gfeat: Tensor, lfeat: Tensor | None) -> Tensor:
        """Token sequence (B, Tg [+ Tl], E) after cross-scale self-attention."""
        g = ops.transpose(gfeat, (0, 2, 1))
        if not self.cfg.use_local or lfeat is None:
            return g
        tokens = ops.concat([g + self.pos_g, ops.transpose(lfeat, (0, 2, 1)) + self.pos_l], axis=1)
        return self.fusion(tokens)

    def decode(self, fused: Tensor):
        """(x_hat_g, sigma_g, x_hat_l, sigma_l); the local pair is None without local tokens."""
        tg = self.n_global_tokens
        xg, sg = self.g_dec(ops.transpose(fused[:, :tg, :], (0, 2, 1)), self.cfg.global_len)
        if fused.shape[1] == tg:
            return xg, sg, None, None
        xl, sl = self.decode_local(fused)
        return xg, sg, xl, sl

    def decode_local(self, fused: Tensor):
        l = ops.transpose(fused[:, self.n_global_tokens:, :], (0, 2, 1))
        return self.l_dec(l, self.cfg.beat_len)

    def encode_trend(self, trend) -> Tensor:
        return self.t_enc(self._check(trend, self.cfg.global_len, "trend signal"))

    def trend_autoencode(self, trend, gfeat: Tensor, tfeat: Tensor | None = None) -> Tensor:
        """Reconstruct the global signal from trend tokens joined with global tokens."""
        if not self.cfg.use_trend:
            raise ContractError("model built without the trend branch")
        tfeat = self.encode_trend(trend) if tfeat is None else tfeat
        joined = ops.concat([tfeat, gfeat], axis=1)
        return self.t_dec(joined, self.cfg.global_len)[0]

    def diagnostic_features(self, gfeat: Tensor, tfeat: Tensor | None) -> Tensor:
        return gfeat if tfeat is None else ops.concat([gfeat, tfeat], axis=1)

    def predict_attributes(self, feats: Tensor) -> Tensor:
        return self.attr_head(ops.mean(feats, axis=-1))

    def classify(self, feats: Tensor) -> Tensor:
        return self.classifier(feats)

    # -- full pass ---------------------------------------------------------------------
    def forward(self, xg, xl=None, trend=None, classify: bool = True, detach_features: bool = False,
                xg_clean=None) -> dict[str, Tensor]:
        """Run every enabled branch.

        ``xg``/``xl`` are the (possibly masked) inputs; ``trend`` is the trend
        of the clean global signal.  The classifier sees the encoding of
        ``xg_clean`` when given (it must not depend on the training mask), and
        ``detach_features`` cuts its gradient path into the backbone.
        """
        if self.cfg.use_trend and trend is None and (classify or self.cfg.use_attributes):
            raise ContractError("this model reads the trend signal: pass trend=")
        gfeat = self.encode_global(xg)
        lfeat = self.encode_local(xl) if (self.cfg.use_local and xl is not None) else None
        fused = self.fuse(gfeat, lfeat)
        xg_hat, sg, xl_hat, sl = self.decode(fused)
        out = {"global_recon": xg_hat, "sigma_g": sg, "local_recon": xl_hat, "sigma_l": sl}
        tfeat = None
        if self.cfg.use_trend and trend is not None:
            tfeat = self.encode_trend(trend)
            out["trend_recon"] = self.trend_autoencode(trend, gfeat, tfeat)
        feats = self.diagnostic_features(gfeat, tfeat)
        if self.cfg.use_attributes:
            out["attr_pred"] = self.predict_attributes(feats)
        if not classify:
            return out
        cls_g = gfeat if xg_clean is None else self.encode_global(xg_clean)
        cls_feats = self.diagnostic_features(cls_g, tfeat)
        if detach_features:
            cls_feats = cls_feats.detach()
        out["features"] = cls_feats
        out["class_probs"] = self.classify(cls_feats)
        return out
